// cargo run --release --example entropy_curves
//
// Per-position secrecy of quantized channel means as the tolerance grows:
// the independence bound next to the T-complexity estimate that sees the
// correlation between neighbouring channels.

use fskey::channel::{synthesize_trace, ChannelModel};
use fskey::entropy::{alice_mean_vectors, default_grid, entropy_curve, mvn_differential_entropy};
use fskey::quantizer::MetricSpace;

fn main() -> fskey::Result<()> {
    let model = ChannelModel::toeplitz(16, -72.0, 16.0, 0.8, 0.503)?;
    let trace = synthesize_trace(&model, 2000, 16, 5)?;
    let means = alice_mean_vectors(&trace.positions()?);

    println!("   t  per-channel  independent  dependent(T)  plug-in");
    for r in entropy_curve(&means, MetricSpace::default(), &default_grid())? {
        println!(
            "{:4.1}  {:11.3}  {:11.3}  {:12.3}  {:7.3}{}",
            r.tolerance,
            r.per_channel_mean(),
            r.joint_independent,
            r.joint_tcomplexity,
            r.joint_plugin,
            if r.undersampled {
                " (undersampled)"
            } else {
                ""
            }
        );
    }
    println!(
        "differential entropy of the model: {:.3} bits",
        mvn_differential_entropy(model.cov())?
    );
    Ok(())
}
