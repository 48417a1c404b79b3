// cargo run --release --example predict_scaling
//
// Project the secrecy of a fitted 16-channel covariance to 40 channels, at
// the measured spacing and at twice the spacing, then check how often the
// projection interval covers the truth when only a corner of a known
// covariance is visible.

use fskey::channel::{exponential_toeplitz, fit_model, synthesize_trace, ChannelModel};
use fskey::predict::{
    entropy_projection, validate_prediction, LagFallback, Method, ProjectionRequest,
};

fn main() -> fskey::Result<()> {
    let truth = ChannelModel::toeplitz(16, -70.0, 16.0, 0.7, 0.503)?;
    let fitted = fit_model(&synthesize_trace(&truth, 250, 16, 1)?)?.model;
    for stride in [1, 2] {
        let request = ProjectionRequest {
            targets: vec![16, 24, 32, 40],
            methods: vec![Method::FixedDeterminant, Method::DiagonalUniform],
            stride,
            replicates: 100,
            seed: 1,
            fallback: LagFallback::Geometric,
        };
        for row in entropy_projection(fitted.cov(), &request)? {
            println!(
                "stride {stride}  {:<17}  {:2} channels  {:7.2} bits  [{:.2}, {:.2}]  {} clipped",
                row.method.name(),
                row.channels,
                row.entropy_mean_bits,
                row.ci_low,
                row.ci_high,
                row.clipped
            );
        }
    }

    let source = exponential_toeplitz(16, 16.0, 0.7);
    for fallback in [LagFallback::Geometric, LagFallback::HighestLag] {
        print!("{fallback:?} coverage by visible size:");
        for i in 2..=15 {
            let mut covered = 0;
            for seed in 0..50 {
                covered += usize::from(
                    validate_prediction(&source, &[i], 100, seed, fallback)?[0].covered,
                );
            }
            print!(" {i}:{covered}/50");
        }
        println!();
    }
    Ok(())
}
