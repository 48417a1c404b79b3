// cargo run --release --example simulate_success
//
// Monte-Carlo first-try success against the closed form, for a range of
// tolerances.

use fskey::channel::{predict_success_uniform, ChannelModel};
use fskey::protocol::{agreed_rate, first_try_rate, run_batch, ProtocolConfig};

fn main() -> fskey::Result<()> {
    let sigma = 0.503;
    let model = ChannelModel::toeplitz(16, -70.0, 16.0, 0.7, sigma)?;
    let runs = 5000;
    println!("tolerance  first-try  closed-form  eventually-agreed");
    for t in [0.5, 0.75, 1.0, 1.25, 1.5, 2.0] {
        let config = ProtocolConfig {
            base_tolerance: t,
            ..ProtocolConfig::default()
        };
        let rows = run_batch(&model, &config, runs, 42)?;
        println!(
            "{t:>9.2}  {:>9.4}  {:>11.4}  {:>17.4}",
            first_try_rate(&rows),
            predict_success_uniform(t, sigma, 16),
            agreed_rate(&rows)
        );
    }
    Ok(())
}
