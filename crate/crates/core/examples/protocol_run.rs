// cargo run --example protocol_run [seed]
//
// One full Alice/Bob run over a lossy public channel, printed phase by phase.

use fskey::channel::ChannelModel;
use fskey::protocol::{run_protocol, Message, ProtocolConfig, RetryPolicy};

fn main() -> fskey::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let model = ChannelModel::toeplitz(16, -70.0, 16.0, 0.7, 0.503)?;
    let config = ProtocolConfig {
        retry_policy: RetryPolicy::PerChannel,
        loss_probability: 0.05,
        ..ProtocolConfig::default()
    };
    let t = run_protocol(&model, &config, seed, 0)?;

    let probes = t
        .messages
        .iter()
        .filter(|m| matches!(m.message, Message::Probe { .. }))
        .count();
    let resent: u32 = t.messages.iter().map(|m| m.transmissions - 1).sum();
    println!("sampling: {probes} probes, {resent} retransmissions over the lossy link");
    if let Some(dev) = t.max_deviation {
        println!("largest |mu_A - mu_B| over channels: {dev:.3} dB");
    }

    for (bundle, hash) in t.bundles.iter().zip(&t.hashes) {
        println!(
            "attempt {}: max tolerance {:.1} dB, hashes {}",
            hash.attempt,
            bundle.tolerances.iter().copied().fold(0.0, f64::max),
            if hash.matched { "match" } else { "differ" }
        );
    }
    println!("outcome {:?} after {} retries", t.outcome, t.retries);
    if let (Some(a), Some(b)) = (&t.secret_alice, &t.secret_bob) {
        println!("alice {a}\nbob   {b}\n{} bits", a.len());
    }
    if let Some(reason) = &t.abort_reason {
        println!("aborted: {reason}");
    }
    Ok(())
}
