// cargo run --example reconcile
//
// Quantize two noisy readings of the same channel and reconcile them with a
// published shift token.

use fskey::quantizer::{MetricSpace, QuantizationScheme, ReconcileBundle};

fn main() -> fskey::Result<()> {
    let q1 = QuantizationScheme::new(MetricSpace::default(), 1.0)?;
    println!(
        "Q_1 over [-104, -40]: K={} levels, spacing {} dB, {} bits per channel",
        q1.level_count(),
        q1.spacing(),
        q1.bits()
    );
    println!("Q_1(-71.424) = {}", q1.quantize(-71.424));

    let (alice, bob) = (-70.9, -71.1);
    println!(
        "without tokens: alice {} / bob {}",
        q1.quantize(alice),
        q1.quantize(bob)
    );

    let (level, token) = q1.make_token(alice);
    println!(
        "alice publishes P = {:+.3}; bob quantizes {bob} + P -> {} (alice has {level})",
        token.shift,
        q1.apply_token(bob, token)
    );

    // Per-channel tolerances and shifts travel together as one JSON bundle.
    let means = [-70.9, -55.2, -88.04];
    let tolerances = [1.0, 1.5, 1.0];
    let mut shifts = Vec::new();
    for (&mu, &t) in means.iter().zip(&tolerances) {
        let scheme = QuantizationScheme::new(MetricSpace::default(), t)?;
        shifts.push(scheme.make_token(mu).1.shift);
    }
    let bundle = ReconcileBundle {
        tolerances: tolerances.to_vec(),
        shifts,
    };
    println!("bundle: {}", bundle.to_json());

    let levels: Vec<f64> = means.iter().map(|&mu| q1.quantize(mu)).collect();
    println!("secret bits for {levels:?}: {}", q1.encode_levels(&levels)?);
    Ok(())
}
