// cargo run --release --example fit_trace
//
// Synthesize an RSS trace, fit a model back from it and score how Gaussian
// the channel means look. A Rayleigh-distributed sample is scored alongside.

use fskey::channel::{
    fit_model, normality_score, rayleigh, synthesize_trace, ChannelModel, RssTrace,
};

fn main() -> fskey::Result<()> {
    let truth = ChannelModel::toeplitz(16, -70.0, 16.0, 0.9, 0.503)?;
    let trace = synthesize_trace(&truth, 1000, 16, 3)?;

    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    println!(
        "trace: {} rows, {} bytes of CSV",
        trace.rows.len(),
        csv.len()
    );
    let trace = RssTrace::read_csv(csv.as_slice())?;

    let fitted = fit_model(&trace)?;
    let m = &fitted.model;
    println!(
        "noise sigma: fitted {:.4}, true {:.4}",
        m.noise_sigma(),
        truth.noise_sigma()
    );
    for (r, c) in [(0, 0), (0, 1), (0, 8), (7, 15)] {
        println!(
            "cov[{r},{c}]: fitted {:7.3}, true {:7.3}",
            m.cov()[(r, c)],
            truth.cov()[(r, c)]
        );
    }

    let positions = trace.positions()?;
    let ch0: Vec<f64> = positions.iter().map(|p| p.alice_means()[0]).collect();
    println!("PPCC of channel 1 means: {:.4}", normality_score(&ch0)?);

    let mut rng = fskey::rng::stream(3, 99);
    let fading: Vec<f64> = (0..1000).map(|_| rayleigh(1.0, &mut rng)).collect();
    println!(
        "PPCC of a Rayleigh sample: {:.4}",
        normality_score(&fading)?
    );
    Ok(())
}
