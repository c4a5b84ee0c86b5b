//! Detect sources, then compare measured aperture fluxes with the truth.

use starflux::{detect, generate, Background, DetectionParams, SynthSpec};

fn main() -> starflux::Result<()> {
    let (img, truth) = generate(&SynthSpec {
        n_sources: 40,
        min_separation: 30.0,
        background: Background {
            level: 5.0,
            noise_sigma: 0.5,
        },
        ..SynthSpec::default()
    })?;
    let cat = detect(&img, &DetectionParams::default())?;
    println!(
        "background {:.3} +- {:.3}, {} detections for {} injected",
        cat.background.level,
        cat.background.noise_sigma,
        cat.sources.len(),
        truth.len()
    );
    let mut worst: f64 = 0.0;
    for s in &cat.sources {
        let t = truth
            .iter()
            .min_by(|p, q| {
                let d = |r: &&starflux::SourceRecord| (r.x - s.x).powi(2) + (r.y - s.y).powi(2);
                d(p).total_cmp(&d(q))
            })
            .unwrap();
        worst = worst.max((s.flux / t.flux - 1.0).abs());
    }
    println!("worst relative flux error {worst:.4}");
    Ok(())
}
