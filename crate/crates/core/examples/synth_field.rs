//! Render a synthetic star field and print its truth catalog summary.

use starflux::{generate, Background, SynthSpec};

fn main() -> starflux::Result<()> {
    let spec = SynthSpec {
        width: 256,
        height: 256,
        n_sources: 25,
        background: Background {
            level: 10.0,
            noise_sigma: 1.0,
        },
        ..SynthSpec::default()
    };
    let (img, truth) = generate(&spec)?;
    let injected: f64 = truth.iter().map(|s| s.flux).sum();
    println!("{}x{} image, {} sources", img.width(), img.height(), truth.len());
    println!("injected flux {injected:.3}");
    println!("image sum minus sky {:.3}", img.sum() - 10.0 * (256 * 256) as f64);
    for s in truth.iter().take(5) {
        println!(
            "  #{:<3} x={:7.2} y={:7.2} a={:.2} b={:.2} flux={:.1}",
            s.id, s.x, s.y, s.a, s.b, s.flux
        );
    }
    Ok(())
}
