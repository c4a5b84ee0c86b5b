//! PSNR, SSIM, FE and region divergences for a blurred prediction.

use starflux::metrics::evaluate_pair;
use starflux::{convolve, generate, DetectionParams, PsfSpec, Rect, SynthSpec};

fn main() -> starflux::Result<()> {
    let (gt, _) = generate(&SynthSpec {
        width: 256,
        height: 256,
        n_sources: 30,
        ..SynthSpec::default()
    })?;
    let region = Rect {
        row: 64,
        col: 64,
        width: 128,
        height: 128,
    };
    for sigma in [0.5, 1.0, 2.0] {
        let pred = convolve(&gt, &PsfSpec::gaussian(sigma).kernel()?)?;
        let r = evaluate_pair(&gt, &pred, &DetectionParams::default(), Some(region), 64)?;
        println!(
            "sigma {sigma}: psnr {:.2} ssim {:.4} fe {:.4} kl {:.5} js {:.5}",
            r.psnr.unwrap_or(f64::INFINITY),
            r.ssim,
            r.fe.unwrap_or(f64::NAN),
            r.kl.unwrap_or(f64::NAN),
            r.js.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
