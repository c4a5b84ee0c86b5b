//! Gaussian vs Airy PSFs: kernel sums, widths and flux after convolution.

use starflux::{convolve, generate, PsfSpec, SynthSpec};

fn main() -> starflux::Result<()> {
    let (img, _) = generate(&SynthSpec {
        width: 256,
        height: 256,
        n_sources: 20,
        ..SynthSpec::default()
    })?;
    for psf in [
        PsfSpec::gaussian(1.0),
        PsfSpec::gaussian(1.2),
        PsfSpec::airy(1.9),
        PsfSpec::airy(2.2),
    ] {
        let k = psf.kernel()?;
        let out = convolve(&img, &k)?;
        println!(
            "{psf:?}: {}x{} taps, sum-1 {:+.2e}, fwhm {:.3}, ee50 {:.3}, flux ratio {:.12}",
            k.size(),
            k.size(),
            k.sum() - 1.0,
            k.fwhm(),
            k.encircled_energy_radius(0.5),
            out.sum() / img.sum()
        );
    }
    Ok(())
}
