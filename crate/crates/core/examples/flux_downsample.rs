//! Flux-conserving downsampling of a field with NaN holes.

use starflux::flux_resample::lr_dims;
use starflux::{
    downsample_flux, footprint_overlaps, generate, inject_nan_regions, ResampleMethod, ResampleSpec, SynthSpec,
};

fn main() -> starflux::Result<()> {
    let (clean, _) = generate(&SynthSpec::default())?;
    let img = inject_nan_regions(&clean, 0.05, 9)?;
    for scale in [2, 4] {
        let spec = ResampleSpec::new(img.wcs(), scale, ResampleMethod::FluxConserving)?;
        let plan = footprint_overlaps(img.wcs(), img.dims(), &spec.lr_wcs, lr_dims(img.dims(), scale))?;
        let clean_lr = downsample_flux(&clean, &spec)?;
        let lr = downsample_flux(&img, &spec)?;
        println!(
            "x{scale}: {} overlaps, clean flux {:.6} -> {:.6}, holed LR {} valid of {} pixels",
            plan.len(),
            clean.sum(),
            clean_lr.image.sum(),
            lr.image.valid_count(),
            lr.image.data().len()
        );
    }
    Ok(())
}
