//! Flux-conserving downsampling through the footprint overlap plan, and the
//! naive bilinear baseline it is compared against.
//!
//! Each LR pixel receives `F_i = sum_j w_ij * f_j` with `w_ij = A_ij / A_j`:
//! every HR pixel hands out its flux in proportion to the sky area it shares
//! with each LR pixel, so the total is preserved.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::{round_preserving_sum, ImagePlane, WcsModel};
use crate::wcs_geom::{footprint_overlaps, ResamplePlan};

/// LR pixels with more than this fraction of incoming area weight from NaN HR
/// pixels are themselves NaN.
pub const NAN_WEIGHT_LIMIT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    FluxConserving,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleSpec {
    pub scale: usize,
    pub method: ResampleMethod,
    pub lr_wcs: WcsModel,
}

impl ResampleSpec {
    pub fn new(hr_wcs: &WcsModel, scale: usize, method: ResampleMethod) -> Result<Self> {
        Ok(ResampleSpec {
            scale,
            method,
            lr_wcs: derive_lr_wcs(hr_wcs, scale)?,
        })
    }
}

/// Calibration of the grid downscaled by an integer factor: pixel edges of
/// both grids coincide at the first-pixel corner.
pub fn derive_lr_wcs(hr: &WcsModel, scale: usize) -> Result<WcsModel> {
    if scale < 2 {
        return Err(Error::InvalidParam(format!("scale must be >= 2, got {scale}")));
    }
    let s = scale as f64;
    Ok(WcsModel {
        crpix: [(hr.crpix[0] - 0.5) / s + 0.5, (hr.crpix[1] - 0.5) / s + 0.5],
        crval: hr.crval,
        cd: [[hr.cd[0][0] * s, hr.cd[0][1] * s], [hr.cd[1][0] * s, hr.cd[1][1] * s]],
    })
}

/// `(width, height)` of the downscaled grid.
pub fn lr_dims((w, h): (usize, usize), scale: usize) -> (usize, usize) {
    (w / scale, h / scale)
}

/// A downsampled image plus, per LR pixel, the fraction of incoming area
/// weight that came from NaN HR pixels (1.0 where nothing overlapped).
#[derive(Debug, Clone, PartialEq)]
pub struct Downsampled {
    pub image: ImagePlane,
    pub weight_deficit: Vec<f32>,
}

/// Apply a plan to HR values in f64. Returns LR values and weight deficits.
pub fn apply_plan(plan: &ResamplePlan, hr: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let (lw, lh) = plan.lr_dims();
    (0..lw * lh)
        .into_par_iter()
        .map(|i| {
            let mut total = 0.0;
            let mut missing = 0.0;
            let mut flux = 0.0;
            for e in plan.lr_row(i) {
                total += e.area;
                let v = hr[e.hr_index as usize];
                if v.is_nan() {
                    missing += e.area;
                } else {
                    flux += e.weight * v as f64;
                }
            }
            if total == 0.0 {
                return (f64::NAN, 1.0);
            }
            let deficit = missing / total;
            if deficit > NAN_WEIGHT_LIMIT {
                (f64::NAN, deficit)
            } else {
                (flux, deficit)
            }
        })
        .unzip()
}

pub fn downsample_with_plan(img: &ImagePlane, plan: &ResamplePlan, lr_wcs: &WcsModel) -> Result<Downsampled> {
    if plan.hr_dims() != img.dims() {
        return Err(Error::DimMismatch(format!(
            "plan built for {:?}, image is {:?}",
            plan.hr_dims(),
            img.dims()
        )));
    }
    let (values, deficit) = apply_plan(plan, img.data());
    let (lw, lh) = plan.lr_dims();
    let image = ImagePlane::new(lw, lh, round_preserving_sum(&values), *lr_wcs)?;
    Ok(Downsampled {
        image,
        weight_deficit: deficit.into_iter().map(|d| d as f32).collect(),
    })
}

pub fn downsample_flux(img: &ImagePlane, spec: &ResampleSpec) -> Result<Downsampled> {
    if spec.method != ResampleMethod::FluxConserving {
        return Err(Error::InvalidParam(
            "downsample_flux needs the flux-conserving method".into(),
        ));
    }
    let lr = lr_dims(img.dims(), spec.scale);
    if lr.0 == 0 || lr.1 == 0 {
        return Err(Error::InvalidParam(format!(
            "image {:?} too small for scale {}",
            img.dims(),
            spec.scale
        )));
    }
    let plan = footprint_overlaps(img.wcs(), img.dims(), &spec.lr_wcs, lr)?;
    downsample_with_plan(img, &plan, &spec.lr_wcs)
}

/// Bilinear samples at LR pixel centers mapped into HR coordinates, with no
/// flux rescaling. NaN wherever a contributing sample is NaN.
pub fn downsample_bilinear(img: &ImagePlane, scale: usize) -> Result<ImagePlane> {
    let lr_wcs = derive_lr_wcs(img.wcs(), scale)?;
    let (w, h) = img.dims();
    let (lw, lh) = lr_dims((w, h), scale);
    if lw == 0 || lh == 0 {
        return Err(Error::InvalidParam(format!(
            "image {w}x{h} too small for scale {scale}"
        )));
    }
    let s = scale as f64;
    let off = (s - 1.0) / 2.0;
    let data: Vec<f32> = (0..lh)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..lw).map(move |j| {
                let x = s * j as f64 + off;
                let y = s * i as f64 + off;
                bilinear_at(img, x, y) as f32
            })
        })
        .collect();
    ImagePlane::new(lw, lh, data, lr_wcs)
}

/// Bilinear interpolation at 0-based coordinates `(x, y)` inside the image.
pub fn bilinear_at(img: &ImagePlane, x: f64, y: f64) -> f64 {
    let (w, h) = img.dims();
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let mut acc = 0.0;
    for (r, wy) in [(y0, 1.0 - ty), (y1, ty)] {
        for (c, wx) in [(x0, 1.0 - tx), (x1, tx)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let v = img.get(r, c);
            if v.is_nan() {
                return f64::NAN;
            }
            acc += wgt * v as f64;
        }
    }
    acc
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct PlanKey([u64; 20]);

impl PlanKey {
    fn new(hr: &WcsModel, hr_dims: (usize, usize), lr: &WcsModel, lr_dims: (usize, usize)) -> Self {
        let mut k = [0u64; 20];
        let frame = |w: &WcsModel| {
            [
                w.crpix[0], w.crpix[1], w.crval[0], w.crval[1], w.cd[0][0], w.cd[0][1], w.cd[1][0], w.cd[1][1],
            ]
        };
        for (dst, v) in k.iter_mut().zip(frame(hr).into_iter().chain(frame(lr))) {
            *dst = v.to_bits();
        }
        k[16] = hr_dims.0 as u64;
        k[17] = hr_dims.1 as u64;
        k[18] = lr_dims.0 as u64;
        k[19] = lr_dims.1 as u64;
        PlanKey(k)
    }
}

/// Plans keyed by grid geometry, shared across every image of a tile.
#[derive(Default)]
pub struct PlanCache {
    plans: Mutex<HashMap<PlanKey, Arc<ResamplePlan>>>,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &self,
        hr: &WcsModel,
        hr_dims: (usize, usize),
        lr: &WcsModel,
        lr_dims: (usize, usize),
    ) -> Result<Arc<ResamplePlan>> {
        let key = PlanKey::new(hr, hr_dims, lr, lr_dims);
        if let Some(p) = self.plans.lock().unwrap().get(&key) {
            return Ok(Arc::clone(p));
        }
        let plan = Arc::new(footprint_overlaps(hr, hr_dims, lr, lr_dims)?);
        self.plans.lock().unwrap().insert(key, Arc::clone(&plan));
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.plans.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn downsample(&self, img: &ImagePlane, spec: &ResampleSpec) -> Result<Downsampled> {
        let lr = lr_dims(img.dims(), spec.scale);
        let plan = self.get_or_build(img.wcs(), img.dims(), &spec.lr_wcs, lr)?;
        downsample_with_plan(img, &plan, &spec.lr_wcs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wcs_geom::pixel_to_sky;

    fn hr(w: usize, h: usize, f: impl FnMut(usize, usize) -> f32) -> ImagePlane {
        let wcs = WcsModel::north_up([w as f64 / 2.0 + 0.5, h as f64 / 2.0 + 0.5], [53.1, -27.8], 0.05).unwrap();
        ImagePlane::from_fn(w, h, wcs, f).unwrap()
    }

    #[test]
    fn lr_wcs_formula() {
        let w = WcsModel::new([1.0, 1.0], [10.0, 10.0], [[-1e-5, 0.0], [0.0, 1e-5]]).unwrap();
        let lr = derive_lr_wcs(&w, 2).unwrap();
        assert_eq!(lr.crpix, [0.75, 0.75]);
        assert_eq!(lr.cd, [[-2e-5, 0.0], [0.0, 2e-5]]);
        assert_eq!(lr.crval, w.crval);
        assert!(derive_lr_wcs(&w, 1).is_err());
    }

    #[test]
    fn lr_centers_align_with_hr() {
        let img = hr(64, 48, |_, _| 0.0);
        for s in [2usize, 3, 4] {
            let lr = derive_lr_wcs(img.wcs(), s).unwrap();
            for t in [-3.0, 0.0, 1.25, 7.0] {
                let a = pixel_to_sky(img.wcs(), 0.5 + s as f64 * t, 0.5 + s as f64 * t).unwrap();
                let b = pixel_to_sky(&lr, 0.5 + t, 0.5 + t).unwrap();
                assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
            }
            for (i, j) in [(0usize, 0usize), (3, 5), (10, 2)] {
                let sf = s as f64;
                let hx = sf * j as f64 + (sf - 1.0) / 2.0 + 1.0;
                let hy = sf * i as f64 + (sf - 1.0) / 2.0 + 1.0;
                let a = pixel_to_sky(img.wcs(), hx, hy).unwrap();
                let b = pixel_to_sky(&lr, j as f64 + 1.0, i as f64 + 1.0).unwrap();
                assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_block_sum() {
        let img = hr(32, 32, |_, _| 1.5);
        let spec = ResampleSpec::new(img.wcs(), 2, ResampleMethod::FluxConserving).unwrap();
        let out = downsample_flux(&img, &spec).unwrap();
        assert_eq!(out.image.dims(), (16, 16));
        assert!(out.image.data().iter().all(|&v| (v - 6.0).abs() < 1e-5));
        assert!(out.weight_deficit.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn delta_is_conserved() {
        for &(r, c) in &[(0usize, 0usize), (17, 9), (31, 31)] {
            let img = hr(32, 32, |rr, cc| if (rr, cc) == (r, c) { 1234.5 } else { 0.0 });
            let spec = ResampleSpec::new(img.wcs(), 4, ResampleMethod::FluxConserving).unwrap();
            let out = downsample_flux(&img, &spec).unwrap();
            assert!((out.image.sum() - 1234.5).abs() / 1234.5 < 1e-9);
        }
    }

    #[test]
    fn nan_threshold_and_no_renormalization() {
        // one NaN HR pixel out of a 2x2 block: 25% of the weight -> NaN
        let img = hr(8, 8, |r, c| if (r, c) == (0, 0) { f32::NAN } else { 1.0 });
        let spec = ResampleSpec::new(img.wcs(), 2, ResampleMethod::FluxConserving).unwrap();
        let out = downsample_flux(&img, &spec).unwrap();
        assert!(out.image.get(0, 0).is_nan());
        assert!((out.weight_deficit[0] - 0.25).abs() < 1e-6);
        // one NaN out of a 4x4 block: 6.25% missing, remaining flux not rescaled
        let img = hr(8, 8, |r, c| if (r, c) == (5, 6) { f32::NAN } else { 1.0 });
        let spec = ResampleSpec::new(img.wcs(), 4, ResampleMethod::FluxConserving).unwrap();
        let out = downsample_flux(&img, &spec).unwrap();
        assert!((out.image.get(1, 1) - 15.0).abs() < 1e-5);
        assert!((out.weight_deficit[3] - 0.0625).abs() < 1e-6);
        assert_eq!(out.image.get(0, 0), 16.0);
    }

    #[test]
    fn bilinear_constant_and_ramp() {
        let img = hr(32, 32, |_, _| 2.0);
        let out = downsample_bilinear(&img, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
        assert!((out.sum() - img.sum() / 4.0).abs() < 1e-9);

        let ramp = hr(32, 32, |r, c| (0.5 * c as f64 + 0.25 * r as f64 + 1.0) as f32);
        for s in [2usize, 3, 4] {
            let out = downsample_bilinear(&ramp, s).unwrap();
            let sf = s as f64;
            for i in 0..out.height() {
                for j in 0..out.width() {
                    let x = sf * j as f64 + (sf - 1.0) / 2.0;
                    let y = sf * i as f64 + (sf - 1.0) / 2.0;
                    let expect = 0.5 * x + 0.25 * y + 1.0;
                    assert!((out.get(i, j) as f64 - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn wrong_method_rejected() {
        let img = hr(8, 8, |_, _| 1.0);
        let spec = ResampleSpec::new(img.wcs(), 2, ResampleMethod::Bilinear).unwrap();
        assert!(downsample_flux(&img, &spec).is_err());
    }

    #[test]
    fn cache_reuses_plans() {
        let cache = PlanCache::new();
        let a = hr(16, 16, |r, c| (r + c) as f32);
        let b = hr(16, 16, |r, _| r as f32);
        let spec = ResampleSpec::new(a.wcs(), 2, ResampleMethod::FluxConserving).unwrap();
        let da = cache.downsample(&a, &spec).unwrap();
        cache.downsample(&b, &spec).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(da, downsample_flux(&a, &spec).unwrap());
    }
}
