//! Flux maps and the flux consistency loss.
//!
//! A flux map stamps each catalog source as a rotated Gaussian whose standard
//! deviations follow the source ellipse (`c_sigma * a`, `c_sigma * b`) and whose
//! peak equals the source flux. Kernels are truncated at 4 sigma.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::{ImagePlane, SourceRecord, WcsModel};

/// Penalty factor on the flux term of the total loss.
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_C_SIGMA: f64 = 1.0;
/// Truncation radius in units of the kernel sigma.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FluxMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl FluxMap {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimMismatch(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        Ok(FluxMap {
            width,
            height,
            values,
            normalized: false,
        })
    }

    /// Read a map back from a raster; NaN pixels become 0.
    pub fn from_image(img: &ImagePlane) -> Self {
        FluxMap {
            width: img.width(),
            height: img.height(),
            values: img
                .data()
                .iter()
                .map(|&v| if v.is_nan() { 0.0 } else { v as f64 })
                .collect(),
            normalized: false,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_image(&self, wcs: WcsModel) -> Result<ImagePlane> {
        ImagePlane::new(
            self.width,
            self.height,
            self.values.iter().map(|&v| v as f32).collect(),
            wcs,
        )
    }
}

/// Add one source's truncated, rotated, flux-scaled Gaussian into `buf`.
fn stamp(buf: &mut [f64], width: usize, height: usize, src: &SourceRecord, c_sigma: f64) {
    let sa = c_sigma * src.a;
    let sb = c_sigma * src.b;
    let reach = TRUNCATION_SIGMAS * sa;
    let (st, ct) = src.theta.sin_cos();
    let r0 = (src.y - reach).floor().max(0.0) as usize;
    let c0 = (src.x - reach).floor().max(0.0) as usize;
    let r1 = (src.y + reach).ceil().min(height as f64 - 1.0);
    let c1 = (src.x + reach).ceil().min(width as f64 - 1.0);
    if r1 < 0.0 || c1 < 0.0 {
        return;
    }
    let limit = TRUNCATION_SIGMAS * TRUNCATION_SIGMAS;
    for r in r0..=r1 as usize {
        let dy = r as f64 - src.y;
        for c in c0..=c1 as usize {
            let dx = c as f64 - src.x;
            let xp = (dx * ct + dy * st) / sa;
            let yp = (-dx * st + dy * ct) / sb;
            let q = xp * xp + yp * yp;
            if q <= limit {
                buf[r * width + c] += src.flux * (-0.5 * q).exp();
            }
        }
    }
}

/// Flux map for a `(width, height)` frame.
pub fn build_flux_map((width, height): (usize, usize), catalog: &[SourceRecord], c_sigma: f64) -> Result<FluxMap> {
    if !(c_sigma > 0.0) {
        return Err(Error::InvalidParam(format!("c_sigma must be > 0, got {c_sigma}")));
    }
    for s in catalog {
        s.validate()?;
    }
    let n = width * height;
    // fixed chunking so the summation order does not depend on the thread count
    let partials: Vec<Vec<f64>> = catalog
        .par_chunks(256)
        .map(|part| {
            let mut buf = vec![0.0; n];
            for s in part {
                stamp(&mut buf, width, height, s, c_sigma);
            }
            buf
        })
        .collect();
    let mut values = vec![0.0; n];
    for p in partials {
        for (v, x) in values.iter_mut().zip(p) {
            *v += x;
        }
    }
    FluxMap::from_values(width, height, values)
}

/// Divide by the map maximum.
pub fn normalize_map(m: &FluxMap) -> Result<FluxMap> {
    let max = m.max();
    if !(max > 0.0) {
        return Err(Error::InvalidParam("cannot normalize an all-zero flux map".into()));
    }
    Ok(FluxMap {
        values: m.values.iter().map(|v| v / max).collect(),
        normalized: true,
        ..m.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxLoss {
    /// `sum M * |pred - gt|` over valid pixels.
    pub l_flux: f64,
    /// Mean absolute error over valid pixels.
    pub l_recon: f64,
    pub n_valid: usize,
}

impl FluxLoss {
    pub fn total(&self, lambda: f64) -> f64 {
        self.l_recon + lambda * self.l_flux
    }
}

pub fn flux_consistency_loss(pred: &ImagePlane, gt: &ImagePlane, m: &FluxMap) -> Result<FluxLoss> {
    if pred.dims() != gt.dims() || gt.dims() != m.dims() {
        return Err(Error::DimMismatch(format!(
            "pred {:?}, gt {:?}, map {:?}",
            pred.dims(),
            gt.dims(),
            m.dims()
        )));
    }
    let w = gt.width();
    let rows: Vec<(f64, f64, usize)> = (0..gt.height())
        .into_par_iter()
        .map(|r| {
            let (p, g) = (pred.row(r), gt.row(r));
            let mrow = &m.values[r * w..(r + 1) * w];
            let (mut lf, mut abs, mut n) = (0.0, 0.0, 0usize);
            for c in 0..w {
                if p[c].is_nan() || g[c].is_nan() {
                    continue;
                }
                let d = (p[c] as f64 - g[c] as f64).abs();
                lf += mrow[c] * d;
                abs += d;
                n += 1;
            }
            (lf, abs, n)
        })
        .collect();
    for r in 0..gt.height() {
        if pred.row(r).iter().zip(gt.row(r)).any(|(p, g)| p.is_nan() != g.is_nan()) {
            return Err(Error::InvalidParam(format!("NaN positions differ on row {r}")));
        }
    }
    let (l_flux, abs, n_valid) = rows
        .into_iter()
        .fold((0.0, 0.0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    if n_valid == 0 {
        return Err(Error::NoValidPixels("loss over an all-NaN pair".into()));
    }
    Ok(FluxLoss {
        l_flux,
        l_recon: abs / n_valid as f64,
        n_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(x: f64, y: f64, a: f64, b: f64, theta: f64, flux: f64) -> SourceRecord {
        SourceRecord {
            id: 1,
            x,
            y,
            a,
            b,
            theta,
            flux,
        }
    }

    #[test]
    fn empty_catalog_zero_map() {
        let m = build_flux_map((16, 8), &[], 1.0).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        assert!(normalize_map(&m).is_err());
    }

    #[test]
    fn single_source_peak_and_truncation() {
        let m = build_flux_map((33, 33), &[src(16.0, 16.0, 2.0, 2.0, 0.0, 100.0)], 1.0).unwrap();
        assert_eq!(m.get(16, 16), 100.0);
        // 4 sigma along x
        assert!(m.get(16, 24) < 100.0 * (-8f64).exp() + 1e-9);
        assert_eq!(m.get(16, 25), 0.0);
        assert!(m.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rotation_follows_theta() {
        let theta = std::f64::consts::FRAC_PI_2;
        let m = build_flux_map((33, 33), &[src(16.0, 16.0, 3.0, 1.0, theta, 1.0)], 1.0).unwrap();
        // major axis along +y
        assert!(m.get(19, 16) > m.get(16, 19));
    }

    #[test]
    fn superposition_is_exact_for_disjoint_sources() {
        let a = src(8.0, 8.0, 1.5, 1.0, 0.3, 50.0);
        let b = src(40.0, 30.0, 2.0, 1.2, -0.7, 75.0);
        let dims = (48, 40);
        let both = build_flux_map(dims, &[a, b], 1.0).unwrap();
        let ma = build_flux_map(dims, &[a], 1.0).unwrap();
        let mb = build_flux_map(dims, &[b], 1.0).unwrap();
        for ((x, y), z) in ma.values().iter().zip(mb.values()).zip(both.values()) {
            assert_eq!(x + y, *z);
        }
    }

    #[test]
    fn normalization_properties() {
        let m = build_flux_map(
            (20, 20),
            &[src(5.0, 5.0, 1.0, 1.0, 0.0, 3.0), src(14.0, 12.0, 1.0, 1.0, 0.0, 7.0)],
            1.0,
        )
        .unwrap();
        let n = normalize_map(&m).unwrap();
        assert!(n.is_normalized());
        assert_eq!(n.max(), 1.0);
        assert_eq!(normalize_map(&n).unwrap().values(), n.values());
        let scaled = FluxMap::from_values(20, 20, m.values().iter().map(|v| v * 4.0).collect()).unwrap();
        let ns = normalize_map(&scaled).unwrap();
        for (a, b) in ns.values().iter().zip(n.values()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    fn plane(w: usize, h: usize, f: impl FnMut(usize, usize) -> f32) -> ImagePlane {
        ImagePlane::from_fn(w, h, WcsModel::default(), f).unwrap()
    }

    #[test]
    fn loss_zero_and_constant_residual() {
        let gt = plane(12, 10, |r, c| (r * c) as f32);
        let m = build_flux_map((12, 10), &[src(5.0, 5.0, 2.0, 1.0, 0.2, 9.0)], 1.0).unwrap();
        assert_eq!(flux_consistency_loss(&gt, &gt, &m).unwrap().l_flux, 0.0);
        let pred = plane(12, 10, |r, c| (r * c) as f32 + 1.0);
        let loss = flux_consistency_loss(&pred, &gt, &m).unwrap();
        assert!((loss.l_flux - m.sum()).abs() < 1e-9);
        assert!((loss.l_recon - 1.0).abs() < 1e-12);
        assert!((loss.total(0.01) - (1.0 + 0.01 * m.sum())).abs() < 1e-9);
    }

    #[test]
    fn loss_errors() {
        let a = plane(4, 4, |_, _| 0.0);
        let b = plane(5, 4, |_, _| 0.0);
        let m = FluxMap::from_values(4, 4, vec![1.0; 16]).unwrap();
        assert!(matches!(flux_consistency_loss(&a, &b, &m), Err(Error::DimMismatch(_))));
        let nan = plane(4, 4, |r, _| if r == 0 { f32::NAN } else { 0.0 });
        assert!(flux_consistency_loss(&nan, &a, &m).is_err());
    }
}
