//! Flux Error, PSNR, SSIM and region KL/JS divergence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::ImagePlane;
use crate::photometry::{detect, photometer_with_catalog, Catalog, DetectionParams};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DEFAULT_BINS: usize = 64;
/// Added to every histogram count before normalization.
pub const HIST_EPS: f64 = 1e-12;

fn same_dims(gt: &ImagePlane, pred: &ImagePlane) -> Result<()> {
    if gt.dims() != pred.dims() {
        return Err(Error::DimMismatch(format!(
            "gt is {}x{}, pred is {}x{}",
            gt.width(),
            gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceResidual {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub flux_gt: f64,
    pub flux_pred: f64,
}

impl SourceResidual {
    pub fn abs_error(&self) -> f64 {
        (self.flux_gt - self.flux_pred).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxErrorReport {
    pub fe: f64,
    pub n_sources: usize,
    pub residuals: Vec<SourceResidual>,
}

/// Flux Error of `pred` against the apertures of a precomputed gt catalog.
pub fn flux_error_with_catalog(
    catalog: &Catalog,
    pred: &ImagePlane,
    params: &DetectionParams,
) -> Result<FluxErrorReport> {
    if catalog.sources.is_empty() {
        return Err(Error::NoSources);
    }
    let pred_flux = photometer_with_catalog(pred, catalog, params)?;
    let residuals: Vec<SourceResidual> = catalog
        .sources
        .iter()
        .zip(pred_flux)
        .map(|(s, v)| SourceResidual {
            id: s.id,
            x: s.x,
            y: s.y,
            flux_gt: s.flux,
            flux_pred: v,
        })
        .collect();
    let n = residuals.len();
    let fe = residuals.iter().map(|r| r.abs_error()).sum::<f64>() / n as f64;
    Ok(FluxErrorReport {
        fe,
        n_sources: n,
        residuals,
    })
}

/// Detect on `gt`, then photometer `pred` with the gt apertures and background.
pub fn flux_error(gt: &ImagePlane, pred: &ImagePlane, params: &DetectionParams) -> Result<FluxErrorReport> {
    same_dims(gt, pred)?;
    let catalog = detect(gt, params)?;
    flux_error_with_catalog(&catalog, pred, params)
}

fn range_of(vals: impl Iterator<Item = f64>) -> Result<f64> {
    let (lo, hi) = vals
        .filter(|v| !v.is_nan())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return Err(Error::NoValidPixels("gt has no valid pixels".into()));
    }
    Ok(hi - lo)
}

/// `max - min` of the valid gt pixels.
pub fn data_range(gt: &ImagePlane) -> Result<f64> {
    range_of(gt.data().iter().map(|&v| v as f64))
}

fn mse_slices(gt: &[f64], pred: &[f64]) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::DimMismatch(format!("{} vs {} samples", gt.len(), pred.len())));
    }
    let (sum, n) =
        gt.iter()
            .zip(pred)
            .filter(|(g, p)| !g.is_nan() && !p.is_nan())
            .fold((0.0, 0usize), |(s, n), (&g, &p)| {
                let d = p - g;
                (s + d * d, n + 1)
            });
    if n == 0 {
        return Err(Error::NoValidPixels("no pixel is valid in both images".into()));
    }
    Ok(sum / n as f64)
}

pub fn mse(gt: &ImagePlane, pred: &ImagePlane) -> Result<f64> {
    same_dims(gt, pred)?;
    mse_slices(&widen(gt), &widen(pred))
}

fn widen(img: &ImagePlane) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// PSNR over raw f64 samples; NaN marks invalid.
pub fn psnr_slices(gt: &[f64], pred: &[f64]) -> Result<f64> {
    let err = mse_slices(gt, pred)?;
    let range = range_of(gt.iter().copied())?;
    if range == 0.0 {
        return Err(Error::Degenerate("gt has zero data range".into()));
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / err).log10())
}

/// PSNR in dB with the peak taken as the gt data range. Identical images give `+inf`.
pub fn psnr(gt: &ImagePlane, pred: &ImagePlane) -> Result<f64> {
    same_dims(gt, pred)?;
    psnr_slices(&widen(gt), &widen(pred))
}

/// Normalized 1-D Gaussian window taps.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable filtering; NaN inputs poison every window they touch.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let horiz: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|r| {
            let row = &src[r * w..(r + 1) * w];
            (0..ow).map(move |c| {
                taps.iter()
                    .zip(&row[c..c + SSIM_WINDOW])
                    .map(|(t, v)| t * v)
                    .sum::<f64>()
            })
        })
        .collect();
    (0..oh)
        .into_par_iter()
        .flat_map_iter(|r| {
            let horiz = &horiz;
            (0..ow).map(move |c| {
                taps.iter()
                    .enumerate()
                    .map(|(k, t)| t * horiz[(r + k) * ow + c])
                    .sum::<f64>()
            })
        })
        .collect()
}

/// Mean SSIM with an explicit dynamic range.
pub fn ssim_with_range(gt: &ImagePlane, pred: &ImagePlane, range: f64) -> Result<f64> {
    same_dims(gt, pred)?;
    let (w, h) = gt.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let x = widen(gt);
    let y = widen(pred);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let taps = ssim_taps();
    let mx = filter_valid(&x, w, h, &taps);
    let my = filter_valid(&y, w, h, &taps);
    let mxx = filter_valid(&xx, w, h, &taps);
    let myy = filter_valid(&yy, w, h, &taps);
    let mxy = filter_valid(&xy, w, h, &taps);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        let s = ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        if s.is_nan() {
            continue;
        }
        sum += s;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels("every SSIM window contains NaN".into()));
    }
    Ok(sum / n as f64)
}

/// Mean SSIM with the gt data range.
pub fn ssim(gt: &ImagePlane, pred: &ImagePlane) -> Result<f64> {
    let range = data_range(gt)?;
    ssim_with_range(gt, pred, range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn full(img: &ImagePlane) -> Self {
        Rect {
            row: 0,
            col: 0,
            width: img.width(),
            height: img.height(),
        }
    }

    fn values(&self, img: &ImagePlane) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for r in self.row..self.row + self.height {
            out.extend(
                img.row(r)[self.col..self.col + self.width]
                    .iter()
                    .filter(|v| !v.is_nan())
                    .map(|&v| v as f64),
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// KL(P_gt || P_pred), nats.
    pub kl: f64,
    /// Jensen-Shannon divergence, nats.
    pub js: f64,
    /// Union range was constant; both values are 0 by convention.
    pub degenerate: bool,
}

fn histogram(vals: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![HIST_EPS; bins];
    let scale = bins as f64 / (hi - lo);
    for &v in vals {
        let b = (((v - lo) * scale) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m)
}

/// Intensity-histogram divergences between the same rectangle of both images.
pub fn region_divergence(gt: &ImagePlane, pred: &ImagePlane, region: Rect, bins: usize) -> Result<Divergence> {
    same_dims(gt, pred)?;
    if bins < 2 {
        return Err(Error::InvalidParam(format!("bins must be >= 2, got {bins}")));
    }
    if region.width == 0
        || region.height == 0
        || region.col + region.width > gt.width()
        || region.row + region.height > gt.height()
    {
        return Err(Error::InvalidParam(format!("region {region:?} does not fit the image")));
    }
    let a = region.values(gt);
    let b = region.values(pred);
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoValidPixels("region has no valid pixels".into()));
    }
    let (lo, hi) = a
        .iter()
        .chain(&b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return Ok(Divergence {
            kl: 0.0,
            js: 0.0,
            degenerate: true,
        });
    }
    let p = histogram(&a, lo, hi, bins);
    let q = histogram(&b, lo, hi, bins);
    Ok(Divergence {
        kl: kl_divergence(&p, &q),
        js: js_divergence(&p, &q),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fe: Option<f64>,
    pub n_sources: usize,
    /// `None` when the images are identical; see `psnr_infinite`.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub kl: Option<f64>,
    pub js: Option<f64>,
    pub data_range: f64,
}

/// All metrics for one pair. FE is `None` when gt has no detections.
pub fn evaluate_pair(
    gt: &ImagePlane,
    pred: &ImagePlane,
    params: &DetectionParams,
    region: Option<Rect>,
    bins: usize,
) -> Result<MetricReport> {
    same_dims(gt, pred)?;
    let (fe, n_sources) = match flux_error(gt, pred, params) {
        Ok(r) => (Some(r.fe), r.n_sources),
        Err(Error::NoSources) => (None, 0),
        Err(e) => return Err(e),
    };
    let p = psnr(gt, pred)?;
    let div = region.map(|r| region_divergence(gt, pred, r, bins)).transpose()?;
    Ok(MetricReport {
        fe,
        n_sources,
        psnr: p.is_finite().then_some(p),
        psnr_infinite: p.is_infinite(),
        ssim: ssim(gt, pred)?,
        kl: div.map(|d| d.kl),
        js: div.map(|d| d.js),
        data_range: data_range(gt)?,
    })
}
