//! Synthetic star fields with exact truth catalogs.
//!
//! Sources are elliptical Gaussians sampled at pixel centers over an 8-sigma
//! ellipse and scaled so each rendered stamp sums to its catalog flux.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::{normalize_theta, ImagePlane, SourceRecord, WcsModel};
use crate::photometry::Background;

/// Rendering support in units of the major-axis sigma.
pub const RENDER_SIGMAS: f64 = 8.0;
/// Densest accepted field: one source per this many pixels.
pub const MIN_PIXELS_PER_SOURCE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub n_sources: usize,
    /// Log-uniform flux bounds.
    pub flux_range: (f64, f64),
    /// Minor-axis sigma bounds, pixels.
    pub sigma_range: (f64, f64),
    /// Major/minor ratio bounds, starting at 1.
    pub axis_ratio_range: (f64, f64),
    pub background: Background,
    /// Arcseconds per pixel.
    pub pixel_scale: f64,
    pub seed: u64,
    /// Minimum center distance between sources, pixels.
    pub min_separation: f64,
    /// Distance kept between centers and the frame edge. `None` keeps whole
    /// rendered stamps inside the frame.
    pub edge_margin: Option<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 512,
            height: 512,
            n_sources: 50,
            flux_range: (100.0, 10_000.0),
            sigma_range: (1.0, 2.5),
            axis_ratio_range: (1.0, 1.5),
            background: Background::ZERO,
            pixel_scale: 0.05,
            seed: 42,
            min_separation: 0.0,
            edge_margin: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.width == 0 || self.height == 0 {
            return bad("field dimensions must be positive".into());
        }
        let (f0, f1) = self.flux_range;
        if !(f0 > 0.0 && f1 >= f0 && f1.is_finite()) {
            return bad(format!(
                "flux_range must be positive and ordered, got {:?}",
                self.flux_range
            ));
        }
        let (s0, s1) = self.sigma_range;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return bad(format!(
                "sigma_range must be positive and ordered, got {:?}",
                self.sigma_range
            ));
        }
        let (q0, q1) = self.axis_ratio_range;
        if !(q0 >= 1.0 && q1 >= q0 && q1.is_finite()) {
            return bad(format!(
                "axis_ratio_range must start at >= 1, got {:?}",
                self.axis_ratio_range
            ));
        }
        if !(self.background.noise_sigma >= 0.0) || !self.background.level.is_finite() {
            return bad("background must be finite with noise_sigma >= 0".into());
        }
        if !(self.pixel_scale > 0.0) {
            return bad("pixel_scale must be > 0".into());
        }
        if self.n_sources * MIN_PIXELS_PER_SOURCE > self.width * self.height {
            return bad(format!(
                "{} sources in {}x{} is denser than 1 per {MIN_PIXELS_PER_SOURCE} px^2",
                self.n_sources, self.width, self.height
            ));
        }
        if !(self.min_separation >= 0.0) {
            return bad("min_separation must be >= 0".into());
        }
        Ok(())
    }

    fn margin(&self) -> f64 {
        self.edge_margin
            .unwrap_or((RENDER_SIGMAS * self.sigma_range.1 * self.axis_ratio_range.1).ceil())
    }
}

/// Rendered stamp: top-left origin, width, and values in row-major order.
struct Stamp {
    row: usize,
    col: usize,
    width: usize,
    values: Vec<f64>,
}

/// Sample `src` on the pixel grid and scale the f64 sum over the full 8-sigma
/// ellipse to `src.flux`; the part falling outside the frame is dropped.
fn render(src: &SourceRecord, width: usize, height: usize) -> Option<Stamp> {
    let reach = RENDER_SIGMAS * src.a;
    let (st, ct) = src.theta.sin_cos();
    let limit = RENDER_SIGMAS * RENDER_SIGMAS;
    let profile = |r: i64, c: i64| {
        let dy = r as f64 - src.y;
        let dx = c as f64 - src.x;
        let xp = (dx * ct + dy * st) / src.a;
        let yp = (-dx * st + dy * ct) / src.b;
        let q = xp * xp + yp * yp;
        if q <= limit {
            (-0.5 * q).exp()
        } else {
            0.0
        }
    };
    let (fr0, fr1) = ((src.y - reach).floor() as i64, (src.y + reach).ceil() as i64);
    let (fc0, fc1) = ((src.x - reach).floor() as i64, (src.x + reach).ceil() as i64);
    let mut total = 0.0;
    for r in fr0..=fr1 {
        for c in fc0..=fc1 {
            total += profile(r, c);
        }
    }
    let r0 = fr0.max(0);
    let c0 = fc0.max(0);
    let r1 = fr1.min(height as i64 - 1);
    let c1 = fc1.min(width as i64 - 1);
    if r1 < r0 || c1 < c0 || !(total > 0.0) {
        return None;
    }
    let k = src.flux / total;
    let sw = (c1 - c0 + 1) as usize;
    let mut values = Vec::with_capacity(sw * (r1 - r0 + 1) as usize);
    for r in r0..=r1 {
        for c in c0..=c1 {
            values.push(k * profile(r, c));
        }
    }
    Some(Stamp {
        row: r0 as usize,
        col: c0 as usize,
        width: sw,
        values,
    })
}

fn sample_sources(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SourceRecord>> {
    let margin = spec.margin();
    let (w, h) = (spec.width as f64, spec.height as f64);
    let xr = (margin, w - 1.0 - margin);
    let yr = (margin, h - 1.0 - margin);
    if spec.n_sources > 0 && (xr.0 > xr.1 || yr.0 > yr.1) {
        return Err(Error::InvalidParam(format!(
            "edge margin {margin} leaves no room in a {}x{} field",
            spec.width, spec.height
        )));
    }
    let (lf0, lf1) = (spec.flux_range.0.ln(), spec.flux_range.1.ln());
    let sep2 = spec.min_separation * spec.min_separation;
    let max_attempts = 1000 * spec.n_sources.max(1);
    let mut out: Vec<SourceRecord> = Vec::with_capacity(spec.n_sources);
    let mut attempts = 0;
    while out.len() < spec.n_sources {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidParam(format!(
                "could not place {} sources with separation {}",
                spec.n_sources, spec.min_separation
            )));
        }
        let x = if xr.0 == xr.1 {
            xr.0
        } else {
            rng.random_range(xr.0..=xr.1)
        };
        let y = if yr.0 == yr.1 {
            yr.0
        } else {
            rng.random_range(yr.0..=yr.1)
        };
        if out.iter().any(|s| (s.x - x).powi(2) + (s.y - y).powi(2) < sep2) {
            continue;
        }
        let flux = if lf0 == lf1 {
            spec.flux_range.0
        } else {
            rng.random_range(lf0..lf1).exp()
        };
        let b = if spec.sigma_range.0 == spec.sigma_range.1 {
            spec.sigma_range.0
        } else {
            rng.random_range(spec.sigma_range.0..spec.sigma_range.1)
        };
        let q = if spec.axis_ratio_range.0 == spec.axis_ratio_range.1 {
            spec.axis_ratio_range.0
        } else {
            rng.random_range(spec.axis_ratio_range.0..spec.axis_ratio_range.1)
        };
        let theta = normalize_theta(rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2));
        out.push(SourceRecord {
            id: out.len() as u64 + 1,
            x,
            y,
            a: b * q,
            b,
            theta: if q == 1.0 { 0.0 } else { theta },
            flux,
        });
    }
    Ok(out)
}

/// Render a field from an explicit catalog on top of a constant level.
pub fn render_catalog(
    width: usize,
    height: usize,
    sources: &[SourceRecord],
    level: f64,
    wcs: WcsModel,
) -> Result<ImagePlane> {
    for s in sources {
        s.validate()?;
    }
    let stamps: Vec<Option<Stamp>> = sources.par_iter().map(|s| render(s, width, height)).collect();
    let mut acc = vec![level; width * height];
    for st in stamps.into_iter().flatten() {
        for (i, row) in st.values.chunks(st.width).enumerate() {
            let base = (st.row + i) * width + st.col;
            for (a, v) in acc[base..base + st.width].iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    ImagePlane::new(width, height, acc.into_iter().map(|v| v as f32).collect(), wcs)
}

/// Field and its truth catalog. Deterministic per `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<(ImagePlane, Vec<SourceRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let crval = [rng.random_range(0.0..360.0), rng.random_range(-60.0..60.0)];
    let crpix = [(spec.width as f64 + 1.0) / 2.0, (spec.height as f64 + 1.0) / 2.0];
    let wcs = WcsModel::north_up(crpix, crval, spec.pixel_scale)?;
    let truth = sample_sources(spec, &mut rng)?;
    let clean = render_catalog(spec.width, spec.height, &truth, spec.background.level, wcs)?;
    if spec.background.noise_sigma == 0.0 {
        return Ok((clean, truth));
    }
    let normal =
        Normal::new(0.0, spec.background.noise_sigma).map_err(|e| Error::InvalidParam(format!("noise: {e}")))?;
    let data = clean
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Ok((clean.with_data(data)?, truth))
}

/// Blank rectangular blocks until at least `fraction` of the pixels are NaN.
pub fn inject_nan_regions(img: &ImagePlane, fraction: f64, seed: u64) -> Result<ImagePlane> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParam(format!(
            "fraction must be in [0, 1), got {fraction}"
        )));
    }
    let (w, h) = img.dims();
    let mut data = img.data().to_vec();
    let target = (fraction * (w * h) as f64).ceil() as usize;
    if fraction == 0.0 {
        return Ok(img.clone());
    }
    let mut nan = data.iter().filter(|v| v.is_nan()).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side_w = (w / 8).max(1);
    let side_h = (h / 8).max(1);
    while nan < target {
        let bw = rng.random_range(side_w.div_ceil(2)..=side_w);
        let bh = rng.random_range(side_h.div_ceil(2)..=side_h);
        let c0 = rng.random_range(0..=w - bw);
        let r0 = rng.random_range(0..=h - bh);
        for r in r0..r0 + bh {
            for v in &mut data[r * w + c0..r * w + c0 + bw] {
                if !v.is_nan() {
                    *v = f32::NAN;
                    nan += 1;
                }
            }
        }
    }
    img.with_data(data)
}
