//! Background estimation, source detection and elliptical aperture photometry.
//!
//! Detection thresholds the image at `level + thresh_sigma * noise_sigma`
//! (optionally after a 3x3 smoothing filter, as SExtractor does by default),
//! groups 8-connected pixels and describes each group by its flux-weighted
//! centroid and second central moments. There is no deblending: touching
//! sources come out as one object.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::{normalize_theta, ImagePlane, SourceRecord};

/// Minimum semi-axis reported for a detection, pixels.
pub const MIN_AXIS: f64 = 0.3;
const CLIP_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub level: f64,
    pub noise_sigma: f64,
}

impl Background {
    pub const ZERO: Background = Background {
        level: 0.0,
        noise_sigma: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub thresh_sigma: f64,
    pub min_area: usize,
    /// Aperture semi-axes are `aperture_k * (a, b)`.
    pub aperture_k: f64,
    pub clip_iters: usize,
    /// Smooth with the 3x3 `[1 2 1]^T [1 2 1] / 16` kernel before thresholding.
    /// Moments and fluxes always use the unfiltered pixels.
    pub filter: bool,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            thresh_sigma: 1.5,
            min_area: 5,
            aperture_k: 6.0,
            clip_iters: 5,
            filter: true,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.thresh_sigma > 0.0) {
            return Err(Error::InvalidParam("thresh_sigma must be > 0".into()));
        }
        if self.min_area < 1 {
            return Err(Error::InvalidParam("min_area must be >= 1".into()));
        }
        if !(self.aperture_k > 0.0) {
            return Err(Error::InvalidParam("aperture_k must be > 0".into()));
        }
        Ok(())
    }
}

/// Detection results on a reference frame: what FE and the flux map reuse on
/// other images of the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub width: usize,
    pub height: usize,
    pub background: Background,
    pub sources: Vec<SourceRecord>,
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::MIN, f64::max);
        0.5 * (lower + upper)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Iteratively 3-sigma-clipped median and standard deviation of the valid pixels.
pub fn estimate_background(img: &ImagePlane, params: &DetectionParams) -> Result<Background> {
    let mut vals: Vec<f64> = img.data().iter().filter(|v| !v.is_nan()).map(|&v| v as f64).collect();
    if vals.len() < 10 {
        return Err(Error::NoValidPixels(format!(
            "background needs >= 10 valid pixels, found {}",
            vals.len()
        )));
    }
    for _ in 0..params.clip_iters {
        let med = median_in_place(&mut vals);
        let (_, sd) = mean_std(&vals);
        let before = vals.len();
        vals.retain(|v| (v - med).abs() <= CLIP_SIGMA * sd);
        if vals.len() == before || vals.len() < 10 {
            break;
        }
    }
    let level = median_in_place(&mut vals);
    let (_, noise_sigma) = mean_std(&vals);
    Ok(Background { level, noise_sigma })
}

/// Connected components above threshold, each with its peak value.
struct Component {
    pixels: Vec<(usize, usize)>,
    peak: f64,
    first: usize,
}

/// The detection image: the input itself, or its 3x3 smoothed version with
/// weights renormalized over valid in-frame neighbours. NaN stays NaN.
fn detection_image(img: &ImagePlane, filter: bool) -> Vec<f64> {
    let (w, h) = img.dims();
    let data = img.data();
    if !filter {
        return data.iter().map(|&v| v as f64).collect();
    }
    const TAPS: [f64; 3] = [1.0, 2.0, 1.0];
    let mut out = vec![f64::NAN; w * h];
    for r in 0..h {
        for c in 0..w {
            if data[r * w + c].is_nan() {
                continue;
            }
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (i, ty) in TAPS.iter().enumerate() {
                let rr = r as isize + i as isize - 1;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for (j, tx) in TAPS.iter().enumerate() {
                    let cc = c as isize + j as isize - 1;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let v = data[rr as usize * w + cc as usize];
                    if !v.is_nan() {
                        acc += ty * tx * v as f64;
                        wsum += ty * tx;
                    }
                }
            }
            out[r * w + c] = acc / wsum;
        }
    }
    out
}

fn components(img: &ImagePlane, det: &[f64], threshold: f64) -> Vec<Component> {
    let (w, h) = img.dims();
    let data = img.data();
    let above = |i: usize| {
        let v = det[i];
        !v.is_nan() && v > threshold
    };
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !above(start) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Component {
            pixels: Vec::new(),
            peak: f64::MIN,
            first: start,
        };
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            comp.pixels.push((r, c));
            comp.peak = comp.peak.max(data[i] as f64);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && above(j) {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Ellipse `(a, b, theta)` from second central moments.
pub fn moments_to_ellipse(mxx: f64, myy: f64, mxy: f64) -> (f64, f64, f64) {
    let mean = 0.5 * (mxx + myy);
    let diff = 0.5 * (mxx - myy);
    let root = (diff * diff + mxy * mxy).sqrt();
    let l1 = (mean + root).max(0.0);
    let l2 = (mean - root).max(0.0);
    let a = l1.sqrt().max(MIN_AXIS);
    let b = l2.sqrt().max(MIN_AXIS).min(a);
    let theta = if mxy.abs() < 1e-12 && diff.abs() < 1e-12 {
        0.0
    } else {
        normalize_theta(0.5 * (2.0 * mxy).atan2(mxx - myy))
    };
    (a, b, theta)
}

/// Detect sources against a given background. Flux is left at 0.
pub fn detect_with_background(
    img: &ImagePlane,
    bg: &Background,
    params: &DetectionParams,
) -> Result<Vec<SourceRecord>> {
    params.validate()?;
    let threshold = bg.level + params.thresh_sigma * bg.noise_sigma;
    let det = detection_image(img, params.filter);
    let mut comps: Vec<Component> = components(img, &det, threshold)
        .into_iter()
        .filter(|c| c.pixels.len() >= params.min_area)
        .collect();
    comps.sort_by(|a, b| b.peak.total_cmp(&a.peak).then(a.first.cmp(&b.first)));

    let mut out = Vec::with_capacity(comps.len());
    for comp in comps {
        let mut sw = 0.0;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(r, c) in &comp.pixels {
            let wgt = img.get(r, c) as f64 - bg.level;
            sw += wgt;
            sx += wgt * c as f64;
            sy += wgt * r as f64;
        }
        if !(sw > 0.0) {
            continue;
        }
        let (cx, cy) = (sx / sw, sy / sw);
        let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
        for &(r, c) in &comp.pixels {
            let wgt = img.get(r, c) as f64 - bg.level;
            let (dx, dy) = (c as f64 - cx, r as f64 - cy);
            mxx += wgt * dx * dx;
            myy += wgt * dy * dy;
            mxy += wgt * dx * dy;
        }
        let (a, b, theta) = moments_to_ellipse(mxx / sw, myy / sw, mxy / sw);
        out.push(SourceRecord {
            id: out.len() as u64 + 1,
            x: cx,
            y: cy,
            a,
            b,
            theta,
            flux: 0.0,
        });
    }
    Ok(out)
}

pub fn detect_sources(img: &ImagePlane, params: &DetectionParams) -> Result<Vec<SourceRecord>> {
    let bg = estimate_background(img, params)?;
    detect_with_background(img, &bg, params)
}

/// Background, detections and their aperture fluxes on a reference image.
pub fn detect(img: &ImagePlane, params: &DetectionParams) -> Result<Catalog> {
    let background = estimate_background(img, params)?;
    let mut sources = detect_with_background(img, &background, params)?;
    for s in &mut sources {
        s.flux = measure_flux(img, s, &background, params)?.flux;
    }
    Ok(Catalog {
        width: img.width(),
        height: img.height(),
        background,
        sources,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApertureFlux {
    pub flux: f64,
    /// Pixels whose centers fall inside the aperture (valid or not).
    pub n_pixels: usize,
    /// Fraction of those pixels that are NaN.
    pub bad_fraction: f64,
}

/// Visit every pixel whose center lies inside the scaled ellipse of `src`.
pub fn for_each_aperture_pixel(
    width: usize,
    height: usize,
    src: &SourceRecord,
    k: f64,
    mut f: impl FnMut(usize, usize),
) {
    let (ka, kb) = (k * src.a, k * src.b);
    let (st, ct) = src.theta.sin_cos();
    let r0 = ((src.y - ka).floor().max(0.0)) as usize;
    let c0 = ((src.x - ka).floor().max(0.0)) as usize;
    let r1 = (src.y + ka).ceil().min(height as f64 - 1.0);
    let c1 = (src.x + ka).ceil().min(width as f64 - 1.0);
    if r1 < 0.0 || c1 < 0.0 {
        return;
    }
    for r in r0..=r1 as usize {
        let dy = r as f64 - src.y;
        for c in c0..=c1 as usize {
            let dx = c as f64 - src.x;
            let xp = dx * ct + dy * st;
            let yp = -dx * st + dy * ct;
            let q = (xp / ka) * (xp / ka) + (yp / kb) * (yp / kb);
            if q <= 1.0 {
                f(r, c);
            }
        }
    }
}

/// Background-subtracted flux inside the ellipse `aperture_k * (a, b)`.
pub fn measure_flux(
    img: &ImagePlane,
    src: &SourceRecord,
    bg: &Background,
    params: &DetectionParams,
) -> Result<ApertureFlux> {
    let mut flux = 0.0;
    let mut n = 0usize;
    let mut bad = 0usize;
    for_each_aperture_pixel(img.width(), img.height(), src, params.aperture_k, |r, c| {
        n += 1;
        let v = img.get(r, c);
        if v.is_nan() {
            bad += 1;
        } else {
            flux += v as f64 - bg.level;
        }
    });
    if n == 0 {
        return Err(Error::InvalidSource {
            id: src.id,
            reason: "aperture lies entirely outside the image".into(),
        });
    }
    Ok(ApertureFlux {
        flux,
        n_pixels: n,
        bad_fraction: bad as f64 / n as f64,
    })
}

/// Aperture fluxes on `img` at the catalog's positions and ellipses, with the
/// catalog's background. No re-detection.
pub fn photometer_with_catalog(img: &ImagePlane, catalog: &Catalog, params: &DetectionParams) -> Result<Vec<f64>> {
    if img.dims() != (catalog.width, catalog.height) {
        return Err(Error::DimMismatch(format!(
            "image is {}x{}, catalog frame is {}x{}",
            img.width(),
            img.height(),
            catalog.width,
            catalog.height
        )));
    }
    catalog
        .sources
        .iter()
        .map(|s| measure_flux(img, s, &catalog.background, params).map(|f| f.flux))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_store::WcsModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise_image(n: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = (0..n * n).map(|_| normal.sample(&mut rng) as f32).collect();
        ImagePlane::new(n, n, data, WcsModel::default()).unwrap()
    }

    /// Elliptical Gaussian sampled at pixel centers and scaled to total `flux`.
    fn blob(n: usize, (x0, y0): (f64, f64), (sa, sb, theta): (f64, f64, f64), flux: f64) -> Vec<f64> {
        let (st, ct) = theta.sin_cos();
        let mut v = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let (dx, dy) = (c as f64 - x0, r as f64 - y0);
                let xp = dx * ct + dy * st;
                let yp = -dx * st + dy * ct;
                v[r * n + c] = (-0.5 * (xp * xp / (sa * sa) + yp * yp / (sb * sb))).exp();
            }
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x *= flux / s);
        v
    }

    fn to_img(n: usize, v: &[f64]) -> ImagePlane {
        ImagePlane::new(n, n, v.iter().map(|&x| x as f32).collect(), WcsModel::default()).unwrap()
    }

    #[test]
    fn constant_background() {
        let img = ImagePlane::filled(32, 32, 4.25, WcsModel::default()).unwrap();
        let bg = estimate_background(&img, &DetectionParams::default()).unwrap();
        assert_eq!(bg.level, 4.25);
        assert_eq!(bg.noise_sigma, 0.0);
    }

    #[test]
    fn gaussian_noise_background() {
        let bg = estimate_background(&noise_image(256, 7), &DetectionParams::default()).unwrap();
        assert!(bg.level.abs() <= 0.02, "{bg:?}");
        assert!((0.93..=1.0).contains(&bg.noise_sigma), "{bg:?}");
    }

    #[test]
    fn outliers_are_clipped() {
        let clean = noise_image(256, 11);
        let base = estimate_background(&clean, &DetectionParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut data = clean.data().to_vec();
        let n = data.len();
        for _ in 0..n / 100 {
            let i = rand::Rng::random_range(&mut rng, 0..n);
            data[i] = 500.0;
        }
        let bg = estimate_background(&clean.with_data(data).unwrap(), &DetectionParams::default()).unwrap();
        // "within 2%" is taken relative to the noise scale, the level being ~0
        assert!(
            (bg.level - base.level).abs() < 0.02 * base.noise_sigma,
            "{bg:?} vs {base:?}"
        );
    }

    #[test]
    fn all_nan_background_fails() {
        let img = ImagePlane::filled(8, 8, f32::NAN, WcsModel::default()).unwrap();
        assert!(estimate_background(&img, &DetectionParams::default()).is_err());
    }

    #[test]
    fn circular_source_recovered() {
        let n = 64;
        let sigma = 2.0;
        let mut v = blob(n, (30.3, 33.6), (sigma, sigma, 0.0), 5e4);
        let noise = noise_image(n, 3);
        for (a, b) in v.iter_mut().zip(noise.data()) {
            *a += *b as f64;
        }
        let found = detect_sources(&to_img(n, &v), &DetectionParams::default()).unwrap();
        assert_eq!(found.len(), 1, "{found:?}");
        let s = found[0];
        assert!((s.x - 30.3).abs() < 0.1 && (s.y - 33.6).abs() < 0.1, "{s:?}");
        assert!((0.9..=1.1).contains(&(s.a / s.b)), "{s:?}");
        assert!((s.a - sigma).abs() / sigma < 0.15, "{s:?}");
    }

    #[test]
    fn elongated_source_orientation() {
        let n = 64;
        let theta = 30f64.to_radians();
        let v = blob(n, (32.0, 31.0), (3.0, 1.5, theta), 1e4);
        let params = DetectionParams::default();
        let found = detect_with_background(&to_img(n, &v), &Background::ZERO, &params).unwrap();
        assert_eq!(found.len(), 1);
        let s = found[0];
        assert!((s.theta - theta).abs() < 5f64.to_radians(), "{s:?}");
        assert!((1.7..=2.3).contains(&(s.a / s.b)), "{s:?}");
    }

    #[test]
    fn aperture_captures_gaussian_flux() {
        let n = 64;
        let v = blob(n, (31.2, 32.7), (1.8, 1.8, 0.0), 1000.0);
        let img = to_img(n, &v);
        let params = DetectionParams::default();
        let cat = detect(&img, &params).unwrap();
        assert_eq!(cat.sources.len(), 1);
        let f = cat.sources[0].flux;
        assert!((990.0..=1010.0).contains(&f), "{f}");
    }

    #[test]
    fn zero_image_zero_flux() {
        let img = ImagePlane::filled(16, 16, 0.0, WcsModel::default()).unwrap();
        let src = SourceRecord {
            id: 1,
            x: 8.0,
            y: 8.0,
            a: 2.0,
            b: 1.0,
            theta: 0.3,
            flux: 0.0,
        };
        let f = measure_flux(&img, &src, &Background::ZERO, &DetectionParams::default()).unwrap();
        assert_eq!(f.flux, 0.0);
        assert!(f.n_pixels > 0);
    }

    #[test]
    fn aperture_outside_image_fails() {
        let img = ImagePlane::filled(16, 16, 0.0, WcsModel::default()).unwrap();
        let src = SourceRecord {
            id: 9,
            x: 100.0,
            y: 100.0,
            a: 1.0,
            b: 1.0,
            theta: 0.0,
            flux: 0.0,
        };
        assert!(measure_flux(&img, &src, &Background::ZERO, &DetectionParams::default()).is_err());
    }

    #[test]
    fn separated_pair_measured_independently() {
        let n = 96;
        let a = blob(n, (25.0, 48.0), (1.5, 1.5, 0.0), 800.0);
        let b = blob(n, (25.0 + 30.0, 48.0), (1.5, 1.5, 0.0), 300.0);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let cat = detect(&to_img(n, &sum), &DetectionParams::default()).unwrap();
        assert_eq!(cat.sources.len(), 2);
        assert!((cat.sources[0].flux - 800.0).abs() < 8.0);
        assert!((cat.sources[1].flux - 300.0).abs() < 3.0);
    }

    #[test]
    fn catalog_photometry_identity_scale_offset() {
        let n = 64;
        let v = blob(n, (20.0, 40.0), (2.0, 1.2, 0.4), 1000.0);
        let gt = to_img(n, &v);
        let params = DetectionParams::default();
        let cat = detect(&gt, &params).unwrap();
        let same = photometer_with_catalog(&gt, &cat, &params).unwrap();
        let gt_flux: Vec<f64> = cat.sources.iter().map(|s| s.flux).collect();
        assert_eq!(same, gt_flux);

        let doubled = gt.with_data(gt.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        let f2 = photometer_with_catalog(&doubled, &cat, &params).unwrap();
        for (a, b) in f2.iter().zip(&gt_flux) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs());
        }

        let offset = 0.5f32;
        let shifted = gt.with_data(gt.data().iter().map(|x| x + offset).collect()).unwrap();
        let f3 = photometer_with_catalog(&shifted, &cat, &params).unwrap();
        for (s, (a, b)) in cat.sources.iter().zip(f3.iter().zip(&gt_flux)) {
            let mut count = 0usize;
            // independent count of pixel centers inside the ellipse
            let (st, ct) = s.theta.sin_cos();
            for r in 0..n {
                for c in 0..n {
                    let (dx, dy) = (c as f64 - s.x, r as f64 - s.y);
                    let u = (dx * ct + dy * st) / (6.0 * s.a);
                    let w = (-dx * st + dy * ct) / (6.0 * s.b);
                    if u * u + w * w <= 1.0 {
                        count += 1;
                    }
                }
            }
            let expect_shift = count as f64 * offset as f64;
            assert!(((a - b) - expect_shift).abs() < 1e-3, "{a} {b} {count}");
        }

        let small = gt.crop(0, 0, 32, 32).unwrap();
        assert!(matches!(
            photometer_with_catalog(&small, &cat, &params),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn blank_field_false_positives() {
        let params = DetectionParams::default();
        let mut total = 0usize;
        for seed in 0..20 {
            total += detect_sources(&noise_image(256, 100 + seed), &params).unwrap().len();
        }
        let mean = total as f64 / 20.0;
        assert!(mean <= 2.0, "mean spurious detections {mean}");
    }

    #[test]
    fn rotation_by_ninety_degrees() {
        let n = 64;
        let theta = 0.35;
        let v = blob(n, (32.0, 32.0), (3.0, 1.5, theta), 1e4);
        let img = to_img(n, &v);
        // rotate raster: new(r, c) = old(c, n - 1 - r)
        let rotated = ImagePlane::from_fn(n, n, WcsModel::default(), |r, c| img.get(c, n - 1 - r)).unwrap();
        let params = DetectionParams::default();
        let s0 = detect_with_background(&img, &Background::ZERO, &params).unwrap()[0];
        let s1 = detect_with_background(&rotated, &Background::ZERO, &params).unwrap()[0];
        let d = normalize_theta(s1.theta - s0.theta - std::f64::consts::FRAC_PI_2);
        assert!(d.abs() < 1e-6, "{} {}", s0.theta, s1.theta);
        assert!((s0.a - s1.a).abs() < 1e-6 && (s0.b - s1.b).abs() < 1e-6);
    }
}
