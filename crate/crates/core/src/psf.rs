//! Normalized PSF kernels (Gaussian, Airy) and NaN-aware direct convolution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::{round_preserving_sum, ImagePlane};

/// First positive zero of J1.
pub const AIRY_FIRST_ZERO: f64 = 3.831_705_970_207_512_3;
/// Third positive zero of J1; the default Airy support reaches this ring.
pub const AIRY_THIRD_ZERO: f64 = 10.173_468_135_062_722;

/// Kernel family and parameters. Serialized as `{"kind":"gaussian","sigma":1.0}`
/// or `{"kind":"airy","r":2.0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PsfSpec {
    Gaussian {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        support: Option<usize>,
    },
    Airy {
        /// Radius of the first dark ring, pixels.
        r: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        support: Option<usize>,
    },
}

impl PsfSpec {
    pub fn gaussian(sigma: f64) -> Self {
        PsfSpec::Gaussian { sigma, support: None }
    }

    pub fn airy(r: f64) -> Self {
        PsfSpec::Airy { r, support: None }
    }

    /// Kernel half-width: explicit, or `ceil(4 sigma)` / out to the third dark ring.
    pub fn support(&self) -> usize {
        match *self {
            PsfSpec::Gaussian { sigma, support } => support.unwrap_or_else(|| (4.0 * sigma).ceil() as usize),
            PsfSpec::Airy { r, support } => {
                support.unwrap_or_else(|| (r * AIRY_THIRD_ZERO / AIRY_FIRST_ZERO).ceil() as usize)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PsfSpec::Gaussian { sigma, .. } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::InvalidParam(format!("gaussian sigma must be > 0, got {sigma}")));
                }
                if (self.support() as f64) < 4.0 * sigma {
                    return Err(Error::InvalidParam(format!(
                        "gaussian support {} below 4 sigma",
                        self.support()
                    )));
                }
            }
            PsfSpec::Airy { r, .. } => {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::InvalidParam(format!("airy radius must be > 0, got {r}")));
                }
                if (self.support() as f64) < r * AIRY_THIRD_ZERO / AIRY_FIRST_ZERO - 1e-9 {
                    return Err(Error::InvalidParam(format!(
                        "airy support {} does not reach the third ring",
                        self.support()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Unnormalized profile at offset `(dx, dy)` pixels from the peak; 1 at the peak.
    pub fn profile(&self, dx: f64, dy: f64) -> f64 {
        let rho2 = dx * dx + dy * dy;
        match *self {
            PsfSpec::Gaussian { sigma, .. } => (-rho2 / (2.0 * sigma * sigma)).exp(),
            PsfSpec::Airy { r, .. } => {
                let z = AIRY_FIRST_ZERO / r * rho2.sqrt();
                if z == 0.0 {
                    1.0
                } else {
                    let a = 2.0 * bessel_j1(z) / z;
                    a * a
                }
            }
        }
    }

    pub fn kernel(&self) -> Result<Kernel> {
        match self {
            PsfSpec::Gaussian { .. } => gaussian_kernel(self),
            PsfSpec::Airy { .. } => airy_kernel(self),
        }
    }
}

/// Bessel function of the first kind, order one.
///
/// Power series for |x| <= 12, Hankel asymptotic expansion beyond. Absolute
/// error stays below 1e-10 across the split.
pub fn bessel_j1(x: f64) -> f64 {
    if x < 0.0 {
        return -bessel_j1(-x);
    }
    if x <= 12.0 {
        let h = 0.5 * x;
        let h2 = h * h;
        let mut term = h;
        let mut sum = term;
        for k in 1..200 {
            let k = k as f64;
            term *= -h2 / (k * (k + 1.0));
            sum += term;
            if term.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
        }
        sum
    } else {
        // a_k = prod_{m=1..k} (4 - (2m-1)^2) / (k! 8^k x^k)
        let mu = 4.0;
        let mut p = 1.0;
        let mut q = 0.0;
        let mut term = 1.0;
        let mut prev = f64::INFINITY;
        for k in 1..60 {
            let m = (2 * k - 1) as f64;
            term *= (mu - m * m) / (k as f64 * 8.0 * x);
            if term.abs() >= prev {
                break;
            }
            prev = term.abs();
            // k odd feeds Q, k even feeds P, with alternating signs per pair
            match k % 4 {
                1 => q += term,
                2 => p -= term,
                3 => q -= term,
                _ => p += term,
            }
            if term.abs() < 1e-17 {
                break;
            }
        }
        let chi = x - 0.75 * std::f64::consts::PI;
        (2.0 / (std::f64::consts::PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
    }
}

/// A normalized, odd-sized square kernel centered on its peak.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    half: usize,
    values: Vec<f64>,
    /// Sum of the unnormalized samples; `values = raw / norm`.
    norm: f64,
    spec: PsfSpec,
}

impl Kernel {
    fn sample(spec: &PsfSpec) -> Result<Self> {
        spec.validate()?;
        let half = spec.support();
        let size = 2 * half + 1;
        let h = half as isize;
        let mut raw = Vec::with_capacity(size * size);
        for dy in -h..=h {
            for dx in -h..=h {
                raw.push(spec.profile(dx as f64, dy as f64));
            }
        }
        let norm: f64 = raw.iter().sum();
        let values = raw.into_iter().map(|v| v / norm).collect();
        Ok(Kernel {
            half,
            values,
            norm,
            spec: *spec,
        })
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn size(&self) -> usize {
        2 * self.half + 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spec(&self) -> &PsfSpec {
        &self.spec
    }

    /// Value at integer offset `(dy, dx)` from the center.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let h = self.half as isize;
        self.values[((dy + h) as usize) * self.size() + (dx + h) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// The continuous profile on the same normalization as the samples.
    pub fn profile_at(&self, dx: f64, dy: f64) -> f64 {
        self.spec.profile(dx, dy) / self.norm
    }

    /// Full width at half maximum along the central row, interpolating the
    /// half-maximum crossing with a parabola through ln(value) against
    /// squared radius (exact for Gaussians).
    pub fn fwhm(&self) -> f64 {
        let peak = self.at(0, 0);
        let half_max = 0.5 * peak;
        let h = self.half as isize;
        for dx in 1..=h {
            let v = self.at(0, dx);
            if v <= half_max {
                let u = self.at(0, dx - 1);
                let (x0, x1) = (((dx - 1) * (dx - 1)) as f64, (dx * dx) as f64);
                let (l0, l1, lt) = (u.ln(), v.ln(), half_max.ln());
                let x2 = x0 + (lt - l0) / (l1 - l0) * (x1 - x0);
                return 2.0 * x2.sqrt();
            }
        }
        f64::NAN
    }

    /// Radius enclosing `fraction` of the kernel sum, from the cumulative sum of
    /// samples sorted by radius, linearly interpolated between sample radii.
    pub fn encircled_energy_radius(&self, fraction: f64) -> f64 {
        let h = self.half as isize;
        let mut by_radius: Vec<(f64, f64)> = Vec::with_capacity(self.values.len());
        for dy in -h..=h {
            for dx in -h..=h {
                by_radius.push((((dx * dx + dy * dy) as f64).sqrt(), self.at(dy, dx)));
            }
        }
        by_radius.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let mut prev = 0.0;
        let mut i = 0;
        while i < by_radius.len() {
            // all samples on one ring enter together
            let rho = by_radius[i].0;
            let mut ring = 0.0;
            while i < by_radius.len() && by_radius[i].0 == rho {
                ring += by_radius[i].1;
                i += 1;
            }
            let next = acc + ring;
            if next >= fraction {
                let t = (fraction - acc) / ring;
                return prev + t * (rho - prev);
            }
            acc = next;
            prev = rho;
        }
        prev
    }
}

pub fn gaussian_kernel(spec: &PsfSpec) -> Result<Kernel> {
    match spec {
        PsfSpec::Gaussian { .. } => Kernel::sample(spec),
        _ => Err(Error::InvalidParam("gaussian_kernel needs a Gaussian spec".into())),
    }
}

pub fn airy_kernel(spec: &PsfSpec) -> Result<Kernel> {
    match spec {
        PsfSpec::Airy { .. } => Kernel::sample(spec),
        _ => Err(Error::InvalidParam("airy_kernel needs an Airy spec".into())),
    }
}

/// Half-sample symmetric reflection into `[0, n)`; valid for `-n <= i < 2n`.
#[inline]
fn reflect(i: isize, n: isize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i >= n {
        (2 * n - i - 1) as usize
    } else {
        i as usize
    }
}

/// Direct spatial convolution in f64 with reflective boundaries.
///
/// NaN pixels stay NaN and are excluded from their neighbours' sums, which are
/// renormalized by the valid kernel weight.
pub fn convolve(img: &ImagePlane, kernel: &Kernel) -> Result<ImagePlane> {
    let (w, h) = img.dims();
    if kernel.size() > w || kernel.size() > h {
        return Err(Error::KernelTooLarge {
            kernel: kernel.size(),
            width: w,
            height: h,
        });
    }
    let kh = kernel.half as isize;
    let ks = kernel.size();
    let src = img.data();
    let kv = kernel.values();
    let out: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..w).map(move |c| {
                if src[r * w + c].is_nan() {
                    return f64::NAN;
                }
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                let mut saw_nan = false;
                for ky in 0..ks {
                    let sr = reflect(r as isize + ky as isize - kh, h as isize);
                    let srow = &src[sr * w..(sr + 1) * w];
                    let krow = &kv[ky * ks..(ky + 1) * ks];
                    for (kx, &k) in krow.iter().enumerate() {
                        // convolution flips the kernel; it is symmetric, so the flip is a no-op
                        let sc = reflect(c as isize + kx as isize - kh, w as isize);
                        let v = srow[sc];
                        if v.is_nan() {
                            saw_nan = true;
                        } else {
                            acc += k * v as f64;
                            wsum += k;
                        }
                    }
                }
                if saw_nan {
                    acc / wsum
                } else {
                    acc
                }
            })
        })
        .collect();
    img.with_data(round_preserving_sum(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_store::WcsModel;

    /// J1 from its integral representation, trapezoid rule on the periodic
    /// integrand (spectrally accurate).
    fn j1_integral(x: f64) -> f64 {
        let n = 512;
        let mut s = 0.0;
        for i in 0..n {
            let t = std::f64::consts::PI * 2.0 * i as f64 / n as f64;
            s += (t - x * t.sin()).cos();
        }
        s / n as f64
    }

    #[test]
    fn j1_matches_integral_representation() {
        let mut x = 0.0;
        while x < 40.0 {
            let d = (bessel_j1(x) - j1_integral(x)).abs();
            assert!(d < 1e-10, "x={x} err={d}");
            x += 0.037;
        }
        for x in [11.9999, 12.0, 12.0001] {
            assert!((bessel_j1(x) - j1_integral(x)).abs() < 1e-10);
        }
        assert!((bessel_j1(-2.5) + bessel_j1(2.5)).abs() < 1e-16);
    }

    #[test]
    fn gaussian_normalization_and_ratio() {
        let spec = PsfSpec::Gaussian {
            sigma: 1.0,
            support: Some(4),
        };
        let k = gaussian_kernel(&spec).unwrap();
        assert_eq!(k.size(), 9);
        assert!((k.sum() - 1.0).abs() < 1e-12);
        let peak = k.at(0, 0);
        assert!(k.values().iter().all(|&v| v <= peak));
        assert!((spec.profile(1.0, 0.0) / spec.profile(0.0, 0.0) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_symmetry_is_bitwise() {
        for spec in [PsfSpec::gaussian(1.13), PsfSpec::airy(2.07)] {
            let k = spec.kernel().unwrap();
            let h = k.half() as isize;
            for dy in -h..=h {
                for dx in -h..=h {
                    let v = k.at(dy, dx).to_bits();
                    assert_eq!(v, k.at(-dy, dx).to_bits());
                    assert_eq!(v, k.at(dy, -dx).to_bits());
                    assert_eq!(v, k.at(dx, dy).to_bits());
                }
            }
        }
    }

    #[test]
    fn gaussian_fwhm_matches_dense_sampling() {
        let sigma = 1.2;
        // dense scan of the continuous profile for its half-maximum crossing
        let spec = PsfSpec::gaussian(sigma);
        let mut x = 0.0;
        while spec.profile(x, 0.0) > 0.5 {
            x += 1e-6;
        }
        let dense = 2.0 * x;
        assert!((dense - 2.0 * (2.0 * 2f64.ln()).sqrt() * sigma).abs() < 1e-5);
        let measured = spec.kernel().unwrap().fwhm();
        assert!((measured - dense).abs() / dense < 0.01, "{measured} vs {dense}");
    }

    #[test]
    fn airy_peak_and_first_zero() {
        let spec = PsfSpec::airy(2.0);
        assert_eq!(spec.profile(0.0, 0.0), 1.0);
        // locate the zero by bisection on the independent J1 route
        let (mut lo, mut hi) = (3.0, 4.5);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if j1_integral(lo) * j1_integral(m) <= 0.0 {
                hi = m;
            } else {
                lo = m;
            }
        }
        assert!((lo - AIRY_FIRST_ZERO).abs() < 1e-12);
        let k = spec.kernel().unwrap();
        assert!(k.profile_at(2.0, 0.0) < 1e-6);
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn airy_energy_radius_grows_with_r() {
        let e19 = PsfSpec::airy(1.9).kernel().unwrap().encircled_energy_radius(0.5);
        let e20 = PsfSpec::airy(2.0).kernel().unwrap().encircled_energy_radius(0.5);
        let e22 = PsfSpec::airy(2.2).kernel().unwrap().encircled_energy_radius(0.5);
        assert!(e19 < e20 && e20 < e22, "{e19} {e20} {e22}");
    }

    #[test]
    fn invalid_params() {
        assert!(PsfSpec::gaussian(0.0).kernel().is_err());
        assert!(PsfSpec::airy(-1.0).kernel().is_err());
        assert!(PsfSpec::Gaussian {
            sigma: 1.0,
            support: Some(2)
        }
        .kernel()
        .is_err());
        assert!(airy_kernel(&PsfSpec::gaussian(1.0)).is_err());
    }

    #[test]
    fn serde_shape() {
        assert_eq!(
            serde_json::to_string(&PsfSpec::gaussian(1.0)).unwrap(),
            r#"{"kind":"gaussian","sigma":1.0}"#
        );
        let a: PsfSpec = serde_json::from_str(r#"{"kind":"airy","r":2.0}"#).unwrap();
        assert_eq!(a, PsfSpec::airy(2.0));
    }

    fn img(w: usize, h: usize, f: impl FnMut(usize, usize) -> f32) -> ImagePlane {
        ImagePlane::from_fn(w, h, WcsModel::default(), f).unwrap()
    }

    #[test]
    fn impulse_response_is_kernel() {
        let k = PsfSpec::gaussian(1.0).kernel().unwrap();
        let im = img(21, 21, |r, c| if r == 10 && c == 10 { 1.0 } else { 0.0 });
        let out = convolve(&im, &k).unwrap();
        for dy in -4..=4isize {
            for dx in -4..=4isize {
                let v = out.get((10 + dy) as usize, (10 + dx) as usize);
                // within one f32 ulp of the kernel tap
                let tap = k.at(dy, dx);
                assert!((v as f64 - tap).abs() <= tap * f32::EPSILON as f64);
            }
        }
    }

    #[test]
    fn constant_stays_constant() {
        let k = PsfSpec::airy(2.2).kernel().unwrap();
        let out = convolve(&img(20, 17, |_, _| 3.5), &k).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn nan_positions_preserved_and_renormalized() {
        let k = PsfSpec::gaussian(1.0).kernel().unwrap();
        let im = img(
            16,
            16,
            |r, c| if r == 5 && (3..9).contains(&c) { f32::NAN } else { 2.0 },
        );
        let out = convolve(&im, &k).unwrap();
        for (a, b) in im.data().iter().zip(out.data()) {
            assert_eq!(a.is_nan(), b.is_nan());
            if !b.is_nan() {
                assert!((b - 2.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kernel_larger_than_image() {
        let k = PsfSpec::gaussian(1.0).kernel().unwrap();
        assert!(matches!(
            convolve(&img(8, 30, |_, _| 1.0), &k),
            Err(Error::KernelTooLarge { .. })
        ));
    }
}
