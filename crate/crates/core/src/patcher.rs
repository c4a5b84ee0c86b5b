//! Cut aligned HR/LR pairs into training patches and keep the usable ones.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::{write_image, write_manifest, ImagePlane, PairManifest};
use crate::photometry::{detect_sources, DetectionParams};
use crate::psf::PsfSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    /// HR patch side, pixels.
    pub hr_patch: usize,
    /// HR step between patch origins; `None` means non-overlapping tiles.
    pub stride: Option<usize>,
    /// Patches need strictly more than this valid fraction in both crops.
    pub min_valid: f64,
    pub min_sources: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            hr_patch: 256,
            stride: None,
            min_valid: 0.8,
            min_sources: 1,
        }
    }
}

impl PatchSpec {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.hr_patch)
    }

    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.hr_patch == 0 || self.stride() == 0 {
            return Err(Error::InvalidParam("patch size and stride must be positive".into()));
        }
        if !self.hr_patch.is_multiple_of(scale) || !self.stride().is_multiple_of(scale) {
            return Err(Error::InvalidParam(format!(
                "patch {} and stride {} must be divisible by the scale {scale}",
                self.hr_patch,
                self.stride()
            )));
        }
        if !(self.min_valid > 0.0 && self.min_valid <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "min_valid must be in (0, 1], got {}",
                self.min_valid
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Rejection {
    LowValidHr { valid_fraction: f64 },
    LowValidLr { valid_fraction: f64 },
    TooFewSources { found: usize },
}

impl Rejection {
    pub fn label(&self) -> &'static str {
        match self {
            Rejection::LowValidHr { .. } => "low-valid-hr",
            Rejection::LowValidLr { .. } => "low-valid-lr",
            Rejection::TooFewSources { .. } => "too-few-sources",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub hr: ImagePlane,
    pub lr: ImagePlane,
    pub manifest: PairManifest,
    pub n_sources: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subdivision {
    pub patches: Vec<Patch>,
    /// HR origin `(row, col)` and reason for every dropped patch.
    pub rejected: Vec<((usize, usize), Rejection)>,
}

/// File name of one side of a patch pair.
pub fn patch_file_name(tile: &str, (row, col): (usize, usize), side: &str) -> String {
    format!("{tile}_{row}_{col}_{side}.sfi")
}

/// Keep/reject rule on the two crops and the HR detection count.
pub fn judge(hr_valid: f64, lr_valid: f64, n_sources: usize, spec: &PatchSpec) -> Option<Rejection> {
    if !(hr_valid > spec.min_valid) {
        Some(Rejection::LowValidHr {
            valid_fraction: hr_valid,
        })
    } else if !(lr_valid > spec.min_valid) {
        Some(Rejection::LowValidLr {
            valid_fraction: lr_valid,
        })
    } else if n_sources < spec.min_sources {
        Some(Rejection::TooFewSources { found: n_sources })
    } else {
        None
    }
}

/// Split a pair on the stride grid. HR crop at `(r, c)` pairs with the LR crop
/// at `(r / s, c / s)`.
pub fn subdivide(
    hr: &ImagePlane,
    lr: &ImagePlane,
    scale: usize,
    spec: &PatchSpec,
    params: &DetectionParams,
    tile: &str,
    psf: PsfSpec,
) -> Result<Subdivision> {
    spec.validate(scale)?;
    let (hw, hh) = hr.dims();
    if lr.dims() != (hw / scale, hh / scale) {
        return Err(Error::DimMismatch(format!(
            "LR is {}x{}, expected {}x{} for scale {scale}",
            lr.width(),
            lr.height(),
            hw / scale,
            hh / scale
        )));
    }
    let p = spec.hr_patch;
    if p > hw || p > hh {
        return Err(Error::InvalidParam(format!(
            "patch {p} larger than the {hw}x{hh} image"
        )));
    }
    let lp = p / scale;
    let stride = spec.stride();
    let origins: Vec<(usize, usize)> = (0..=hh - p)
        .step_by(stride)
        .flat_map(|r| (0..=hw - p).step_by(stride).map(move |c| (r, c)))
        .collect();

    let judged: Vec<Result<std::result::Result<Patch, Rejection>>> = origins
        .par_iter()
        .map(|&(r, c)| {
            let hcrop = hr.crop(r, c, p, p)?;
            let lcrop = lr.crop(r / scale, c / scale, lp, lp)?;
            let (hv, lv) = (hcrop.valid_fraction(), lcrop.valid_fraction());
            let n = if hv > spec.min_valid && lv > spec.min_valid {
                match detect_sources(&hcrop, params) {
                    Ok(s) => s.len(),
                    Err(Error::NoValidPixels(_)) => 0,
                    Err(e) => return Err(e),
                }
            } else {
                0
            };
            if let Some(rej) = judge(hv, lv, n, spec) {
                return Ok(Err(rej));
            }
            let manifest = PairManifest {
                hr_path: PathBuf::from(patch_file_name(tile, (r, c), "hr")),
                lr_path: PathBuf::from(patch_file_name(tile, (r, c), "lr")),
                scale,
                psf,
                patch_origin: (r, c),
                valid_fraction: hv.min(lv),
            };
            Ok(Ok(Patch {
                hr: hcrop,
                lr: lcrop,
                manifest,
                n_sources: n,
            }))
        })
        .collect();

    let mut out = Subdivision {
        patches: Vec::new(),
        rejected: Vec::new(),
    };
    for (origin, j) in origins.into_iter().zip(judged) {
        match j? {
            Ok(patch) => out.patches.push(patch),
            Err(rej) => out.rejected.push((origin, rej)),
        }
    }
    Ok(out)
}

/// Write every retained patch and `{tile}_manifest.json` under `dir`.
pub fn write_patches(dir: impl AsRef<Path>, tile: &str, sub: &Subdivision) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in &sub.patches {
        write_image(&p.hr, dir.join(&p.manifest.hr_path))?;
        write_image(&p.lr, dir.join(&p.manifest.lr_path))?;
    }
    let manifests: Vec<PairManifest> = sub.patches.iter().map(|p| p.manifest.clone()).collect();
    let path = dir.join(format!("{tile}_manifest.json"));
    write_manifest(&manifests, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux_resample::{downsample_flux, ResampleMethod, ResampleSpec};
    use crate::synth::{generate, inject_nan_regions, SynthSpec};

    fn field(n_sources: usize) -> ImagePlane {
        generate(&SynthSpec {
            n_sources,
            ..SynthSpec::default()
        })
        .unwrap()
        .0
    }

    fn pair(hr: &ImagePlane) -> ImagePlane {
        let spec = ResampleSpec::new(hr.wcs(), 2, ResampleMethod::FluxConserving).unwrap();
        downsample_flux(hr, &spec).unwrap().image
    }

    #[test]
    fn judge_table() {
        let spec = PatchSpec::default();
        assert!(judge(0.8, 1.0, 3, &spec).is_some());
        assert!(judge(0.81, 1.0, 3, &spec).is_none());
        assert!(judge(1.0, 0.8, 3, &spec).is_some());
        assert!(judge(1.0, 1.0, 0, &spec).is_some());
        assert!(judge(1.0, 1.0, 1, &spec).is_none());
    }

    #[test]
    fn full_field_four_patches() {
        let hr = generate(&SynthSpec {
            n_sources: 200,
            ..SynthSpec::default()
        })
        .unwrap()
        .0;
        let lr = pair(&hr);
        let sub = subdivide(
            &hr,
            &lr,
            2,
            &PatchSpec::default(),
            &DetectionParams::default(),
            "t",
            PsfSpec::gaussian(1.0),
        )
        .unwrap();
        assert_eq!(sub.patches.len(), 4);
        let origins: Vec<_> = sub.patches.iter().map(|p| p.manifest.patch_origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);
        assert_eq!(sub.patches[1].lr.dims(), (128, 128));
        assert_eq!(sub.patches[1].manifest.hr_path, PathBuf::from("t_0_256_hr.sfi"));
    }

    #[test]
    fn empty_sky_rejected() {
        let hr = field(0);
        let lr = pair(&hr);
        let sub = subdivide(
            &hr,
            &lr,
            2,
            &PatchSpec::default(),
            &DetectionParams::default(),
            "t",
            PsfSpec::gaussian(1.0),
        )
        .unwrap();
        assert!(sub.patches.is_empty());
        assert!(sub
            .rejected
            .iter()
            .all(|(_, r)| matches!(r, Rejection::TooFewSources { found: 0 })));
    }

    #[test]
    fn nan_blocks_rejected() {
        let hr = inject_nan_regions(&field(200), 0.25, 3).unwrap();
        let lr = pair(&hr);
        let sub = subdivide(
            &hr,
            &lr,
            2,
            &PatchSpec::default(),
            &DetectionParams::default(),
            "t",
            PsfSpec::gaussian(1.0),
        )
        .unwrap();
        for p in &sub.patches {
            assert!(p.hr.valid_fraction() > 0.8 && p.lr.valid_fraction() > 0.8);
        }
        for ((r, c), why) in &sub.rejected {
            if let Rejection::LowValidHr { valid_fraction } = why {
                let crop = hr.crop(*r, *c, 256, 256).unwrap();
                assert_eq!(crop.valid_fraction(), *valid_fraction);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let hr = field(10);
        let lr = pair(&hr);
        let params = DetectionParams::default();
        let psf = PsfSpec::gaussian(1.0);
        let odd = PatchSpec {
            hr_patch: 255,
            ..PatchSpec::default()
        };
        assert!(subdivide(&hr, &lr, 2, &odd, &params, "t", psf).is_err());
        let huge = PatchSpec {
            hr_patch: 1024,
            ..PatchSpec::default()
        };
        assert!(subdivide(&hr, &lr, 2, &huge, &params, "t", psf).is_err());
        assert!(subdivide(&hr, &hr, 2, &PatchSpec::default(), &params, "t", psf).is_err());
    }

    #[test]
    fn deterministic_ordering() {
        let hr = field(100);
        let lr = pair(&hr);
        let spec = PatchSpec {
            hr_patch: 128,
            stride: Some(64),
            ..PatchSpec::default()
        };
        let a = subdivide(
            &hr,
            &lr,
            2,
            &spec,
            &DetectionParams::default(),
            "t",
            PsfSpec::gaussian(1.0),
        )
        .unwrap();
        let b = subdivide(
            &hr,
            &lr,
            2,
            &spec,
            &DetectionParams::default(),
            "t",
            PsfSpec::gaussian(1.0),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patches.len() + a.rejected.len(), 49);
    }
}
