//! Dataset build, evaluation and downsampling comparison drivers.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux_map::DEFAULT_LAMBDA;
use crate::flux_resample::{downsample_bilinear, lr_dims, PlanCache, ResampleMethod, ResampleSpec};
use crate::image_store::{read_image, ImagePlane};
use crate::metrics::{evaluate_pair, MetricReport, Rect, DEFAULT_BINS};
use crate::patcher::{subdivide, write_patches, PatchSpec};
use crate::photometry::{detect, estimate_background, measure_flux, DetectionParams};
use crate::psf::{convolve, PsfSpec};
use crate::synth::{generate, inject_nan_regions, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfFamily {
    Gaussian,
    Airy,
    /// Gaussian or Airy with equal probability per tile.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsfPolicy {
    pub family: PsfFamily,
    pub sigma_range: (f64, f64),
    pub r_range: (f64, f64),
    pub seed: u64,
}

impl Default for PsfPolicy {
    fn default() -> Self {
        PsfPolicy {
            family: PsfFamily::Gaussian,
            sigma_range: (0.8, 1.2),
            r_range: (1.9, 2.2),
            seed: 0,
        }
    }
}

impl PsfPolicy {
    /// PSF for tile `index`; independent of the order tiles are processed in.
    pub fn sample(&self, index: usize) -> Result<PsfSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let airy = match self.family {
            PsfFamily::Gaussian => false,
            PsfFamily::Airy => true,
            PsfFamily::Mixed => rng.random_bool(0.5),
        };
        let spec = if airy {
            PsfSpec::airy(uniform(&mut rng, self.r_range))
        } else {
            PsfSpec::gaussian(uniform(&mut rng, self.sigma_range))
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub source: TileSource,
    /// NaN blocks injected into the HR tile before processing.
    #[serde(default)]
    pub nan_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tiles: Vec<TileSpec>,
    pub psf: PsfPolicy,
    pub scales: Vec<usize>,
    pub patch: PatchSpec,
    pub detection: DetectionParams,
    pub out: PathBuf,
    pub lambda: f64,
    /// Tile worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tiles: Vec::new(),
            psf: PsfPolicy::default(),
            scales: vec![2, 4],
            patch: PatchSpec::default(),
            detection: DetectionParams::default(),
            out: PathBuf::from("dataset"),
            lambda: DEFAULT_LAMBDA,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|&s| s < 2) {
            return Err(Error::InvalidParam(format!(
                "scales must be >= 2, got {:?}",
                self.scales
            )));
        }
        for &s in &self.scales {
            self.patch.validate(s)?;
        }
        self.detection.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParam("lambda must be >= 0".into()));
        }
        let mut names: Vec<String> = (0..self.tiles.len()).map(|i| self.tile_name(i)).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParam("tile names must be unique".into()));
        }
        Ok(())
    }

    pub fn tile_name(&self, index: usize) -> String {
        self.tiles[index]
            .name
            .clone()
            .unwrap_or_else(|| format!("tile{index:04}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub scale: usize,
    pub lr_flux: f64,
    /// `|sum LR - sum HR_blurred| / sum HR_blurred` over the covered area.
    pub conservation_residual: f64,
    pub retained: usize,
    pub rejected: BTreeMap<String, usize>,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSummary {
    pub name: String,
    pub status: TileStatus,
    pub error: Option<String>,
    pub psf: Option<PsfSpec>,
    pub hr_flux: Option<f64>,
    /// `|sum blurred - sum HR| / sum HR`.
    pub blur_residual: Option<f64>,
    pub scales: Vec<ScaleSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_tiles: usize,
    pub n_failed: usize,
    pub n_patches: usize,
    pub warnings: Vec<String>,
    pub tiles: Vec<TileSummary>,
}

impl PipelineSummary {
    /// 0 when every tile succeeded (or there were none), 2 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.n_failed == 0 {
            0
        } else {
            2
        }
    }
}

fn relative_residual(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        (a - b).abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Valid-pixel sum over the part of the HR grid covered by the LR grid.
fn covered_sum(img: &ImagePlane, scale: usize) -> f64 {
    let (lw, lh) = lr_dims(img.dims(), scale);
    (0..lh * scale)
        .map(|r| {
            img.row(r)[..lw * scale]
                .iter()
                .filter(|v| !v.is_nan())
                .map(|&v| v as f64)
                .sum::<f64>()
        })
        .sum()
}

fn load_tile(tile: &TileSpec, index: usize) -> Result<ImagePlane> {
    let img = match &tile.source {
        TileSource::Path(p) => read_image(p)?,
        TileSource::Synth(spec) => generate(spec)?.0,
    };
    if tile.nan_fraction > 0.0 {
        inject_nan_regions(&img, tile.nan_fraction, index as u64)
    } else {
        Ok(img)
    }
}

fn process_tile(cfg: &PipelineConfig, index: usize, summary: &mut TileSummary) -> Result<()> {
    let hr = load_tile(&cfg.tiles[index], index)?;
    let psf = cfg.psf.sample(index)?;
    summary.psf = Some(psf);
    let blurred = convolve(&hr, &psf.kernel()?)?;
    let hr_flux = hr.sum();
    summary.hr_flux = Some(hr_flux);
    summary.blur_residual = Some(relative_residual(blurred.sum(), hr_flux));
    let cache = PlanCache::new();
    for &s in &cfg.scales {
        let spec = ResampleSpec::new(hr.wcs(), s, ResampleMethod::FluxConserving)?;
        let lr = cache.downsample(&blurred, &spec)?.image;
        let lr_flux = lr.sum();
        let sub = subdivide(&hr, &lr, s, &cfg.patch, &cfg.detection, &summary.name, psf)?;
        let dir = cfg.out.join(format!("x{s}"));
        let manifest = write_patches(&dir, &summary.name, &sub)?;
        let mut rejected = BTreeMap::new();
        for (_, r) in &sub.rejected {
            *rejected.entry(r.label().to_string()).or_insert(0) += 1;
        }
        summary.scales.push(ScaleSummary {
            scale: s,
            lr_flux,
            conservation_residual: relative_residual(lr_flux, covered_sum(&blurred, s)),
            retained: sub.patches.len(),
            rejected,
            manifest: manifest.strip_prefix(&cfg.out).unwrap_or(&manifest).to_path_buf(),
        });
    }
    Ok(())
}

fn run_tile(cfg: &PipelineConfig, index: usize) -> TileSummary {
    let mut summary = TileSummary {
        name: cfg.tile_name(index),
        status: TileStatus::Ok,
        error: None,
        psf: None,
        hr_flux: None,
        blur_residual: None,
        scales: Vec::new(),
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| process_tile(cfg, index, &mut summary)));
    let err = match outcome {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(panic) => Some(
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "tile worker panicked".into()),
        ),
    };
    if let Some(e) = err {
        summary.status = TileStatus::Failed;
        summary.error = Some(e);
    }
    summary
}

/// Build the dataset described by `cfg` and write `summary.json` at its root.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidParam(format!("worker pool: {e}")))?;
    let tiles: Vec<TileSummary> =
        pool.install(|| (0..cfg.tiles.len()).into_par_iter().map(|i| run_tile(cfg, i)).collect());
    let mut warnings = Vec::new();
    if tiles.is_empty() {
        warnings.push("no tiles configured; dataset is empty".to_string());
    }
    let summary = PipelineSummary {
        n_tiles: tiles.len(),
        n_failed: tiles.iter().filter(|t| t.status == TileStatus::Failed).count(),
        n_patches: tiles.iter().flat_map(|t| &t.scales).map(|s| s.retained).sum(),
        warnings,
        tiles,
    };
    let path = cfg.out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub name: String,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub n_pairs: usize,
    pub fe_mean: Option<f64>,
    /// Mean over finite values only.
    pub psnr_mean: Option<f64>,
    pub n_psnr_infinite: usize,
    pub ssim_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairEval>,
    /// gt files with no counterpart in the prediction directory.
    pub missing: Vec<String>,
    pub aggregate: EvalAggregate,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sfi_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".sfi") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub detection: DetectionParams,
    /// Region for KL/JS; `full` uses the whole frame.
    pub region: Option<Rect>,
    pub full_region: bool,
    pub bins: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            detection: DetectionParams::default(),
            region: None,
            full_region: false,
            bins: DEFAULT_BINS,
        }
    }
}

/// Metrics for every `*.sfi` in `gt_dir` against the same file name in `pred_dir`.
pub fn run_eval(gt_dir: impl AsRef<Path>, pred_dir: impl AsRef<Path>, params: &EvalParams) -> Result<EvalReport> {
    let (gt_dir, pred_dir) = (gt_dir.as_ref(), pred_dir.as_ref());
    let names = sfi_names(gt_dir)?;
    let (present, missing): (Vec<String>, Vec<String>) = names.into_iter().partition(|n| pred_dir.join(n).is_file());
    let pairs: Vec<PairEval> = present
        .par_iter()
        .map(|name| {
            let result = (|| {
                let gt = read_image(gt_dir.join(name))?;
                let pred = read_image(pred_dir.join(name))?;
                let region = if params.full_region {
                    Some(Rect::full(&gt))
                } else {
                    params.region
                };
                evaluate_pair(&gt, &pred, &params.detection, region, params.bins)
            })();
            match result {
                Ok(r) => PairEval {
                    name: name.clone(),
                    report: Some(r),
                    error: None,
                },
                Err(e) => PairEval {
                    name: name.clone(),
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let reports: Vec<&MetricReport> = pairs.iter().filter_map(|p| p.report.as_ref()).collect();
    let fe: Vec<f64> = reports.iter().filter_map(|r| r.fe).collect();
    let psnr: Vec<f64> = reports.iter().filter_map(|r| r.psnr).collect();
    let ssim: Vec<f64> = reports.iter().map(|r| r.ssim).collect();
    let aggregate = EvalAggregate {
        n_pairs: reports.len(),
        fe_mean: mean(&fe),
        psnr_mean: mean(&psnr),
        n_psnr_infinite: reports.iter().filter(|r| r.psnr_infinite).count(),
        ssim_mean: mean(&ssim),
    };
    Ok(EvalReport {
        pairs,
        missing,
        aggregate,
    })
}

/// One-sided sign test: probability of at least `k` successes in `n` fair trials.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut log_c = 0.0;
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i >= k {
            terms.push(log_c - ln2n);
        }
        if i < n {
            log_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
        .exp()
        .min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub id: u64,
    pub hr: f64,
    pub flux_conserving: f64,
    pub bilinear: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub scale: usize,
    pub n_sources: usize,
    pub hr_mean: f64,
    pub flux_conserving_mean: f64,
    pub bilinear_mean: f64,
    pub flux_conserving_median: f64,
    pub bilinear_median: f64,
    /// Sources whose bilinear flux is below the flux-conserving flux.
    pub bilinear_below: usize,
    pub sign_test_p: f64,
    pub rows: Vec<CompareRow>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Photometry of HR detections on the flux-conserving and bilinear LR images.
pub fn compare_downsample(img: &ImagePlane, scale: usize, params: &DetectionParams) -> Result<CompareTable> {
    let catalog = detect(img, params)?;
    if catalog.sources.is_empty() {
        return Err(Error::NoSources);
    }
    let spec = ResampleSpec::new(img.wcs(), scale, ResampleMethod::FluxConserving)?;
    let fc = crate::flux_resample::downsample_flux(img, &spec)?.image;
    let bl = downsample_bilinear(img, scale)?;
    let bg_fc = estimate_background(&fc, params)?;
    let bg_bl = estimate_background(&bl, params)?;
    let mut rows = Vec::with_capacity(catalog.sources.len());
    for s in &catalog.sources {
        let lr_src = s.rescaled(scale);
        rows.push(CompareRow {
            id: s.id,
            hr: s.flux,
            flux_conserving: measure_flux(&fc, &lr_src, &bg_fc, params)?.flux,
            bilinear: measure_flux(&bl, &lr_src, &bg_bl, params)?.flux,
        });
    }
    let col = |f: fn(&CompareRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (hr, fcv, blv) = (col(|r| r.hr), col(|r| r.flux_conserving), col(|r| r.bilinear));
    let untied: Vec<&CompareRow> = rows.iter().filter(|r| r.bilinear != r.flux_conserving).collect();
    let below = untied.iter().filter(|r| r.bilinear < r.flux_conserving).count();
    Ok(CompareTable {
        scale,
        n_sources: rows.len(),
        hr_mean: mean(&hr).unwrap_or(0.0),
        flux_conserving_mean: mean(&fcv).unwrap_or(0.0),
        bilinear_mean: mean(&blv).unwrap_or(0.0),
        flux_conserving_median: median(&fcv),
        bilinear_median: median(&blv),
        bilinear_below: below,
        sign_test_p: sign_test_p(below, untied.len()),
        rows,
    })
}
