use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use starflux::flux_map::{
    build_flux_map, flux_consistency_loss, normalize_map, FluxMap, DEFAULT_C_SIGMA, DEFAULT_LAMBDA,
};
use starflux::flux_resample::{downsample_bilinear, downsample_flux, ResampleMethod, ResampleSpec};
use starflux::image_store::{
    read_catalog, read_image, write_catalog, write_catalog_to, write_image, ImagePlane, SourceRecord, WcsModel,
};
use starflux::metrics::{evaluate_pair, flux_error, Rect, DEFAULT_BINS};
use starflux::patcher::{subdivide, write_patches, PatchSpec};
use starflux::photometry::{detect, estimate_background, measure_flux, Background, DetectionParams};
use starflux::pipeline::{compare_downsample, run_eval, run_pipeline, EvalParams, PipelineConfig};
use starflux::psf::{convolve, PsfSpec};
use starflux::synth::{generate, inject_nan_regions, SynthSpec};
use starflux::wcs_geom::{footprint_overlaps, write_plan};

/// Flux-conserving HR/LR dataset tools.
#[derive(Parser)]
#[command(name = "starflux", version)]
struct Cli {
    /// RNG seed, where the command draws random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Copy)]
struct DetectArgs {
    #[arg(long)]
    thresh_sigma: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long)]
    aperture_k: Option<f64>,
    #[arg(long)]
    clip_iters: Option<usize>,
    /// Threshold the raw image instead of the 3x3 smoothed one.
    #[arg(long)]
    no_filter: bool,
}

impl DetectArgs {
    fn params(&self) -> Result<DetectionParams> {
        let d = DetectionParams::default();
        let p = DetectionParams {
            thresh_sigma: self.thresh_sigma.unwrap_or(d.thresh_sigma),
            min_area: self.min_area.unwrap_or(d.min_area),
            aperture_k: self.aperture_k.unwrap_or(d.aperture_k),
            clip_iters: self.clip_iters.unwrap_or(d.clip_iters),
            filter: !self.no_filter,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PsfKind {
    Gaussian,
    Airy,
}

#[derive(Args, Clone, Copy)]
struct PsfArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    psf: PsfKind,
    /// Gaussian sigma, pixels.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Airy first-zero radius, pixels.
    #[arg(long, default_value_t = 2.0)]
    r: f64,
    /// Kernel half-width; defaults depend on the family.
    #[arg(long)]
    support: Option<usize>,
}

impl PsfArgs {
    fn spec(&self) -> Result<PsfSpec> {
        let spec = match self.psf {
            PsfKind::Gaussian => PsfSpec::Gaussian {
                sigma: self.sigma,
                support: self.support,
            },
            PsfKind::Airy => PsfSpec::Airy {
                r: self.r,
                support: self.support,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Flux,
    Bilinear,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic star field and its truth catalog.
    Synth {
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 50)]
        n_sources: usize,
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.05)]
        pixel_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        min_separation: f64,
        #[arg(long, default_value_t = 0.0)]
        nan_fraction: f64,
        /// Truth catalog path; defaults to the image path with a .csv extension.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Convolve an image with a Gaussian or Airy PSF.
    Blur {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        psf: PsfArgs,
    },
    /// Downsample by an integer factor.
    Downsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long, value_enum, default_value = "flux")]
        method: Method,
        /// Also write the per-pixel NaN weight deficit as an image.
        #[arg(long)]
        deficit: Option<PathBuf>,
        /// Also write the overlap plan sidecar.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Cut an HR/LR pair into patches plus a manifest.
    Subdivide {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long, default_value_t = 256)]
        patch: usize,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        min_valid: f64,
        #[arg(long, default_value_t = 1)]
        min_sources: usize,
        #[arg(long, default_value = "tile")]
        tile: String,
        /// Shuffle the manifest order with `--seed` (default 0).
        #[arg(long)]
        shuffle: bool,
        #[command(flatten)]
        psf: PsfArgs,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Detect sources and write a catalog with aperture fluxes.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Re-measure a catalog's apertures on an image.
    Photometry {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Background level to subtract; estimated from the image when absent.
        #[arg(long)]
        background: Option<f64>,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Build a flux map raster from a catalog.
    Fluxmap {
        #[arg(long)]
        catalog: PathBuf,
        /// Take dimensions and WCS from this image.
        #[arg(long)]
        like: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_C_SIGMA)]
        c_sigma: f64,
        #[arg(long)]
        normalize_map: bool,
    },
    /// Flux consistency loss of a prediction.
    Fcl {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Flux Error with per-source residuals.
    Fe {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Per-source residual CSV.
        #[arg(long)]
        residuals: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// FE, PSNR, SSIM and optional region KL/JS for one pair.
    Metrics {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// `row,col,width,height`, or `full`.
        #[arg(long)]
        region: Option<String>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Build a dataset from a JSON config.
    Pipeline {
        /// Worker threads; overrides the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Metrics for every matching file in two directories.
    Eval {
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        region: Option<String>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Photometric flux means under flux-conserving vs bilinear downsampling.
    CompareDownsample {
        /// Image to compare on; a synthetic field is generated when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long, default_value_t = 100)]
        n_sources: usize,
        #[command(flatten)]
        detect: DetectArgs,
    },
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn need_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.clone().with_context(|| format!("--out is required for {what}"))
}

fn parse_region(arg: &Option<String>) -> Result<(Option<Rect>, bool)> {
    match arg.as_deref() {
        None => Ok((None, false)),
        Some("full") => Ok((None, true)),
        Some(s) => {
            let v: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("bad region {s:?}"))?;
            let [row, col, width, height] = v[..] else {
                bail!("region needs row,col,width,height");
            };
            Ok((
                Some(Rect {
                    row,
                    col,
                    width,
                    height,
                }),
                false,
            ))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct Written<'a> {
    written: Vec<&'a Path>,
}

fn run(cli: Cli) -> Result<i32> {
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Synth {
            width,
            height,
            n_sources,
            level,
            noise,
            pixel_scale,
            min_separation,
            nan_fraction,
            catalog,
        } => {
            let mut spec = match &cli.config {
                Some(p) => read_json::<SynthSpec>(p)?,
                None => SynthSpec {
                    width: *width,
                    height: *height,
                    n_sources: *n_sources,
                    background: Background {
                        level: *level,
                        noise_sigma: *noise,
                    },
                    pixel_scale: *pixel_scale,
                    min_separation: *min_separation,
                    ..SynthSpec::default()
                },
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let path = need_out(&cli.out, "synth")?;
            let (mut img, truth) = generate(&spec)?;
            if *nan_fraction > 0.0 {
                img = inject_nan_regions(&img, *nan_fraction, spec.seed)?;
            }
            let cat = catalog.clone().unwrap_or_else(|| path.with_extension("csv"));
            write_image(&img, &path)?;
            write_catalog(&truth, &cat)?;
            emit(
                &Written {
                    written: vec![&path, &cat],
                },
                None,
            )?;
        }
        Cmd::Blur { input, psf } => {
            let img = read_image(input)?;
            let blurred = convolve(&img, &psf.spec()?.kernel()?)?;
            let path = need_out(&cli.out, "blur")?;
            write_image(&blurred, &path)?;
            emit(&Written { written: vec![&path] }, None)?;
        }
        Cmd::Downsample {
            input,
            scale,
            method,
            deficit,
            plan,
        } => {
            let img = read_image(input)?;
            let path = need_out(&cli.out, "downsample")?;
            let mut written = vec![path.as_path()];
            match method {
                Method::Flux => {
                    let spec = ResampleSpec::new(img.wcs(), *scale, ResampleMethod::FluxConserving)?;
                    let d = downsample_flux(&img, &spec)?;
                    write_image(&d.image, &path)?;
                    if let Some(p) = deficit {
                        write_image(&d.image.with_data(d.weight_deficit.clone())?, p)?;
                        written.push(p);
                    }
                    if let Some(p) = plan {
                        let lr = starflux::flux_resample::lr_dims(img.dims(), *scale);
                        write_plan(&footprint_overlaps(img.wcs(), img.dims(), &spec.lr_wcs, lr)?, p)?;
                        written.push(p);
                    }
                }
                Method::Bilinear => write_image(&downsample_bilinear(&img, *scale)?, &path)?,
            }
            emit(&Written { written }, None)?;
        }
        Cmd::Subdivide {
            hr,
            lr,
            scale,
            patch,
            stride,
            min_valid,
            min_sources,
            tile,
            shuffle,
            psf,
            detect: d,
        } => {
            let spec = PatchSpec {
                hr_patch: *patch,
                stride: *stride,
                min_valid: *min_valid,
                min_sources: *min_sources,
            };
            let (hr, lr) = (read_image(hr)?, read_image(lr)?);
            let mut sub = subdivide(&hr, &lr, *scale, &spec, &d.params()?, tile, psf.spec()?)?;
            if *shuffle {
                sub.patches
                    .shuffle(&mut ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0)));
            }
            let dir = need_out(&cli.out, "subdivide")?;
            let manifest = write_patches(&dir, tile, &sub)?;
            let rejected: Vec<_> = sub
                .rejected
                .iter()
                .map(|(origin, r)| serde_json::json!({"origin": origin, "rejection": r}))
                .collect();
            emit(
                &serde_json::json!({
                    "manifest": manifest,
                    "retained": sub.patches.len(),
                    "rejected": rejected,
                }),
                None,
            )?;
        }
        Cmd::Detect { input, detect: d } => {
            let cat = detect(&read_image(input)?, &d.params()?)?;
            match out {
                Some(p) => write_catalog(&cat.sources, p)?,
                None => write_catalog_to(&cat.sources, std::io::stdout().lock())?,
            }
        }
        Cmd::Photometry {
            input,
            catalog,
            background,
            detect: d,
        } => {
            let params = d.params()?;
            let img = read_image(input)?;
            let bg = match background {
                Some(level) => Background {
                    level: *level,
                    noise_sigma: 0.0,
                },
                None => estimate_background(&img, &params)?,
            };
            let sources = read_catalog(catalog)?
                .into_iter()
                .map(|s| {
                    Ok(SourceRecord {
                        flux: measure_flux(&img, &s, &bg, &params)?.flux,
                        ..s
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match out {
                Some(p) => write_catalog(&sources, p)?,
                None => write_catalog_to(&sources, std::io::stdout().lock())?,
            }
        }
        Cmd::Fluxmap {
            catalog,
            like,
            width,
            height,
            c_sigma,
            normalize_map: norm,
        } => {
            let (dims, wcs) = match like {
                Some(p) => {
                    let img = read_image(p)?;
                    (img.dims(), *img.wcs())
                }
                None => match (width, height) {
                    (Some(w), Some(h)) => ((*w, *h), WcsModel::default()),
                    _ => bail!("fluxmap needs --like or both --width and --height"),
                },
            };
            let mut m = build_flux_map(dims, &read_catalog(catalog)?, *c_sigma)?;
            if *norm {
                m = normalize_map(&m)?;
            }
            let path = need_out(&cli.out, "fluxmap")?;
            write_image(&m.to_image(wcs)?, &path)?;
            emit(&Written { written: vec![&path] }, None)?;
        }
        Cmd::Fcl { pred, gt, map, lambda } => {
            let (pred, gt) = (read_image(pred)?, read_image(gt)?);
            let m = FluxMap::from_image(&read_image(map)?);
            let loss = flux_consistency_loss(&pred, &gt, &m)?;
            emit(
                &serde_json::json!({
                    "l_flux": loss.l_flux,
                    "l_recon": loss.l_recon,
                    "lambda": lambda,
                    "total": loss.total(*lambda),
                    "n_valid": loss.n_valid,
                }),
                out,
            )?;
        }
        Cmd::Fe {
            gt,
            pred,
            residuals,
            detect: d,
        } => {
            let report = flux_error(&read_image(gt)?, &read_image(pred)?, &d.params()?)?;
            if let Some(p) = residuals {
                let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
                for r in &report.residuals {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
            emit(
                &serde_json::json!({"fe": report.fe, "n_sources": report.n_sources}),
                out,
            )?;
        }
        Cmd::Metrics {
            gt,
            pred,
            region,
            bins,
            detect: d,
        } => {
            let (gt, pred) = (read_image(gt)?, read_image(pred)?);
            let (rect, full) = parse_region(region)?;
            let rect = if full { Some(Rect::full(&gt)) } else { rect };
            emit(&evaluate_pair(&gt, &pred, &d.params()?, rect, *bins)?, out)?;
        }
        Cmd::Pipeline { workers } => {
            let path = cli.config.as_ref().context("pipeline needs --config")?;
            let mut cfg = PipelineConfig::load(path)?;
            if let Some(o) = &cli.out {
                cfg.out = o.clone();
            }
            if let Some(s) = cli.seed {
                cfg.psf.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = *w;
            }
            let summary = run_pipeline(&cfg)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            emit(&summary, None)?;
            return Ok(summary.exit_code());
        }
        Cmd::Eval {
            gt_dir,
            pred_dir,
            region,
            bins,
            detect: d,
        } => {
            let (region, full_region) = parse_region(region)?;
            let params = EvalParams {
                detection: d.params()?,
                region,
                full_region,
                bins: *bins,
            };
            let report = run_eval(gt_dir, pred_dir, &params)?;
            for m in &report.missing {
                eprintln!("warning: no prediction for {m}");
            }
            emit(&report, out)?;
        }
        Cmd::CompareDownsample {
            input,
            scale,
            n_sources,
            detect: d,
        } => {
            let img: ImagePlane = match input {
                Some(p) => read_image(p)?,
                None => {
                    let spec = SynthSpec {
                        n_sources: *n_sources,
                        min_separation: 24.0,
                        seed: cli.seed.unwrap_or(SynthSpec::default().seed),
                        ..SynthSpec::default()
                    };
                    generate(&spec)?.0
                }
            };
            emit(&compare_downsample(&img, *scale, &d.params()?)?, out)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
