//! Experiment orchestration: configuration files, dataset handling,
//! restoration runs with per-image derived seeds, report/trace export, the
//! oracle selfcheck suite and the ablation/stability studies.
//!
//! Reports deliberately keep wall-clock time out of everything written to
//! disk, so repeated runs with one seed produce byte-identical artifacts.
//! Mean PSNR is the arithmetic mean of per-image values.

pub mod chart;
pub mod config;
pub mod png;

pub use chart::{line_chart_svg, parse_trace_csv, trace_to_csv, Series};
pub use config::ConfigMap;
pub use png::{load_png, save_png};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::degrade::{
    add_awgn, build_operator, initial_estimate, BlurSpec, DegradationSpec, LinearOperator,
    MaskSpec, SRSpec, SrKernel,
};
use crate::error::{Error, Result};
use crate::fdcheck::grad_check;
use crate::metrics::psnr;
use crate::priors::checkpoint::load_checkpoint;
use crate::priors::net::{DenoiserNet, RegGradNet, SIGMA_MAX};
use crate::priors::{LaplacianPrior, Prior, TikhonovPrior};
use crate::solvers::{
    admm_schedule, map_closed_form, pnp_admm, pnp_gd, red_gd, ADMMConfig, GDConfig, REDConfig,
    SolveTrace, UpdateRule,
};
use crate::tensor::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::training::{synthetic_images, PatchDataset};

/// Allowed config sections and keys; overrides are validated against this.
pub const CONFIG_SCHEMA: &[(&str, &[&str])] = &[
    (
        "task",
        &[
            "kind",
            "kernel",
            "kernel_size",
            "kernel_sigma",
            "kernel_sx",
            "kernel_sy",
            "kernel_theta",
            "kernel_file",
            "sigma_n",
            "keep_prob",
            "mask_seed",
        ],
    ),
    (
        "algorithm",
        &[
            "kind",
            "mu",
            "sigma",
            "iters",
            "update",
            "self_ensemble",
            "early_stop_mse",
            "weight",
            "sigma_f",
            "s_first",
            "s_last",
        ],
    ),
    ("prior", &["kind", "checkpoint"]),
    ("data", &["images", "synthetic_count", "synthetic_size", "channels"]),
    ("output", &["dir", "save_images", "save_traces"]),
    ("experiment", &["seed"]),
];

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Identity,
    Deblur,
    Sr { factor: usize },
    Inpaint { keep_prob: f64 },
}

/// Degradation task: what the forward operator is and how much noise is
/// added to the observations.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub sigma_n: f64,
    blur: Option<BlurSpec>,
    sr_kernel: SrKernel,
    mask_seed: Option<u64>,
}

impl TaskSpec {
    pub fn parse(cfg: &ConfigMap) -> Result<Self> {
        let kind_str = cfg.require("task", "kind")?;
        let sigma_n = cfg.get_f64("task", "sigma_n")?.unwrap_or(0.0);
        if sigma_n < 0.0 {
            return Err(Error::Config(format!("task.sigma_n must be non-negative, got {sigma_n}")));
        }
        let kind = match kind_str {
            "identity" => TaskKind::Identity,
            "deblur" => TaskKind::Deblur,
            "sr2" => TaskKind::Sr { factor: 2 },
            "sr3" => TaskKind::Sr { factor: 3 },
            "inpaint" => {
                let p = cfg.require_f64("task", "keep_prob")?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "task.keep_prob must lie in [0,1], got {p}"
                    )));
                }
                TaskKind::Inpaint { keep_prob: p }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown task.kind {other:?} (identity, deblur, sr2, sr3, inpaint)"
                )))
            }
        };

        let blur = if kind == TaskKind::Deblur {
            Some(match cfg.get("task", "kernel").unwrap_or("gaussian") {
                "gaussian" => {
                    let size = cfg.get_usize("task", "kernel_size")?.unwrap_or(13);
                    let sigma = cfg.get_f64("task", "kernel_sigma")?.unwrap_or(1.6);
                    BlurSpec::gaussian(size, sigma)?
                }
                "anisotropic" => {
                    let size = cfg.get_usize("task", "kernel_size")?.unwrap_or(13);
                    let sx = cfg.require_f64("task", "kernel_sx")?;
                    let sy = cfg.require_f64("task", "kernel_sy")?;
                    let theta = cfg.get_f64("task", "kernel_theta")?.unwrap_or(0.0);
                    BlurSpec::anisotropic_gaussian(size, sx, sy, theta)?
                }
                "file" => {
                    let path = cfg.require("task", "kernel_file")?;
                    if !Path::new(path).exists() {
                        return Err(Error::Config(format!(
                            "task.kernel_file {path:?} does not exist"
                        )));
                    }
                    BlurSpec::from_file(Path::new(path))?
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown task.kernel {other:?} (gaussian, anisotropic, file)"
                    )))
                }
            })
        } else {
            None
        };
        let sr_kernel = match cfg.get("task", "kernel") {
            _ if !matches!(kind, TaskKind::Sr { .. }) => SrKernel::Bicubic,
            None | Some("bicubic") => SrKernel::Bicubic,
            Some("gaussian") => SrKernel::Gaussian,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown task.kernel {other:?} for downscaling (bicubic, gaussian)"
                )))
            }
        };
        Ok(TaskSpec {
            kind,
            sigma_n,
            blur,
            sr_kernel,
            mask_seed: cfg.get_u64("task", "mask_seed")?,
        })
    }

    /// The degradation for image `index`; inpainting masks draw a
    /// per-image seed unless one is pinned in the config.
    pub fn spec_for(&self, index: usize, base_seed: u64) -> Result<DegradationSpec> {
        Ok(match &self.kind {
            TaskKind::Identity => DegradationSpec::Identity,
            TaskKind::Deblur => DegradationSpec::Blur(self.blur.clone().unwrap()),
            TaskKind::Sr { factor } => {
                DegradationSpec::Downscale(SRSpec::new(*factor, self.sr_kernel)?)
            }
            TaskKind::Inpaint { keep_prob } => {
                let seed = self
                    .mask_seed
                    .unwrap_or_else(|| base_seed.wrapping_add(7919 + index as u64));
                DegradationSpec::Inpaint(MaskSpec::new(*keep_prob, seed)?)
            }
        })
    }
}

/// Which solver runs and with what parameters.
#[derive(Debug, Clone)]
pub enum AlgorithmSpec {
    Gd(GDConfig),
    Red(REDConfig),
    Admm { s_first: f64, s_last: f64, iters: usize, early_stop_mse: Option<f64> },
    Map { sigma: f64 },
}

fn parse_update(cfg: &ConfigMap) -> Result<UpdateRule> {
    match cfg.get("algorithm", "update") {
        None | Some("adam") => Ok(UpdateRule::Adam),
        Some("plain") => Ok(UpdateRule::Plain),
        Some(other) => {
            Err(Error::Config(format!("unknown algorithm.update {other:?} (plain, adam)")))
        }
    }
}

impl AlgorithmSpec {
    pub fn parse(cfg: &ConfigMap) -> Result<Self> {
        let early = cfg.get_f64("algorithm", "early_stop_mse")?;
        Ok(match cfg.require("algorithm", "kind")? {
            "pnp_gd" => {
                let mut c = GDConfig::plain(
                    cfg.require_f64("algorithm", "mu")?,
                    cfg.require_f64("algorithm", "sigma")?,
                    cfg.require_usize("algorithm", "iters")?,
                );
                c.update = parse_update(cfg)?;
                c.self_ensemble = cfg.get_bool("algorithm", "self_ensemble")?.unwrap_or(false);
                c.early_stop_mse = early;
                AlgorithmSpec::Gd(c)
            }
            "red_gd" => {
                let mut c = REDConfig::plain(
                    cfg.require_f64("algorithm", "weight")?,
                    cfg.require_f64("algorithm", "sigma_f")?,
                    cfg.require_f64("algorithm", "mu")?,
                    cfg.require_usize("algorithm", "iters")?,
                );
                c.update = parse_update(cfg)?;
                c.early_stop_mse = early;
                AlgorithmSpec::Red(c)
            }
            "pnp_admm" => AlgorithmSpec::Admm {
                s_first: cfg.require_f64("algorithm", "s_first")?,
                s_last: cfg.require_f64("algorithm", "s_last")?,
                iters: cfg.require_usize("algorithm", "iters")?,
                early_stop_mse: early,
            },
            "map" => AlgorithmSpec::Map { sigma: cfg.require_f64("algorithm", "sigma")? },
            other => {
                return Err(Error::Config(format!(
                    "unknown algorithm.kind {other:?} (pnp_gd, red_gd, pnp_admm, map)"
                )))
            }
        })
    }
}

/// Prior selection before loading.
#[derive(Debug, Clone)]
pub enum PriorSpec {
    Tikhonov,
    Laplacian,
    GradNet { checkpoint: PathBuf },
    Denoiser { checkpoint: PathBuf },
}

impl PriorSpec {
    pub fn parse(cfg: &ConfigMap) -> Result<Self> {
        let need_ckpt = |cfg: &ConfigMap| -> Result<PathBuf> {
            let p = PathBuf::from(cfg.require("prior", "checkpoint")?);
            if !p.exists() {
                return Err(Error::Config(format!("prior.checkpoint {p:?} does not exist")));
            }
            Ok(p)
        };
        Ok(match cfg.require("prior", "kind")? {
            "tikhonov" => PriorSpec::Tikhonov,
            "laplacian" => PriorSpec::Laplacian,
            "grad_net" => PriorSpec::GradNet { checkpoint: need_ckpt(cfg)? },
            "denoiser" => PriorSpec::Denoiser { checkpoint: need_ckpt(cfg)? },
            other => {
                return Err(Error::Config(format!(
                    "unknown prior.kind {other:?} (tikhonov, laplacian, grad_net, denoiser)"
                )))
            }
        })
    }

    pub fn load<T: Scalar>(&self) -> Result<LoadedPrior<T>> {
        Ok(match self {
            PriorSpec::Tikhonov => LoadedPrior::Tikhonov(TikhonovPrior),
            PriorSpec::Laplacian => LoadedPrior::Laplacian(LaplacianPrior),
            PriorSpec::GradNet { checkpoint } => {
                let (unet, _) = load_checkpoint::<T>(checkpoint)?;
                LoadedPrior::GradNet(RegGradNet::from_unet(unet)?)
            }
            PriorSpec::Denoiser { checkpoint } => {
                let (unet, _) = load_checkpoint::<T>(checkpoint)?;
                LoadedPrior::Denoiser(DenoiserNet::from_unet(unet)?)
            }
        })
    }
}

/// A prior ready to run.
pub enum LoadedPrior<T: Scalar> {
    Tikhonov(TikhonovPrior),
    Laplacian(LaplacianPrior),
    GradNet(RegGradNet<T>),
    Denoiser(DenoiserNet<T>),
}

impl<T: Scalar> LoadedPrior<T> {
    pub fn as_prior(&self) -> &dyn Prior<T> {
        match self {
            LoadedPrior::Tikhonov(p) => p,
            LoadedPrior::Laplacian(p) => p,
            LoadedPrior::GradNet(p) => p,
            LoadedPrior::Denoiser(p) => p,
        }
    }

    /// Analytic quadratic priors admit the dense closed-form solver.
    pub fn is_analytic(&self) -> bool {
        matches!(self, LoadedPrior::Tikhonov(_) | LoadedPrior::Laplacian(_))
    }
}

/// Reject algorithm/prior combinations before any work starts.
pub fn check_compatibility<T: Scalar>(
    alg: &AlgorithmSpec,
    prior: &LoadedPrior<T>,
) -> Result<()> {
    let p = prior.as_prior();
    match alg {
        AlgorithmSpec::Gd(cfg) => {
            if cfg.sigma > 0.0 && !p.has_grad() {
                return Err(Error::Config(
                    "gradient descent needs a prior with a gradient (tikhonov, laplacian, grad_net)"
                        .into(),
                ));
            }
        }
        AlgorithmSpec::Red(cfg) => {
            if cfg.weight > 0.0 && !p.has_prox() {
                return Err(Error::Config(
                    "residual regularization needs a denoising prior (tikhonov, laplacian, denoiser)"
                        .into(),
                ));
            }
        }
        AlgorithmSpec::Admm { .. } => {
            if !p.has_prox() {
                return Err(Error::Config(
                    "the splitting scheme needs a denoising prior (tikhonov, laplacian, denoiser)"
                        .into(),
                ));
            }
        }
        AlgorithmSpec::Map { .. } => {
            if !prior.is_analytic() {
                return Err(Error::Config(
                    "the closed-form solver needs an analytic quadratic prior".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Where ground-truth images come from.
#[derive(Debug, Clone)]
pub enum DataSpec {
    Images(Vec<PathBuf>),
    Synthetic { count: usize, size: usize, channels: usize },
}

impl DataSpec {
    pub fn parse(cfg: &ConfigMap) -> Result<Self> {
        if let Some(path) = cfg.get("data", "images") {
            let path = Path::new(path);
            if !path.exists() {
                return Err(Error::Config(format!("data.images {path:?} does not exist")));
            }
            let mut files = Vec::new();
            if path.is_dir() {
                for entry in std::fs::read_dir(path)? {
                    let p = entry?.path();
                    if p.extension().map(|e| e == "png").unwrap_or(false) {
                        files.push(p);
                    }
                }
                files.sort();
                if files.is_empty() {
                    return Err(Error::Config(format!("no .png files under {path:?}")));
                }
            } else {
                files.push(path.to_path_buf());
            }
            return Ok(DataSpec::Images(files));
        }
        let count = cfg.get_usize("data", "synthetic_count")?.unwrap_or(0);
        if count == 0 {
            return Err(Error::Config(
                "data needs either images = PATH or synthetic_count >= 1".into(),
            ));
        }
        Ok(DataSpec::Synthetic {
            count,
            size: cfg.get_usize("data", "synthetic_size")?.unwrap_or(32),
            channels: cfg.get_usize("data", "channels")?.unwrap_or(1),
        })
    }

    pub fn load<T: Scalar>(&self, seed: u64) -> Result<Vec<(String, Tensor<T>)>> {
        match self {
            DataSpec::Images(paths) => paths
                .iter()
                .map(|p| {
                    let name = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "image".into());
                    Ok((name, load_png(p)?))
                })
                .collect(),
            DataSpec::Synthetic { count, size, channels } => {
                let imgs = synthetic_images(*count, *channels, *size, *size, seed)?;
                Ok(imgs
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| (format!("synthetic{i:03}"), t))
                    .collect())
            }
        }
    }
}

/// Fully parsed experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub algorithm: AlgorithmSpec,
    pub prior: PriorSpec,
    pub data: DataSpec,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub save_images: bool,
    pub save_traces: bool,
    pub echo: String,
}

impl ExperimentConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        map.check_schema(CONFIG_SCHEMA)?;
        Ok(ExperimentConfig {
            task: TaskSpec::parse(map)?,
            algorithm: AlgorithmSpec::parse(map)?,
            prior: PriorSpec::parse(map)?,
            data: DataSpec::parse(map)?,
            seed: map.get_u64("experiment", "seed")?.unwrap_or(0),
            out_dir: map.get("output", "dir").map(PathBuf::from),
            save_images: map.get_bool("output", "save_images")?.unwrap_or(true),
            save_traces: map.get_bool("output", "save_traces")?.unwrap_or(true),
            echo: map.to_text(),
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&ConfigMap::parse(text)?)
    }
}

/// One restored image.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub name: String,
    pub psnr_input: Option<f64>,
    pub psnr_output: Option<f64>,
    pub trace: SolveTrace,
    pub error: Option<String>,
}

/// Experiment outcome. `runtime_seconds` is informational only and never
/// written to report files.
#[derive(Debug, Clone)]
pub struct Report {
    pub images: Vec<ImageResult>,
    pub mean_psnr_input: Option<f64>,
    pub mean_psnr_output: Option<f64>,
    pub runtime_seconds: f64,
    pub trace_files: Vec<PathBuf>,
    pub config_echo: String,
    pub failed: usize,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl Report {
    /// Per-image CSV: `name,psnr_input,psnr_output,error`.
    pub fn to_csv(&self) -> String {
        let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("name,psnr_input,psnr_output,error\n");
        for r in &self.images {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.name,
                cell(&r.psnr_input),
                cell(&r.psnr_output),
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }

    /// Human-readable summary plus the config echo; no wall-clock content.
    pub fn to_text(&self) -> String {
        let fmt = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".into(),
        };
        let mut out = String::new();
        out.push_str("image                     psnr_in    psnr_out\n");
        for r in &self.images {
            out.push_str(&format!(
                "{:<24} {:>9} {:>11}{}\n",
                r.name,
                fmt(&r.psnr_input),
                fmt(&r.psnr_output),
                r.error.as_deref().map(|e| format!("  ERROR {e}")).unwrap_or_default()
            ));
        }
        out.push_str(&format!(
            "mean                     {:>9} {:>11}\n",
            fmt(&self.mean_psnr_input),
            fmt(&self.mean_psnr_output)
        ));
        if self.failed > 0 {
            out.push_str(&format!("failed images: {}\n", self.failed));
        }
        out.push_str("\n# config\n");
        out.push_str(&self.config_echo);
        out
    }
}

struct SolveOutput<T: Scalar> {
    restored: Tensor<T>,
    trace: SolveTrace,
}

fn solve_one<T: Scalar>(
    alg: &AlgorithmSpec,
    op: &LinearOperator<T>,
    prior: &LoadedPrior<T>,
    y: &Tensor<T>,
    x0: &Tensor<T>,
    gt: &Tensor<T>,
    sigma_n: f64,
    record: bool,
) -> Result<SolveOutput<T>> {
    let mut trace = SolveTrace::new();
    let p = prior.as_prior();
    let restored = match alg {
        AlgorithmSpec::Gd(cfg) => {
            let mut cfg = cfg.clone();
            cfg.record_trace = record;
            pnp_gd(y, op, p, &cfg, x0, Some(gt), &mut trace)?
        }
        AlgorithmSpec::Red(cfg) => {
            let mut cfg = cfg.clone();
            cfg.record_trace = record;
            red_gd(y, op, p, &cfg, x0, Some(gt), &mut trace)?
        }
        AlgorithmSpec::Admm { s_first, s_last, iters, early_stop_mse } => {
            let mut cfg = ADMMConfig::new(sigma_n, *s_first, *s_last, *iters)?;
            cfg.record_trace = record;
            cfg.early_stop_mse = *early_stop_mse;
            pnp_admm(y, op, p, &cfg, x0, Some(gt), &mut trace)?
        }
        AlgorithmSpec::Map { sigma } => map_closed_form(op, y, p, *sigma)?,
    };
    Ok(SolveOutput { restored, trace })
}

fn run_image<T: Scalar>(
    cfg: &ExperimentConfig,
    prior: &LoadedPrior<T>,
    index: usize,
    name: &str,
    gt: &Tensor<T>,
) -> (ImageResult, Option<Tensor<T>>) {
    let attempt = || -> Result<(f64, f64, SolveTrace, Tensor<T>)> {
        let (_, c, h, w) = gt.dims4()?;
        let spec = cfg.task.spec_for(index, cfg.seed)?;
        let op = build_operator(&spec, (c, h, w))?;
        let y = add_awgn(&op.apply(gt)?, cfg.task.sigma_n, cfg.seed.wrapping_add(index as u64));
        let x0 = initial_estimate(&op, &y)?;
        let psnr_input = psnr(&x0, gt, 1.0)?;
        let out = solve_one(&cfg.algorithm, &op, prior, &y, &x0, gt, cfg.task.sigma_n, cfg.save_traces)?;
        let psnr_output = psnr(&out.restored, gt, 1.0)?;
        Ok((psnr_input, psnr_output, out.trace, out.restored))
    };
    match attempt() {
        Ok((pi, po, trace, restored)) => (
            ImageResult {
                name: name.to_string(),
                psnr_input: Some(pi),
                psnr_output: Some(po),
                trace,
                error: None,
            },
            Some(restored),
        ),
        Err(e) => (
            ImageResult {
                name: name.to_string(),
                psnr_input: None,
                psnr_output: None,
                trace: SolveTrace::new(),
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

/// Run the configured experiment over the whole dataset. Image runs are
/// independent, each seeded by the base seed plus its index, so `jobs > 1`
/// changes nothing but wall-clock time. Failures of single images are
/// recorded in the report instead of aborting the run.
pub fn run_experiment<T: Scalar + Send + Sync>(
    cfg: &ExperimentConfig,
    jobs: usize,
) -> Result<Report> {
    let data = cfg.data.load::<T>(cfg.seed)?;
    let prior = cfg.prior.load::<T>()?;
    check_compatibility(&cfg.algorithm, &prior)?;

    let started = Instant::now();
    let outcomes: Vec<(ImageResult, Option<Tensor<T>>)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| {
            data.par_iter()
                .enumerate()
                .map(|(i, (name, gt))| run_image(cfg, &prior, i, name, gt))
                .collect()
        })
    } else {
        data.iter()
            .enumerate()
            .map(|(i, (name, gt))| run_image(cfg, &prior, i, name, gt))
            .collect()
    };
    let runtime_seconds = started.elapsed().as_secs_f64();

    let mut trace_files = Vec::new();
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        for (result, restored) in &outcomes {
            if cfg.save_images {
                if let Some(img) = restored {
                    save_png(&dir.join(format!("{}_restored.png", result.name)), img)?;
                }
            }
            if cfg.save_traces && !result.trace.iterate_mse.is_empty() {
                let path = dir.join(format!("{}_trace.csv", result.name));
                std::fs::write(&path, trace_to_csv(&result.trace))?;
                trace_files.push(path);
            }
        }
    }

    let images: Vec<ImageResult> = outcomes.into_iter().map(|(r, _)| r).collect();
    let report = Report {
        mean_psnr_input: mean_of(images.iter().filter_map(|r| r.psnr_input)),
        mean_psnr_output: mean_of(images.iter().filter_map(|r| r.psnr_output)),
        failed: images.iter().filter(|r| r.error.is_some()).count(),
        runtime_seconds,
        trace_files,
        config_echo: cfg.echo.clone(),
        images,
    };

    if let Some(dir) = &cfg.out_dir {
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        std::fs::write(dir.join("report.txt"), report.to_text())?;
        let curves: Vec<(String, Vec<f64>)> = report
            .images
            .iter()
            .filter(|r| !r.trace.psnr.is_empty())
            .map(|r| (r.name.clone(), r.trace.psnr.clone()))
            .collect();
        if !curves.is_empty() {
            let series: Vec<Series> = curves
                .iter()
                .map(|(n, v)| Series { name: n, values: v })
                .collect();
            std::fs::write(
                dir.join("psnr.svg"),
                line_chart_svg("PSNR over iterations", "psnr [dB]", &series, false),
            )?;
        }
    }
    Ok(report)
}

/// One oracle check outcome.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub metric: f64,
    pub threshold: f64,
}

impl CheckResult {
    fn from_metric(name: &str, metric: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.into(),
            pass: metric.is_finite() && metric <= threshold,
            metric,
            threshold,
        }
    }
}

/// Serialize check results as CSV: `name,pass,metric,threshold`.
pub fn selfcheck_csv(results: &[CheckResult]) -> String {
    let mut out = String::from("name,pass,metric,threshold\n");
    for r in results {
        out.push_str(&format!("{},{},{},{}\n", r.name, r.pass, r.metric, r.threshold));
    }
    out
}

fn adjoint_check_metric(seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<(DegradationSpec, (usize, usize, usize))> = vec![
        (DegradationSpec::Identity, (1, 11, 9)),
        (DegradationSpec::Blur(BlurSpec::gaussian(5, 1.3)?), (3, 12, 10)),
        (DegradationSpec::Downscale(SRSpec::new(2, SrKernel::Bicubic)?), (1, 16, 12)),
        (DegradationSpec::Downscale(SRSpec::new(3, SrKernel::Gaussian)?), (1, 15, 12)),
        (DegradationSpec::Inpaint(MaskSpec::new(0.4, 11)?), (2, 10, 10)),
    ];
    let mut worst = 0.0f64;
    for (spec, chw) in specs {
        let op: LinearOperator<f64> = build_operator(&spec, chw)?;
        let (ci, hi, wi) = op.in_chw();
        let (co, ho, wo) = op.out_chw();
        for _ in 0..10 {
            let x: Tensor<f64> = Tensor::randn(&[1, ci, hi, wi], 1.0, &mut rng);
            let y: Tensor<f64> = Tensor::randn(&[1, co, ho, wo], 1.0, &mut rng);
            let ax = op.apply(&x)?;
            let aty = op.adjoint(&y)?;
            let lhs = ax.dot(&y)?;
            let rhs = x.dot(&aty)?;
            let scale = ax.norm() * y.norm() + 1e-30;
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    Ok(worst)
}

fn residual_identity_metric(seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let priors: [&dyn Prior<f64>; 2] = [&TikhonovPrior, &LaplacianPrior];
    let mut worst = 0.0f64;
    for _ in 0..50 {
        for prior in priors {
            let z: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
            let sigma: f64 = {
                use rand::Rng;
                rng.gen_range(1e-3..SIGMA_MAX)
            };
            let den = prior.prox(&z, sigma)?;
            let mut gap = prior.grad(&den)?.scale(sigma * sigma);
            gap.axpy_assign(-1.0, &z.sub(&den)?)?;
            worst = worst.max(gap.max_abs());
        }
    }
    Ok(worst)
}

fn solver_equivalence_metric(seed: u64) -> Result<f64> {
    let sigma_reg = 0.3;
    let specs: Vec<DegradationSpec> = vec![
        DegradationSpec::Blur(BlurSpec::gaussian(5, 1.4)?),
        DegradationSpec::Inpaint(MaskSpec::new(0.5, seed.wrapping_add(77))?),
        DegradationSpec::Downscale(SRSpec::new(2, SrKernel::Bicubic)?),
    ];
    let mut worst = 0.0f64;
    for (t, spec) in specs.iter().enumerate() {
        let images = synthetic_images::<f64>(3, 1, 16, 16, seed.wrapping_add(t as u64))?;
        for (i, gt) in images.iter().enumerate() {
            let op = build_operator(spec, (1, 16, 16))?;
            let y = add_awgn(&op.apply(gt)?, 0.01, seed.wrapping_add((t * 10 + i) as u64));
            let x0 = initial_estimate(&op, &y)?;

            let mut gd_cfg = GDConfig::plain(0.4, sigma_reg, 4000);
            gd_cfg.record_trace = false;
            gd_cfg.early_stop_mse = Some(1e-28);
            let mut tr = SolveTrace::new();
            let via_gd = pnp_gd(&y, &op, &TikhonovPrior, &gd_cfg, &x0, None, &mut tr)?;

            let mut admm_cfg = ADMMConfig::new(sigma_reg, 0.5, 0.5, 600)?;
            admm_cfg.record_trace = false;
            admm_cfg.early_stop_mse = Some(1e-26);
            let mut tr = SolveTrace::new();
            let via_admm = pnp_admm(&y, &op, &TikhonovPrior, &admm_cfg, &x0, None, &mut tr)?;

            let via_map = map_closed_form(&op, &y, &TikhonovPrior, sigma_reg)?;

            let rel = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
                Ok(a.sub(b)?.norm() / b.norm().max(1e-30))
            };
            worst = worst.max(rel(&via_gd, &via_map)?);
            worst = worst.max(rel(&via_admm, &via_map)?);
            worst = worst.max(rel(&via_gd, &via_admm)?);
        }
    }
    Ok(worst)
}

fn schedule_metric() -> Result<f64> {
    let (_, alpha) = admm_schedule(0.01, 0.2, 0.2, 30)?;
    let (rho0, _) = admm_schedule(2.55 / 255.0, 50.0 / 255.0, 0.1 / 255.0, 25)?;
    Ok((alpha - 1.0).abs().max((rho0 - 0.002601).abs()))
}

fn gradient_check_metric(seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = DenoiserNet::<f64>::new(1, 1, 2, 1, seed)?;
    let g = RegGradNet::<f64>::new(1, 1, 2, 1, seed.wrapping_add(9))?;
    let x0: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
    let z = add_awgn(&x0, 0.1, seed.wrapping_add(3));
    let nd = d.unet().params().len();
    let mut inputs: Vec<Tensor<f64>> = d.unet().params().to_vec();
    inputs.extend_from_slice(g.unet().params());
    let report = grad_check(&inputs, &|tape, leaves| {
        let (d_leaves, g_leaves) = leaves.split_at(nd);
        let zn = tape.constant(z.clone());
        let x0n = tape.constant(x0.clone());
        let ld = crate::training::loss_ld_traced(tape, &d, d_leaves, zn, x0n, 0.1)?;
        let lg = crate::training::loss_lg_traced(tape, &g, g_leaves, &d, d_leaves, zn, 0.1)?;
        let lgs = tape.scale(lg, 0.004);
        tape.add(ld, lgs)
    })?;
    Ok(report.max_err)
}

/// Run the oracle suite: operator adjoints, the residual identity of the
/// analytic priors, agreement of the three solver routes on quadratic
/// problems, the penalty-schedule arithmetic and a finite-difference probe of
/// the training losses. Deterministic for a fixed seed.
pub fn selfcheck(seed: u64) -> Vec<CheckResult> {
    let run = |name: &str, threshold: f64, f: &dyn Fn() -> Result<f64>| match f() {
        Ok(metric) => CheckResult::from_metric(name, metric, threshold),
        Err(e) => {
            log::error!("selfcheck {name} failed to run: {e}");
            CheckResult { name: name.into(), pass: false, metric: f64::NAN, threshold }
        }
    };
    vec![
        run("operator_adjoint_identity", 1e-10, &|| adjoint_check_metric(seed)),
        run("residual_identity_analytic", 1e-9, &|| residual_identity_metric(seed)),
        run("solver_equivalence", 1e-5, &|| solver_equivalence_metric(seed)),
        run("penalty_schedule_arithmetic", 1e-12, &schedule_metric),
        run("training_loss_gradients", 1e-5, &|| gradient_check_metric(seed)),
    ]
}

/// Ablation outcome: identical restorations driven by the jointly trained
/// and the frozen-denoiser gradient networks, plus held-out residual errors.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub psnr_joint: Vec<f64>,
    pub psnr_frozen: Vec<f64>,
    pub curves_joint: Vec<Vec<f64>>,
    pub curves_frozen: Vec<Vec<f64>>,
    pub residual_joint: f64,
    pub residual_frozen: f64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_joint,psnr_frozen\n");
        for i in 0..self.psnr_joint.len() {
            out.push_str(&format!("{},{},{}\n", i, self.psnr_joint[i], self.psnr_frozen[i]));
        }
        out.push_str(&format!(
            "residual_identity,{},{}\n",
            self.residual_joint, self.residual_frozen
        ));
        out
    }
}

/// Run pnp_gd restorations of the same degraded images with two trained
/// pairs and compare them, including per-iteration PSNR curves and held-out
/// residual-identity errors.
#[allow(clippy::too_many_arguments)]
pub fn ablation_fixed_vs_joint<T: Scalar>(
    joint: (&DenoiserNet<T>, &RegGradNet<T>),
    frozen: (&DenoiserNet<T>, &RegGradNet<T>),
    images: &[Tensor<T>],
    spec: &DegradationSpec,
    sigma_n: f64,
    gd: &GDConfig,
    heldout: &PatchDataset<T>,
    probes: usize,
    seed: u64,
) -> Result<AblationReport> {
    if images.is_empty() {
        return Err(Error::arg("ablation needs at least one image"));
    }
    let mut report = AblationReport {
        psnr_joint: Vec::new(),
        psnr_frozen: Vec::new(),
        curves_joint: Vec::new(),
        curves_frozen: Vec::new(),
        residual_joint: crate::training::heldout_residual_error(
            joint.1, joint.0, heldout, probes, SIGMA_MAX, seed,
        )?,
        residual_frozen: crate::training::heldout_residual_error(
            frozen.1, frozen.0, heldout, probes, SIGMA_MAX, seed,
        )?,
    };
    let mut cfg = gd.clone();
    cfg.record_trace = true;
    for (i, gt) in images.iter().enumerate() {
        let (_, c, h, w) = gt.dims4()?;
        let op = build_operator(spec, (c, h, w))?;
        let y = add_awgn(&op.apply(gt)?, sigma_n, seed.wrapping_add(i as u64));
        let x0 = initial_estimate(&op, &y)?;
        for (g, psnrs, curves) in [
            (joint.1, &mut report.psnr_joint, &mut report.curves_joint),
            (frozen.1, &mut report.psnr_frozen, &mut report.curves_frozen),
        ] {
            let mut trace = SolveTrace::new();
            let x = pnp_gd(&y, &op, g, &cfg, &x0, Some(gt), &mut trace)?;
            psnrs.push(psnr(&x, gt, 1.0)?);
            curves.push(trace.psnr);
        }
    }
    Ok(report)
}

/// Run the splitting scheme with two different denoisers on one degraded
/// image and return both traces, for stability comparison plots.
pub fn admm_stability_study<T: Scalar>(
    d_a: &dyn Prior<T>,
    d_b: &dyn Prior<T>,
    image: &Tensor<T>,
    spec: &DegradationSpec,
    sigma_n: f64,
    cfg: &ADMMConfig,
    seed: u64,
) -> Result<(SolveTrace, SolveTrace)> {
    let (_, c, h, w) = image.dims4()?;
    let op = build_operator(spec, (c, h, w))?;
    let y = add_awgn(&op.apply(image)?, sigma_n, seed);
    let x0 = initial_estimate(&op, &y)?;
    let mut cfg = cfg.clone();
    cfg.record_trace = true;
    let mut trace_a = SolveTrace::new();
    pnp_admm(&y, &op, d_a, &cfg, &x0, Some(image), &mut trace_a)?;
    let mut trace_b = SolveTrace::new();
    pnp_admm(&y, &op, d_b, &cfg, &x0, Some(image), &mut trace_b)?;
    Ok((trace_a, trace_b))
}

/// Relative asymmetry `|J - J^T|_F / |J|_F` of the gradient network's
/// Jacobian at `x`, measured by one reverse-mode sweep per output
/// coordinate. A field that is truly a gradient of a scalar potential has a
/// symmetric Jacobian, so this quantifies how far the network is from one.
pub fn jacobian_asymmetry<T: Scalar>(g: &RegGradNet<T>, x: &Tensor<T>) -> Result<f64> {
    let (n_batch, _, _, _) = x.dims4()?;
    if n_batch != 1 {
        return Err(Error::Unsupported("jacobian probe handles one image at a time".into()));
    }
    let n = x.numel();
    if n > 1024 {
        return Err(Error::Unsupported(format!(
            "jacobian probe is capped at 1024 unknowns, got {n}"
        )));
    }
    let mut jac = vec![0.0f64; n * n];
    for i in 0..n {
        let mut tape = Tape::new();
        let params = g.unet().insert_constants(&mut tape);
        let leaf = tape.leaf(x.clone(), true);
        let out = g.grad_traced(&mut tape, &params, leaf)?;
        let mut pick = Tensor::<T>::zeros(x.shape());
        pick.data_mut()[i] = T::from_f64(1.0);
        let pick = tape.constant(pick);
        let prod = tape.mul(out, pick)?;
        let s = tape.sum_all(prod);
        tape.backward(s)?;
        let row = tape
            .grad(leaf)
            .ok_or_else(|| Error::Numeric("no gradient reached the probe input".into()))?;
        for (j, v) in row.data().iter().enumerate() {
            jac[i * n + j] = (*v).to_f64();
        }
    }
    let mut asym = 0.0f64;
    let mut total = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let a = jac[i * n + j];
            total += a * a;
            let d = a - jac[j * n + i];
            asym += d * d;
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok((asym / total).sqrt())
}
