//! Verb implementations. Every verb reads its parameters from the config
//! map (after `--set`/`--seed`/`--out` overrides) and prints fixed result
//! columns to stdout.

use std::path::{Path, PathBuf};

use pnpgrad::harness::{
    ablation_fixed_vs_joint, admm_stability_study, jacobian_asymmetry, line_chart_svg,
    run_experiment, selfcheck, selfcheck_csv, trace_to_csv, AlgorithmSpec, ConfigMap,
    DataSpec, ExperimentConfig, LoadedPrior, Report, Series, TaskSpec,
};
use pnpgrad::priors::checkpoint::{load_checkpoint, save_checkpoint};
use pnpgrad::priors::net::{DenoiserNet, RegGradNet, SIGMA_MAX};
use pnpgrad::priors::{LaplacianPrior, TikhonovPrior};
use pnpgrad::solvers::ADMMConfig;
use pnpgrad::tensor::Scalar;
use pnpgrad::training::{
    eval_denoiser_ld, heldout_residual_error, joint_train, pretrain_denoiser_into, PatchDataset,
    TrainLog,
};
use pnpgrad::{Error, Result, Tensor};

use crate::traincfg::TrainSetup;
use crate::{Cli, Command};

pub const EVAL_SCHEMA: &[(&str, &[&str])] = &[
    ("eval", &["probes", "sigma_max", "patch_size", "jacobian", "jacobian_size"]),
    ("model", &["denoiser", "grad_net"]),
    ("data", &["images", "synthetic_count", "synthetic_size", "channels"]),
    ("experiment", &["seed"]),
];

pub const STUDY_SCHEMA: &[(&str, &[&str])] = &[
    (
        "study",
        &[
            "kind",
            "probes",
            "patch_size",
            "denoiser_joint",
            "grad_joint",
            "denoiser_frozen",
            "grad_frozen",
            "prior_a",
            "prior_b",
        ],
    ),
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
    ("data", &["images", "synthetic_count", "synthetic_size", "channels"]),
    ("output", &["dir"]),
    ("experiment", &["seed"]),
];

pub fn dispatch(cli: Cli) -> Result<()> {
    if matches!(cli.command, Command::Selfcheck) {
        return cmd_selfcheck(&cli);
    }
    let map = load_map(&cli)?;
    if cli.fp64 {
        run_verb::<f64>(&cli, &map)
    } else {
        run_verb::<f32>(&cli, &map)
    }
}

fn run_verb<T: Scalar + Send + Sync>(cli: &Cli, map: &ConfigMap) -> Result<()> {
    match cli.command {
        Command::Pretrain => cmd_pretrain::<T>(map),
        Command::TrainJoint => cmd_train_joint::<T>(map),
        Command::Restore => cmd_restore::<T>(cli, map),
        Command::Eval => cmd_eval::<T>(map),
        Command::Study => cmd_study::<T>(map),
        Command::Selfcheck => unreachable!("handled before config loading"),
    }
}

fn load_map(cli: &Cli) -> Result<ConfigMap> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = ConfigMap::parse(&text)?;
    for spec in &cli.set {
        map.apply_override(spec)?;
    }
    if let Some(seed) = cli.seed {
        map.put("experiment", "seed", &seed.to_string());
    }
    if let Some(out) = &cli.out {
        map.put("output", "dir", &out.to_string_lossy());
    }
    Ok(map)
}

fn cmd_selfcheck(cli: &Cli) -> Result<()> {
    let results = selfcheck(cli.seed.unwrap_or(0));
    for r in &results {
        println!(
            "{} {} {:e} {:e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.metric,
            r.threshold
        );
    }
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("selfcheck.csv"), selfcheck_csv(&results))?;
    }
    let failed: Vec<&str> =
        results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("selfcheck failed: {}", failed.join(", "))))
    }
}

fn write_training_outputs(dir: &Path, log: &TrainLog) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("training.csv"), log.to_csv())?;
    let loss: Vec<f64> = log.rows.iter().map(|r| r.loss).collect();
    let loss_d: Vec<f64> = log.rows.iter().map(|r| r.loss_d).collect();
    let series = [
        Series { name: "loss", values: &loss },
        Series { name: "loss_d", values: &loss_d },
    ];
    std::fs::write(
        dir.join("loss.svg"),
        line_chart_svg("training loss", "loss", &series, true),
    )?;
    Ok(())
}

fn print_training_summary(log: &TrainLog) {
    let first = log.rows.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("steps {}", log.rows.len());
    println!("loss_first {first}");
    println!("loss_last {last}");
}

fn cmd_pretrain<T: Scalar>(map: &ConfigMap) -> Result<()> {
    let setup = TrainSetup::from_map(map)?;
    let dataset = setup.dataset::<T>()?;
    let mut d = match &setup.denoiser_init {
        Some(path) => DenoiserNet::from_unet(load_checkpoint::<T>(path)?.0)?,
        None => DenoiserNet::new(
            dataset.channels(),
            setup.scales,
            setup.base_channels,
            setup.blocks_per_scale,
            setup.train.seed,
        )?,
    };
    log::info!("pretraining denoiser for {} steps", setup.train.steps);
    let log = pretrain_denoiser_into(&mut d, &dataset, &setup.train)?;
    write_training_outputs(&setup.out_dir, &log)?;
    save_checkpoint(&setup.out_dir.join("denoiser.ckpt"), d.unet(), setup.train.steps as u64)?;
    print_training_summary(&log);
    println!("checkpoint {}", setup.out_dir.join("denoiser.ckpt").display());
    Ok(())
}

fn cmd_train_joint<T: Scalar>(map: &ConfigMap) -> Result<()> {
    let setup = TrainSetup::from_map(map)?;
    let dataset = setup.dataset::<T>()?;
    let mut d = match &setup.denoiser_init {
        Some(path) => DenoiserNet::from_unet(load_checkpoint::<T>(path)?.0)?,
        None => DenoiserNet::new(
            dataset.channels(),
            setup.scales,
            setup.base_channels,
            setup.blocks_per_scale,
            setup.train.seed,
        )?,
    };
    let mut g = match &setup.grad_init {
        Some(path) => RegGradNet::from_unet(load_checkpoint::<T>(path)?.0)?,
        None => RegGradNet::new(
            dataset.channels(),
            setup.scales,
            setup.base_channels,
            setup.blocks_per_scale,
            setup.train.seed.wrapping_add(1),
        )?,
    };
    log::info!("joint training for {} steps", setup.train.steps);
    let log = joint_train(&mut d, &mut g, &dataset, &setup.train)?;
    write_training_outputs(&setup.out_dir, &log)?;
    save_checkpoint(&setup.out_dir.join("denoiser.ckpt"), d.unet(), setup.train.steps as u64)?;
    save_checkpoint(&setup.out_dir.join("grad_net.ckpt"), g.unet(), setup.train.steps as u64)?;
    print_training_summary(&log);
    println!("delta_rate {}", log.delta_rate());
    println!("checkpoint {}", setup.out_dir.join("grad_net.ckpt").display());
    Ok(())
}

fn print_report(report: &Report) {
    let cell = |v: &Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    };
    println!("image psnr_in psnr_out");
    for r in &report.images {
        println!("{} {} {}", r.name, cell(&r.psnr_input), cell(&r.psnr_output));
        if let Some(e) = &r.error {
            log::warn!("{} failed: {e}", r.name);
        }
    }
    println!("mean {} {}", cell(&report.mean_psnr_input), cell(&report.mean_psnr_output));
}

fn cmd_restore<T: Scalar + Send + Sync>(cli: &Cli, map: &ConfigMap) -> Result<()> {
    let cfg = ExperimentConfig::from_map(map)?;
    let report = run_experiment::<T>(&cfg, cli.jobs.max(1))?;
    log::info!("restored {} images in {:.1}s", report.images.len(), report.runtime_seconds);
    print_report(&report);
    if report.failed == report.images.len() {
        return Err(Error::Numeric(format!("all {} images failed", report.failed)));
    }
    Ok(())
}

fn eval_patches<T: Scalar>(map: &ConfigMap, patch: usize) -> Result<PatchDataset<T>> {
    let seed = map.get_u64("experiment", "seed")?.unwrap_or(0);
    let images: Vec<Tensor<T>> =
        DataSpec::parse(map)?.load::<T>(seed)?.into_iter().map(|(_, t)| t).collect();
    PatchDataset::new(images, patch, false)
}

fn cmd_eval<T: Scalar>(map: &ConfigMap) -> Result<()> {
    map.check_schema(EVAL_SCHEMA)?;
    let seed = map.get_u64("experiment", "seed")?.unwrap_or(0);
    let probes = map.get_usize("eval", "probes")?.unwrap_or(64);
    let sigma_max = map.get_f64("eval", "sigma_max")?.unwrap_or(SIGMA_MAX);
    let patch = map.get_usize("eval", "patch_size")?.unwrap_or(16);
    let dataset = eval_patches::<T>(map, patch)?;

    let d_path = map.require("model", "denoiser")?;
    let d = DenoiserNet::from_unet(load_checkpoint::<T>(Path::new(d_path))?.0)?;
    println!(
        "heldout_denoise_l1 {}",
        eval_denoiser_ld(&d, &dataset, probes, sigma_max, seed)?
    );

    if let Some(g_path) = map.get("model", "grad_net") {
        let g = RegGradNet::from_unet(load_checkpoint::<T>(Path::new(g_path))?.0)?;
        println!(
            "heldout_residual_identity {}",
            heldout_residual_error(&g, &d, &dataset, probes, sigma_max, seed)?
        );
        if map.get_bool("eval", "jacobian")?.unwrap_or(false) {
            let size = map.get_usize("eval", "jacobian_size")?.unwrap_or(8);
            let flat = Tensor::<T>::full(&[1, dataset.channels(), size, size], T::from_f64(0.5));
            let x = pnpgrad::degrade::add_awgn(&flat, 0.2, seed);
            println!("jacobian_asymmetry {}", jacobian_asymmetry(&g, &x)?);
        }
    }
    Ok(())
}

fn out_dir(map: &ConfigMap) -> Result<PathBuf> {
    let dir = map
        .get("output", "dir")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("this verb needs output.dir (or --out)".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn study_prior<T: Scalar>(map: &ConfigMap, key: &str) -> Result<LoadedPrior<T>> {
    Ok(match map.require("study", key)? {
        "tikhonov" => LoadedPrior::Tikhonov(TikhonovPrior),
        "laplacian" => LoadedPrior::Laplacian(LaplacianPrior),
        path => {
            if !Path::new(path).exists() {
                return Err(Error::Config(format!("study.{key} {path:?} does not exist")));
            }
            LoadedPrior::Denoiser(DenoiserNet::from_unet(load_checkpoint::<T>(Path::new(path))?.0)?)
        }
    })
}

fn load_net_pair<T: Scalar>(
    map: &ConfigMap,
    d_key: &str,
    g_key: &str,
) -> Result<(DenoiserNet<T>, RegGradNet<T>)> {
    let d_path = map.require("study", d_key)?;
    let g_path = map.require("study", g_key)?;
    for p in [d_path, g_path] {
        if !Path::new(p).exists() {
            return Err(Error::Config(format!("checkpoint {p:?} does not exist")));
        }
    }
    Ok((
        DenoiserNet::from_unet(load_checkpoint::<T>(Path::new(d_path))?.0)?,
        RegGradNet::from_unet(load_checkpoint::<T>(Path::new(g_path))?.0)?,
    ))
}

fn cmd_study<T: Scalar>(map: &ConfigMap) -> Result<()> {
    map.check_schema(STUDY_SCHEMA)?;
    match map.require("study", "kind")? {
        "ablation" => study_ablation::<T>(map),
        "admm_stability" => study_stability::<T>(map),
        other => Err(Error::Config(format!(
            "unknown study.kind {other:?} (ablation, admm_stability)"
        ))),
    }
}

fn study_ablation<T: Scalar>(map: &ConfigMap) -> Result<()> {
    let seed = map.get_u64("experiment", "seed")?.unwrap_or(0);
    let task = TaskSpec::parse(map)?;
    let gd = match AlgorithmSpec::parse(map)? {
        AlgorithmSpec::Gd(cfg) => cfg,
        _ => {
            return Err(Error::Config(
                "the ablation study drives pnp_gd; set algorithm.kind = pnp_gd".into(),
            ))
        }
    };
    let joint = load_net_pair::<T>(map, "denoiser_joint", "grad_joint")?;
    let frozen = load_net_pair::<T>(map, "denoiser_frozen", "grad_frozen")?;
    let images: Vec<Tensor<T>> =
        DataSpec::parse(map)?.load::<T>(seed)?.into_iter().map(|(_, t)| t).collect();
    let patch = map.get_usize("study", "patch_size")?.unwrap_or(16);
    let heldout = PatchDataset::new(images.clone(), patch, false)?;
    let probes = map.get_usize("study", "probes")?.unwrap_or(32);
    let spec = task.spec_for(0, seed)?;

    let report = ablation_fixed_vs_joint(
        (&joint.0, &joint.1),
        (&frozen.0, &frozen.1),
        &images,
        &spec,
        task.sigma_n,
        &gd,
        &heldout,
        probes,
        seed,
    )?;

    println!("image psnr_joint psnr_frozen");
    for i in 0..report.psnr_joint.len() {
        println!("{} {:.4} {:.4}", i, report.psnr_joint[i], report.psnr_frozen[i]);
    }
    println!("residual_identity {} {}", report.residual_joint, report.residual_frozen);

    let dir = out_dir(map)?;
    std::fs::write(dir.join("ablation.csv"), report.to_csv())?;
    let mut names = Vec::new();
    for i in 0..report.curves_joint.len() {
        names.push(format!("img{i}_joint"));
        names.push(format!("img{i}_frozen"));
    }
    let mut series = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let curve =
            if i % 2 == 0 { &report.curves_joint[i / 2] } else { &report.curves_frozen[i / 2] };
        series.push(Series { name, values: curve });
    }
    std::fs::write(
        dir.join("ablation_psnr.svg"),
        line_chart_svg("PSNR over iterations", "psnr [dB]", &series, false),
    )?;
    Ok(())
}

fn study_stability<T: Scalar>(map: &ConfigMap) -> Result<()> {
    let seed = map.get_u64("experiment", "seed")?.unwrap_or(0);
    let task = TaskSpec::parse(map)?;
    let (s_first, s_last, iters, early) = match AlgorithmSpec::parse(map)? {
        AlgorithmSpec::Admm { s_first, s_last, iters, early_stop_mse } => {
            (s_first, s_last, iters, early_stop_mse)
        }
        _ => {
            return Err(Error::Config(
                "the stability study drives pnp_admm; set algorithm.kind = pnp_admm".into(),
            ))
        }
    };
    let mut cfg = ADMMConfig::new(task.sigma_n, s_first, s_last, iters)?;
    cfg.early_stop_mse = early;
    let prior_a = study_prior::<T>(map, "prior_a")?;
    let prior_b = study_prior::<T>(map, "prior_b")?;
    let images = DataSpec::parse(map)?.load::<T>(seed)?;
    let (_, image) = images.first().ok_or_else(|| Error::Config("study needs an image".into()))?;
    let spec = task.spec_for(0, seed)?;

    let (trace_a, trace_b) = admm_stability_study(
        prior_a.as_prior(),
        prior_b.as_prior(),
        image,
        &spec,
        task.sigma_n,
        &cfg,
        seed,
    )?;

    println!("variant iters final_iterate_mse");
    for (name, trace) in [("a", &trace_a), ("b", &trace_b)] {
        println!(
            "{} {} {}",
            name,
            trace.iterate_mse.len(),
            trace.iterate_mse.last().copied().unwrap_or(f64::NAN)
        );
    }

    let dir = out_dir(map)?;
    std::fs::write(dir.join("stability_a_trace.csv"), trace_to_csv(&trace_a))?;
    std::fs::write(dir.join("stability_b_trace.csv"), trace_to_csv(&trace_b))?;
    let psnr_series = [
        Series { name: "a", values: &trace_a.psnr },
        Series { name: "b", values: &trace_b.psnr },
    ];
    std::fs::write(
        dir.join("stability_psnr.svg"),
        line_chart_svg("PSNR over iterations", "psnr [dB]", &psnr_series, false),
    )?;
    let mse_series = [
        Series { name: "a", values: &trace_a.iterate_mse },
        Series { name: "b", values: &trace_b.iterate_mse },
    ];
    std::fs::write(
        dir.join("stability_mse.svg"),
        line_chart_svg("iterate change", "mse", &mse_series, true),
    )?;
    Ok(())
}
