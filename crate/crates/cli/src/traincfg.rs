//! Config schema for the training verbs.

use std::path::PathBuf;

use pnpgrad::harness::{ConfigMap, DataSpec};
use pnpgrad::tensor::Scalar;
use pnpgrad::training::{PatchDataset, TrainConfig};
use pnpgrad::{Error, Result};

pub const TRAIN_SCHEMA: &[(&str, &[&str])] = &[
    (
        "training",
        &[
            "steps",
            "batch_size",
            "patch_size",
            "lambda",
            "sigma_max",
            "alternation",
            "lr0",
            "lr_half_period",
            "lr_floor",
            "freeze_denoiser",
            "lg_updates_denoiser",
            "augment",
        ],
    ),
    (
        "model",
        &["scales", "base_channels", "blocks_per_scale", "denoiser_init", "grad_init"],
    ),
    ("data", &["images", "synthetic_count", "synthetic_size", "channels"]),
    ("output", &["dir"]),
    ("experiment", &["seed"]),
];

/// Everything a training verb needs, resolved from the config file.
pub struct TrainSetup {
    pub train: TrainConfig,
    pub data: DataSpec,
    pub augment: bool,
    pub scales: usize,
    pub base_channels: usize,
    pub blocks_per_scale: usize,
    pub denoiser_init: Option<PathBuf>,
    pub grad_init: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn optional_path(map: &ConfigMap, key: &str) -> Result<Option<PathBuf>> {
    match map.get("model", key) {
        None => Ok(None),
        Some(p) => {
            let p = PathBuf::from(p);
            if !p.exists() {
                return Err(Error::Config(format!("model.{key} {p:?} does not exist")));
            }
            Ok(Some(p))
        }
    }
}

impl TrainSetup {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        map.check_schema(TRAIN_SCHEMA)?;
        let seed = map.get_u64("experiment", "seed")?.unwrap_or(0);
        let mut t = TrainConfig::desk(seed);
        if let Some(v) = map.get_usize("training", "steps")? {
            t.steps = v;
        }
        if let Some(v) = map.get_usize("training", "batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = map.get_usize("training", "patch_size")? {
            t.patch_size = v;
        }
        if let Some(v) = map.get_f64("training", "lambda")? {
            t.lambda = v;
        }
        if let Some(v) = map.get_f64("training", "sigma_max")? {
            t.sigma_max = v;
        }
        if let Some(v) = map.get_f64("training", "alternation")? {
            t.alternation = v;
        }
        if let Some(v) = map.get_f64("training", "lr0")? {
            t.lr0 = v;
        }
        if let Some(v) = map.get_usize("training", "lr_half_period")? {
            t.lr_half_period = v;
        }
        if let Some(v) = map.get_f64("training", "lr_floor")? {
            t.lr_floor = v;
        }
        if let Some(v) = map.get_bool("training", "freeze_denoiser")? {
            t.freeze_denoiser = v;
        }
        if let Some(v) = map.get_bool("training", "lg_updates_denoiser")? {
            t.lg_updates_denoiser = v;
        }
        t.validate()?;
        let out_dir = map
            .get("output", "dir")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("training needs output.dir for checkpoints".into()))?;
        Ok(TrainSetup {
            train: t,
            data: DataSpec::parse(map)?,
            augment: map.get_bool("training", "augment")?.unwrap_or(true),
            scales: map.get_usize("model", "scales")?.unwrap_or(2),
            base_channels: map.get_usize("model", "base_channels")?.unwrap_or(8),
            blocks_per_scale: map.get_usize("model", "blocks_per_scale")?.unwrap_or(2),
            denoiser_init: optional_path(map, "denoiser_init")?,
            grad_init: optional_path(map, "grad_init")?,
            out_dir,
        })
    }

    pub fn dataset<T: Scalar>(&self) -> Result<PatchDataset<T>> {
        let images: Vec<_> =
            self.data.load::<T>(self.train.seed)?.into_iter().map(|(_, t)| t).collect();
        PatchDataset::new(images, self.train.patch_size, self.augment)
    }
}
