//! Experiment configuration: a flat `key = value` file format where every
//! key is also a CLI flag of the same name. Parsing goes through a single
//! `apply` path so file values and flag overrides cannot drift apart.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::CorruptionKind;
use crate::error::{Error, Result};
use crate::model::HeadKind;
use crate::optim::{cosine_lr, LRSchedule};
use crate::reweight::ReweightMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Moons,
    Cifar10,
    Csv,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "moons" => Ok(DatasetKind::Moons),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(Error::invalid_config(
                "dataset",
                format!("unknown dataset '{other}' (blobs|moons|cifar10|csv)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Moons => "moons",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Csv => "csv",
        }
    }
}

/// Constant learning rate used after the averaging phase begins: either a
/// fixed value or half the cosine-annealed rate at the start epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SwaLr {
    Auto,
    Fixed(f64),
}

/// Every tunable of a run. Defaults are the desk-scale preset; `full_scale()`
/// restores the reference-scale schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub sigma_gap: f64,
    pub moons_noise: f64,
    pub long_tail_if: f64,
    pub noise_rate: f64,
    pub corruption_eval: Vec<CorruptionKind>,
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    pub temperature: f64,
    pub lambda_mix: f64,
    pub lambda_crl: f64,
    pub beta: f64,
    pub rho: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub swa: bool,
    pub swa_start: usize,
    pub swa_lr: SwaLr,
    pub val_fraction: f64,
    pub reweight: bool,
    pub reweight_map: String,
    pub reweight_param: f64,
    pub reweight_epochs: usize,
    pub reweight_lr: f64,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Blobs,
            data_path: None,
            num_classes: 10,
            samples_per_class: 200,
            test_per_class: 100,
            input_dim: 16,
            sigma_gap: 2.6,
            moons_noise: 0.2,
            long_tail_if: 1.0,
            noise_rate: 0.0,
            corruption_eval: Vec::new(),
            hidden: vec![32],
            head: HeadKind::Cosine,
            temperature: 8.0,
            lambda_mix: 1.0,
            lambda_crl: 1.0,
            beta: 10.0,
            rho: 0.05,
            lr: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 60,
            swa: true,
            swa_start: 36,
            swa_lr: SwaLr::Auto,
            val_fraction: 0.1,
            reweight: false,
            reweight_map: "exp".to_string(),
            reweight_param: 1.0,
            reweight_epochs: 50,
            reweight_lr: 0.01,
            seed: None,
            out_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset (the default).
    pub fn desk() -> Self {
        Self::default()
    }

    /// Reference-scale schedule: 200 epochs, averaging from 120 at a fixed
    /// 0.05, 50 re-weighting epochs at 5e-3.
    pub fn full_scale() -> Self {
        ExperimentConfig {
            epochs: 200,
            swa_start: 120,
            swa_lr: SwaLr::Fixed(0.05),
            reweight_epochs: 50,
            reweight_lr: 5e-3,
            ..Self::default()
        }
    }

    /// All recognized keys, in file order.
    pub fn known_keys() -> &'static [&'static str] {
        &[
            "dataset",
            "data_path",
            "num_classes",
            "samples_per_class",
            "test_per_class",
            "input_dim",
            "sigma_gap",
            "moons_noise",
            "long_tail_if",
            "noise_rate",
            "corruption_eval",
            "hidden",
            "head",
            "temperature",
            "lambda_mix",
            "lambda_crl",
            "beta",
            "rho",
            "lr",
            "lr_min",
            "momentum",
            "weight_decay",
            "batch_size",
            "epochs",
            "swa",
            "swa_start",
            "swa_lr",
            "val_fraction",
            "reweight",
            "reweight_map",
            "reweight_param",
            "reweight_epochs",
            "reweight_lr",
            "seed",
            "out_dir",
            "run_id",
        ]
    }

    /// Set one key from its textual value; the single entry point for both
    /// config files and command-line overrides.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        fn num<T: std::str::FromStr>(key: &'static str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::invalid_config(key, format!("cannot parse '{v}'")))
        }
        fn boolean(key: &'static str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(Error::invalid_config(key, format!("cannot parse '{v}' as bool"))),
            }
        }
        match key {
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "data_path" => {
                self.data_path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "num_classes" => self.num_classes = num("num_classes", value)?,
            "samples_per_class" => self.samples_per_class = num("samples_per_class", value)?,
            "test_per_class" => self.test_per_class = num("test_per_class", value)?,
            "input_dim" => self.input_dim = num("input_dim", value)?,
            "sigma_gap" => self.sigma_gap = num("sigma_gap", value)?,
            "moons_noise" => self.moons_noise = num("moons_noise", value)?,
            "long_tail_if" => self.long_tail_if = num("long_tail_if", value)?,
            "noise_rate" => self.noise_rate = num("noise_rate", value)?,
            "corruption_eval" => {
                self.corruption_eval = if value.is_empty() || value == "none" {
                    Vec::new()
                } else if value == "all" {
                    crate::data::CORRUPTION_KINDS.to_vec()
                } else {
                    value
                        .split(',')
                        .map(|s| CorruptionKind::parse(s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|s| num::<usize>("hidden", s.trim()))
                    .collect::<Result<_>>()?
            }
            "head" => self.head = HeadKind::parse(value)?,
            "temperature" => self.temperature = num("temperature", value)?,
            "lambda_mix" => self.lambda_mix = num("lambda_mix", value)?,
            "lambda_crl" => self.lambda_crl = num("lambda_crl", value)?,
            "beta" => self.beta = num("beta", value)?,
            "rho" => self.rho = num("rho", value)?,
            "lr" => self.lr = num("lr", value)?,
            "lr_min" => self.lr_min = num("lr_min", value)?,
            "momentum" => self.momentum = num("momentum", value)?,
            "weight_decay" => self.weight_decay = num("weight_decay", value)?,
            "batch_size" => self.batch_size = num("batch_size", value)?,
            "epochs" => self.epochs = num("epochs", value)?,
            "swa" => self.swa = boolean("swa", value)?,
            "swa_start" => self.swa_start = num("swa_start", value)?,
            "swa_lr" => {
                self.swa_lr = if value == "auto" {
                    SwaLr::Auto
                } else {
                    SwaLr::Fixed(num("swa_lr", value)?)
                }
            }
            "val_fraction" => self.val_fraction = num("val_fraction", value)?,
            "reweight" => self.reweight = boolean("reweight", value)?,
            "reweight_map" => self.reweight_map = value.to_string(),
            "reweight_param" => self.reweight_param = num("reweight_param", value)?,
            "reweight_epochs" => self.reweight_epochs = num("reweight_epochs", value)?,
            "reweight_lr" => self.reweight_lr = num("reweight_lr", value)?,
            "seed" => self.seed = Some(num("seed", value)?),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "run_id" => {
                self.run_id = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            other => {
                return Err(Error::invalid_config(
                    "config",
                    format!("unknown key '{other}'"),
                ))
            }
        }
        Ok(())
    }

    /// Parse a config file over the desk defaults: `key = value` lines, `#`
    /// comments, blank lines ignored.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 'key = value', got '{line}'", lineno + 1),
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Range-check every field; each failure names its key.
    pub fn validate(&self) -> Result<()> {
        let bad = Error::invalid_config;
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least 2"));
        }
        if self.samples_per_class == 0 {
            return Err(bad("samples_per_class", "must be positive"));
        }
        if self.test_per_class == 0 {
            return Err(bad("test_per_class", "must be positive"));
        }
        if self.input_dim == 0 {
            return Err(bad("input_dim", "must be positive"));
        }
        if !(self.sigma_gap.is_finite() && self.sigma_gap >= 0.0) {
            return Err(bad("sigma_gap", "must be finite and nonnegative"));
        }
        if !(self.moons_noise.is_finite() && self.moons_noise >= 0.0) {
            return Err(bad("moons_noise", "must be finite and nonnegative"));
        }
        if !(self.long_tail_if.is_finite() && self.long_tail_if >= 1.0) {
            return Err(bad("long_tail_if", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(bad("noise_rate", "must lie in [0,1]"));
        }
        if matches!(self.dataset, DatasetKind::Cifar10 | DatasetKind::Csv) && self.data_path.is_none()
        {
            return Err(bad("data_path", "required for cifar10/csv datasets"));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(bad("hidden", "need at least one positive width"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(bad("temperature", "must be positive"));
        }
        if !(self.lambda_mix.is_finite() && self.lambda_mix >= 0.0) {
            return Err(bad("lambda_mix", "must be finite and nonnegative"));
        }
        if !(self.lambda_crl.is_finite() && self.lambda_crl >= 0.0) {
            return Err(bad("lambda_crl", "must be finite and nonnegative"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(bad("beta", "must be positive"));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(bad("rho", "must be finite and nonnegative"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(bad("lr", "must be positive"));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(bad("lr_min", "must lie in [0, lr]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must lie in [0,1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive"));
        }
        if self.swa {
            if self.swa_start >= self.epochs {
                return Err(bad("swa_start", "must be below epochs when swa is on"));
            }
            if let SwaLr::Fixed(v) = self.swa_lr {
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad("swa_lr", "must be positive or 'auto'"));
                }
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(bad("val_fraction", "must lie strictly between 0 and 1"));
        }
        if self.reweight {
            ReweightMap::parse(&self.reweight_map, self.reweight_param)?;
            if self.reweight_epochs == 0 {
                return Err(bad("reweight_epochs", "must be positive"));
            }
            if !(self.reweight_lr.is_finite() && self.reweight_lr > 0.0) {
                return Err(bad("reweight_lr", "must be positive"));
            }
        }
        Ok(())
    }

    /// The cosine schedule used before the averaging phase.
    pub fn lr_schedule(&self) -> Result<LRSchedule> {
        LRSchedule::new(self.lr, self.lr_min, self.epochs)
    }

    /// Constant learning rate once averaging starts.
    pub fn resolved_swa_lr(&self) -> Result<f64> {
        match self.swa_lr {
            SwaLr::Fixed(v) => Ok(v),
            SwaLr::Auto => Ok(0.5 * cosine_lr(&self.lr_schedule()?, self.swa_start)?),
        }
    }

    pub fn resolved_reweight_map(&self) -> Result<ReweightMap> {
        ReweightMap::parse(&self.reweight_map, self.reweight_param)
    }

    /// Textual value of one key (inverse of `apply`, for manifests and echo).
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "dataset" => self.dataset.as_str().to_string(),
            "data_path" => self
                .data_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "num_classes" => self.num_classes.to_string(),
            "samples_per_class" => self.samples_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "sigma_gap" => self.sigma_gap.to_string(),
            "moons_noise" => self.moons_noise.to_string(),
            "long_tail_if" => self.long_tail_if.to_string(),
            "noise_rate" => self.noise_rate.to_string(),
            "corruption_eval" => self
                .corruption_eval
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(","),
            "hidden" => self
                .hidden
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "head" => self.head.as_str().to_string(),
            "temperature" => self.temperature.to_string(),
            "lambda_mix" => self.lambda_mix.to_string(),
            "lambda_crl" => self.lambda_crl.to_string(),
            "beta" => self.beta.to_string(),
            "rho" => self.rho.to_string(),
            "lr" => self.lr.to_string(),
            "lr_min" => self.lr_min.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "swa" => self.swa.to_string(),
            "swa_start" => self.swa_start.to_string(),
            "swa_lr" => match self.swa_lr {
                SwaLr::Auto => "auto".to_string(),
                SwaLr::Fixed(v) => v.to_string(),
            },
            "val_fraction" => self.val_fraction.to_string(),
            "reweight" => self.reweight.to_string(),
            "reweight_map" => self.reweight_map.clone(),
            "reweight_param" => self.reweight_param.to_string(),
            "reweight_epochs" => self.reweight_epochs.to_string(),
            "reweight_lr" => self.reweight_lr.to_string(),
            "seed" => self.seed.map(|s| s.to_string()).unwrap_or_default(),
            "out_dir" => self.out_dir.display().to_string(),
            "run_id" => self.run_id.clone().unwrap_or_default(),
            other => {
                return Err(Error::invalid_config(
                    "config",
                    format!("unknown key '{other}'"),
                ))
            }
        })
    }

    /// Fully resolved `key = value` listing.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for key in Self::known_keys() {
            out.push_str(&format!("{key} = {}\n", self.get(key).unwrap()));
        }
        out
    }
}
