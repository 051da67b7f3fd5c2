//! Component ablation grids: every combination of {mixup, ranking loss,
//! sharpness-aware steps, weight averaging, cosine head} against a shared
//! base configuration, each cell aggregated over several seeds.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::HeadKind;
use crate::train::run_training;

/// Which components a grid cell enables. Off means: λ = 0 for the loss
/// terms, ρ = 0, no averaging, linear head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentToggles {
    pub mixup: bool,
    pub crl: bool,
    pub sam: bool,
    pub swa: bool,
    pub cosine: bool,
}

impl ComponentToggles {
    pub const ALL_ON: ComponentToggles = ComponentToggles {
        mixup: true,
        crl: true,
        sam: true,
        swa: true,
        cosine: true,
    };

    pub const ALL_OFF: ComponentToggles = ComponentToggles {
        mixup: false,
        crl: false,
        sam: false,
        swa: false,
        cosine: false,
    };

    pub fn from_bits(bits: usize) -> Self {
        ComponentToggles {
            mixup: bits & 1 != 0,
            crl: bits & 2 != 0,
            sam: bits & 4 != 0,
            swa: bits & 8 != 0,
            cosine: bits & 16 != 0,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.mixup {
            parts.push("mixup");
        }
        if self.crl {
            parts.push("crl");
        }
        if self.sam {
            parts.push("sam");
        }
        if self.swa {
            parts.push("swa");
        }
        if self.cosine {
            parts.push("csc");
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Specialize the base configuration to one cell. The base must carry the
/// all-on values (positive λs and ρ) so "on" has something to enable.
pub fn apply_toggles(base: &ExperimentConfig, t: &ComponentToggles) -> Result<ExperimentConfig> {
    if base.lambda_mix <= 0.0 || base.lambda_crl <= 0.0 || base.rho <= 0.0 || !base.swa {
        return Err(Error::invalid_config(
            "ablation",
            "base config must have every component enabled",
        ));
    }
    let mut cfg = base.clone();
    if !t.mixup {
        cfg.lambda_mix = 0.0;
    }
    if !t.crl {
        cfg.lambda_crl = 0.0;
    }
    if !t.sam {
        cfg.rho = 0.0;
    }
    cfg.swa = t.swa;
    cfg.head = if t.cosine { HeadKind::Cosine } else { HeadKind::Linear };
    Ok(cfg)
}

/// One aggregated grid cell: mean ± sample standard deviation over the
/// seeds that completed, with per-seed failures kept alongside.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: ComponentToggles,
    pub label: String,
    pub seeds: Vec<u64>,
    pub completed: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub median_accuracy: f64,
    pub mean_aurc: f64,
    pub std_aurc: f64,
    pub median_aurc: f64,
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_aurc: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Median over completed runs; midpoint of the two central values when the
/// count is even, NaN when none completed.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn run_cell(base: &ExperimentConfig, toggles: &ComponentToggles, seeds: &[u64]) -> AblationRow {
    let mut accs = Vec::new();
    let mut aurcs = Vec::new();
    let mut failures = Vec::new();
    match apply_toggles(base, toggles) {
        Ok(cfg) => {
            for &seed in seeds {
                let mut cfg = cfg.clone();
                cfg.seed = Some(seed);
                cfg.run_id = Some(format!("ablate-{}-{seed}", toggles.label()));
                match run_training(&cfg) {
                    Ok(out) => {
                        let m = &out.manifest.reports["test"].metrics;
                        accs.push(m.accuracy);
                        aurcs.push(m.aurc);
                    }
                    Err(e) => failures.push(format!("seed {seed}: {e}")),
                }
            }
        }
        Err(e) => failures.push(e.to_string()),
    }
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let (mean_aurc, std_aurc) = mean_std(&aurcs);
    AblationRow {
        toggles: *toggles,
        label: toggles.label(),
        seeds: seeds.to_vec(),
        completed: aurcs.len(),
        mean_accuracy,
        std_accuracy,
        median_accuracy: median(&accs),
        mean_aurc,
        std_aurc,
        median_aurc: median(&aurcs),
        per_seed_accuracy: accs,
        per_seed_aurc: aurcs,
        failures,
    }
}

/// Run the given cells × seeds (cells in parallel — every run is an isolated
/// (config, seed) function) and sort rows by mean risk area, failed cells
/// last.
pub fn run_cells(
    base: &ExperimentConfig,
    cells: &[ComponentToggles],
    seeds: &[u64],
) -> Result<AblationTable> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("ablation grid"));
    }
    let mut rows: Vec<AblationRow> = cells
        .par_iter()
        .map(|t| run_cell(base, t, seeds))
        .collect();
    rows.sort_by(|a, b| {
        match (a.median_aurc.is_nan(), b.median_aurc.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            (false, false) => a.median_aurc.partial_cmp(&b.median_aurc).unwrap(),
        }
        .then_with(|| a.label.cmp(&b.label))
    });
    Ok(AblationTable { rows })
}

/// The full 2⁵ grid.
pub fn run_ablation_grid(base: &ExperimentConfig, seeds: &[u64]) -> Result<AblationTable> {
    let cells: Vec<ComponentToggles> = (0..32).map(ComponentToggles::from_bits).collect();
    run_cells(base, &cells, seeds)
}

impl AblationTable {
    pub fn row(&self, toggles: &ComponentToggles) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.toggles == *toggles)
    }

    /// Plain-text comparison table, best (lowest median risk area) first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>5} {:>10} {:>9} {:>12} {:>11} {:>13}\n",
            "components", "runs", "acc_mean", "acc_std", "aurc_x1000", "aurc_std", "aurc_median"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>5} {:>10.4} {:>9.4} {:>12.3} {:>11.3} {:>13.3}\n",
                r.label,
                r.completed,
                r.mean_accuracy,
                r.std_accuracy,
                r.mean_aurc * 1000.0,
                r.std_aurc * 1000.0,
                r.median_aurc * 1000.0,
            ));
            for f in &r.failures {
                out.push_str(&format!("  ! {f}\n"));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "label,mixup,crl,sam,swa,csc,runs,mean_accuracy,std_accuracy,median_accuracy,\
             mean_aurc_x1000,std_aurc_x1000,median_aurc_x1000,failures\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.toggles.mixup,
                r.toggles.crl,
                r.toggles.sam,
                r.toggles.swa,
                r.toggles.cosine,
                r.completed,
                r.mean_accuracy,
                r.std_accuracy,
                r.median_accuracy,
                r.mean_aurc * 1000.0,
                r.std_aurc * 1000.0,
                r.median_aurc * 1000.0,
                r.failures.len(),
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
