//! Stage-2 uncertainty-aware re-weighting: capture per-sample confidence
//! scores from the stage-1 model, turn them into per-batch normalized
//! weights through one of four decreasing maps, and fine-tune with weighted
//! cross-entropy under plain SGD (no mixup/CRL/SAM/SWA here).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::weighted_nll_on_tape;
use crate::model::Model;
use crate::optim::{sgd_step, SGDConfig, Velocity};
use crate::rng::{self, streams};
use crate::tape::Tape;
use crate::tensor::softmax_row;

/// Frozen per-sample maximum softmax scores, keyed by stable sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyScores {
    scores: BTreeMap<usize, f64>,
}

impl UncertaintyScores {
    pub fn new(scores: BTreeMap<usize, f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("uncertainty scores"));
        }
        if let Some(&bad) = scores.values().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::OutOfRange {
                what: "uncertainty score",
                value: bad,
            });
        }
        Ok(UncertaintyScores { scores })
    }

    pub fn get(&self, sample_id: usize) -> Result<f64> {
        self.scores
            .get(&sample_id)
            .copied()
            .ok_or(Error::UnknownSample(sample_id))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Uniform table (every sample at the same score) over the given ids.
    pub fn uniform(ids: &[usize], score: f64) -> Result<Self> {
        UncertaintyScores::new(ids.iter().map(|&id| (id, score)).collect())
    }

    /// Export as `sample_id,score` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,score\n");
        for (&id, &s) in &self.scores {
            out.push_str(&format!("{id},{s}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut scores = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line == "sample_id,score") {
                continue;
            }
            let (id_s, score_s) = line.split_once(',').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 'sample_id,score'", lineno + 1),
            })?;
            let bad = |what: &str| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: bad {what}", lineno + 1),
            };
            let id = id_s.trim().parse::<usize>().map_err(|_| bad("sample_id"))?;
            let s = score_s.trim().parse::<f64>().map_err(|_| bad("score"))?;
            scores.insert(id, s);
        }
        UncertaintyScores::new(scores)
    }
}

/// One clean forward pass per sample; s_i = max softmax probability. Scores
/// stay frozen for the whole stage.
pub fn capture_uncertainty_scores(model: &Model, ds: &Dataset) -> Result<UncertaintyScores> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("capture_uncertainty_scores"));
    }
    let mut scores = BTreeMap::new();
    let chunk = 256usize;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let positions: Vec<usize> = (start..end).collect();
        let x = ds.gather_matrix(&positions)?;
        let logits = model.logits_batch(&x)?;
        let k = logits.shape()[1];
        for (row, &p) in positions.iter().enumerate() {
            let probs = softmax_row(&logits.data()[row * k..(row + 1) * k]);
            let s = probs.into_iter().fold(f64::NEG_INFINITY, f64::max);
            scores.insert(ds.sample_ids[p], s);
        }
        start = end;
    }
    UncertaintyScores::new(scores)
}

/// The four decreasing confidence→weight maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReweightMap {
    /// e^{−t·s}, t > 0 (t = 1 is the tuned default).
    Exp { t: f64 },
    /// 1 − s below the cutoff, 0 at or above it; α ∈ (0,1).
    Threshold { alpha: f64 },
    /// (1 − s)^p, p ≥ 1.
    Power { p: f64 },
    /// 1 − s.
    Linear,
}

impl ReweightMap {
    pub fn parse(kind: &str, param: f64) -> Result<Self> {
        let map = match kind {
            "exp" => ReweightMap::Exp { t: param },
            "threshold" => ReweightMap::Threshold { alpha: param },
            "power" => ReweightMap::Power { p: param },
            "linear" => ReweightMap::Linear,
            other => {
                return Err(Error::invalid_config(
                    "reweight_map",
                    format!("unknown map '{other}'"),
                ))
            }
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ReweightMap::Exp { t } if !(t.is_finite() && t > 0.0) => {
                Err(Error::invalid_config("reweight_param", "exp map needs t > 0"))
            }
            ReweightMap::Threshold { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(
                Error::invalid_config("reweight_param", "threshold map needs alpha in (0,1)"),
            ),
            ReweightMap::Power { p } if !(p.is_finite() && p >= 1.0) => {
                Err(Error::invalid_config("reweight_param", "power map needs p >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            ReweightMap::Exp { .. } => "exp",
            ReweightMap::Threshold { .. } => "threshold",
            ReweightMap::Power { .. } => "power",
            ReweightMap::Linear => "linear",
        }
    }
}

/// Un-normalized weight for one score.
pub fn raw_weight(map: ReweightMap, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::OutOfRange {
            what: "uncertainty score",
            value: s,
        });
    }
    map.validate()?;
    Ok(match map {
        ReweightMap::Exp { t } => (-t * s).exp(),
        ReweightMap::Threshold { alpha } => {
            if s < alpha {
                1.0 - s
            } else {
                0.0
            }
        }
        ReweightMap::Power { p } => (1.0 - s).powf(p),
        ReweightMap::Linear => 1.0 - s,
    })
}

/// Normalize a batch of raw weights to sum to one. All-equal batches get the
/// exact uniform vector (so uniform scores reduce bitwise to unweighted
/// fine-tuning); an all-zero batch — possible under the threshold map —
/// falls back to uniform and reports it.
pub fn normalize_batch_weights(raw: &[f64]) -> Result<(Vec<f64>, bool)> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("normalize_batch_weights"));
    }
    if let Some(&bad) = raw.iter().find(|&&w| !(w.is_finite() && w >= 0.0)) {
        return Err(Error::OutOfRange {
            what: "raw weight",
            value: bad,
        });
    }
    let b = raw.len();
    let uniform = vec![1.0 / b as f64; b];
    if raw.iter().all(|&w| w == raw[0]) {
        return Ok((uniform, raw[0] == 0.0));
    }
    let total: f64 = raw.iter().sum();
    Ok((raw.iter().map(|&w| w / total).collect(), false))
}

/// Result of a weighted fine-tuning stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: Model,
    /// Batches that hit the all-zero-weight uniform fallback.
    pub uniform_fallback_batches: usize,
    pub final_loss: f64,
    pub steps: usize,
}

fn run_weighted_epochs<W>(
    model: &Model,
    ds: &Dataset,
    mut weights_for: W,
    epochs: usize,
    sgd: &SGDConfig,
    batch_size: usize,
    seed: u64,
) -> Result<StageOutcome>
where
    W: FnMut(&[usize]) -> Result<(Vec<f64>, bool)>,
{
    sgd.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid_config("batch_size", "must be positive"));
    }
    if ds.is_empty() {
        return Err(Error::EmptyInput("weighted fine-tuning"));
    }
    let mut work = model.clone();
    let mut vel = Velocity::new();
    let mut r = rng::stream(seed, streams::REWEIGHT);
    let mut fallbacks = 0usize;
    let mut last_loss = f64::NAN;
    let mut steps = 0usize;
    for _ in 0..epochs {
        let order = rng::permutation(ds.len(), &mut r);
        for chunk in order.chunks(batch_size) {
            let ids: Vec<usize> = chunk.iter().map(|&p| ds.sample_ids[p]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&p| ds.labels[p]).collect();
            let (weights, fell_back) = weights_for(&ids)?;
            if fell_back {
                fallbacks += 1;
            }
            let x = ds.gather_matrix(chunk)?;
            let mut tape = Tape::new();
            let bind = work.bind(&mut tape);
            let xn = tape.constant(x);
            let logits = work.logits_on(&mut tape, &bind, xn)?;
            let log_probs = tape.log_softmax(logits)?;
            let loss = weighted_nll_on_tape(&mut tape, log_probs, &labels, &weights)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "weighted fine-tuning loss became {loss_value}"
                )));
            }
            let grads = tape.backward(loss)?;
            sgd_step(&mut work.params, &grads, sgd, &mut vel)?;
            last_loss = loss_value;
            steps += 1;
        }
    }
    Ok(StageOutcome {
        model: work,
        uniform_fallback_batches: fallbacks,
        final_loss: last_loss,
        steps,
    })
}

/// Stage-2 training: continue from the (finalized) stage-1 model, weighting
/// each sample's NLL by its mapped, per-batch-normalized score.
pub fn reweight_stage(
    model: &Model,
    ds: &Dataset,
    map: ReweightMap,
    scores: &UncertaintyScores,
    epochs: usize,
    sgd: &SGDConfig,
    batch_size: usize,
    seed: u64,
) -> Result<StageOutcome> {
    map.validate()?;
    run_weighted_epochs(
        model,
        ds,
        |ids| {
            let raw: Vec<f64> = ids
                .iter()
                .map(|&id| raw_weight(map, scores.get(id)?))
                .collect::<Result<_>>()?;
            normalize_batch_weights(&raw)
        },
        epochs,
        sgd,
        batch_size,
        seed,
    )
}

/// Plain unweighted fine-tuning: the same loop with every batch at the exact
/// uniform weight vector (batch-mean cross-entropy).
pub fn fine_tune(
    model: &Model,
    ds: &Dataset,
    epochs: usize,
    sgd: &SGDConfig,
    batch_size: usize,
    seed: u64,
) -> Result<StageOutcome> {
    run_weighted_epochs(
        model,
        ds,
        |ids| Ok((vec![1.0 / ids.len() as f64; ids.len()], false)),
        epochs,
        sgd,
        batch_size,
        seed,
    )
}
