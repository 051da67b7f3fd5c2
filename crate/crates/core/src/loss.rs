//! Training objectives: weighted cross-entropy, mixup regularization with a
//! Beta-distributed interpolation coefficient, and the pairwise
//! correctness-ranking hinge driven by a per-sample history of prediction
//! outcomes. The total objective combines all three with nonnegative weights.

use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::rng::{permutation, Rng};
use crate::tape::{crl_hinge, NodeId, Tape};
use crate::tensor::{argmax_row, log_softmax_row, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct MixupConfig {
    pub beta: f64,
    pub enabled: bool,
}

impl MixupConfig {
    pub fn new(beta: f64, enabled: bool) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::invalid_config("beta", "Beta concentration must be > 0"));
        }
        Ok(MixupConfig { beta, enabled })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_mix: f64,
    pub lambda_crl: f64,
}

impl LossWeights {
    pub fn new(lambda_mix: f64, lambda_crl: f64) -> Result<Self> {
        for (name, v) in [("lambda_mix", lambda_mix), ("lambda_crl", lambda_crl)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid_config(name, "must be finite and ≥ 0"));
            }
        }
        Ok(LossWeights { lambda_mix, lambda_crl })
    }
}

/// Probability vector over classes; one-hot labels are the special case.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("soft_label"));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::OutOfRange {
                what: "soft label probability",
                value: *probs.iter().find(|&&p| !(p >= 0.0)).unwrap(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfRange {
                what: "soft label sum",
                value: sum,
            });
        }
        Ok(SoftLabel { probs })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::OutOfRange {
                what: "one-hot class index",
                value: class as f64,
            });
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Ok(SoftLabel { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Draw the mixup interpolation coefficient m ~ Beta(β, β).
pub fn sample_mix_coefficient(cfg: &MixupConfig, rng: &mut Rng) -> f64 {
    let beta = Beta::new(cfg.beta, cfg.beta).expect("β > 0 validated at construction");
    beta.sample(rng)
}

/// x̃ = m·x_i + (1−m)·x_j and the same interpolation on the labels.
/// The endpoints m = 0 and m = 1 return the untouched operands so the
/// reduction is exact.
pub fn mixup_pair(
    x_i: &Tensor,
    y_i: &SoftLabel,
    x_j: &Tensor,
    y_j: &SoftLabel,
    m: f64,
) -> Result<(Tensor, SoftLabel)> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::OutOfRange {
            what: "mix coefficient",
            value: m,
        });
    }
    if x_i.shape() != x_j.shape() || y_i.probs.len() != y_j.probs.len() {
        return Err(Error::ShapeMismatch {
            op: "mixup_pair",
            detail: format!(
                "x {:?} vs {:?}, y {} vs {}",
                x_i.shape(),
                x_j.shape(),
                y_i.probs.len(),
                y_j.probs.len()
            ),
        });
    }
    if m == 1.0 {
        return Ok((x_i.clone(), y_i.clone()));
    }
    if m == 0.0 {
        return Ok((x_j.clone(), y_j.clone()));
    }
    let data = x_i
        .data()
        .iter()
        .zip(x_j.data())
        .map(|(&a, &b)| m * a + (1.0 - m) * b)
        .collect();
    let x = Tensor::new(x_i.shape().to_vec(), data)?;
    let probs = y_i
        .probs
        .iter()
        .zip(&y_j.probs)
        .map(|(&a, &b)| m * a + (1.0 - m) * b)
        .collect();
    Ok((x, SoftLabel { probs }))
}

/// −Σ_k target_k · log softmax(logits)_k for a single sample.
pub fn cross_entropy(logits: &Tensor, target: &SoftLabel) -> Result<f64> {
    if logits.shape() != [target.probs.len()] {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("logits {:?} vs {} classes", logits.shape(), target.probs.len()),
        });
    }
    let logp = log_softmax_row(logits.data());
    Ok(-target
        .probs
        .iter()
        .zip(&logp)
        .map(|(&t, &lp)| t * lp)
        .sum::<f64>())
}

/// One ranking-hinge term of the correctness-ranking loss; inputs are
/// historical correctness proportions c and confidence scores s, all in
/// [0, 1].
pub fn crl_pair_loss(c_i: f64, c_j: f64, s_i: f64, s_j: f64) -> Result<f64> {
    for (what, v) in [
        ("correctness c_i", c_i),
        ("correctness c_j", c_j),
        ("confidence s_i", s_i),
        ("confidence s_j", s_j),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange { what, value: v });
        }
    }
    Ok(crl_hinge(c_i, c_j, s_i, s_j))
}

/// L_total = L_ce + λ_mix·L_mix + λ_crl·L_crl. A NaN anywhere is surfaced
/// as a training-divergence error.
pub fn total_loss(l_ce: f64, l_mix: f64, l_crl: f64, w: &LossWeights) -> Result<f64> {
    let total = l_ce + w.lambda_mix * l_mix + w.lambda_crl * l_crl;
    if total.is_nan() {
        return Err(Error::Divergence(format!(
            "total loss is NaN (ce={l_ce}, mix={l_mix}, crl={l_crl})"
        )));
    }
    Ok(total)
}

/// Per-training-sample running proportion of correct prediction events,
/// indexed by stable sample id.
#[derive(Clone, Debug, Default)]
pub struct CorrectnessHistory {
    correct: Vec<u32>,
    seen: Vec<u32>,
}

impl CorrectnessHistory {
    /// `capacity` must exceed the largest sample id that will be recorded.
    pub fn new(capacity: usize) -> Self {
        CorrectnessHistory {
            correct: vec![0; capacity],
            seen: vec![0; capacity],
        }
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.seen.len() {
            return Err(Error::UnknownSample(id));
        }
        Ok(())
    }

    /// Record one prediction event per sample: `predictions` holds one row of
    /// logits (or probabilities) per id; a sample counts as correct when the
    /// row argmax equals its true label.
    pub fn update(
        &mut self,
        ids: &[usize],
        predictions: &Tensor,
        true_labels: &[usize],
    ) -> Result<()> {
        if predictions.shape().len() != 2
            || predictions.shape()[0] != ids.len()
            || true_labels.len() != ids.len()
        {
            return Err(Error::ShapeMismatch {
                op: "update_correctness_history",
                detail: format!(
                    "{} ids, {} labels, predictions {:?}",
                    ids.len(),
                    true_labels.len(),
                    predictions.shape()
                ),
            });
        }
        let k = predictions.shape()[1];
        for (row, (&id, &label)) in ids.iter().zip(true_labels).enumerate() {
            self.check_id(id)?;
            let pred = argmax_row(&predictions.data()[row * k..(row + 1) * k]);
            self.seen[id] += 1;
            if pred == label {
                self.correct[id] += 1;
            }
        }
        Ok(())
    }

    /// c_i — errors until the sample has been seen at least once.
    pub fn correctness(&self, id: usize) -> Result<f64> {
        self.check_id(id)?;
        if self.seen[id] == 0 {
            return Err(Error::EmptyHistory(id));
        }
        Ok(self.correct[id] as f64 / self.seen[id] as f64)
    }

    pub fn is_seen(&self, id: usize) -> Result<bool> {
        self.check_id(id)?;
        Ok(self.seen[id] > 0)
    }

    pub fn all_seen(&self, ids: &[usize]) -> Result<bool> {
        for &id in ids {
            if !self.is_seen(id)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// Tape-level builders used by the training loop.
// ---------------------------------------------------------------------------

/// Weighted negative log-likelihood: −Σ_i w_i · log_probs[i, labels_i].
/// With w_i = 1/B this is the batch-mean cross-entropy; the re-weighting
/// stage passes its normalized per-sample weights through the same path.
pub fn weighted_nll_on_tape(
    tape: &mut Tape,
    log_probs: NodeId,
    labels: &[usize],
    weights: &[f64],
) -> Result<NodeId> {
    if weights.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_nll",
            detail: format!("{} weights for {} labels", weights.len(), labels.len()),
        });
    }
    let picked = tape.row_gather(log_probs, labels)?;
    let w = tape.constant(Tensor::from_vec(weights.to_vec()));
    let prod = tape.mul(picked, w)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0)
}

/// A mixup view of one batch: interpolated inputs plus the two label sets
/// and per-pair coefficients needed to evaluate the interpolated
/// cross-entropy.
#[derive(Clone, Debug)]
pub struct MixupBatch {
    pub inputs: Tensor,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub m: Vec<f64>,
}

/// Pair each sample with a partner from a seeded shuffle of the same batch
/// and draw one Beta(β, β) coefficient per pair.
pub fn build_mixup_batch(
    inputs: &Tensor,
    labels: &[usize],
    cfg: &MixupConfig,
    rng: &mut Rng,
) -> Result<MixupBatch> {
    if inputs.shape().len() != 2 || inputs.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "build_mixup_batch",
            detail: format!("inputs {:?} vs {} labels", inputs.shape(), labels.len()),
        });
    }
    let b = labels.len();
    if b < 2 {
        return Err(Error::EmptyInput("mixup batch needs ≥ 2 samples"));
    }
    let partner = permutation(b, rng);
    let m: Vec<f64> = (0..b).map(|_| sample_mix_coefficient(cfg, rng)).collect();
    let d = inputs.shape()[1];
    let mut data = Vec::with_capacity(b * d);
    for i in 0..b {
        let xi = &inputs.data()[i * d..(i + 1) * d];
        let xj = &inputs.data()[partner[i] * d..(partner[i] + 1) * d];
        if m[i] == 1.0 {
            data.extend_from_slice(xi);
        } else if m[i] == 0.0 {
            data.extend_from_slice(xj);
        } else {
            data.extend(xi.iter().zip(xj).map(|(&a, &c)| m[i] * a + (1.0 - m[i]) * c));
        }
    }
    Ok(MixupBatch {
        inputs: Tensor::new(vec![b, d], data)?,
        labels_a: labels.to_vec(),
        labels_b: partner.iter().map(|&j| labels[j]).collect(),
        m,
    })
}

/// Interpolated-label cross-entropy over a mixup batch:
/// −Σ_i w_i·(m_i·logp[i, a_i] + (1−m_i)·logp[i, b_i]).
pub fn mixup_nll_on_tape(
    tape: &mut Tape,
    log_probs_mixed: NodeId,
    batch: &MixupBatch,
    weights: &[f64],
) -> Result<NodeId> {
    let b = batch.m.len();
    if weights.len() != b {
        return Err(Error::ShapeMismatch {
            op: "mixup_nll",
            detail: format!("{} weights for batch of {}", weights.len(), b),
        });
    }
    let ga = tape.row_gather(log_probs_mixed, &batch.labels_a)?;
    let gb = tape.row_gather(log_probs_mixed, &batch.labels_b)?;
    let wa: Vec<f64> = (0..b).map(|i| weights[i] * batch.m[i]).collect();
    let wb: Vec<f64> = (0..b).map(|i| weights[i] * (1.0 - batch.m[i])).collect();
    let wa = tape.constant(Tensor::from_vec(wa));
    let wb = tape.constant(Tensor::from_vec(wb));
    let pa = tape.mul(ga, wa)?;
    let pb = tape.mul(gb, wb)?;
    let sa = tape.sum(pa)?;
    let sb = tape.sum(pb)?;
    let s = tape.add(sa, sb)?;
    tape.scale(s, -1.0)
}

/// Ring pairing for the batch ranking loss: sample i is paired with
/// perm(i) from one seeded permutation. Exactly B pairs; a self-pair
/// contributes zero.
pub fn crl_ring_pairs(n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let perm = permutation(n, rng);
    (0..n).map(|i| (i, perm[i])).collect()
}

/// Mean ranking hinge over seeded pairs; `confidences` is a 1-D tape node of
/// per-sample max-softmax scores and `targets` the historical correctness
/// values treated as constants.
pub fn crl_batch_on_tape(
    tape: &mut Tape,
    confidences: NodeId,
    targets: &[f64],
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    tape.crl_pairs(confidences, targets, pairs)
}

/// Standalone mixup regularization term for one batch: builds its own tape
/// and returns the scalar mean interpolated cross-entropy.
pub fn regmixup_loss(
    model: &crate::model::Model,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &MixupConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let batch = build_mixup_batch(inputs, labels, cfg, rng)?;
    let b = labels.len();
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape);
    let x = tape.constant(batch.inputs.clone());
    let logits = model.logits_on(&mut tape, &bind, x)?;
    let logp = tape.log_softmax(logits)?;
    let uniform = vec![1.0 / b as f64; b];
    let loss = mixup_nll_on_tape(&mut tape, logp, &batch, &uniform)?;
    tape.value(loss).item()
}
