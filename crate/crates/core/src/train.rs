//! The full training recipe: per batch, clean cross-entropy plus an optional
//! mixup term and an optional confidence-ranking term, stepped with the
//! sharpness-aware two-pass optimizer; per epoch, correctness-history
//! refresh, weight averaging past the start epoch, and validation-based
//! model selection. Everything is a deterministic function of (config, seed).

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{
    apply_long_tail, corrupt, gen_gaussian_blobs, gen_two_moons, inject_label_noise,
    read_cifar10_binary, read_dataset_csv, train_val_split, CorruptionKind, CorruptionSpec,
    Dataset, LongTailProfile, NoiseSpec, SplitKind, CORRUPTION_KINDS,
};
use crate::error::{Error, Result};
use crate::loss::{
    build_mixup_batch, crl_batch_on_tape, crl_ring_pairs, mixup_nll_on_tape, weighted_nll_on_tape,
    CorrectnessHistory, LossWeights, MixupBatch, MixupConfig,
};
use crate::metrics::{
    accuracy, aurc, balanced_accuracy, compute_report, risk_coverage_curve, EvalRecord,
    MetricReport,
};
use crate::model::{HeadKind, MLPSpec, Model, ParamMap};
use crate::optim::{
    cosine_lr, sam_step, swa_finalize, swa_update, SAMConfig, SGDConfig, SWAState, Velocity,
};
use crate::reweight::{capture_uncertainty_scores, reweight_stage};
use crate::rng::{self, streams};
use crate::tape::{GradMap, Tape};
use crate::tensor::{argmax_row, softmax_row, Tensor};

/// Train/val/test datasets plus provenance notes.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub long_tail: Option<LongTailProfile>,
    pub warnings: Vec<String>,
}

/// Carve class-major generated data into per-class train/test blocks.
fn carve_generated(ds: &Dataset, per_class_train: usize, per_class_test: usize) -> Result<(Dataset, Dataset)> {
    let block = per_class_train + per_class_test;
    let mut train_pos = Vec::new();
    let mut test_pos = Vec::new();
    for c in 0..ds.num_classes {
        let base = c * block;
        train_pos.extend(base..base + per_class_train);
        test_pos.extend(base + per_class_train..base + block);
    }
    Ok((ds.subset(&train_pos)?, ds.subset(&test_pos)?))
}

const TEST_CARVE_SALT: u64 = 0x7e57;

/// Materialize the configured dataset, apply long-tail/noise to the training
/// pool only, and split off validation.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<DataBundle> {
    let mut warnings = Vec::new();
    let (mut pool, test) = match cfg.dataset {
        DatasetKind::Blobs => {
            let ds = gen_gaussian_blobs(
                cfg.num_classes,
                cfg.samples_per_class + cfg.test_per_class,
                cfg.input_dim,
                cfg.sigma_gap,
                seed,
            )?;
            carve_generated(&ds, cfg.samples_per_class, cfg.test_per_class)?
        }
        DatasetKind::Moons => {
            let ds = gen_two_moons(
                2 * (cfg.samples_per_class + cfg.test_per_class),
                cfg.moons_noise,
                seed,
            )?;
            carve_generated(&ds, cfg.samples_per_class, cfg.test_per_class)?
        }
        DatasetKind::Cifar10 | DatasetKind::Csv => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| Error::invalid_config("data_path", "required for file datasets"))?;
            let ds = match cfg.dataset {
                DatasetKind::Cifar10 => read_cifar10_binary(path)?,
                _ => read_dataset_csv(path, Some(cfg.num_classes))?,
            };
            let want_test = cfg.test_per_class * ds.num_classes;
            if want_test >= ds.len() {
                return Err(Error::invalid_config(
                    "test_per_class",
                    format!("requested {want_test} test samples from {} total", ds.len()),
                ));
            }
            let frac = want_test as f64 / ds.len() as f64;
            let (pool, test, kind) = train_val_split(&ds, frac, seed ^ TEST_CARVE_SALT)?;
            if kind == SplitKind::UnstratifiedFallback {
                warnings.push("test carve fell back to an unstratified split".to_string());
            }
            (pool, test)
        }
    };

    let long_tail = if cfg.long_tail_if > 1.0 {
        let (tailed, profile) = apply_long_tail(&pool, cfg.long_tail_if, seed)?;
        pool = tailed;
        Some(profile)
    } else {
        None
    };

    if cfg.noise_rate > 0.0 {
        pool = inject_label_noise(&pool, NoiseSpec::new(cfg.noise_rate)?, seed)?;
    }

    let (train, val, kind) = train_val_split(&pool, cfg.val_fraction, seed)?;
    if kind == SplitKind::UnstratifiedFallback {
        warnings.push("validation split fell back to an unstratified split".to_string());
    }
    Ok(DataBundle {
        train,
        val,
        test,
        long_tail,
        warnings,
    })
}

/// Architecture identity, separable from parameter values so the two-pass
/// optimizer can rebuild a model view around perturbed weights.
#[derive(Clone, Debug)]
struct ArchView {
    spec: MLPSpec,
    head: HeadKind,
    temperature: f64,
    num_classes: usize,
}

impl ArchView {
    fn of(model: &Model) -> Self {
        ArchView {
            spec: model.spec.clone(),
            head: model.head,
            temperature: model.temperature,
            num_classes: model.num_classes,
        }
    }

    fn model(&self, params: &ParamMap) -> Model {
        Model {
            spec: self.spec.clone(),
            head: self.head,
            temperature: self.temperature,
            num_classes: self.num_classes,
            params: params.clone(),
        }
    }
}

/// Everything stochastic about one batch, drawn once before stepping so both
/// optimizer passes see identical mixup interpolants and ranking pairs.
struct BatchPlan {
    x: Tensor,
    labels: Vec<usize>,
    mixup: Option<MixupBatch>,
    crl: Option<(Vec<f64>, Vec<(usize, usize)>)>,
}

/// Build the composite loss on a fresh tape and return (value, grads).
fn batch_loss(arch: &ArchView, params: &ParamMap, plan: &BatchPlan, w: &LossWeights) -> Result<(f64, GradMap)> {
    let model = arch.model(params);
    let b = plan.labels.len();
    let uniform = vec![1.0 / b as f64; b];
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape);
    let xn = tape.constant(plan.x.clone());
    let logits = model.logits_on(&mut tape, &bind, xn)?;
    let logp = tape.log_softmax(logits)?;
    let mut total = weighted_nll_on_tape(&mut tape, logp, &plan.labels, &uniform)?;
    if let Some(mb) = &plan.mixup {
        let xm = tape.constant(mb.inputs.clone());
        let logits_m = model.logits_on(&mut tape, &bind, xm)?;
        let logp_m = tape.log_softmax(logits_m)?;
        let lm = mixup_nll_on_tape(&mut tape, logp_m, mb, &uniform)?;
        let lm = tape.scale(lm, w.lambda_mix)?;
        total = tape.add(total, lm)?;
    }
    if let Some((targets, pairs)) = &plan.crl {
        let probs = tape.softmax(logits)?;
        let conf = tape.row_max(probs)?;
        let lc = crl_batch_on_tape(&mut tape, conf, targets, pairs)?;
        let lc = tape.scale(lc, w.lambda_crl)?;
        total = tape.add(total, lc)?;
    }
    let value = tape.value(total).item()?;
    if !value.is_finite() {
        return Err(Error::Divergence(format!("batch loss became {value}")));
    }
    let grads = tape.backward(total)?;
    Ok((value, grads))
}

/// Per-sample prediction records (confidence = max softmax probability).
pub fn evaluate_records(model: &Model, ds: &Dataset) -> Result<Vec<EvalRecord>> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluate_records"));
    }
    let mut records = Vec::with_capacity(ds.len());
    let chunk = 256usize;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let positions: Vec<usize> = (start..end).collect();
        let x = ds.gather_matrix(&positions)?;
        let logits = model.logits_batch(&x)?;
        let k = logits.shape()[1];
        for (row, &p) in positions.iter().enumerate() {
            let row_logits = &logits.data()[row * k..(row + 1) * k];
            let probs = softmax_row(row_logits);
            let conf = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pred = argmax_row(row_logits);
            records.push(EvalRecord::new(conf, pred, ds.labels[p])?);
        }
        start = end;
    }
    Ok(records)
}

/// Headline metrics plus balanced accuracy for one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n: usize,
    pub metrics: MetricReport,
    pub balanced_accuracy: f64,
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<SplitReport> {
    let records = evaluate_records(model, ds)?;
    Ok(SplitReport {
        n: records.len(),
        metrics: compute_report(&records)?,
        balanced_accuracy: balanced_accuracy(&records)?,
    })
}

/// Clean-test report plus one report per (corruption kind, severity), plus
/// the average risk area across all corrupted evaluations.
pub fn run_eval(
    model: &Model,
    test: &Dataset,
    corruptions: &[CorruptionKind],
    seed: u64,
) -> Result<(BTreeMap<String, SplitReport>, Option<f64>)> {
    let mut reports = BTreeMap::new();
    reports.insert("test".to_string(), evaluate(model, test)?);
    if corruptions.is_empty() {
        return Ok((reports, None));
    }
    let mut aurc_sum = 0.0;
    let mut count = 0usize;
    for kind in corruptions {
        let ki = CORRUPTION_KINDS.iter().position(|k| k == kind).unwrap() as u64;
        for severity in 1..=5usize {
            let spec = CorruptionSpec::new(*kind, severity)?;
            let corrupted = corrupt(test, spec, seed.wrapping_add(1 + ki * 8 + severity as u64))?;
            let report = evaluate(model, &corrupted)?;
            aurc_sum += report.metrics.aurc;
            count += 1;
            reports.insert(format!("corrupt/{}/{severity}", kind.as_str()), report);
        }
    }
    Ok((reports, Some(aurc_sum / count as f64)))
}

/// One epoch's scalars for the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub lr: f64,
    pub mean_train_loss: f64,
    pub val_aurc: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionInfo {
    pub best_epoch: usize,
    pub best_val_aurc: f64,
    pub final_val_aurc: f64,
}

/// Reproducibility record of one run: resolved configuration, warnings,
/// counters, per-epoch stats, and metric reports per evaluation split.
/// Re-running the same (config, seed) regenerates identical metrics; only
/// the timing block varies.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub counters: BTreeMap<String, u64>,
    pub timings_s: BTreeMap<String, f64>,
    pub long_tail_counts: Option<Vec<usize>>,
    pub selection: SelectionInfo,
    pub epoch_stats: Vec<EpochStat>,
    pub reports: BTreeMap<String, SplitReport>,
    pub corruption_mean_aurc: Option<f64>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    /// The fields that must reproduce bitwise for a given (config, seed):
    /// everything except timings and artifact paths.
    pub fn metric_fingerprint(&self) -> String {
        let mut out = String::new();
        for (name, report) in &self.reports {
            out.push_str(&format!(
                "{name} n={} acc={:016x} aurc={:016x} bal={:016x}\n",
                report.n,
                report.metrics.accuracy.to_bits(),
                report.metrics.aurc.to_bits(),
                report.balanced_accuracy.to_bits(),
            ));
        }
        for s in &self.epoch_stats {
            out.push_str(&format!(
                "epoch {} loss={:016x} val={:016x}\n",
                s.epoch,
                s.mean_train_loss.to_bits(),
                s.val_aurc.to_bits()
            ));
        }
        out
    }
}

/// Product of `run_training`.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation-AURC checkpoint (the reported model).
    pub selected: Model,
    /// Final-epoch effective model (averaged weights when averaging is on);
    /// the starting point of the re-weighting stage.
    pub final_model: Model,
    pub stage2: Option<Model>,
    /// Per-sample confidence scores the re-weighting stage trained against.
    pub stage2_scores: Option<crate::reweight::UncertaintyScores>,
    pub manifest: RunManifest,
    pub data: DataBundle,
}

fn record_eval(history: &mut CorrectnessHistory, model: &Model, ds: &Dataset) -> Result<()> {
    let chunk = 256usize;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let positions: Vec<usize> = (start..end).collect();
        let x = ds.gather_matrix(&positions)?;
        let logits = model.logits_batch(&x)?;
        let ids: Vec<usize> = positions.iter().map(|&p| ds.sample_ids[p]).collect();
        let labels: Vec<usize> = positions.iter().map(|&p| ds.labels[p]).collect();
        history.update(&ids, &logits, &labels)?;
        start = end;
    }
    Ok(())
}

/// Run the full recipe for one (config, seed).
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg
        .seed
        .ok_or_else(|| Error::invalid_config("seed", "required for training"))?;
    // A feature vector collapsing to zero norm mid-run is the cosine head's
    // way of blowing up: classify it as divergence, not as a bad input.
    run_seeded(cfg, seed).map_err(|e| match e {
        Error::DegenerateVector { norm, min } => Error::Divergence(format!(
            "feature norm {norm:e} collapsed below the {min:e} guard"
        )),
        other => other,
    })
}

fn run_seeded(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let total_clock = Instant::now();

    let data = prepare_data(cfg, seed)?;
    let mut warnings = data.warnings.clone();

    let mut widths = vec![data.train.feature_len()];
    widths.extend(&cfg.hidden);
    if data.train.feature_len() != cfg.input_dim && cfg.dataset == DatasetKind::Blobs {
        return Err(Error::invalid_config("input_dim", "does not match generated data"));
    }
    let mut init_rng = rng::stream(seed, streams::INIT);
    let mut model = Model::new(
        MLPSpec::new(widths)?,
        cfg.head,
        data.train.num_classes,
        cfg.temperature,
        &mut init_rng,
    )?;
    let arch = ArchView::of(&model);

    let loss_weights = LossWeights::new(cfg.lambda_mix, cfg.lambda_crl)?;
    let mixup_cfg = MixupConfig::new(cfg.beta, cfg.lambda_mix > 0.0)?;
    let sam_cfg = SAMConfig { rho: cfg.rho };
    sam_cfg.validate()?;
    let schedule = cfg.lr_schedule()?;
    let swa_lr = if cfg.swa { cfg.resolved_swa_lr()? } else { 0.0 };
    let mut swa_state = if cfg.swa {
        Some(SWAState::new(cfg.swa_start, swa_lr)?)
    } else {
        None
    };

    let capacity = data.train.sample_ids.iter().copied().max().unwrap_or(0) + 1;
    let mut history = CorrectnessHistory::new(capacity);
    let mut vel = Velocity::new();
    let mut train_rng = rng::stream(seed, streams::TRAIN);

    let mut counters: BTreeMap<String, u64> = BTreeMap::new();
    let bump = |c: &mut BTreeMap<String, u64>, key: &str, by: u64| {
        *c.entry(key.to_string()).or_insert(0) += by;
    };
    bump(&mut counters, "head_is_cosine", (cfg.head == HeadKind::Cosine) as u64);

    let mut epoch_stats = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut last_effective: Option<Model> = None;

    let train_clock = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = if cfg.swa && epoch >= cfg.swa_start {
            swa_lr
        } else {
            cosine_lr(&schedule, epoch)?
        };
        let sgd = SGDConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };

        let order = rng::permutation(data.train.len(), &mut train_rng);
        let mut loss_sum = 0.0;
        let mut steps_this_epoch = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let ids: Vec<usize> = chunk.iter().map(|&p| data.train.sample_ids[p]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&p| data.train.labels[p]).collect();
            let x = data.train.gather_matrix(chunk)?;

            // Stochastic draws happen once per step, outside the two-pass
            // closure, so both passes share them.
            let mixup = if cfg.lambda_mix > 0.0 && labels.len() >= 2 {
                bump(&mut counters, "mixup_batches", 1);
                Some(build_mixup_batch(&x, &labels, &mixup_cfg, &mut train_rng)?)
            } else {
                None
            };
            let crl = if cfg.lambda_crl > 0.0 {
                if history.all_seen(&ids)? {
                    bump(&mut counters, "crl_active_batches", 1);
                    let targets: Vec<f64> = ids
                        .iter()
                        .map(|&id| history.correctness(id))
                        .collect::<Result<_>>()?;
                    Some((targets, crl_ring_pairs(labels.len(), &mut train_rng)))
                } else {
                    bump(&mut counters, "crl_skipped_batches", 1);
                    None
                }
            } else {
                None
            };
            let plan = BatchPlan {
                x,
                labels,
                mixup,
                crl,
            };

            let mut passes = 0u64;
            let info = sam_step(
                &mut model.params,
                |params| {
                    passes += 1;
                    batch_loss(&arch, params, &plan, &loss_weights)
                },
                &sgd,
                &sam_cfg,
                &mut vel,
            )?;
            bump(&mut counters, "forward_passes", passes);
            if info.perturbed_loss.is_some() {
                bump(&mut counters, "sam_second_passes", 1);
            }
            loss_sum += info.loss;
            steps_this_epoch += 1;
            bump(&mut counters, "steps", 1);
        }

        // End of epoch: refresh the correctness history with the current
        // (raw, un-averaged) weights, then fold a snapshot into the average.
        record_eval(&mut history, &model, &data.train)?;
        bump(&mut counters, "history_updates", 1);
        if let Some(state) = swa_state.as_mut() {
            if epoch >= cfg.swa_start {
                swa_update(state, &model.params, epoch)?;
                bump(&mut counters, "swa_snapshots", 1);
            }
        }

        // Validation pass on the effective model (averaged once available).
        let effective = match swa_state.as_ref() {
            Some(state) if state.count() > 0 => {
                let mut m = model.clone();
                swa_finalize(state, &mut m)?;
                m
            }
            _ => model.clone(),
        };
        let val_records = evaluate_records(&effective, &data.val)?;
        let val_aurc = aurc(&risk_coverage_curve(&val_records)?);
        let val_accuracy = accuracy(&val_records)?;
        epoch_stats.push(EpochStat {
            epoch,
            lr,
            mean_train_loss: loss_sum / steps_this_epoch.max(1) as f64,
            val_aurc,
            val_accuracy,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_aurc < *b) {
            best = Some((val_aurc, epoch, effective.clone()));
        }
        last_effective = Some(effective);
    }
    let train_s = train_clock.elapsed().as_secs_f64();

    let (best_val_aurc, best_epoch, selected) = best.expect("epochs >= 1");
    let final_model = last_effective.expect("epochs >= 1");
    let final_val_aurc = epoch_stats.last().expect("epochs >= 1").val_aurc;

    // Optional stage 2: capture scores with the finalized stage-1 weights,
    // then weighted fine-tuning.
    let stage2_clock = Instant::now();
    let (stage2, stage2_scores) = if cfg.reweight {
        let scores = capture_uncertainty_scores(&final_model, &data.train)?;
        let map = cfg.resolved_reweight_map()?;
        let sgd = SGDConfig {
            lr: cfg.reweight_lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let outcome = reweight_stage(
            &final_model,
            &data.train,
            map,
            &scores,
            cfg.reweight_epochs,
            &sgd,
            cfg.batch_size,
            seed,
        )?;
        bump(
            &mut counters,
            "stage2_uniform_fallback_batches",
            outcome.uniform_fallback_batches as u64,
        );
        bump(&mut counters, "stage2_steps", outcome.steps as u64);
        (Some(outcome.model), Some(scores))
    } else {
        (None, None)
    };
    let stage2_s = stage2_clock.elapsed().as_secs_f64();

    // Evaluation: selected model on the clean test set (plus corruption
    // ladders when configured), final model, and the stage-2 model.
    let eval_clock = Instant::now();
    let (mut reports, corruption_mean_aurc) =
        run_eval(&selected, &data.test, &cfg.corruption_eval, seed)?;
    reports.insert("val".to_string(), evaluate(&final_model, &data.val)?);
    reports.insert("test_final".to_string(), evaluate(&final_model, &data.test)?);
    if let Some(m2) = &stage2 {
        reports.insert("test_stage2".to_string(), evaluate(m2, &data.test)?);
    }
    let eval_s = eval_clock.elapsed().as_secs_f64();

    if let Some(profile) = &data.long_tail {
        if profile.counts.last().copied().unwrap_or(0) < 5 {
            warnings.push(format!(
                "rarest class has only {} training samples",
                profile.counts.last().unwrap()
            ));
        }
    }

    let mut timings = BTreeMap::new();
    timings.insert("train".to_string(), train_s);
    timings.insert("stage2".to_string(), stage2_s);
    timings.insert("eval".to_string(), eval_s);
    timings.insert("total".to_string(), total_clock.elapsed().as_secs_f64());

    let mut config_echo = BTreeMap::new();
    for key in ExperimentConfig::known_keys() {
        config_echo.insert(key.to_string(), cfg.get(key)?);
    }

    let manifest = RunManifest {
        run_id: cfg.run_id.clone().unwrap_or_else(|| format!("run-{seed}")),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: config_echo,
        warnings,
        counters,
        timings_s: timings,
        long_tail_counts: data.long_tail.as_ref().map(|p| p.counts.clone()),
        selection: SelectionInfo {
            best_epoch,
            best_val_aurc,
            final_val_aurc,
        },
        epoch_stats,
        reports,
        corruption_mean_aurc,
        artifacts: Vec::new(),
    };

    Ok(TrainOutcome {
        selected,
        final_model,
        stage2,
        stage2_scores,
        manifest,
        data,
    })
}
