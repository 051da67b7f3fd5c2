//! Optimization: SGD with momentum and weight decay, a sharpness-aware
//! two-phase step built on top of it, stochastic weight averaging, and the
//! cosine-annealing learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Model, ParamMap};
use crate::tape::GradMap;
use crate::tensor::{Tensor, EPS_NORM};

#[derive(Clone, Copy, Debug)]
pub struct SGDConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid_config("lr", "learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid_config("weight_decay", "must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SAMConfig {
    pub rho: f64,
}

impl SAMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) {
            return Err(Error::invalid_config("rho", "neighborhood radius must be ≥ 0"));
        }
        Ok(())
    }
}

/// Momentum buffers, allocated lazily per parameter.
#[derive(Clone, Debug, Default)]
pub struct Velocity {
    v: BTreeMap<String, Tensor>,
}

impl Velocity {
    pub fn new() -> Self {
        Velocity::default()
    }
}

/// One SGD step: v ← momentum·v + (grad + weight_decay·param);
/// param ← param − lr·v. Only trainable parameters move.
pub fn sgd_step(
    params: &mut ParamMap,
    grads: &GradMap,
    cfg: &SGDConfig,
    vel: &mut Velocity,
) -> Result<()> {
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| Error::ShapeMismatch {
            op: "sgd_step",
            detail: format!("no gradient for parameter '{name}'"),
        })?;
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient for parameter '{name}'"
            )));
        }
        let v = vel
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        for ((vi, &gi), pi) in v
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(p.tensor.data_mut())
        {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *pi);
            *pi -= cfg.lr * *vi;
        }
    }
    Ok(())
}

/// First-order inner maximizer ε = ρ·grad/‖grad‖ with the norm taken over
/// all parameters jointly; zero when the gradient is (numerically) zero.
pub fn sam_perturbation(grads: &GradMap, cfg: &SAMConfig) -> BTreeMap<String, Tensor> {
    let norm: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = if cfg.rho == 0.0 || norm <= EPS_NORM {
        0.0
    } else {
        cfg.rho / norm
    };
    grads
        .iter()
        .map(|(name, g)| {
            let data = g.data().iter().map(|&v| scale * v).collect();
            (
                name.clone(),
                Tensor::new(g.shape().to_vec(), data).expect("shape preserved"),
            )
        })
        .collect()
}

/// Outcome of one [`sam_step`].
#[derive(Clone, Copy, Debug)]
pub struct SamStepInfo {
    /// Loss at the unperturbed weights (phase 1).
    pub loss: f64,
    /// Loss at the perturbed weights, when a second pass ran.
    pub perturbed_loss: Option<f64>,
}

/// Sharpness-aware step. With ρ > 0: evaluate gradients at θ, climb to
/// θ + ε along the normalized gradient, evaluate gradients there, restore θ
/// exactly, and descend using only the phase-2 gradients. With ρ = 0 the
/// single evaluation feeds `sgd_step` directly, which reproduces plain SGD
/// bitwise.
pub fn sam_step<F>(
    params: &mut ParamMap,
    mut loss_and_grads: F,
    sgd: &SGDConfig,
    sam: &SAMConfig,
    vel: &mut Velocity,
) -> Result<SamStepInfo>
where
    F: FnMut(&ParamMap) -> Result<(f64, GradMap)>,
{
    let (l1, g1) = loss_and_grads(params)?;
    if !l1.is_finite() {
        return Err(Error::Divergence(format!("loss became {l1}")));
    }
    if sam.rho == 0.0 {
        sgd_step(params, &g1, sgd, vel)?;
        return Ok(SamStepInfo {
            loss: l1,
            perturbed_loss: None,
        });
    }

    let eps = sam_perturbation(&g1, sam);
    // Save exact weights: restoring by subtraction would not round-trip.
    let saved: Vec<(String, Tensor)> = params
        .iter()
        .map(|(k, p)| (k.clone(), p.tensor.clone()))
        .collect();
    for (name, p) in params.iter_mut() {
        for (pi, ei) in p.tensor.data_mut().iter_mut().zip(eps[name].data()) {
            *pi += ei;
        }
    }
    let second = loss_and_grads(params);
    for (name, tensor) in saved {
        params.get_mut(&name).expect("saved key").tensor = tensor;
    }
    let (l2, g2) = second?;
    if !l2.is_finite() {
        return Err(Error::Divergence(format!("perturbed loss became {l2}")));
    }
    sgd_step(params, &g2, sgd, vel)?;
    Ok(SamStepInfo {
        loss: l1,
        perturbed_loss: Some(l2),
    })
}

/// Running mean of parameter snapshots (the evaluation weights after the
/// averaging phase starts).
#[derive(Clone, Debug)]
pub struct SWAState {
    averaged: BTreeMap<String, Tensor>,
    count: usize,
    pub start_epoch: usize,
    pub swa_lr: f64,
}

impl SWAState {
    pub fn new(start_epoch: usize, swa_lr: f64) -> Result<Self> {
        if !(swa_lr > 0.0) {
            return Err(Error::invalid_config("swa_lr", "must be > 0"));
        }
        Ok(SWAState {
            averaged: BTreeMap::new(),
            count: 0,
            start_epoch,
            swa_lr,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn averaged(&self) -> &BTreeMap<String, Tensor> {
        &self.averaged
    }
}

/// Fold one snapshot into the running mean:
/// averaged ← (averaged·count + current)/(count + 1).
pub fn swa_update(state: &mut SWAState, params: &ParamMap, epoch: usize) -> Result<()> {
    if epoch < state.start_epoch {
        return Err(Error::OutOfRange {
            what: "swa update epoch (before start_epoch)",
            value: epoch as f64,
        });
    }
    let n = state.count as f64;
    for (name, p) in params {
        match state.averaged.get_mut(name) {
            Some(avg) => {
                if avg.shape() != p.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "swa_update",
                        detail: format!("'{name}': {:?} vs {:?}", avg.shape(), p.tensor.shape()),
                    });
                }
                for (a, &x) in avg.data_mut().iter_mut().zip(p.tensor.data()) {
                    *a = (*a * n + x) / (n + 1.0);
                }
            }
            None => {
                if state.count != 0 {
                    return Err(Error::ShapeMismatch {
                        op: "swa_update",
                        detail: format!("parameter '{name}' appeared after averaging began"),
                    });
                }
                state.averaged.insert(name.clone(), p.tensor.clone());
            }
        }
    }
    state.count += 1;
    Ok(())
}

/// Install the averaged weights into the model.
pub fn swa_finalize(state: &SWAState, model: &mut Model) -> Result<()> {
    if state.count == 0 {
        return Err(Error::NoSnapshots);
    }
    model.set_tensors(&state.averaged)
}

/// Cosine annealing parameters.
#[derive(Clone, Copy, Debug)]
pub struct LRSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_epochs: usize,
}

impl LRSchedule {
    pub fn new(eta_max: f64, eta_min: f64, total_epochs: usize) -> Result<Self> {
        if !(eta_max > 0.0) {
            return Err(Error::invalid_config("lr", "peak learning rate must be > 0"));
        }
        if !(0.0..=eta_max).contains(&eta_min) {
            return Err(Error::invalid_config("eta_min", "need 0 ≤ eta_min ≤ lr"));
        }
        if total_epochs == 0 {
            return Err(Error::invalid_config("epochs", "must be ≥ 1"));
        }
        Ok(LRSchedule {
            eta_max,
            eta_min,
            total_epochs,
        })
    }
}

/// η(t) = η_min + ½(η_max − η_min)(1 + cos(π·t/T)) for 0 ≤ t ≤ T.
pub fn cosine_lr(sched: &LRSchedule, epoch: usize) -> Result<f64> {
    if epoch > sched.total_epochs {
        return Err(Error::OutOfRange {
            what: "schedule epoch",
            value: epoch as f64,
        });
    }
    let t = epoch as f64 / sched.total_epochs as f64;
    Ok(sched.eta_min + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Parameter;

    fn single_param(value: &[f64]) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert(
            "w".to_string(),
            Parameter {
                tensor: Tensor::from_vec(value.to_vec()),
                trainable: true,
            },
        );
        p
    }

    fn grad_of(value: &[f64]) -> GradMap {
        let mut g = GradMap::new();
        g.insert("w".to_string(), Tensor::from_vec(value.to_vec()));
        g
    }

    #[test]
    fn sgd_basic_arithmetic() {
        let cfg = SGDConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut params = single_param(&[1.0]);
        let mut vel = Velocity::new();
        sgd_step(&mut params, &grad_of(&[2.0]), &cfg, &mut vel).unwrap();
        assert!((params["w"].tensor.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_stationary_point() {
        let cfg = SGDConfig { lr: 7.3, momentum: 0.0, weight_decay: 0.0 };
        let mut params = single_param(&[1.5]);
        let mut vel = Velocity::new();
        sgd_step(&mut params, &grad_of(&[0.0]), &cfg, &mut vel).unwrap();
        assert_eq!(params["w"].tensor.data()[0], 1.5);
    }

    #[test]
    fn sgd_decay_only() {
        let cfg = SGDConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5 };
        let mut params = single_param(&[1.0]);
        let mut vel = Velocity::new();
        sgd_step(&mut params, &grad_of(&[0.0]), &cfg, &mut vel).unwrap();
        assert!((params["w"].tensor.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        // two identical steps: v1 = g, v2 = 0.9g + g ⇒ θ = 1 − lr(g + 1.9g)
        let cfg = SGDConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut params = single_param(&[1.0]);
        let mut vel = Velocity::new();
        sgd_step(&mut params, &grad_of(&[1.0]), &cfg, &mut vel).unwrap();
        sgd_step(&mut params, &grad_of(&[1.0]), &cfg, &mut vel).unwrap();
        assert!((params["w"].tensor.data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_nan_gradient() {
        let cfg = SGDConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut params = single_param(&[1.0]);
        let mut vel = Velocity::new();
        assert!(matches!(
            sgd_step(&mut params, &grad_of(&[f64::NAN]), &cfg, &mut vel),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let cfg = SGDConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut params = single_param(&[1.0]);
        params.get_mut("w").unwrap().trainable = false;
        let mut vel = Velocity::new();
        sgd_step(&mut params, &GradMap::new(), &cfg, &mut vel).unwrap();
        assert_eq!(params["w"].tensor.data()[0], 1.0);
    }

    #[test]
    fn perturbation_cases() {
        let g = grad_of(&[3.0, 4.0]);
        let eps = sam_perturbation(&g, &SAMConfig { rho: 0.05 });
        let e = eps["w"].data();
        assert!((e[0] - 0.03).abs() < 1e-15 && (e[1] - 0.04).abs() < 1e-15);

        let eps0 = sam_perturbation(&g, &SAMConfig { rho: 0.0 });
        assert_eq!(eps0["w"].data(), &[0.0, 0.0]);

        // ‖ε‖ == ρ for nonzero gradients
        for rho in [0.01, 0.5, 2.0] {
            let eps = sam_perturbation(&g, &SAMConfig { rho });
            let norm = eps["w"].l2_norm();
            assert!((norm - rho).abs() < 1e-9);
        }

        let tiny = grad_of(&[0.0, 0.0]);
        let eps = sam_perturbation(&tiny, &SAMConfig { rho: 0.1 });
        assert_eq!(eps["w"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn sam_quadratic_hand_trace() {
        // loss ½θ²: phase-1 grad 1, ε = 0.1, phase-2 grad 1.1, θ ← 0.89
        let sgd = SGDConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let sam = SAMConfig { rho: 0.1 };
        let mut params = single_param(&[1.0]);
        let mut vel = Velocity::new();
        let info = sam_step(
            &mut params,
            |p| {
                let th = p["w"].tensor.data()[0];
                Ok((0.5 * th * th, grad_of(&[th])))
            },
            &sgd,
            &sam,
            &mut vel,
        )
        .unwrap();
        assert!((params["w"].tensor.data()[0] - 0.89).abs() < 1e-12);
        assert!((info.loss - 0.5).abs() < 1e-12);
        assert!((info.perturbed_loss.unwrap() - 0.5 * 1.1 * 1.1).abs() < 1e-12);
    }

    #[test]
    fn sam_zero_rho_matches_sgd_bitwise() {
        let sgd = SGDConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-3 };
        let closure = |p: &ParamMap| {
            let th = p["w"].tensor.data()[0];
            Ok(((th - 0.3).powi(4), grad_of(&[4.0 * (th - 0.3).powi(3)])))
        };
        let mut a = single_param(&[1.0]);
        let mut b = single_param(&[1.0]);
        let mut va = Velocity::new();
        let mut vb = Velocity::new();
        for _ in 0..10 {
            sam_step(&mut a, closure, &sgd, &SAMConfig { rho: 0.0 }, &mut va).unwrap();
            let (_, g) = closure(&b).unwrap();
            sgd_step(&mut b, &g, &sgd, &mut vb).unwrap();
            assert_eq!(
                a["w"].tensor.data()[0].to_bits(),
                b["w"].tensor.data()[0].to_bits()
            );
        }
    }

    #[test]
    fn sam_update_uses_phase_two_gradient_only() {
        // Craft a closure whose phase-2 gradient (at the perturbed point)
        // differs measurably from phase 1; with momentum 0, wd 0 the update
        // must equal −lr·g₂ exactly.
        let sgd = SGDConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 };
        let sam = SAMConfig { rho: 0.5 };
        let mut params = single_param(&[2.0]);
        let mut vel = Velocity::new();
        let mut seen = Vec::new();
        sam_step(
            &mut params,
            |p| {
                let th = p["w"].tensor.data()[0];
                seen.push(th);
                Ok((0.5 * th * th, grad_of(&[th])))
            },
            &sgd,
            &sam,
            &mut vel,
        )
        .unwrap();
        assert_eq!(seen.len(), 2);
        assert!((seen[0] - 2.0).abs() < 1e-15);
        assert!((seen[1] - 2.5).abs() < 1e-12); // θ + ρ·g/‖g‖
        // θ_new = 2.0 − 1.0·2.5: only the phase-2 gradient appears
        assert!((params["w"].tensor.data()[0] - (2.0 - 2.5)).abs() < 1e-12);
    }

    #[test]
    fn sam_restores_weights_exactly_after_perturbation() {
        // Zero phase-2 gradient ⇒ the step is a no-op, so any drift left by
        // the climb/restore cycle would show up bitwise.
        let sgd = SGDConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let sam = SAMConfig { rho: 0.3 };
        let theta0 = 0.1 + 1e-17; // (θ+ε)−ε would not round-trip in f64
        let mut params = single_param(&[theta0]);
        let mut vel = Velocity::new();
        let mut calls = 0;
        sam_step(
            &mut params,
            |_| {
                calls += 1;
                let g = if calls == 1 { 1.0 } else { 0.0 };
                Ok((1.0, grad_of(&[g])))
            },
            &sgd,
            &sam,
            &mut vel,
        )
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(params["w"].tensor.data()[0].to_bits(), theta0.to_bits());
    }

    #[test]
    fn sam_converges_on_quadratic() {
        let sgd = SGDConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let sam = SAMConfig { rho: 0.05 };
        let mut params = single_param(&[1.0]);
        let mut vel = Velocity::new();
        let mut last_loss = f64::INFINITY;
        let mut reached = false;
        for _ in 0..200 {
            let info = sam_step(
                &mut params,
                |p| {
                    let th = p["w"].tensor.data()[0];
                    Ok((0.5 * th * th, grad_of(&[th])))
                },
                &sgd,
                &sam,
                &mut vel,
            )
            .unwrap();
            let th = params["w"].tensor.data()[0];
            if th.abs() <= sam.rho {
                reached = true;
                break;
            }
            assert!(info.loss < last_loss, "loss must decrease outside the ρ-neighborhood");
            last_loss = info.loss;
        }
        assert!(reached, "‖θ‖ never entered the ρ-neighborhood of 0");
    }

    #[test]
    fn swa_running_mean() {
        let mut state = SWAState::new(0, 0.05).unwrap();
        let p1 = single_param(&[1.0]);
        let p2 = single_param(&[3.0]);
        swa_update(&mut state, &p1, 0).unwrap();
        assert_eq!(state.averaged()["w"].data(), &[1.0]); // single snapshot
        swa_update(&mut state, &p2, 1).unwrap();
        assert_eq!(state.averaged()["w"].data(), &[2.0]);

        let mut state = SWAState::new(0, 0.05).unwrap();
        for v in [1.0, 2.0, 6.0] {
            swa_update(&mut state, &single_param(&[v]), 0).unwrap();
        }
        assert!((state.averaged()["w"].data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn swa_incremental_equals_direct_mean() {
        let mut state = SWAState::new(0, 0.05).unwrap();
        let mut direct = 0.0;
        let n = 1000;
        for i in 0..n {
            let v = (i as f64 * 0.37).sin() + 0.5;
            direct += v;
            swa_update(&mut state, &single_param(&[v]), i).unwrap();
        }
        direct /= n as f64;
        assert!((state.averaged()["w"].data()[0] - direct).abs() < 1e-12);
        assert_eq!(state.count(), n);
    }

    #[test]
    fn swa_update_before_start_rejected() {
        let mut state = SWAState::new(5, 0.05).unwrap();
        assert!(swa_update(&mut state, &single_param(&[1.0]), 4).is_err());
    }

    #[test]
    fn swa_finalize_requires_snapshots() {
        let state = SWAState::new(0, 0.05).unwrap();
        let mut r = crate::rng::seeded(0);
        let mut model = Model::new(
            crate::model::MLPSpec::new(vec![2, 2]).unwrap(),
            crate::model::HeadKind::Linear,
            2,
            8.0,
            &mut r,
        )
        .unwrap();
        assert!(matches!(
            swa_finalize(&state, &mut model),
            Err(Error::NoSnapshots)
        ));
    }

    #[test]
    fn swa_finalize_installs_average() {
        let mut r = crate::rng::seeded(1);
        let mut model = Model::new(
            crate::model::MLPSpec::new(vec![2, 2]).unwrap(),
            crate::model::HeadKind::Linear,
            2,
            8.0,
            &mut r,
        )
        .unwrap();
        let mut state = SWAState::new(0, 0.05).unwrap();
        swa_update(&mut state, &model.params, 0).unwrap();
        let snapshot = model.tensors();
        swa_finalize(&state, &mut model).unwrap();
        for (name, t) in snapshot {
            assert_eq!(model.params[&name].tensor.data(), t.data());
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let sched = LRSchedule::new(0.1, 0.0, 100).unwrap();
        assert!((cosine_lr(&sched, 0).unwrap() - 0.1).abs() < 1e-15);
        assert!(cosine_lr(&sched, 100).unwrap().abs() < 1e-15);
        assert!((cosine_lr(&sched, 50).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(&sched, 101).is_err());
    }

    #[test]
    fn cosine_schedule_non_increasing() {
        let sched = LRSchedule::new(0.1, 1e-4, 73).unwrap();
        let mut last = f64::INFINITY;
        for t in 0..=73 {
            let lr = cosine_lr(&sched, t).unwrap();
            assert!(lr <= last + 1e-15);
            last = lr;
        }
    }
}
