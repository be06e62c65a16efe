//! Certified training of a latent-space classifier head.
//!
//! The objective mixes the nominal cross-entropy with the cross-entropy of
//! the worst-case logits built from the interval bounds:
//!
//! ```text
//! L = χ · CE(z_K, y) + (1 − χ) · CE(ẑ_K(ε), y)
//! ```
//!
//! χ starts at 1 (plain training) during warmup and ramps down linearly to
//! `1 − kappa_final` while ε ramps from 0 to its target. Gradients flow
//! through the interval recursion itself, so the bound gets tighter as
//! training proceeds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{self, UnitTest};
use crate::bounds::{worst_case_logits, Engine, LinearSpec, NetworkBounds, Norm, PerturbationSpec};
use crate::data::Dataset;
use crate::error::{check_len, AuditError, Result};
use crate::init::glorot_uniform;
use crate::linalg::{
    accumulate_outer, backward, forward, matvec_transposed, Activation, GradientSet, Network, Role,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps_hat: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Widths from latent input to class logits; hidden layers are relu.
    pub arch: Vec<usize>,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    pub learning_rate: f64,
    /// Final weight of the worst-case loss.
    pub kappa_final: f64,
    pub epsilon_target: f64,
    pub pert_dims: Vec<usize>,
    pub norm: Norm,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: vec![4, 32, 32, 32, 32, 2],
            epochs: 100,
            warmup_epochs: 5,
            ramp_epochs: 50,
            learning_rate: 5e-4,
            kappa_final: 0.5,
            epsilon_target: 0.0,
            pert_dims: vec![0],
            norm: Norm::L2,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AuditError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs + self.ramp_epochs > self.epochs {
            return bad(format!(
                "warmup ({}) + ramp ({}) exceeds epochs ({})",
                self.warmup_epochs, self.ramp_epochs, self.epochs
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.kappa_final) {
            return bad(format!("kappa_final must lie in [0, 1], got {}", self.kappa_final));
        }
        if !(self.epsilon_target >= 0.0 && self.epsilon_target.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon_target));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.arch.len() < 2 || self.arch.contains(&0) {
            return bad(format!("architecture {:?} needs at least two positive widths", self.arch));
        }
        if self.arch[self.arch.len() - 1] < 2 {
            return bad("classifier needs at least two classes".into());
        }
        if self.pert_dims.is_empty() || self.pert_dims.iter().any(|&j| j >= self.arch[0]) {
            return bad(format!(
                "perturbed dims {:?} invalid for latent width {}",
                self.pert_dims, self.arch[0]
            ));
        }
        match self.optimizer {
            Optimizer::SgdMomentum { beta } if !(0.0..1.0).contains(&beta) => {
                bad(format!("momentum must lie in [0, 1), got {beta}"))
            }
            Optimizer::Adam { beta1, beta2, eps_hat }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps_hat > 0.0) =>
            {
                bad("adam needs beta1, beta2 in [0, 1) and eps_hat > 0".into())
            }
            _ => Ok(()),
        }
    }

    pub fn perturbation(&self, epsilon: f64) -> Result<PerturbationSpec> {
        PerturbationSpec::new(self.pert_dims.clone(), epsilon, self.norm)
    }
}

/// Nominal-loss weight χ and radius ε in effect for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub chi: f64,
    pub epsilon: f64,
}

pub fn schedule(epoch: usize, cfg: &TrainConfig) -> ScheduleState {
    let final_state = ScheduleState {
        chi: 1.0 - cfg.kappa_final,
        epsilon: cfg.epsilon_target,
    };
    if epoch < cfg.warmup_epochs {
        return ScheduleState { chi: 1.0, epsilon: 0.0 };
    }
    let into_ramp = epoch - cfg.warmup_epochs;
    if into_ramp >= cfg.ramp_epochs {
        return final_state;
    }
    let t = into_ramp as f64 / cfg.ramp_epochs as f64;
    ScheduleState {
        chi: 1.0 - t * cfg.kappa_final,
        epsilon: t * cfg.epsilon_target,
    }
}

/// Cross-entropy of `softmax(logits)` against `y_true` and its gradient.
fn cross_entropy(logits: &[f64], y_true: usize) -> Result<(f64, Vec<f64>)> {
    if y_true >= logits.len() {
        return Err(AuditError::Argument(format!(
            "class {y_true} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = max + sum.ln() - logits[y_true];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[y_true] -= 1.0;
    Ok((loss.max(0.0), grad))
}

pub fn task_loss(logits: &[f64], y_true: usize) -> Result<f64> {
    Ok(cross_entropy(logits, y_true)?.0)
}

/// Cross-entropy of the worst-case logits over the perturbation set.
///
/// With `crown-ibp` the worst-case vector is built from the per-class margin
/// bounds (`ẑ_y = max(z_y − z_true)`, `ẑ_true = 0`), which has the same
/// cross-entropy as the box construction when the bounds coincide.
pub fn spec_loss(
    net: &Network,
    z0: &[f64],
    pert: &PerturbationSpec,
    y_true: usize,
    engine: Engine,
) -> Result<f64> {
    let bounds = NetworkBounds::compute(net, z0, pert)?;
    let worst = match engine {
        Engine::Ibp => worst_case_logits(&bounds.output, y_true)?,
        Engine::CrownIbp => {
            let k = net.output_dim();
            (0..k)
                .map(|y| {
                    if y == y_true {
                        Ok(0.0)
                    } else {
                        let spec = LinearSpec::margin(k, y, y_true)?;
                        bounds.crown_upper_bound(net, z0, pert, &spec)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    task_loss(&worst, y_true)
}

/// Mean losses over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub spec: f64,
    pub total: f64,
}

/// `χ·mean(task) + (1−χ)·mean(spec)` with interval bounds at `pert`.
pub fn total_loss(net: &Network, batch: &Dataset, chi: f64, pert: &PerturbationSpec) -> Result<f64> {
    Ok(loss_breakdown(net, batch, chi, pert)?.total)
}

pub fn loss_breakdown(
    net: &Network,
    batch: &Dataset,
    chi: f64,
    pert: &PerturbationSpec,
) -> Result<LossBreakdown> {
    check_chi(chi)?;
    if batch.is_empty() {
        return Err(AuditError::Argument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut task = 0.0;
    let mut spec = 0.0;
    for (z0, y) in batch.iter() {
        task += task_loss(&net.logits(z0)?, y)?;
        if chi < 1.0 {
            spec += spec_loss(net, z0, pert, y, Engine::Ibp)?;
        }
    }
    let (task, spec) = (task / n, spec / n);
    let total = if chi < 1.0 { chi * task + (1.0 - chi) * spec } else { task };
    Ok(LossBreakdown { task, spec, total })
}

fn check_chi(chi: f64) -> Result<()> {
    if (0.0..=1.0).contains(&chi) {
        Ok(())
    } else {
        Err(AuditError::Argument(format!("chi must lie in [0, 1], got {chi}")))
    }
}

/// Exact gradient of [`total_loss`] through both the nominal forward pass
/// and the interval recursion.
///
/// `|W|` differentiates to `sign(W)` with `sign(0) = 0`, the ℓ₂ dual norm of
/// an all-zero row has zero gradient, and relu has derivative 0 at 0.
pub fn certified_backward(
    net: &Network,
    batch: &Dataset,
    chi: f64,
    pert: &PerturbationSpec,
) -> Result<(LossBreakdown, GradientSet)> {
    check_chi(chi)?;
    if batch.is_empty() {
        return Err(AuditError::Argument("empty batch".into()));
    }
    check_len("batch latent width", net.input_dim(), batch.dim())?;
    let n = batch.len() as f64;
    let mut grads = GradientSet::zeros_like(net);
    let mut task_sum = 0.0;
    let mut spec_sum = 0.0;
    for (z0, y) in batch.iter() {
        let trace = forward(net, z0)?;
        let (task, mut g) = cross_entropy(trace.output(), y)?;
        task_sum += task;
        g.iter_mut().for_each(|v| *v *= chi / n);
        grads.add_scaled(&backward(net, &trace, &g)?, 1.0);

        if chi < 1.0 {
            let bounds = NetworkBounds::compute(net, z0, pert)?;
            let worst = worst_case_logits(&bounds.output, y)?;
            let (spec, mut g) = cross_entropy(&worst, y)?;
            spec_sum += spec;
            g.iter_mut().for_each(|v| *v *= (1.0 - chi) / n);
            interval_backward(net, &bounds, z0, pert, y, &g, &mut grads)?;
        }
    }
    let (task, spec) = (task_sum / n, spec_sum / n);
    let total = if chi < 1.0 { chi * task + (1.0 - chi) * spec } else { task };
    Ok((LossBreakdown { task, spec, total }, grads))
}

fn post_activation(act: Activation, pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&x| act.eval(x)).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Accumulates `d(worst-case loss)/dθ` given the gradient on `ẑ_K`.
fn interval_backward(
    net: &Network,
    bounds: &NetworkBounds,
    z0: &[f64],
    pert: &PerturbationSpec,
    y_true: usize,
    d_worst: &[f64],
    grads: &mut GradientSet,
) -> Result<()> {
    let k_out = net.output_dim();
    let mut d_hi = vec![0.0; k_out];
    let mut d_lo = vec![0.0; k_out];
    for (y, &g) in d_worst.iter().enumerate() {
        if y == y_true {
            d_lo[y] = g;
        } else {
            d_hi[y] = g;
        }
    }
    let layers = net.layers();
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        let pre = &bounds.pre_activation[k];
        let act = layer.activation;
        let mut dc = Vec::with_capacity(pre.len());
        let mut dr = Vec::with_capacity(pre.len());
        for j in 0..pre.len() {
            let (l, u) = (pre.lower[j], pre.upper[j]);
            let gu = d_hi[j] * act.derivative(u, act.eval(u));
            let gl = d_lo[j] * act.derivative(l, act.eval(l));
            dc.push(gu + gl);
            dr.push(gu - gl);
        }
        let g = &mut grads.layers[k];
        if k == 0 {
            accumulate_outer(g, &dc, z0);
            if pert.epsilon() > 0.0 {
                let eps = pert.epsilon();
                for (i, &dri) in dr.iter().enumerate() {
                    if dri == 0.0 {
                        continue;
                    }
                    let row = layer.weights.row(i);
                    match pert.norm() {
                        Norm::Linf => {
                            for &j in pert.dims() {
                                let w = g.weights.get(i, j);
                                g.weights.set(i, j, w + dri * eps * sign(row[j]));
                            }
                        }
                        Norm::L2 => {
                            let norm = pert.dims().iter().map(|&j| row[j] * row[j]).sum::<f64>().sqrt();
                            if norm > 0.0 {
                                for &j in pert.dims() {
                                    let w = g.weights.get(i, j);
                                    g.weights.set(i, j, w + dri * eps * row[j] / norm);
                                }
                            }
                        }
                    }
                }
            }
        } else {
            let prev = &bounds.pre_activation[k - 1];
            let act_prev = layers[k - 1].activation;
            let hi = post_activation(act_prev, &prev.upper);
            let lo = post_activation(act_prev, &prev.lower);
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, u)| (u + l) / 2.0).collect();
            let rad: Vec<f64> = lo.iter().zip(&hi).map(|(l, u)| (u - l) / 2.0).collect();
            accumulate_outer(g, &dc, &mid);
            for (i, &dri) in dr.iter().enumerate() {
                if dri == 0.0 {
                    continue;
                }
                let row = layer.weights.row(i);
                for (j, gw) in g.weights.row_mut(i).iter_mut().enumerate() {
                    *gw += dri * rad[j] * sign(row[j]);
                }
            }
            let d_mid = matvec_transposed(&layer.weights, &dc)?;
            let d_rad = matvec_transposed(&layer.weights.abs(), &dr)?;
            d_hi = d_mid.iter().zip(&d_rad).map(|(m, r)| (m + r) / 2.0).collect();
            d_lo = d_mid.iter().zip(&d_rad).map(|(m, r)| (m - r) / 2.0).collect();
        }
    }
    Ok(())
}

/// Smallest distance of any relu argument (nominal or interval endpoint) or
/// any weight from a point where the loss is not differentiable.
///
/// Finite-difference checks with step `h` are only meaningful when this is
/// comfortably larger than `h`.
pub fn kink_distance(net: &Network, batch: &Dataset, pert: &PerturbationSpec) -> Result<f64> {
    let mut dist = f64::INFINITY;
    for layer in net.layers() {
        for &w in layer.weights.as_slice() {
            dist = dist.min(w.abs());
        }
    }
    for (z0, _) in batch.iter() {
        let trace = forward(net, z0)?;
        let bounds = NetworkBounds::compute(net, z0, pert)?;
        for (k, layer) in net.layers().iter().enumerate() {
            if layer.activation != Activation::Relu {
                continue;
            }
            for &a in trace.pre[k]
                .iter()
                .chain(&bounds.pre_activation[k].lower)
                .chain(&bounds.pre_activation[k].upper)
            {
                dist = dist.min(a.abs());
            }
        }
    }
    Ok(dist)
}

/// First-order optimiser state over the flattened parameter vector.
#[derive(Debug, Clone)]
struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, num_params: usize) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    fn apply(&mut self, net: &mut Network, grads: &GradientSet) {
        let g = grads.flatten();
        self.step += 1;
        match self.kind {
            Optimizer::SgdMomentum { beta } => {
                for (v, gi) in self.first.iter_mut().zip(&g) {
                    *v = beta * *v + gi;
                }
                let (lr, vel) = (self.lr, &self.first);
                net.for_each_param_mut(|i, p| *p -= lr * vel[i]);
            }
            Optimizer::Adam { beta1, beta2, eps_hat } => {
                for ((m, v), gi) in self.first.iter_mut().zip(self.second.iter_mut()).zip(&g) {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (lr, m, v) = (self.lr, &self.first, &self.second);
                net.for_each_param_mut(|i, p| {
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    *p -= lr * mh / (vh.sqrt() + eps_hat);
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub chi: f64,
    pub epsilon: f64,
    pub task_loss: f64,
    pub spec_loss: f64,
    pub total_loss: f64,
    pub clean_error: f64,
    pub verified_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,chi,epsilon,task_loss,spec_loss,total_loss,clean_error,verified_error\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.chi, r.epsilon, r.task_loss, r.spec_loss, r.total_loss, r.clean_error, r.verified_error
            ));
        }
        out
    }
}

/// Trains a fresh classifier head from `cfg.seed`.
///
/// Every epoch records the schedule state, the mean training losses and the
/// clean / interval-verified error on `eval_set` at `epsilon_target`.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    let classes = cfg.arch[cfg.arch.len() - 1];
    for (name, ds) in [("training", train_set), ("evaluation", eval_set)] {
        if ds.is_empty() {
            return Err(AuditError::Argument(format!("{name} set is empty")));
        }
        check_len("dataset latent width", cfg.arch[0], ds.dim())?;
        ds.check_labels(classes)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = glorot_uniform(&cfg.arch, Activation::Relu, Role::Classifier, &mut rng)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, net.num_params());
    let eval_test = UnitTest::classification_invariance("training-eval", cfg.perturbation(cfg.epsilon_target)?);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let state = schedule(epoch, cfg);
        let pert = cfg.perturbation(state.epsilon)?;
        order.shuffle(&mut rng);
        let (mut task, mut spec, mut total) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.subset(chunk);
            let (loss, grads) = certified_backward(&net, &batch, state.chi, &pert)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(AuditError::Divergence {
                    epoch,
                    batch: b,
                    loss: loss.total,
                });
            }
            let w = chunk.len() as f64;
            task += loss.task * w;
            spec += loss.spec * w;
            total += loss.total * w;
            opt.apply(&mut net, &grads);
        }
        let n = train_set.len() as f64;
        let report = audit::run_unit_test(&net, eval_set, &eval_test, None, Engine::Ibp)?;
        history.records.push(EpochRecord {
            epoch,
            chi: state.chi,
            epsilon: state.epsilon,
            task_loss: task / n,
            spec_loss: if state.chi < 1.0 { spec / n } else { f64::NAN },
            total_loss: total / n,
            clean_error: report.n_clean_errors as f64 / eval_set.len() as f64,
            verified_error: report.verified_error,
        });
        log::debug!(
            "epoch {epoch}: chi {:.3} eps {:.3} loss {:.4} verified error {:.3}",
            state.chi,
            state.epsilon,
            total / n,
            report.verified_error
        );
    }
    Ok((net, history))
}
