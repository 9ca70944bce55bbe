//! Objective construction and the three-phase Adam schedule with early stopping.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{prediction_loss_raw, Graph, LossKind, Var};
use crate::data::NeuralDataset;
use crate::error::{Error, Result};
use crate::model::{batch_images, ForwardPass, Model, ModelVars, ParamKind, ReadoutMode, Trace};
use crate::ops::{self, BnMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regularization {
    /// L1 weight on readout masks and feature weights.
    pub readout_l1: f64,
    /// L1 weight on every convolution kernel.
    pub conv_l1: f64,
    /// Weight on squared Laplacian responses of the first-layer kernels.
    pub smoothness: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization {
            readout_l1: 1e-3,
            conv_l1: 1e-4,
            smoothness: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub regularization: Regularization,
    pub loss: LossKind,
    /// Fraction of the training split used (a prefix of the shuffled list).
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phases: [1e-3, 1e-4, 1e-5]
                .into_iter()
                .map(|lr| Phase {
                    learning_rate: lr,
                    max_epochs: 300,
                    patience: 10,
                })
                .collect(),
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 64,
            regularization: Regularization::default(),
            loss: LossKind::Poisson,
            train_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phases.is_empty() {
            return bad("a schedule needs at least one phase".into());
        }
        for w in self.phases.windows(2) {
            if w[1].learning_rate >= w[0].learning_rate {
                return bad("learning rates must strictly decrease across phases".into());
            }
        }
        if self.phases.iter().any(|p| p.patience < 1 || p.max_epochs < 1 || !(p.learning_rate > 0.0)) {
            return bad("every phase needs a positive learning rate, epochs and patience".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("training fraction {} outside (0, 1]", self.train_fraction));
        }
        Ok(())
    }
}

/// Mean prediction loss of `r_hat` against `r`.
pub fn prediction_loss<S: Scalar>(r_hat: &Tensor<S>, r: &Tensor<S>, kind: LossKind) -> Result<S> {
    if r_hat.shape() != r.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            r_hat.shape(),
            r.shape()
        )));
    }
    if !r_hat.is_finite() || !r.is_finite() {
        return Err(Error::Numerical("non-finite prediction or target".into()));
    }
    Ok(prediction_loss_raw(r_hat.data(), r.data(), kind))
}

/// Training loss of a traced forward pass: the mean over per-iteration predictions for
/// `late_avg`/`two_avg`, the loss of the final prediction otherwise.
pub fn per_iteration_loss<S: Scalar>(trace: &Trace<S>, r: &Tensor<S>, kind: LossKind, mode: ReadoutMode) -> Result<S> {
    if !mode.averages_losses() {
        return prediction_loss(&trace.prediction, r, kind);
    }
    if trace.per_iteration.is_empty() {
        return Err(Error::Invalid("trace holds no per-iteration predictions".into()));
    }
    let mut total = S::zero();
    for p in &trace.per_iteration {
        total += prediction_loss(p, r, kind)?;
    }
    Ok(total / S::lit(trace.per_iteration.len() as f64))
}

/// Value of the regularization penalty.
pub fn regularization<S: Scalar>(model: &Model<S>, reg: &Regularization) -> S {
    let l1 = |t: &Tensor<S>| t.data().iter().map(|x| x.abs()).sum::<S>();
    let mut readout = S::zero();
    let mut conv = S::zero();
    for (_, kind, t) in model.params() {
        match kind {
            ParamKind::ReadoutMask | ParamKind::ReadoutFeatures => readout += l1(t),
            ParamKind::ConvKernel => conv += l1(t),
            _ => {}
        }
    }
    let first = first_kernel(model);
    let s = first.shape();
    let smooth = ops::laplacian_interior(first.data(), s[0] * s[1], s[2])
        .iter()
        .map(|&v| v * v)
        .sum::<S>();
    S::lit(reg.readout_l1) * readout + S::lit(reg.conv_l1) * conv + S::lit(reg.smoothness) * smooth
}

fn first_kernel<S: Scalar>(model: &Model<S>) -> &Tensor<S> {
    match &model.blocks[0] {
        crate::model::Block::Conv(cb) => &cb.kernel,
        crate::model::Block::Recurrent(_) => unreachable!("the first block is convolutional"),
    }
}

/// Graph nodes of one objective evaluation.
pub struct Objective {
    pub total: Var,
    pub prediction_loss: Var,
    pub pass: ForwardPass,
}

/// Builds `prediction loss + regularization` on an already bound model.
pub fn build_objective<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    vars: &ModelVars,
    images: Var,
    targets: &Tensor<S>,
    loss: LossKind,
    reg: &Regularization,
    mode: BnMode,
) -> Result<Objective> {
    let pass = model.forward(g, vars, images, mode)?;
    let mut losses = Vec::with_capacity(pass.per_iteration.len());
    for &p in &pass.per_iteration {
        losses.push(g.loss(p, targets, loss)?);
    }
    let prediction_loss = g.mean(&losses)?;
    let mut readout = Vec::new();
    let mut conv = Vec::new();
    let mut first = None;
    for ((_, kind, _), &v) in model.params().iter().zip(&vars.all) {
        match kind {
            ParamKind::ReadoutMask | ParamKind::ReadoutFeatures => readout.push(g.abs_sum(v)),
            ParamKind::ConvKernel => {
                first.get_or_insert(v);
                conv.push(g.abs_sum(v));
            }
            _ => {}
        }
    }
    let mut terms = vec![prediction_loss];
    if reg.readout_l1 != 0.0 && !readout.is_empty() {
        let s = g.sum(&readout)?;
        terms.push(g.scale(s, S::lit(reg.readout_l1)));
    }
    if reg.conv_l1 != 0.0 && !conv.is_empty() {
        let s = g.sum(&conv)?;
        terms.push(g.scale(s, S::lit(reg.conv_l1)));
    }
    if reg.smoothness != 0.0 {
        let w = first.expect("models have a first kernel");
        let l = g.laplacian_sq(w)?;
        terms.push(g.scale(l, S::lit(reg.smoothness)));
    }
    let total = g.sum(&terms)?;
    Ok(Objective {
        total,
        prediction_loss,
        pass,
    })
}

/// Adam with bias correction; one moment pair per parameter tensor.
pub struct Adam<S: Scalar> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, schedule: &TrainSchedule) -> Self {
        Adam {
            lr: S::lit(lr),
            beta1: S::lit(schedule.beta1),
            beta2: S::lit(schedule.beta2),
            eps: S::lit(schedule.adam_epsilon),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Vec<S>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![S::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = S::one() - self.beta1.powi(self.step);
        let c2 = S::one() - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (S::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (S::one() - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Patience counter over validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Last epoch run in each phase.
    pub stop_epochs: Vec<usize>,
    /// Best validation loss reached in each phase (restored at the phase end).
    pub best_val: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase,train_loss,val_loss\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{:.12e},{:.12e}", r.epoch, r.phase, r.train_loss, r.val_loss);
        }
        s
    }
}

/// Validation-style loss in eval mode over `rows`, averaged over images.
pub fn evaluation_loss<S: Scalar>(model: &Model<S>, ds: &NeuralDataset<S>, rows: &[usize], kind: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for chunk in rows.chunks(256) {
        let (img, r) = ds.batch(chunk);
        let trace = model.infer(&img)?;
        let l = per_iteration_loss(&trace, &r, kind, model.config.readout_mode)?;
        total += l.as_f64() * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Trains in place; `on_phase_end(phase, model)` runs after each phase's best
/// parameters are restored.
pub fn train_observed<S: Scalar>(
    model: &mut Model<S>,
    ds: &NeuralDataset<S>,
    schedule: &TrainSchedule,
    mut on_phase_end: impl FnMut(usize, &Model<S>) -> Result<()>,
) -> Result<TrainHistory> {
    schedule.validate()?;
    let mut train_rows = ds.split.train_subset(schedule.train_fraction);
    let val_rows = ds.split.val.clone();
    if ds.split.train.is_empty() || val_rows.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut history = TrainHistory::default();
    let mut epoch = 0;
    for (phase_idx, phase) in schedule.phases.iter().enumerate() {
        let mut adam = Adam::new(phase.learning_rate, schedule);
        let mut best: Option<(f64, Model<S>)> = None;
        let mut stopper = EarlyStopping::new(phase.patience);
        for _ in 0..phase.max_epochs {
            epoch += 1;
            train_rows.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in train_rows.chunks(schedule.batch_size) {
                let (img, r) = ds.batch(chunk);
                let mut g = Graph::new();
                let vars = model.bind(&mut g, true);
                let x = g.constant(batch_images(&img)?);
                let obj = build_objective(
                    &mut g,
                    model,
                    &vars,
                    x,
                    &r,
                    schedule.loss,
                    &schedule.regularization,
                    BnMode::Train,
                )?;
                let total = g.value(obj.total).data()[0];
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "objective became {total} in phase {} epoch {epoch}",
                        phase_idx + 1
                    )));
                }
                loss_sum += g.value(obj.prediction_loss).data()[0].as_f64() * chunk.len() as f64;
                g.backward(obj.total)?;
                let grads = vars.all.iter().map(|&v| g.grad(v)).collect::<Result<Vec<_>>>()?;
                model.apply_bn_updates(&g, &obj.pass.bn_nodes);
                adam.step(model.params_mut(), &grads);
            }
            if !model.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameters diverged in phase {} epoch {epoch}",
                    phase_idx + 1
                )));
            }
            let val = evaluation_loss(model, ds, &val_rows, schedule.loss)?;
            if !val.is_finite() {
                return Err(Error::Numerical(format!(
                    "validation loss became {val} in phase {} epoch {epoch}",
                    phase_idx + 1
                )));
            }
            history.epochs.push(EpochRecord {
                epoch,
                phase: phase_idx + 1,
                train_loss: loss_sum / train_rows.len() as f64,
                val_loss: val,
            });
            let (improved, stop) = stopper.observe(val);
            if improved {
                best = Some((val, model.clone()));
            }
            if stop {
                break;
            }
        }
        let (best_val, best_model) = best.expect("every phase runs at least one epoch");
        *model = best_model;
        history.stop_epochs.push(epoch);
        history.best_val.push(best_val);
        on_phase_end(phase_idx + 1, model)?;
    }
    Ok(history)
}

pub fn train<S: Scalar>(model: &mut Model<S>, ds: &NeuralDataset<S>, schedule: &TrainSchedule) -> Result<TrainHistory> {
    train_observed(model, ds, schedule, |_, _| Ok(()))
}

/// Objective value (train-mode normalization) at the model's current parameters.
fn objective_value(
    model: &Model<f64>,
    images: &Tensor<f64>,
    targets: &Tensor<f64>,
    loss: LossKind,
    reg: &Regularization,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let x = g.constant(batch_images(images)?);
    let obj = build_objective(&mut g, model, &vars, x, targets, loss, reg, BnMode::Train)?;
    Ok(g.value(obj.total).data()[0])
}

/// Worst per-coordinate disagreement between the reverse-mode gradient of the full
/// training objective and central differences, over every learnable parameter.
///
/// The error of a coordinate is `|a - n| / max(|a|, |n|, 1e-4)`; each coordinate is
/// tried with steps `1e-5` and `1e-6` and the smaller error kept, so a piecewise-linear
/// kink crossed by the larger step does not mask a correct gradient.
pub fn objective_gradient_check(
    model: &Model<f64>,
    images: &Tensor<f64>,
    targets: &Tensor<f64>,
    loss: LossKind,
    reg: &Regularization,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(batch_images(images)?);
    let obj = build_objective(&mut g, model, &vars, x, targets, loss, reg, BnMode::Train)?;
    g.backward(obj.total)?;
    let analytic = vars.all.iter().map(|&v| g.grad(v)).collect::<Result<Vec<_>>>()?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let count = analytic.len();
    for p in 0..count {
        for i in 0..analytic[p].len() {
            let a = analytic[p][i];
            let mut best = f64::INFINITY;
            for h in [1e-5, 1e-6] {
                let orig = probe.params_mut()[p].data()[i];
                probe.params_mut()[p].data_mut()[i] = orig + h;
                let up = objective_value(&probe, images, targets, loss, reg)?;
                probe.params_mut()[p].data_mut()[i] = orig - h;
                let down = objective_value(&probe, images, targets, loss, reg)?;
                probe.params_mut()[p].data_mut()[i] = orig;
                let n = (up - down) / (2.0 * h);
                best = best.min((a - n).abs() / a.abs().max(n.abs()).max(1e-4));
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}
