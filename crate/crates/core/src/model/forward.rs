//! Graph construction for the three model kinds.

use std::collections::HashMap;

use super::{Block, Model, ModelKind, ReadoutMode};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::multipath::entry_vectors;
use crate::ops::{BnMode, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{BnActOrder, ModelConfig};

/// Which normalization instance (and running statistics) a graph node used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BnSlot {
    Input,
    /// Feedforward block, by block index.
    Block(usize),
    /// Recurrent block `block` at zero-based iteration `t`.
    Iteration { block: usize, t: usize },
    /// Multi-path branch; scale/shift come from `Iteration { block, t }`.
    Branch { key: String, block: usize, t: usize },
}

type BnVars = (Var, Var);

enum BlockVars {
    Conv { kernel: Var, bn: BnVars },
    Recurrent { ff: Var, lateral: Var, bns: Vec<BnVars> },
}

/// Graph leaves of every model parameter, in [`Model::params`] order.
pub struct ModelVars {
    pub all: Vec<Var>,
    input_bn: BnVars,
    blocks: Vec<BlockVars>,
    mask: Var,
    features: Var,
    bias: Var,
}

/// Nodes produced by one forward evaluation.
pub struct ForwardPass {
    /// `[B, N]` final prediction.
    pub prediction: Var,
    /// Predictions whose losses are averaged during training: the per-iteration
    /// readouts for `late_avg`/`two_avg`, otherwise just the final prediction.
    pub per_iteration: Vec<Var>,
    /// Block outputs, `layer_outputs[block][t]`.
    pub layer_outputs: Vec<Vec<Var>>,
    /// Feature maps entering the readout, one per readout application.
    pub readout_inputs: Vec<Var>,
    pub bn_nodes: Vec<(BnSlot, Var)>,
}

/// Evaluated forward pass of a batch, as plain tensors.
#[derive(Clone, Debug)]
pub struct Trace<S: Scalar = f64> {
    pub prediction: Tensor<S>,
    pub per_iteration: Vec<Tensor<S>>,
    /// `layer_outputs[block][t]`, each `[B, C, H', W']`.
    pub layer_outputs: Vec<Vec<Tensor<S>>>,
    pub readout_inputs: Vec<Tensor<S>>,
}

pub(crate) fn branch_key(layer: usize, entries: &[usize], t: usize) -> String {
    let e: Vec<String> = entries.iter().map(|a| a.to_string()).collect();
    format!("l{layer}.e{}.t{t}", e.join("-"))
}

/// `(layer, t)` of a branch key, both one-based.
pub(crate) fn parse_branch_key(key: &str) -> (usize, usize) {
    let mut layer = 0;
    let mut t = 0;
    for part in key.split('.') {
        if let Some(v) = part.strip_prefix('l') {
            layer = v.parse().unwrap_or(0);
        } else if let Some(v) = part.strip_prefix('t') {
            t = v.parse().unwrap_or(0);
        }
    }
    (layer, t)
}

/// Every branch state a multi-path model of this shape can evaluate.
pub(crate) fn branch_keys(config: &ModelConfig) -> Vec<String> {
    let layers = config.recurrent_layers();
    let big_t = config.iterations;
    let mut keys = Vec::new();
    for m in 1..=layers {
        for t in 1..=big_t {
            for e in entry_vectors(m, t) {
                keys.push(branch_key(m, &e, t));
            }
        }
    }
    keys
}

impl<S: Scalar> Model<S> {
    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> ModelVars {
        let mut all = Vec::new();
        let mut leaf = |g: &mut Graph<S>, t: &Tensor<S>| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            all.push(v);
            v
        };
        let input_bn = (
            leaf(g, &self.input_bn.scale),
            leaf(g, &self.input_bn.shift),
        );
        let mut blocks = Vec::new();
        for b in &self.blocks {
            blocks.push(match b {
                Block::Conv(cb) => BlockVars::Conv {
                    kernel: leaf(g, &cb.kernel),
                    bn: (leaf(g, &cb.bn.scale), leaf(g, &cb.bn.shift)),
                },
                Block::Recurrent(rb) => {
                    let ff = leaf(g, &rb.ff_kernel);
                    let lateral = leaf(g, &rb.lateral_kernel);
                    let bns = rb
                        .bns
                        .iter()
                        .map(|bn| (leaf(g, &bn.scale), leaf(g, &bn.shift)))
                        .collect();
                    BlockVars::Recurrent { ff, lateral, bns }
                }
            });
        }
        let mask = leaf(g, &self.readout.spatial_mask);
        let features = leaf(g, &self.readout.feature_weights);
        let bias = leaf(g, &self.readout.bias);
        ModelVars {
            all,
            input_bn,
            blocks,
            mask,
            features,
            bias,
        }
    }

    fn bn_node(
        &self,
        g: &mut Graph<S>,
        x: Var,
        vars: BnVars,
        slot: BnSlot,
        mode: BnMode,
        log: &mut Vec<(BnSlot, Var)>,
    ) -> Result<Var> {
        let (params, running) = match &slot {
            BnSlot::Input => (&self.input_bn, None),
            BnSlot::Block(i) => match &self.blocks[*i] {
                Block::Conv(cb) => (&cb.bn, None),
                Block::Recurrent(_) => unreachable!("block slot on a recurrent block"),
            },
            BnSlot::Iteration { block, t } | BnSlot::Branch { block, t, .. } => {
                let Block::Recurrent(rb) = &self.blocks[*block] else {
                    unreachable!("iteration slot on a feedforward block")
                };
                let running = match &slot {
                    BnSlot::Branch { key, .. } => self.branch_stats.get(key),
                    _ => None,
                };
                (&rb.bns[*t], running)
            }
        };
        let (rm, rv) = match running {
            Some((m, v)) => (m.as_slice(), v.as_slice()),
            None => (params.running_mean.as_slice(), params.running_var.as_slice()),
        };
        let v = g.batchnorm(x, vars.0, vars.1, (rm, rv), params.epsilon, mode)?;
        log.push((slot, v));
        Ok(v)
    }

    /// Input normalization and the first (large-kernel) block.
    fn first_stage(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        x: Var,
        mode: BnMode,
        log: &mut Vec<(BnSlot, Var)>,
    ) -> Result<Var> {
        let act = self.config.activation;
        let xn = self.bn_node(g, x, vars.input_bn, BnSlot::Input, mode, log)?;
        let (Block::Conv(cb), BlockVars::Conv { kernel, bn }) = (&self.blocks[0], &vars.blocks[0]) else {
            unreachable!("first block is always convolutional")
        };
        let c = g.conv2d(xn, *kernel, cb.padding)?;
        Ok(match self.config.bn_act_order {
            BnActOrder::BnBeforeAct => {
                let n = self.bn_node(g, c, *bn, BnSlot::Block(0), mode, log)?;
                g.activation(n, act)
            }
            BnActOrder::BnAfterAct => {
                let a = g.activation(c, act);
                self.bn_node(g, a, *bn, BnSlot::Block(0), mode, log)?
            }
        })
    }

    /// Runs every block; returns per-block outputs and the top-layer map per iteration
    /// that the readout mode consumes.
    fn stack(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        x: Var,
        mode: BnMode,
        log: &mut Vec<(BnSlot, Var)>,
    ) -> Result<(Vec<Vec<Var>>, Vec<Var>)> {
        let act = self.config.activation;
        let y1 = self.first_stage(g, vars, x, mode, log)?;
        let mut layers = vec![vec![y1]];
        match self.config.kind {
            ModelKind::Feedforward => {
                let mut y = y1;
                for (i, bv) in vars.blocks.iter().enumerate().skip(1) {
                    let BlockVars::Conv { kernel, bn } = bv else {
                        unreachable!("feedforward model holds conv blocks only")
                    };
                    let c = g.conv2d(y, *kernel, Padding::Same)?;
                    let n = self.bn_node(g, c, *bn, BnSlot::Block(i), mode, log)?;
                    y = g.activation(n, act);
                    layers.push(vec![y]);
                }
                Ok((layers, vec![y]))
            }
            ModelKind::Recurrent => {
                let big_t = self.config.iterations;
                let depth = vars.blocks.len();
                layers.extend((1..depth).map(|_| Vec::with_capacity(big_t)));
                let mut top = Vec::with_capacity(big_t);
                // The first recurrent block sees the same input at every iteration.
                let mut first_ff = None;
                for t in 0..big_t {
                    let mut bottom = y1;
                    for (i, bv) in vars.blocks.iter().enumerate().skip(1) {
                        let BlockVars::Recurrent { ff, lateral, bns } = bv else {
                            unreachable!("recurrent model holds recurrent blocks after the first")
                        };
                        let mut pre = match first_ff {
                            Some(c) if i == 1 => c,
                            _ => {
                                let c = g.conv2d(bottom, *ff, Padding::Same)?;
                                if i == 1 {
                                    first_ff = Some(c);
                                }
                                c
                            }
                        };
                        // y^(m,0) = 0: the lateral term is absent at the first iteration
                        if let Some(&prev) = layers[i].last() {
                            let l = g.conv2d(prev, *lateral, Padding::Same)?;
                            pre = g.add(pre, l)?;
                        }
                        let n = self.bn_node(g, pre, bns[t], BnSlot::Iteration { block: i, t }, mode, log)?;
                        let y = g.activation(n, act);
                        layers[i].push(y);
                        bottom = y;
                    }
                    top.push(bottom);
                }
                Ok((layers, top))
            }
            ModelKind::Multipath => self.multipath_stack(g, vars, y1, mode, log, layers),
        }
    }

    fn multipath_stack(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        y1: Var,
        mode: BnMode,
        log: &mut Vec<(BnSlot, Var)>,
        mut layers: Vec<Vec<Var>>,
    ) -> Result<(Vec<Vec<Var>>, Vec<Var>)> {
        let cfg = &self.config;
        let depth = cfg.recurrent_layers();
        let big_t = cfg.iterations;
        let used: Vec<usize> = match cfg.readout_mode {
            ReadoutMode::NoAvg => vec![big_t],
            _ => (1..=big_t).collect(),
        };
        let mut ctx = BranchCtx {
            model: self,
            vars,
            y1,
            mode,
            states: HashMap::new(),
            ff_cache: HashMap::new(),
        };
        let mut top = Vec::with_capacity(used.len());
        for &t_end in &used {
            let mut terms = Vec::new();
            for e in entry_vectors(depth, t_end) {
                let length = depth + t_end - e[0];
                if cfg.removed_lengths.contains(&length) {
                    continue;
                }
                terms.push(ctx.state(g, log, depth, &e, t_end)?);
            }
            let y = if terms.is_empty() {
                let shape = g.shape(y1).to_vec();
                g.constant(Tensor::zeros(&shape))
            } else {
                g.sum(&terms)?
            };
            top.push(y);
        }
        layers.extend((1..=depth).map(|_| Vec::new()));
        if let Some(last) = layers.last_mut() {
            last.extend(top.iter().copied());
        }
        Ok((layers, top))
    }

    fn readout_head(&self, g: &mut Graph<S>, vars: &ModelVars, y: Var) -> Result<Var> {
        let p = g.avgpool(y)?;
        let r = g.readout(p, vars.mask, vars.features, vars.bias)?;
        Ok(g.activation(r, self.config.activation))
    }

    /// Full forward pass. `x` is a `[B, 1, H, W]` image batch.
    pub fn forward(&self, g: &mut Graph<S>, vars: &ModelVars, x: Var, mode: BnMode) -> Result<ForwardPass> {
        let shape = g.shape(x).to_vec();
        let (h, w) = self.config.input_shape;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return shape_err(format!(
                "model expects [B,1,{h},{w}] images, got {shape:?}"
            ));
        }
        let mut bn_nodes = Vec::new();
        let (layer_outputs, top) = self.stack(g, vars, x, mode, &mut bn_nodes)?;
        let readout_mode = match self.config.kind {
            ModelKind::Feedforward => ReadoutMode::NoAvg,
            _ => self.config.readout_mode,
        };
        let (prediction, per_iteration, readout_inputs) = match readout_mode {
            ReadoutMode::NoAvg => {
                let y = *top.last().expect("at least one iteration");
                let p = self.readout_head(g, vars, y)?;
                (p, vec![p], vec![y])
            }
            ReadoutMode::EarlyAvg => {
                let y = g.mean(&top)?;
                let p = self.readout_head(g, vars, y)?;
                (p, vec![p], vec![y])
            }
            ReadoutMode::LateAvg => {
                let mut preds = Vec::with_capacity(top.len());
                for &y in &top {
                    preds.push(self.readout_head(g, vars, y)?);
                }
                (g.mean(&preds)?, preds, top.clone())
            }
            ReadoutMode::TwoAvg => {
                let mut preds = Vec::with_capacity(top.len());
                let mut inputs = Vec::with_capacity(top.len());
                let mut running = top[0];
                for (t, &y) in top.iter().enumerate() {
                    let ybar = if t == 0 {
                        y
                    } else {
                        running = g.add(running, y)?;
                        g.scale(running, S::one() / S::lit((t + 1) as f64))
                    };
                    inputs.push(ybar);
                    preds.push(self.readout_head(g, vars, ybar)?);
                }
                (g.mean(&preds)?, preds, inputs)
            }
        };
        Ok(ForwardPass {
            prediction,
            per_iteration,
            layer_outputs,
            readout_inputs,
            bn_nodes,
        })
    }

    /// Block outputs without the readout; accepts any image size the first kernel fits.
    pub fn hidden(&self, g: &mut Graph<S>, vars: &ModelVars, x: Var, mode: BnMode) -> Result<Vec<Vec<Var>>> {
        let mut log = Vec::new();
        Ok(self.stack(g, vars, x, mode, &mut log)?.0)
    }

    /// Moves running statistics toward the batch statistics recorded in train mode.
    pub fn apply_bn_updates(&mut self, g: &Graph<S>, nodes: &[(BnSlot, Var)]) {
        for (slot, v) in nodes {
            let Some((mean, var)) = g.batch_stats(*v) else { continue };
            match slot {
                BnSlot::Input => self.input_bn.update_running(mean, var),
                BnSlot::Block(i) => {
                    if let Block::Conv(cb) = &mut self.blocks[*i] {
                        cb.bn.update_running(mean, var);
                    }
                }
                BnSlot::Iteration { block, t } => {
                    if let Block::Recurrent(rb) = &mut self.blocks[*block] {
                        rb.bns[*t].update_running(mean, var);
                    }
                }
                BnSlot::Branch { key, block, t } => {
                    let Block::Recurrent(rb) = &self.blocks[*block] else { continue };
                    let m = rb.bns[*t].momentum;
                    if let Some((rm, rv)) = self.branch_stats.get_mut(key) {
                        for (r, &x) in rm.iter_mut().zip(mean) {
                            *r = (S::one() - m) * *r + m * x;
                        }
                        for (r, &x) in rv.iter_mut().zip(var) {
                            *r = (S::one() - m) * *r + m * x;
                        }
                    }
                }
            }
        }
    }

    /// Eval-mode predictions `[B, N]` for `[B, H, W]` images.
    pub fn predict(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.infer_with(images, false)?.prediction)
    }

    /// Eval-mode forward pass keeping every intermediate output.
    pub fn infer(&self, images: &Tensor<S>) -> Result<Trace<S>> {
        self.infer_with(images, true)
    }

    fn infer_with(&self, images: &Tensor<S>, keep: bool) -> Result<Trace<S>> {
        let x = batch_images(images)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x);
        let pass = self.forward(&mut g, &vars, xv, BnMode::Eval)?;
        let collect = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
        Ok(Trace {
            prediction: g.value(pass.prediction).clone(),
            per_iteration: collect(&pass.per_iteration),
            layer_outputs: if keep {
                pass.layer_outputs.iter().map(|l| collect(l)).collect()
            } else {
                Vec::new()
            },
            readout_inputs: if keep { collect(&pass.readout_inputs) } else { Vec::new() },
        })
    }

    /// Eval-mode block outputs `[block][t]` for `[B, H, W]` images of any size.
    pub fn probe(&self, images: &Tensor<S>) -> Result<Vec<Vec<Tensor<S>>>> {
        let x = batch_images(images)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x);
        let layers = self.hidden(&mut g, &vars, xv, BnMode::Eval)?;
        Ok(layers
            .iter()
            .map(|l| l.iter().map(|&v| g.value(v).clone()).collect())
            .collect())
    }
}

/// `[H,W]`, `[B,H,W]` or `[B,1,H,W]` to `[B,1,H,W]`.
pub(crate) fn batch_images<S: Scalar>(images: &Tensor<S>) -> Result<Tensor<S>> {
    let s = images.shape().to_vec();
    match s.as_slice() {
        [h, w] => images.clone().reshape(&[1, 1, *h, *w]),
        [b, h, w] => images.clone().reshape(&[*b, 1, *h, *w]),
        [_, 1, _, _] => Ok(images.clone()),
        _ => shape_err(format!("expected image batch, got {s:?}")),
    }
}

struct BranchCtx<'a, S: Scalar> {
    model: &'a Model<S>,
    vars: &'a ModelVars,
    y1: Var,
    mode: BnMode,
    states: HashMap<(usize, Vec<usize>, usize), Var>,
    ff_cache: HashMap<(usize, Vec<usize>, usize), Var>,
}

impl<S: Scalar> BranchCtx<'_, S> {
    /// Output of the branch through recurrent layer `layer` (one-based) that entered
    /// the layers at iterations `entries[..layer]`, at iteration `t`.
    fn state(
        &mut self,
        g: &mut Graph<S>,
        log: &mut Vec<(BnSlot, Var)>,
        layer: usize,
        entries: &[usize],
        t: usize,
    ) -> Result<Var> {
        let e = entries[..layer].to_vec();
        let key = (layer, e.clone(), t);
        if let Some(&v) = self.states.get(&key) {
            return Ok(v);
        }
        let BlockVars::Recurrent { ff, lateral, bns } = &self.vars.blocks[layer] else {
            unreachable!("multi-path layers are recurrent blocks")
        };
        let (ff, lateral, bn) = (*ff, *lateral, bns[t - 1]);
        let entry = e[layer - 1];
        let pre = if t == entry {
            let prefix = e[..layer - 1].to_vec();
            // Layer 1 always reads the first block's output, whatever the iteration.
            let ck = (layer, prefix, if layer == 1 { 0 } else { t });
            match self.ff_cache.get(&ck) {
                Some(&v) => v,
                None => {
                    let input = if layer == 1 {
                        self.y1
                    } else {
                        self.state(g, log, layer - 1, &e, t)?
                    };
                    let c = g.conv2d(input, ff, Padding::Same)?;
                    self.ff_cache.insert(ck, c);
                    c
                }
            }
        } else {
            let prev = self.state(g, log, layer, &e, t - 1)?;
            g.conv2d(prev, lateral, Padding::Same)?
        };
        let slot = BnSlot::Branch {
            key: branch_key(layer, &e, t),
            block: layer,
            t: t - 1,
        };
        let n = self.model.bn_node(g, pre, bn, slot, self.mode, log)?;
        let y = g.activation(n, self.model.config.activation);
        self.states.insert(key, y);
        Ok(y)
    }
}
