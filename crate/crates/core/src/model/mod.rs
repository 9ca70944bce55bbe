//! Feedforward (CPB) and recurrent (RCPB) encoding models with a factorized readout.

mod config;
mod forward;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{BnActOrder, ModelConfig, ModelKind, ReadoutMode, MAX_ITERATIONS};
pub use forward::{BnSlot, ForwardPass, ModelVars, Trace};
pub(crate) use forward::batch_images;

use crate::error::{Error, Result};
use crate::ops::{BatchNormParams, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution → normalization → activation block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<S: Scalar = f64> {
    pub kernel: Tensor<S>,
    pub bn: BatchNormParams<S>,
    pub padding: Padding,
}

/// Block whose output at iteration `t` combines a bottom-up convolution of its input
/// with a lateral convolution of its own output at `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentBlock<S: Scalar = f64> {
    pub ff_kernel: Tensor<S>,
    pub lateral_kernel: Tensor<S>,
    /// One normalization instance per iteration.
    pub bns: Vec<BatchNormParams<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block<S: Scalar = f64> {
    Conv(ConvBlock<S>),
    Recurrent(RecurrentBlock<S>),
}

/// Per-neuron rank-1 map from the pooled feature map to a scalar drive.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedReadout<S: Scalar = f64> {
    /// `[N, Hp, Wp]`
    pub spatial_mask: Tensor<S>,
    /// `[N, C]`
    pub feature_weights: Tensor<S>,
    /// `[N]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> FactorizedReadout<S> {
    /// Dense `[C, Hp, Wp]` weight tensor of neuron `n`.
    pub fn effective_weights(&self, n: usize) -> Tensor<S> {
        let ms = self.spatial_mask.shape();
        let (hp, wp) = (ms[1], ms[2]);
        let c = self.feature_weights.shape()[1];
        let mut w = Tensor::zeros(&[c, hp, wp]);
        for ch in 0..c {
            let f = self.feature_weights.at(&[n, ch]);
            for y in 0..hp {
                for x in 0..wp {
                    w.set(&[ch, y, x], f * self.spatial_mask.at(&[n, y, x]));
                }
            }
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvKernel,
    BnScale,
    BnShift,
    ReadoutMask,
    ReadoutFeatures,
    ReadoutBias,
}

impl ParamKind {
    pub fn is_bn(self) -> bool {
        matches!(self, ParamKind::BnScale | ParamKind::BnShift)
    }
}

/// Learnable-parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub excluding_bn: usize,
    /// Convolution kernels only.
    pub conv: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar = f64> {
    pub config: ModelConfig,
    pub input_bn: BatchNormParams<S>,
    pub blocks: Vec<Block<S>>,
    pub readout: FactorizedReadout<S>,
    /// Running statistics of each multi-path branch, keyed by branch name. Scale and
    /// shift are shared with the `(layer, iteration)` instance of the recurrent layout.
    pub branch_stats: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

fn kernel_init<S: Scalar, R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor<S> {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Builds a model with deterministic parameters drawn from `config.seed`.
///
/// Kernels are uniform in `±1/sqrt(fan_in)`, normalization scales 1 and shifts 0,
/// spatial masks and feature weights small positive uniform, readout bias 0.
pub fn build_model<S: Scalar>(config: &ModelConfig) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.channels;
    let (k1, k) = (config.first_kernel, config.later_kernel);
    let mut blocks = vec![Block::Conv(ConvBlock {
        kernel: kernel_init([c, 1, k1, k1], &mut rng),
        bn: BatchNormParams::new(c),
        padding: Padding::Valid,
    })];
    match config.kind {
        ModelKind::Feedforward => {
            for _ in 1..config.num_blocks {
                blocks.push(Block::Conv(ConvBlock {
                    kernel: kernel_init([c, c, k, k], &mut rng),
                    bn: BatchNormParams::new(c),
                    padding: Padding::Same,
                }));
            }
        }
        ModelKind::Recurrent | ModelKind::Multipath => {
            for _ in 1..config.num_blocks {
                let ff_kernel = kernel_init([c, c, k, k], &mut rng);
                let lateral_kernel = kernel_init([c, c, k, k], &mut rng);
                blocks.push(Block::Recurrent(RecurrentBlock {
                    ff_kernel,
                    lateral_kernel,
                    bns: (0..config.iterations).map(|_| BatchNormParams::new(c)).collect(),
                }));
            }
        }
    }
    let (hp, wp) = config.pooled_shape();
    let n = config.num_neurons;
    let mask_bound = 1.0 / (hp * wp) as f64;
    let feat_bound = 1.0 / c as f64;
    let spatial_mask = Tensor::from_vec(
        &[n, hp, wp],
        (0..n * hp * wp)
            .map(|_| S::lit(rng.gen_range(0.0..2.0 * mask_bound)))
            .collect(),
    )?;
    let feature_weights = Tensor::from_vec(
        &[n, c],
        (0..n * c)
            .map(|_| S::lit(rng.gen_range(0.0..2.0 * feat_bound)))
            .collect(),
    )?;
    let mut model = Model {
        config: config.clone(),
        input_bn: BatchNormParams::new(1),
        blocks,
        readout: FactorizedReadout {
            spatial_mask,
            feature_weights,
            bias: Tensor::zeros(&[n]),
        },
        branch_stats: BTreeMap::new(),
    };
    if config.kind == ModelKind::Multipath {
        for key in forward::branch_keys(config) {
            model
                .branch_stats
                .insert(key, (vec![S::zero(); c], vec![S::one(); c]));
        }
    }
    Ok(model)
}

impl<S: Scalar> Model<S> {
    pub fn recurrent_blocks(&self) -> impl Iterator<Item = &RecurrentBlock<S>> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Recurrent(r) => Some(r),
            Block::Conv(_) => None,
        })
    }

    pub fn recurrent_blocks_mut(&mut self) -> impl Iterator<Item = &mut RecurrentBlock<S>> {
        self.blocks.iter_mut().filter_map(|b| match b {
            Block::Recurrent(r) => Some(r),
            Block::Conv(_) => None,
        })
    }

    /// Learnable parameters in canonical order: names, kinds and values.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor<S>)> {
        let mut out = Vec::new();
        push_bn(&mut out, "input_bn".into(), &self.input_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Conv(cb) => {
                    out.push((format!("blocks.{i}.kernel"), ParamKind::ConvKernel, &cb.kernel));
                    push_bn(&mut out, format!("blocks.{i}.bn"), &cb.bn);
                }
                Block::Recurrent(rb) => {
                    out.push((format!("blocks.{i}.ff_kernel"), ParamKind::ConvKernel, &rb.ff_kernel));
                    out.push((
                        format!("blocks.{i}.lateral_kernel"),
                        ParamKind::ConvKernel,
                        &rb.lateral_kernel,
                    ));
                    for (t, bn) in rb.bns.iter().enumerate() {
                        push_bn(&mut out, format!("blocks.{i}.bn.{t}"), bn);
                    }
                }
            }
        }
        let r = &self.readout;
        out.push(("readout.spatial_mask".into(), ParamKind::ReadoutMask, &r.spatial_mask));
        out.push(("readout.feature_weights".into(), ParamKind::ReadoutFeatures, &r.feature_weights));
        out.push(("readout.bias".into(), ParamKind::ReadoutBias, &r.bias));
        out
    }

    /// Mutable parameters in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.input_bn.scale, &mut self.input_bn.shift];
        for b in self.blocks.iter_mut() {
            match b {
                Block::Conv(cb) => {
                    out.push(&mut cb.kernel);
                    out.push(&mut cb.bn.scale);
                    out.push(&mut cb.bn.shift);
                }
                Block::Recurrent(rb) => {
                    out.push(&mut rb.ff_kernel);
                    out.push(&mut rb.lateral_kernel);
                    for bn in rb.bns.iter_mut() {
                        out.push(&mut bn.scale);
                        out.push(&mut bn.shift);
                    }
                }
            }
        }
        out.push(&mut self.readout.spatial_mask);
        out.push(&mut self.readout.feature_weights);
        out.push(&mut self.readout.bias);
        out
    }

    /// Non-learnable state (running statistics), named.
    pub fn buffers(&self) -> Vec<(String, &Vec<S>)> {
        let mut out = Vec::new();
        push_stats(&mut out, "input_bn".into(), &self.input_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Conv(cb) => push_stats(&mut out, format!("blocks.{i}.bn"), &cb.bn),
                Block::Recurrent(rb) => {
                    for (t, p) in rb.bns.iter().enumerate() {
                        push_stats(&mut out, format!("blocks.{i}.bn.{t}"), p);
                    }
                }
            }
        }
        for (key, (m, v)) in &self.branch_stats {
            out.push((format!("branch.{key}.running_mean"), m));
            out.push((format!("branch.{key}.running_var"), v));
        }
        out
    }

    /// Mutable buffers in the same order as [`Model::buffers`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut out: Vec<&mut Vec<S>> = vec![&mut self.input_bn.running_mean, &mut self.input_bn.running_var];
        for b in self.blocks.iter_mut() {
            match b {
                Block::Conv(cb) => {
                    out.push(&mut cb.bn.running_mean);
                    out.push(&mut cb.bn.running_var);
                }
                Block::Recurrent(rb) => {
                    for p in rb.bns.iter_mut() {
                        out.push(&mut p.running_mean);
                        out.push(&mut p.running_var);
                    }
                }
            }
        }
        for (m, v) in self.branch_stats.values_mut() {
            out.push(m);
            out.push(v);
        }
        out
    }

    pub fn param_count(&self) -> ParamCount {
        let mut count = ParamCount {
            total: 0,
            excluding_bn: 0,
            conv: 0,
        };
        for (_, kind, t) in self.params() {
            count.total += t.len();
            if !kind.is_bn() {
                count.excluding_bn += t.len();
            }
            if kind == ParamKind::ConvKernel {
                count.conv += t.len();
            }
        }
        count
    }

    /// Chain computing the same function as this recurrent or multi-path model at one
    /// iteration: kernels and the first-iteration normalization are copied.
    pub fn chain_equivalent(&self) -> Result<Model<S>> {
        let cfg = self.config.chain_equivalent();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut layer = 0;
        for b in &self.blocks {
            match b {
                Block::Conv(cb) => blocks.push(Block::Conv(cb.clone())),
                Block::Recurrent(rb) => {
                    layer += 1;
                    let mut bn = rb.bns[0].clone();
                    if self.config.kind == ModelKind::Multipath {
                        let key = forward::branch_key(layer, &vec![1; layer], 1);
                        if let Some((m, v)) = self.branch_stats.get(&key) {
                            bn.running_mean = m.clone();
                            bn.running_var = v.clone();
                        }
                    }
                    blocks.push(Block::Conv(ConvBlock {
                        kernel: rb.ff_kernel.clone(),
                        bn,
                        padding: Padding::Same,
                    }));
                }
            }
        }
        Ok(Model {
            config: cfg,
            input_bn: self.input_bn.clone(),
            blocks,
            readout: self.readout.clone(),
            branch_stats: BTreeMap::new(),
        })
    }

    /// Multi-path twin sharing every kernel, normalization and readout parameter.
    pub fn to_multipath(&self, removed_lengths: &[usize]) -> Result<Model<S>> {
        if self.config.kind == ModelKind::Feedforward {
            return Err(Error::Config("feedforward models have no multi-path twin".into()));
        }
        let cfg = self.config.to_multipath(removed_lengths);
        cfg.validate()?;
        let mut twin = self.clone();
        twin.config = cfg;
        twin.branch_stats.clear();
        for key in forward::branch_keys(&twin.config) {
            let (layer, t) = forward::parse_branch_key(&key);
            let rb = twin
                .recurrent_blocks()
                .nth(layer - 1)
                .expect("branch layer exists");
            let bn = &rb.bns[t - 1];
            let stats = (bn.running_mean.clone(), bn.running_var.clone());
            twin.branch_stats.insert(key, stats);
        }
        Ok(twin)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, _, t)| t.is_finite())
            && self.buffers().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }

    /// Converts every parameter and buffer to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let cast_bn = |p: &BatchNormParams<S>| BatchNormParams {
            scale: p.scale.cast(),
            shift: p.shift.cast(),
            running_mean: p.running_mean.iter().map(|x| T::lit(x.as_f64())).collect(),
            running_var: p.running_var.iter().map(|x| T::lit(x.as_f64())).collect(),
            epsilon: T::lit(p.epsilon.as_f64()),
            momentum: T::lit(p.momentum.as_f64()),
        };
        let cv = |v: &Vec<S>| v.iter().map(|x| T::lit(x.as_f64())).collect::<Vec<T>>();
        Model {
            config: self.config.clone(),
            input_bn: cast_bn(&self.input_bn),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Conv(cb) => Block::Conv(ConvBlock {
                        kernel: cb.kernel.cast(),
                        bn: cast_bn(&cb.bn),
                        padding: cb.padding,
                    }),
                    Block::Recurrent(rb) => Block::Recurrent(RecurrentBlock {
                        ff_kernel: rb.ff_kernel.cast(),
                        lateral_kernel: rb.lateral_kernel.cast(),
                        bns: rb.bns.iter().map(cast_bn).collect(),
                    }),
                })
                .collect(),
            readout: FactorizedReadout {
                spatial_mask: self.readout.spatial_mask.cast(),
                feature_weights: self.readout.feature_weights.cast(),
                bias: self.readout.bias.cast(),
            },
            branch_stats: self
                .branch_stats
                .iter()
                .map(|(k, (m, v))| (k.clone(), (cv(m), cv(v))))
                .collect(),
        }
    }
}

fn push_bn<'a, S: Scalar>(
    out: &mut Vec<(String, ParamKind, &'a Tensor<S>)>,
    name: String,
    bn: &'a BatchNormParams<S>,
) {
    out.push((format!("{name}.scale"), ParamKind::BnScale, &bn.scale));
    out.push((format!("{name}.shift"), ParamKind::BnShift, &bn.shift));
}

fn push_stats<'a, S: Scalar>(out: &mut Vec<(String, &'a Vec<S>)>, name: String, bn: &'a BatchNormParams<S>) {
    out.push((format!("{name}.running_mean"), &bn.running_mean));
    out.push((format!("{name}.running_var"), &bn.running_var));
}

#[cfg(test)]
mod tests;
