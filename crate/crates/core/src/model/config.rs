use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Activation, POOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Feedforward,
    Recurrent,
    /// Recurrent blocks unrolled into an ensemble of feedforward chains with shared kernels.
    Multipath,
}

/// Rule combining per-iteration outputs of the last recurrent block into the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    NoAvg,
    EarlyAvg,
    LateAvg,
    TwoAvg,
}

impl ReadoutMode {
    pub const ALL: [ReadoutMode; 4] = [
        ReadoutMode::NoAvg,
        ReadoutMode::EarlyAvg,
        ReadoutMode::LateAvg,
        ReadoutMode::TwoAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReadoutMode::NoAvg => "no_avg",
            ReadoutMode::EarlyAvg => "early_avg",
            ReadoutMode::LateAvg => "late_avg",
            ReadoutMode::TwoAvg => "two_avg",
        }
    }

    /// Whether the training loss averages per-iteration losses.
    pub fn averages_losses(self) -> bool {
        matches!(self, ReadoutMode::LateAvg | ReadoutMode::TwoAvg)
    }
}

/// Placement of normalization relative to the activation in the first block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnActOrder {
    BnBeforeAct,
    BnAfterAct,
}

/// Architecture description of an encoding model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Total number of blocks including the first `first_kernel` block.
    /// Recurrent and multi-path models have `num_blocks - 1` recurrent blocks.
    pub num_blocks: usize,
    pub channels: usize,
    pub first_kernel: usize,
    pub later_kernel: usize,
    pub activation: Activation,
    pub bn_act_order: BnActOrder,
    pub iterations: usize,
    pub readout_mode: ReadoutMode,
    pub num_neurons: usize,
    pub input_shape: (usize, usize),
    pub seed: u64,
    /// Multi-path models only: path lengths excluded from the ensemble.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed_lengths: Vec<usize>,
}

pub const MAX_ITERATIONS: usize = 7;

impl ModelConfig {
    pub fn feedforward(num_blocks: usize, channels: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Feedforward,
            num_blocks,
            channels,
            first_kernel: 9,
            later_kernel: 3,
            activation: Activation::Softplus,
            bn_act_order: BnActOrder::BnBeforeAct,
            iterations: 1,
            readout_mode: ReadoutMode::NoAvg,
            num_neurons: 12,
            input_shape: (32, 32),
            seed: 0,
            removed_lengths: Vec::new(),
        }
    }

    pub fn recurrent(recurrent_layers: usize, channels: usize, iterations: usize, mode: ReadoutMode) -> Self {
        ModelConfig {
            kind: ModelKind::Recurrent,
            num_blocks: 1 + recurrent_layers,
            iterations,
            readout_mode: mode,
            ..Self::feedforward(1 + recurrent_layers, channels)
        }
    }

    pub fn recurrent_layers(&self) -> usize {
        match self.kind {
            ModelKind::Feedforward => 0,
            _ => self.num_blocks.saturating_sub(1),
        }
    }

    /// Iterations actually run (always 1 for feedforward models).
    pub fn effective_iterations(&self) -> usize {
        match self.kind {
            ModelKind::Feedforward => 1,
            _ => self.iterations,
        }
    }

    /// Spatial size of the first block's output.
    pub fn feature_shape(&self) -> (usize, usize) {
        let (h, w) = self.input_shape;
        let k = self.first_kernel;
        (h.saturating_sub(k - 1), w.saturating_sub(k - 1))
    }

    pub fn pooled_shape(&self) -> (usize, usize) {
        let (h, w) = self.feature_shape();
        (h / POOL, w / POOL)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_blocks < 1 {
            return bad("a model needs at least one block".into());
        }
        if self.channels < 1 || self.num_neurons < 1 {
            return bad("channels and neurons must be positive".into());
        }
        for k in [self.first_kernel, self.later_kernel] {
            if k % 2 == 0 || k < 1 {
                return bad(format!("kernel size {k} must be odd"));
            }
        }
        let (h, w) = self.input_shape;
        if h < self.first_kernel || w < self.first_kernel {
            return bad(format!(
                "input {h}x{w} is smaller than the first kernel {}",
                self.first_kernel
            ));
        }
        let (ph, pw) = self.pooled_shape();
        if ph < 1 || pw < 1 {
            return bad(format!("input {h}x{w} leaves no pooled output"));
        }
        match self.kind {
            ModelKind::Feedforward => {
                if self.iterations != 1 {
                    return bad("feedforward models run exactly one iteration".into());
                }
                if !self.removed_lengths.is_empty() {
                    return bad("only multi-path models can remove paths".into());
                }
            }
            ModelKind::Recurrent | ModelKind::Multipath => {
                if self.num_blocks < 2 {
                    return bad("recurrent models need a first block plus at least one recurrent block".into());
                }
                if !(1..=MAX_ITERATIONS).contains(&self.iterations) {
                    return bad(format!(
                        "iterations must lie in [1, {MAX_ITERATIONS}], got {}",
                        self.iterations
                    ));
                }
                if self.kind == ModelKind::Recurrent && !self.removed_lengths.is_empty() {
                    return bad("only multi-path models can remove paths".into());
                }
                if self.kind == ModelKind::Multipath && self.recurrent_layers() > 2 {
                    return bad(format!(
                        "multi-path reformulation supports 1 or 2 recurrent blocks, got {}",
                        self.recurrent_layers()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Feedforward model with the same convolution parameter count: every recurrent
    /// block is replaced by two `later_kernel` blocks.
    pub fn matched_feedforward(&self) -> ModelConfig {
        let blocks = match self.kind {
            ModelKind::Feedforward => self.num_blocks,
            _ => 1 + 2 * self.recurrent_layers(),
        };
        ModelConfig {
            kind: ModelKind::Feedforward,
            num_blocks: blocks,
            iterations: 1,
            readout_mode: ReadoutMode::NoAvg,
            removed_lengths: Vec::new(),
            ..self.clone()
        }
    }

    /// Feedforward chain computing the same function as a recurrent model at `T = 1`:
    /// the first block followed by one block per recurrent layer.
    pub fn chain_equivalent(&self) -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Feedforward,
            iterations: 1,
            readout_mode: ReadoutMode::NoAvg,
            removed_lengths: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_multipath(&self, removed_lengths: &[usize]) -> ModelConfig {
        let mut removed = removed_lengths.to_vec();
        removed.sort_unstable();
        removed.dedup();
        ModelConfig {
            kind: ModelKind::Multipath,
            removed_lengths: removed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        assert!(ModelConfig::feedforward(3, 16).validate().is_ok());
        let mut c = ModelConfig::recurrent(1, 8, 0, ReadoutMode::TwoAvg);
        assert!(c.validate().is_err());
        c.iterations = 8;
        assert!(c.validate().is_err());
        c.iterations = 7;
        assert!(c.validate().is_ok());
        let mut f = ModelConfig::feedforward(3, 8);
        f.iterations = 2;
        assert!(f.validate().is_err());
        let mut mp = ModelConfig::recurrent(3, 8, 2, ReadoutMode::NoAvg).to_multipath(&[]);
        assert!(mp.validate().is_err());
        mp.num_blocks = 3;
        assert!(mp.validate().is_ok());
    }

    #[test]
    fn matched_twin_doubles_recurrent_blocks() {
        let r = ModelConfig::recurrent(2, 16, 4, ReadoutMode::LateAvg);
        let f = r.matched_feedforward();
        assert_eq!(f.kind, ModelKind::Feedforward);
        assert_eq!(f.num_blocks, 5);
        assert_eq!(r.chain_equivalent().num_blocks, 3);
    }

    #[test]
    fn pooled_grid() {
        let c = ModelConfig::feedforward(3, 8);
        assert_eq!(c.feature_shape(), (24, 24));
        assert_eq!(c.pooled_shape(), (8, 8));
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::recurrent(1, 8, 3, ReadoutMode::TwoAvg).to_multipath(&[3, 1, 3]);
        assert_eq!(c.removed_lengths, vec![1, 3]);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"two_avg\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
