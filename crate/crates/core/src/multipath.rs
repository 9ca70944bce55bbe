//! Recurrent stacks viewed as ensembles of feedforward paths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, ReadoutMode};
use crate::ops::BatchNormParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Feedforward,
    Lateral,
}

/// One convolution → normalization → activation step along a path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    /// Recurrent layer, one-based.
    pub layer: usize,
    /// Iteration whose normalization instance is applied, one-based.
    pub iteration: usize,
    pub kind: ConvKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDescriptor {
    /// Iteration at which the path enters each recurrent layer.
    pub entries: Vec<usize>,
    /// Iteration at which the path leaves each recurrent layer.
    pub exits: Vec<usize>,
    pub components: Vec<Component>,
    pub length: usize,
    pub readout_coefficient: f64,
}

impl PathDescriptor {
    pub fn t_end(&self) -> usize {
        *self.exits.last().expect("paths cross at least one layer")
    }
}

/// Nondecreasing entry-iteration vectors `1 ≤ a_1 ≤ … ≤ a_layers ≤ t_end`.
pub fn entry_vectors(layers: usize, t_end: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, layers: usize, t_end: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == layers {
            out.push(prefix.clone());
            return;
        }
        let lo = prefix.last().copied().unwrap_or(1);
        for a in lo..=t_end {
            prefix.push(a);
            rec(prefix, layers, t_end, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if layers > 0 && t_end > 0 {
        rec(&mut Vec::new(), layers, t_end, &mut out);
    }
    out
}

/// Linear coefficient of the top-layer output at `t_end` in the prediction's pre-readout
/// combination.
pub fn readout_weight(mode: ReadoutMode, iterations: usize, t_end: usize) -> f64 {
    let t = iterations as f64;
    match mode {
        ReadoutMode::NoAvg => {
            if t_end == iterations {
                1.0
            } else {
                0.0
            }
        }
        ReadoutMode::EarlyAvg | ReadoutMode::LateAvg => 1.0 / t,
        ReadoutMode::TwoAvg => (t_end..=iterations).map(|s| 1.0 / s as f64).sum::<f64>() / t,
    }
}

fn path_for(entries: Vec<usize>, t_end: usize, coefficient: f64) -> PathDescriptor {
    let layers = entries.len();
    let mut exits = entries[1..].to_vec();
    exits.push(t_end);
    let mut components = Vec::new();
    for (m, (&a, &b)) in entries.iter().zip(&exits).enumerate() {
        components.push(Component {
            layer: m + 1,
            iteration: a,
            kind: ConvKind::Feedforward,
        });
        components.extend((a + 1..=b).map(|t| Component {
            layer: m + 1,
            iteration: t,
            kind: ConvKind::Lateral,
        }));
    }
    PathDescriptor {
        length: layers + t_end - entries[0],
        entries,
        exits,
        components,
        readout_coefficient: coefficient,
    }
}

/// Every path of an `m_rec`-layer stack unrolled `iterations` times that reaches the
/// readout under `mode`.
pub fn enumerate_paths(m_rec: usize, iterations: usize, mode: ReadoutMode) -> Result<Vec<PathDescriptor>> {
    if !(1..=2).contains(&m_rec) {
        return Err(Error::Config(format!(
            "path enumeration supports 1 or 2 recurrent layers, got {m_rec}"
        )));
    }
    if iterations < 1 {
        return Err(Error::Config("at least one iteration is required".into()));
    }
    let ends: Vec<usize> = match mode {
        ReadoutMode::NoAvg => vec![iterations],
        _ => (1..=iterations).collect(),
    };
    Ok(ends
        .into_iter()
        .flat_map(|t_end| {
            let w = readout_weight(mode, iterations, t_end);
            entry_vectors(m_rec, t_end)
                .into_iter()
                .map(move |e| path_for(e, t_end, w))
        })
        .collect())
}

/// Mean absolute normalization scale.
pub fn bn_strength<S: Scalar>(bn: &BatchNormParams<S>) -> f64 {
    let g = bn.scale.data();
    g.iter().map(|x| x.as_f64().abs()).sum::<f64>() / g.len() as f64
}

/// Mean over output channels of the flattened kernel's Euclidean norm.
pub fn conv_strength<S: Scalar>(kernel: &Tensor<S>) -> f64 {
    let out = kernel.shape()[0];
    let per = kernel.len() / out;
    kernel
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / out as f64
}

pub const ACTIVATION_STRENGTH: f64 = 1.0;

/// Unnormalized strength: readout coefficient times the product of component strengths.
pub fn path_strength<S: Scalar>(path: &PathDescriptor, model: &Model<S>) -> f64 {
    let blocks: Vec<_> = model.recurrent_blocks().collect();
    path.components.iter().fold(path.readout_coefficient, |acc, c| {
        let rb = blocks[c.layer - 1];
        let kernel = match c.kind {
            ConvKind::Feedforward => &rb.ff_kernel,
            ConvKind::Lateral => &rb.lateral_kernel,
        };
        acc * conv_strength(kernel) * bn_strength(&rb.bns[c.iteration - 1]) * ACTIVATION_STRENGTH
    })
}

pub fn normalize(strengths: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = strengths.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!(
            "path strengths sum to {total}; the ensemble carries no signal"
        )));
    }
    Ok(strengths.iter().map(|s| s / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub paths: Vec<PathDescriptor>,
    pub raw_strengths: Vec<f64>,
    pub strengths: Vec<f64>,
    pub average_length: f64,
    /// Normalized strength mass per path length.
    pub diversity: BTreeMap<usize, f64>,
}

/// Path ensemble of a recurrent or multi-path model; removed lengths are left out.
pub fn ensemble_summary<S: Scalar>(model: &Model<S>) -> Result<EnsembleSummary> {
    let cfg = &model.config;
    if cfg.kind == ModelKind::Feedforward {
        return Err(Error::Config("feedforward models have no path ensemble".into()));
    }
    let paths: Vec<_> = enumerate_paths(cfg.recurrent_layers(), cfg.iterations, cfg.readout_mode)?
        .into_iter()
        .filter(|p| !cfg.removed_lengths.contains(&p.length))
        .collect();
    let raw: Vec<f64> = paths.iter().map(|p| path_strength(p, model)).collect();
    let strengths = normalize(&raw)?;
    let mut diversity = BTreeMap::new();
    let mut average_length = 0.0;
    for (p, s) in paths.iter().zip(&strengths) {
        *diversity.entry(p.length).or_insert(0.0) += s;
        average_length += s * p.length as f64;
    }
    Ok(EnsembleSummary {
        paths,
        raw_strengths: raw,
        strengths,
        average_length,
        diversity,
    })
}

impl EnsembleSummary {
    pub fn to_json(&self) -> serde_json::Value {
        let paths: Vec<_> = self
            .paths
            .iter()
            .zip(&self.strengths)
            .map(|(p, s)| {
                serde_json::json!({
                    "layers": p.components.iter().map(|c| c.layer).collect::<Vec<_>>(),
                    "iterations": p.components.iter().map(|c| c.iteration).collect::<Vec<_>>(),
                    "length": p.length,
                    "strength": s,
                })
            })
            .collect();
        let diversity: BTreeMap<String, f64> =
            self.diversity.iter().map(|(l, m)| (l.to_string(), *m)).collect();
        serde_json::json!({
            "paths": paths,
            "average_length": self.average_length,
            "diversity": diversity,
        })
    }
}

/// Every path-length value the model's ensemble can contain.
pub fn length_range(m_rec: usize, iterations: usize) -> std::ops::RangeInclusive<usize> {
    m_rec..=m_rec + iterations - 1
}

/// Windows of `width` adjacent lengths sliding over [`length_range`].
pub fn length_windows(m_rec: usize, iterations: usize, width: usize) -> Vec<Vec<usize>> {
    let r = length_range(m_rec, iterations);
    let (lo, hi) = (*r.start(), *r.end());
    if width == 0 || hi + 1 < lo + width {
        return Vec::new();
    }
    (lo..=hi + 1 - width).map(|s| (s..s + width).collect()).collect()
}
