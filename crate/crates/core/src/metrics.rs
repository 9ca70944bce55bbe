//! Noise-normalized correlation between predicted and recorded responses.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::NeuralDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Responses of one neuron: `stimuli × trials`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialMatrix {
    pub stimuli: usize,
    pub trials: usize,
    pub data: Vec<f64>,
}

impl TrialMatrix {
    pub fn new(stimuli: usize, trials: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != stimuli * trials {
            return Err(Error::Shape(format!(
                "{} values for {stimuli}x{trials} trial matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite trial value".into()));
        }
        Ok(TrialMatrix { stimuli, trials, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged trial rows".into()));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    /// Trial matrix of neuron `n` of a `[S, N, K]` response tensor.
    pub fn of_neuron<S: Scalar>(responses: &Tensor<S>, n: usize) -> Self {
        let s = responses.shape();
        let (m, nn, k) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            let base = (i * nn + n) * k;
            data.extend(responses.data()[base..base + k].iter().map(|x| x.as_f64()));
        }
        TrialMatrix { stimuli: m, trials: k, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.trials..(i + 1) * self.trials]
    }

    pub fn trial_means(&self) -> Vec<f64> {
        (0..self.stimuli)
            .map(|i| self.row(i).iter().sum::<f64>() / self.trials as f64)
            .collect()
    }
}

/// Sample (n − 1) variance.
pub fn sample_var(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Ok,
    /// Trial-to-trial noise swamps the signal: the explainable variance is not positive.
    Unreliable,
    /// A prediction or response vector is constant.
    ZeroVariance,
}

/// Pearson correlation; `None` when either input is constant or shorter than 3.
pub fn cc_raw(r: &[f64], r_hat: &[f64]) -> Option<f64> {
    if r.len() != r_hat.len() || r.len() < 3 {
        return None;
    }
    let n = r.len() as f64;
    let (mr, mp) = (r.iter().sum::<f64>() / n, r_hat.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in r.iter().zip(r_hat) {
        let (da, db) = (a - mr, b - mp);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Upper bound on the correlation any model can reach given trial noise.
///
/// Returns the value and a flag; the value is `None` unless the flag is [`Flag::Ok`].
pub fn cc_max(trials: &TrialMatrix) -> (Option<f64>, Flag) {
    let (m, k) = (trials.stimuli, trials.trials);
    if m < 3 || k < 2 {
        return (None, Flag::Unreliable);
    }
    let sums: Vec<f64> = (0..m).map(|i| trials.row(i).iter().sum()).collect();
    let per_trial: f64 = (0..k)
        .map(|t| sample_var(&(0..m).map(|i| trials.data[i * k + t]).collect::<Vec<_>>()))
        .sum();
    let means = trials.trial_means();
    let denom = (k * (k - 1)) as f64 * sample_var(&means);
    if denom <= 0.0 {
        return (None, Flag::ZeroVariance);
    }
    // identical trials reduce the ratio to 1 analytically; skip the rounding
    if (0..m).all(|i| trials.row(i).iter().all(|&v| v == trials.row(i)[0])) {
        return (Some(1.0), Flag::Ok);
    }
    let numer = sample_var(&sums) - per_trial;
    if numer <= 0.0 {
        return (None, Flag::Unreliable);
    }
    (Some((numer / denom).sqrt()), Flag::Ok)
}

/// Squared normalized correlation `(cc_raw / cc_max)^2`, unclipped.
pub fn cc_norm2(r: &[f64], r_hat: &[f64], trials: &TrialMatrix) -> (Option<f64>, Flag) {
    match cc_max(trials) {
        (Some(max), Flag::Ok) => match cc_raw(r, r_hat) {
            Some(c) => (Some((c / max).powi(2)), Flag::Ok),
            None => (None, Flag::ZeroVariance),
        },
        (_, flag) => (None, flag),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub neuron_id: String,
    pub cc_raw: Option<f64>,
    pub cc_max: Option<f64>,
    pub cc_norm2: Option<f64>,
    pub flag: Flag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    /// Mean CC_norm² over neurons flagged [`Flag::Ok`]; values above 1 are kept.
    pub mean_cc_norm2: f64,
    pub neurons: Vec<NeuronScore>,
}

impl DatasetScore {
    pub fn excluded(&self) -> Vec<&str> {
        self.neurons
            .iter()
            .filter(|n| n.flag != Flag::Ok)
            .map(|n| n.neuron_id.as_str())
            .collect()
    }

    /// `neuron_id,cc_raw,cc_max,cc_norm2,flag`; missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        let mut s = String::from("neuron_id,cc_raw,cc_max,cc_norm2,flag\n");
        for n in &self.neurons {
            let flag = match n.flag {
                Flag::Ok if n.cc_norm2.is_some_and(|v| v > 1.0) => "above_ceiling",
                Flag::Ok => "ok",
                Flag::Unreliable => "unreliable",
                Flag::ZeroVariance => "zero_variance",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{flag}",
                n.neuron_id,
                opt(n.cc_raw),
                opt(n.cc_max),
                opt(n.cc_norm2)
            );
        }
        s
    }
}

/// Scores `predictions [len(rows), N]` against the trial means of `rows`; the noise
/// ceiling uses every stimulus of the dataset.
pub fn score_predictions<S: Scalar>(
    predictions: &Tensor<S>,
    dataset: &NeuralDataset<S>,
    rows: &[usize],
) -> Result<DatasetScore> {
    let n = dataset.num_neurons();
    if predictions.shape() != [rows.len(), n] {
        return Err(Error::Shape(format!(
            "predictions {:?} for {} stimuli and {n} neurons",
            predictions.shape(),
            rows.len()
        )));
    }
    let means = dataset.mean_responses();
    let mut neurons = Vec::with_capacity(n);
    let (mut total, mut count) = (0.0, 0usize);
    for j in 0..n {
        let trials = TrialMatrix::of_neuron(&dataset.responses, j);
        let r: Vec<f64> = rows.iter().map(|&i| means.at(&[i, j]).as_f64()).collect();
        let p: Vec<f64> = (0..rows.len()).map(|i| predictions.at(&[i, j]).as_f64()).collect();
        let (max, max_flag) = cc_max(&trials);
        let raw = cc_raw(&r, &p);
        let (norm2, flag) = match (max, raw) {
            (Some(m), Some(c)) => (Some((c / m).powi(2)), Flag::Ok),
            (Some(_), None) => (None, Flag::ZeroVariance),
            (None, _) => (None, max_flag),
        };
        if let Some(v) = norm2 {
            total += v;
            count += 1;
        }
        neurons.push(NeuronScore {
            neuron_id: dataset.neurons[j].id.clone(),
            cc_raw: raw,
            cc_max: max,
            cc_norm2: norm2,
            flag,
        });
    }
    if count == 0 {
        return Err(Error::Data("no neuron could be scored".into()));
    }
    Ok(DatasetScore {
        mean_cc_norm2: total / count as f64,
        neurons,
    })
}

/// Eval-mode predictions for the listed stimuli, evaluated in chunks.
pub fn predict_rows<S: Scalar>(model: &Model<S>, dataset: &NeuralDataset<S>, rows: &[usize]) -> Result<Tensor<S>> {
    let mut out = Vec::with_capacity(rows.len() * dataset.num_neurons());
    for chunk in rows.chunks(256) {
        let (img, _) = dataset.batch(chunk);
        out.extend_from_slice(model.predict(&img)?.data());
    }
    Tensor::from_vec(&[rows.len(), dataset.num_neurons()], out)
}

/// Mean CC_norm² of the model on the test split.
pub fn dataset_score<S: Scalar>(model: &Model<S>, dataset: &NeuralDataset<S>) -> Result<DatasetScore> {
    let rows = &dataset.split.test;
    if rows.is_empty() {
        return Err(Error::Data("the test split is empty".into()));
    }
    let pred = predict_rows(model, dataset, rows)?;
    score_predictions(&pred, dataset, rows)
}
