//! Neural datasets: storage, preprocessing, splitting and the synthetic teacher.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::container::{BlobData, Container, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::model::{build_model, Block, Model, ModelConfig};
use crate::ops::BnMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trials kept per stimulus when recordings carry a variable number.
pub const TRIAL_LIMIT: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Training stimuli in shuffled order; prefixes form nested subsets.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// The first `fraction` of the training list, at least one stimulus.
    pub fn train_subset(&self, fraction: f64) -> Vec<usize> {
        let n = ((self.train.len() as f64) * fraction).round() as usize;
        self.train[..n.clamp(1, self.train.len())].to_vec()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty() && self.test.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronMeta {
    pub id: String,
    pub area: String,
}

/// Stimuli with per-trial responses.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralDataset<S: Scalar = f64> {
    /// `[S, H, W]`, values in `[0, 1]`.
    pub images: Tensor<S>,
    /// `[S, N, K]`
    pub responses: Tensor<S>,
    pub neurons: Vec<NeuronMeta>,
    pub split: Split,
    /// Per-neuron divisor applied by [`preprocess`] (1 when unscaled).
    pub response_scale: Vec<f64>,
}

impl<S: Scalar> NeuralDataset<S> {
    pub fn new(images: Tensor<S>, responses: Tensor<S>, neurons: Vec<NeuronMeta>) -> Result<Self> {
        let ds = NeuralDataset {
            response_scale: vec![1.0; neurons.len()],
            images,
            responses,
            neurons,
            split: Split::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_stimuli(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn num_neurons(&self) -> usize {
        self.responses.shape()[1]
    }

    pub fn num_trials(&self) -> usize {
        self.responses.shape()[2]
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.images.ndim() != 3 || self.responses.ndim() != 3 {
            return bad("images must be [S,H,W] and responses [S,N,K]".into());
        }
        let s = self.num_stimuli();
        if self.responses.shape()[0] != s {
            return bad(format!(
                "{s} images but responses for {} stimuli",
                self.responses.shape()[0]
            ));
        }
        if self.neurons.len() != self.num_neurons() {
            return bad(format!(
                "{} neuron records for {} neurons",
                self.neurons.len(),
                self.num_neurons()
            ));
        }
        if self.response_scale.len() != self.num_neurons() {
            return bad("response scale length differs from neuron count".into());
        }
        if !self.images.is_finite() || !self.responses.is_finite() {
            return bad("non-finite values in images or responses".into());
        }
        let mut seen = vec![false; s];
        for &i in self.split.train.iter().chain(&self.split.val).chain(&self.split.test) {
            if i >= s || seen[i] {
                return bad(format!("split index {i} out of range or repeated"));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Trial-averaged responses `[S, N]`.
    pub fn mean_responses(&self) -> Tensor<S> {
        let (s, n, k) = (self.num_stimuli(), self.num_neurons(), self.num_trials());
        let data = self
            .responses
            .data()
            .chunks(k)
            .map(|c| c.iter().copied().sum::<S>() / S::lit(k as f64))
            .collect();
        Tensor::from_vec(&[s, n], data).expect("consistent shape")
    }

    /// Images `[len, H, W]` and trial-averaged responses `[len, N]` of the listed stimuli.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<S>, Tensor<S>) {
        let (h, w) = self.image_shape();
        let (n, k) = (self.num_neurons(), self.num_trials());
        let mut img = Vec::with_capacity(indices.len() * h * w);
        let mut resp = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            img.extend_from_slice(&self.images.data()[i * h * w..(i + 1) * h * w]);
            for c in self.responses.data()[i * n * k..(i + 1) * n * k].chunks(k) {
                resp.push(c.iter().copied().sum::<S>() / S::lit(k as f64));
            }
        }
        (
            Tensor::from_vec(&[indices.len(), h, w], img).expect("consistent shape"),
            Tensor::from_vec(&[indices.len(), n], resp).expect("consistent shape"),
        )
    }

    /// Keeps the first `k` trials of every stimulus.
    pub fn truncate_trials(&mut self, k: usize) -> Result<()> {
        let (s, n, old) = (self.num_stimuli(), self.num_neurons(), self.num_trials());
        if k < 2 {
            return Err(Error::Data("at least two trials are required".into()));
        }
        if k >= old {
            return Ok(());
        }
        let data = self
            .responses
            .data()
            .chunks(old)
            .flat_map(|c| c[..k].iter().copied())
            .collect();
        self.responses = Tensor::from_vec(&[s, n, k], data)?;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> NeuralDataset<T> {
        NeuralDataset {
            images: self.images.cast(),
            responses: self.responses.cast(),
            neurons: self.neurons.clone(),
            split: self.split.clone(),
            response_scale: self.response_scale.clone(),
        }
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let to32 = |t: &Tensor<S>| BlobData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect());
        let mut c = Container::new(serde_json::json!({
            "neurons": self.neurons,
            "split": self.split,
            "response_scale": self.response_scale,
            "extra": meta,
        }));
        c.push("images", self.images.shape(), to32(&self.images))?;
        c.push("responses", self.responses.shape(), to32(&self.responses))?;
        c.write(path, DATASET_MAGIC)
    }

    /// Loads a dataset; with `truncate` the trials are cut to [`TRIAL_LIMIT`].
    pub fn load(path: &Path, truncate: bool) -> Result<Self> {
        let c = Container::read(path, DATASET_MAGIC)?;
        let field = |name: &str| {
            c.meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Corrupt(format!("header lacks `{name}`")))
        };
        let neurons: Vec<NeuronMeta> = serde_json::from_value(field("neurons")?)?;
        let split: Split = serde_json::from_value(field("split")?)?;
        let response_scale: Vec<f64> = serde_json::from_value(field("response_scale")?)?;
        let tensor = |name: &str| -> Result<Tensor<S>> {
            let b = c.get(name)?;
            Tensor::from_vec(&b.shape, b.data.to_f64().into_iter().map(S::lit).collect())
        };
        let mut ds = NeuralDataset {
            images: tensor("images")?,
            responses: tensor("responses")?,
            neurons,
            split,
            response_scale,
        };
        ds.validate()?;
        if truncate {
            ds.truncate_trials(TRIAL_LIMIT)?;
        }
        Ok(ds)
    }

    /// Extra metadata stored by [`NeuralDataset::save`].
    pub fn load_meta(path: &Path) -> Result<serde_json::Value> {
        let c = Container::read(path, DATASET_MAGIC)?;
        Ok(c.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null))
    }
}

/// Deterministic shuffled split with the given (train, val, test) fractions.
pub fn split<S: Scalar>(mut ds: NeuralDataset<S>, fractions: (f64, f64, f64), seed: u64) -> Result<NeuralDataset<S>> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| *f < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let s = ds.num_stimuli();
    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (a * s as f64).round() as usize;
    let n_val = ((b * s as f64).round() as usize).min(s - n_train);
    let sp = Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    if sp.train.is_empty() || sp.val.is_empty() || sp.test.is_empty() {
        return Err(Error::Data(format!(
            "split of {s} stimuli leaves an empty part ({}, {}, {})",
            sp.train.len(),
            sp.val.len(),
            sp.test.len()
        )));
    }
    ds.split = sp;
    Ok(ds)
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.64, 0.16, 0.20);

/// Center-crops to a square and area-averages down to `target × target`, then divides
/// each neuron's responses by the standard deviation of its training-split trial means.
pub fn preprocess<S: Scalar>(ds: &NeuralDataset<S>, target: usize) -> Result<NeuralDataset<S>> {
    let (h, w) = ds.image_shape();
    let side = h.min(w);
    if target == 0 || target > side {
        return Err(Error::Data(format!("target size {target} exceeds the {h}x{w} source")));
    }
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    let s = ds.num_stimuli();
    let mut out = Vec::with_capacity(s * target * target);
    for i in 0..s {
        let img = &ds.images.data()[i * h * w..(i + 1) * h * w];
        for ty in 0..target {
            let (y0, y1) = (ty * side / target, (ty + 1) * side / target);
            for tx in 0..target {
                let (x0, x1) = (tx * side / target, (tx + 1) * side / target);
                let mut acc = S::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img[(top + y) * w + left + x];
                    }
                }
                out.push(acc / S::lit(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    let mut res = ds.clone();
    res.images = Tensor::from_vec(&[s, target, target], out)?;
    let rows: Vec<usize> = if ds.split.train.is_empty() {
        (0..s).collect()
    } else {
        ds.split.train.clone()
    };
    let means = ds.mean_responses();
    let n = ds.num_neurons();
    let k = ds.num_trials();
    for j in 0..n {
        let vals: Vec<f64> = rows.iter().map(|&i| means.at(&[i, j]).as_f64()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len().max(2) - 1) as f64;
        let sd = var.sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        res.response_scale[j] = ds.response_scale[j] * scale;
        let inv = S::lit(1.0 / scale);
        for i in 0..s {
            for t in 0..k {
                let v = res.responses.at(&[i, j, t]);
                res.responses.set(&[i, j, t], v * inv);
            }
        }
    }
    Ok(res)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LateralTemplate {
    /// Lateral kernels set to zero.
    Zero,
    /// Self-excitation at the center tap and inhibition pooled over all channels and taps.
    CenterSurround { excitation: f64, inhibition: f64 },
}

impl LateralTemplate {
    pub fn kernel<S: Scalar>(self, channels: usize, k: usize) -> Tensor<S> {
        let mut t = Tensor::zeros(&[channels, channels, k, k]);
        if let LateralTemplate::CenterSurround { excitation, inhibition } = self {
            let inh = S::lit(-inhibition / (k * k * channels) as f64);
            for v in t.data_mut() {
                *v = inh;
            }
            let c = k / 2;
            for ch in 0..channels {
                let v = t.at(&[ch, ch, c, c]);
                t.set(&[ch, ch, c, c], v + S::lit(excitation));
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrialNoise {
    None,
    /// Counts drawn from Poisson(`rate_scale` × rate).
    Poisson { rate_scale: f64 },
    Gaussian { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImageSource {
    /// White noise blurred by a Gaussian of `cutoff` pixels, rescaled into `[0, 1]`.
    FilteredNoise { cutoff: f64 },
    /// Checkerboards with random square size and phase.
    Checkerboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    /// Architecture of the generating model; `num_neurons` and `input_shape` define N and H×W.
    pub model: ModelConfig,
    pub lateral: LateralTemplate,
    pub noise: TrialNoise,
    pub stimuli: usize,
    pub trials: usize,
    pub images: ImageSource,
    /// Readout drive gain; larger values give sparser, more nonlinear responses.
    #[serde(default = "default_gain")]
    pub readout_gain: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self::desk_scale()
    }
}

fn default_gain() -> f64 {
    2.0
}

impl TeacherSpec {
    /// Desk-scale surround-modulated teacher: 2000 stimuli, 12 neurons, 8 trials, 32×32.
    pub fn desk_scale() -> Self {
        let mut model = ModelConfig::recurrent(1, 8, 5, crate::model::ReadoutMode::TwoAvg);
        model.num_neurons = 12;
        model.input_shape = (32, 32);
        TeacherSpec {
            model,
            lateral: LateralTemplate::CenterSurround {
                excitation: 0.6,
                inhibition: 1.5,
            },
            noise: TrialNoise::Poisson { rate_scale: 8.0 },
            stimuli: 2000,
            trials: 8,
            images: ImageSource::FilteredNoise { cutoff: 1.5 },
            readout_gain: default_gain(),
        }
    }
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let d = i as isize - r;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + d).rem_euclid(w as isize))
                    } else {
                        ((y as isize + d).rem_euclid(h as isize), x as isize)
                    };
                    acc += t * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Renders `count` stimulus images `[count, H, W]`.
pub fn render_images<R: Rng>(source: ImageSource, count: usize, (h, w): (usize, usize), rng: &mut R) -> Tensor<f64> {
    let mut data = Vec::with_capacity(count * h * w);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..count {
        match source {
            ImageSource::FilteredNoise { cutoff } => {
                let white: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
                let img = gaussian_blur(&white, h, w, cutoff);
                let m = img.iter().sum::<f64>() / img.len() as f64;
                let sd = (img.iter().map(|v| (v - m).powi(2)).sum::<f64>() / img.len() as f64).sqrt();
                data.extend(img.iter().map(|v| (0.5 + 0.2 * (v - m) / sd.max(1e-12)).clamp(0.0, 1.0)));
            }
            ImageSource::Checkerboard => {
                let size = rng.gen_range(2..=8);
                let (oy, ox) = (rng.gen_range(0..size), rng.gen_range(0..size));
                for y in 0..h {
                    for x in 0..w {
                        let v = ((y + oy) / size + (x + ox) / size) % 2;
                        data.push(v as f64);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[count, h, w], data).expect("consistent shape")
}

/// Sets every running statistic to the statistics of `images` under the model itself.
pub fn calibrate_bn(model: &mut Model<f64>, images: &Tensor<f64>) -> Result<()> {
    let x = crate::model::batch_images(images)?;
    let momenta: Vec<f64> = set_momentum(model, None);
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let xv = g.constant(x);
    let pass = model.forward(&mut g, &vars, xv, BnMode::Train)?;
    model.apply_bn_updates(&g, &pass.bn_nodes);
    set_momentum(model, Some(&momenta));
    Ok(())
}

/// Sets every momentum to 1 (`None`) or restores saved values; returns the old values.
fn set_momentum(model: &mut Model<f64>, restore: Option<&[f64]>) -> Vec<f64> {
    let mut old = Vec::new();
    let mut bns = vec![&mut model.input_bn];
    for b in model.blocks.iter_mut() {
        match b {
            Block::Conv(cb) => bns.push(&mut cb.bn),
            Block::Recurrent(rb) => bns.extend(rb.bns.iter_mut()),
        }
    }
    for (i, bn) in bns.into_iter().enumerate() {
        old.push(bn.momentum);
        bn.momentum = restore.map_or(1.0, |r| r[i]);
    }
    old
}

/// Builds the generating model: random kernels, the lateral template, Gaussian-blob
/// readout masks and normalization calibrated on `images`.
pub fn build_teacher(spec: &TeacherSpec, images: &Tensor<f64>, seed: u64) -> Result<Model<f64>> {
    let mut cfg = spec.model.clone();
    cfg.seed = seed;
    let mut model = build_model::<f64>(&cfg)?;
    let c = cfg.channels;
    let k = cfg.later_kernel;
    for rb in model.recurrent_blocks_mut() {
        rb.lateral_kernel = spec.lateral.kernel(c, k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E12);
    let (hp, wp) = cfg.pooled_shape();
    let n = cfg.num_neurons;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut mask = Tensor::zeros(&[n, hp, wp]);
    let mut feats = Tensor::zeros(&[n, c]);
    for j in 0..n {
        let cy = rng.gen_range(hp as f64 * 0.25..hp as f64 * 0.75);
        let cx = rng.gen_range(wp as f64 * 0.25..wp as f64 * 0.75);
        let sigma = rng.gen_range(0.6..1.2);
        let mut total = 0.0;
        for y in 0..hp {
            for x in 0..wp {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                mask.set(&[j, y, x], v);
                total += v;
            }
        }
        for y in 0..hp {
            for x in 0..wp {
                let v = mask.at(&[j, y, x]);
                mask.set(&[j, y, x], v / total);
            }
        }
        let f: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (ch, v) in f.into_iter().enumerate() {
            feats.set(&[j, ch], spec.readout_gain * v / norm);
        }
    }
    model.readout.spatial_mask = mask;
    model.readout.feature_weights = feats;
    calibrate_bn(&mut model, images)?;
    // centre each neuron's drive on the bend of the activation
    let rates = model.predict(images)?;
    let s = rates.shape()[0];
    for j in 0..n {
        let pre = (0..s)
            .map(|i| rates.at(&[i, j]).exp_m1().max(1e-12).ln())
            .sum::<f64>()
            / s as f64;
        let b = model.readout.bias.at(&[j]);
        model.readout.bias.set(&[j], b - pre);
    }
    Ok(model)
}

/// Draws `trials` noisy observations per stimulus from mean rates `[S, N]`.
pub fn draw_trials<R: Rng>(rates: &Tensor<f64>, trials: usize, noise: TrialNoise, rng: &mut R) -> Result<Tensor<f64>> {
    let (s, n) = (rates.shape()[0], rates.shape()[1]);
    let mut out = Vec::with_capacity(s * n * trials);
    for &r in rates.data() {
        for _ in 0..trials {
            out.push(match noise {
                TrialNoise::None => r,
                TrialNoise::Poisson { rate_scale } => {
                    let lam = rate_scale * r;
                    if lam <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(lam)
                            .map_err(|e| Error::Numerical(format!("poisson rate {lam}: {e}")))?
                            .sample(rng)
                    }
                }
                TrialNoise::Gaussian { sigma } => r + sigma * Normal::new(0.0, 1.0).expect("unit normal").sample(rng),
            });
        }
    }
    Tensor::from_vec(&[s, n, trials], out)
}

/// Mean rates of the dataset's neurons in the units of its trials.
pub fn noise_free_rates(rates: &Tensor<f64>, noise: TrialNoise) -> Tensor<f64> {
    match noise {
        TrialNoise::Poisson { rate_scale } => rates.map(|r| r * rate_scale),
        _ => rates.clone(),
    }
}

/// Renders images, runs the teacher and samples trials. Returns the split dataset, the
/// teacher, and the teacher's noise-free mean rates in trial units.
pub fn generate_teacher_dataset(spec: &TeacherSpec, seed: u64) -> Result<(NeuralDataset<f64>, Model<f64>, Tensor<f64>)> {
    if spec.stimuli < 5 || spec.trials < 2 {
        return Err(Error::Data("a teacher dataset needs at least 5 stimuli and 2 trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = render_images(spec.images, spec.stimuli, spec.model.input_shape, &mut rng);
    let calib_n = spec.stimuli.min(256);
    let calib = Tensor::from_vec(
        &[calib_n, images.shape()[1], images.shape()[2]],
        images.data()[..calib_n * images.shape()[1] * images.shape()[2]].to_vec(),
    )?;
    let teacher = build_teacher(spec, &calib, seed)?;
    let mut rates = Vec::with_capacity(spec.stimuli * spec.model.num_neurons);
    let (h, w) = spec.model.input_shape;
    for chunk in (0..spec.stimuli).collect::<Vec<_>>().chunks(128) {
        let batch = Tensor::from_vec(
            &[chunk.len(), h, w],
            images.data()[chunk[0] * h * w..(chunk[chunk.len() - 1] + 1) * h * w].to_vec(),
        )?;
        rates.extend_from_slice(teacher.predict(&batch)?.data());
    }
    let rates = Tensor::from_vec(&[spec.stimuli, spec.model.num_neurons], rates)?;
    if !rates.is_finite() {
        return Err(Error::Numerical("teacher produced non-finite rates".into()));
    }
    let trials = draw_trials(&rates, spec.trials, spec.noise, &mut rng)?;
    let neurons = (0..spec.model.num_neurons)
        .map(|j| NeuronMeta {
            id: format!("n{j:03}"),
            area: "teacher".into(),
        })
        .collect();
    let ds = NeuralDataset::new(images, trials, neurons)?;
    let ds = split(ds, DEFAULT_FRACTIONS, seed)?;
    Ok((ds, teacher, noise_free_rates(&rates, spec.noise)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(s: usize, k: usize) -> NeuralDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = Tensor::uniform(&[s, 6, 6], 0.5, &mut rng).map(|v| v + 0.5);
        let responses = Tensor::uniform(&[s, 2, k], 1.0, &mut rng).map(|v| v + 2.0);
        let neurons = (0..2)
            .map(|j| NeuronMeta {
                id: format!("n{j}"),
                area: "x".into(),
            })
            .collect();
        NeuralDataset::new(images, responses, neurons).unwrap()
    }

    #[test]
    fn split_sizes_and_nesting() {
        let ds = split(toy(100, 3), DEFAULT_FRACTIONS, 4).unwrap();
        assert_eq!(
            (ds.split.train.len(), ds.split.val.len(), ds.split.test.len()),
            (64, 16, 20)
        );
        let again = split(toy(100, 3), DEFAULT_FRACTIONS, 4).unwrap();
        assert_eq!(ds.split, again.split);
        let q = ds.split.train_subset(0.25);
        let h = ds.split.train_subset(0.5);
        assert!(q.iter().all(|i| h.contains(i)));
        assert!(h.iter().all(|i| ds.split.train.contains(i)));
        let mut all: Vec<_> = ds.split.train.iter().chain(&ds.split.val).chain(&ds.split.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split(toy(3, 2), DEFAULT_FRACTIONS, 0).is_err());
        assert!(split(toy(10, 2), (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn preprocessing() {
        let ds = toy(10, 2);
        let same = preprocess(&ds, 6).unwrap();
        assert_eq!(same.images, ds.images);
        assert!(preprocess(&ds, 7).is_err());
        let mut board = ds.clone();
        for i in 0..10 {
            for y in 0..6 {
                for x in 0..6 {
                    board.images.set(&[i, y, x], ((x + y) % 2) as f64);
                }
            }
        }
        let down = preprocess(&board, 3).unwrap();
        assert!(down.images.data().iter().all(|&v| v == 0.5));
        let means = down.mean_responses();
        for j in 0..2 {
            let col: Vec<f64> = (0..10).map(|i| means.at(&[i, j])).collect();
            let m = col.iter().sum::<f64>() / 10.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 9.0).sqrt();
            assert!((sd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn container_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.sds");
        let ds = split(toy(20, 10), DEFAULT_FRACTIONS, 0).unwrap().cast::<f32>();
        ds.save(&p, serde_json::json!({"seed": 3})).unwrap();
        let back = NeuralDataset::<f32>::load(&p, false).unwrap();
        assert_eq!(back, ds);
        let cut = NeuralDataset::<f32>::load(&p, true).unwrap();
        assert_eq!(cut.num_trials(), 8);
        assert_eq!(cut.responses.at(&[3, 1, 7]), ds.responses.at(&[3, 1, 7]));
        assert_eq!(NeuralDataset::<f32>::load_meta(&p).unwrap()["seed"], 3);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        let err = NeuralDataset::<f32>::load(&p, false).unwrap_err();
        assert!(err.to_string().contains("responses"), "{err}");
    }

    #[test]
    fn rejects_non_finite() {
        let mut ds = toy(5, 2);
        ds.responses.set(&[0, 0, 0], f64::NAN);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn center_surround_template() {
        let k = LateralTemplate::CenterSurround {
            excitation: 1.0,
            inhibition: 0.9,
        }
        .kernel::<f64>(2, 3);
        assert!((k.sum() - (2.0 - 0.9 * 2.0)).abs() < 1e-12);
        assert!(LateralTemplate::Zero.kernel::<f64>(2, 3).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_teacher_trials_are_identical() {
        let mut spec = TeacherSpec::desk_scale();
        spec.stimuli = 20;
        spec.model.input_shape = (16, 16);
        spec.model.num_neurons = 3;
        spec.noise = TrialNoise::None;
        let (ds, teacher, rates) = generate_teacher_dataset(&spec, 1).unwrap();
        assert!(ds.mean_responses().max_abs_diff(&rates) < 1e-12);
        let (_, teacher2, _) = generate_teacher_dataset(&spec, 1).unwrap();
        assert_eq!(teacher, teacher2);
        assert!(rates.data().iter().all(|&r| r > 0.0));
    }
}
