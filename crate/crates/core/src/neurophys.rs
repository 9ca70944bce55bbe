//! Virtual neurophysiology: parametric bar and grating stimuli, probing of the
//! central hidden units of a recurrent block, and tuning analyses.
//!
//! Image coordinates: pixel `(row i, col j)` covers `[j, j+1) × [i, i+1)`; angles are
//! measured from the `+x` (column) axis toward `+y` (row) in degrees.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::LateralTemplate;
use crate::error::{Error, Result};
use crate::model::{build_model, Block, Model, ModelConfig, ReadoutMode};
use crate::ops::Activation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROBE_SIZE: usize = 48;
pub const BAR_WIDTH: f64 = 2.0;
/// Bar length used to map receptive fields.
pub const MAPPING_LENGTH: f64 = 10.0;
pub const GRID_SPACING: f64 = 5.0;
pub const CONTRAST: f64 = 0.30;
pub const BACKGROUND: f64 = 0.5;
pub const APERTURE_SIGMA: f64 = 1.0;
/// A unit is kept when some stimulus drives it at least this much at every iteration.
pub const STABILITY_THRESHOLD: f64 = 1.0;
const SUBSAMPLES: usize = 4;
/// Grating phases tried when selecting a unit's optimal frequency.
pub const PHASES: [f64; 4] = [
    0.0,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    3.0 * std::f64::consts::FRAC_PI_2,
];
const CHUNK: usize = 64;

/// `0, 22.5, …, 337.5`
pub fn orientations() -> Vec<f64> {
    (0..16).map(|i| i as f64 * 22.5).collect()
}

/// Bar lengths and aperture diameters: `5, 7, …, 45`.
pub fn sweep_sizes() -> Vec<f64> {
    (0..21).map(|i| 5.0 + 2.0 * i as f64).collect()
}

/// Cycles per image: `0, 1, …, 15`.
pub fn frequencies() -> Vec<f64> {
    (0..16).map(|f| f as f64).collect()
}

/// `(dx, dy)` offsets of the 5×5 mapping grid, row-major.
pub fn grid_offsets() -> Vec<(f64, f64)> {
    let steps = [-2.0, -1.0, 0.0, 1.0, 2.0];
    steps
        .iter()
        .flat_map(|&dy| steps.iter().map(move |&dx| (dx * GRID_SPACING, dy * GRID_SPACING)))
        .collect()
}

fn image_center(size: usize) -> (f64, f64) {
    (size as f64 / 2.0, size as f64 / 2.0)
}

/// Black bar on a white background.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarStimulus {
    pub orientation: f64,
    pub length: f64,
    pub width: f64,
    /// Offset of the bar center from the image center, `(dx, dy)` in pixels.
    pub offset: (f64, f64),
}

impl BarStimulus {
    pub fn new(orientation: f64, length: f64, offset: (f64, f64)) -> Self {
        BarStimulus {
            orientation,
            length,
            width: BAR_WIDTH,
            offset,
        }
    }
}

/// Anti-aliased rotated rectangle from 4×4 coverage sampling per pixel.
pub fn render_bar(spec: &BarStimulus, size: usize) -> Tensor<f64> {
    let (cx, cy) = image_center(size);
    let (cx, cy) = (cx + spec.offset.0, cy + spec.offset.1);
    // Reducing modulo 180 makes opposite orientations render identically, bit for bit.
    let theta = spec.orientation.rem_euclid(180.0).to_radians();
    let (sin, cos) = theta.sin_cos();
    let (half_l, half_w) = (spec.length / 2.0, spec.width / 2.0);
    let step = 1.0 / SUBSAMPLES as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let mut hits = 0;
            for a in 0..SUBSAMPLES {
                for b in 0..SUBSAMPLES {
                    let dx = j as f64 + (b as f64 + 0.5) * step - cx;
                    let dy = i as f64 + (a as f64 + 0.5) * step - cy;
                    let along = dx * cos + dy * sin;
                    let across = dy * cos - dx * sin;
                    if along.abs() <= half_l && across.abs() <= half_w {
                        hits += 1;
                    }
                }
            }
            data.push(1.0 - hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64);
        }
    }
    Tensor::from_vec(&[size, size], data).expect("square image")
}

/// Sine-wave grating on a mid-gray background.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GratingStimulus {
    /// Cycles per image width.
    pub spatial_frequency: f64,
    /// Aperture diameter in pixels; `None` fills the image.
    pub diameter: Option<f64>,
    /// Direction of modulation.
    pub orientation: f64,
    pub phase: f64,
    /// Michelson contrast.
    pub contrast: f64,
    pub offset: (f64, f64),
}

impl GratingStimulus {
    pub fn full_field(spatial_frequency: f64, orientation: f64, phase: f64) -> Self {
        GratingStimulus {
            spatial_frequency,
            diameter: None,
            orientation,
            phase,
            contrast: CONTRAST,
            offset: (0.0, 0.0),
        }
    }
}

/// Grating evaluated at pixel centers relative to the stimulus center; the aperture
/// is a disk blurred by a Gaussian of [`APERTURE_SIGMA`] (radial error-function profile).
pub fn render_grating(spec: &GratingStimulus, size: usize) -> Tensor<f64> {
    let (cx, cy) = image_center(size);
    let (cx, cy) = (cx + spec.offset.0, cy + spec.offset.1);
    let (sin, cos) = spec.orientation.to_radians().sin_cos();
    let k = 2.0 * std::f64::consts::PI * spec.spatial_frequency / size as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dx = j as f64 + 0.5 - cx;
            let dy = i as f64 + 0.5 - cy;
            let g = BACKGROUND * (1.0 + spec.contrast * (k * (dx * cos + dy * sin) + spec.phase).sin());
            let v = match spec.diameter {
                None => g,
                Some(d) => {
                    let r = (dx * dx + dy * dy).sqrt();
                    let a = 0.5 * libm::erfc((r - d / 2.0) / (APERTURE_SIGMA * std::f64::consts::SQRT_2));
                    BACKGROUND + a * (g - BACKGROUND)
                }
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[size, size], data).expect("square image")
}

/// Which block to probe and at what image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    /// Index into `model.blocks`; must be a recurrent block.
    pub block: usize,
    pub image_size: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            block: 1,
            image_size: PROBE_SIZE,
        }
    }
}

/// Responses of every channel at the central position of a block, `[unit][t][stimulus]`.
pub fn probe_central<S: Scalar>(model: &Model<S>, settings: &ProbeSettings, images: &[Tensor<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
    if !matches!(model.blocks.get(settings.block), Some(Block::Recurrent(_))) {
        return Err(Error::Invalid(format!("block {} is not a recurrent block", settings.block)));
    }
    let c = model.config.channels;
    let t_count = model.config.iterations;
    let mut out = vec![vec![Vec::with_capacity(images.len()); t_count]; c];
    for chunk in images.chunks(CHUNK) {
        let batch = Tensor::stack(chunk)?.cast::<S>();
        let layers = model.probe(&batch)?;
        for (t, y) in layers[settings.block].iter().enumerate() {
            let [b, _, h, w] = y.shape().try_into().expect("rank-4 block output");
            let (ci, cj) = (h / 2, w / 2);
            for (unit, per_t) in out.iter_mut().enumerate() {
                for s in 0..b {
                    per_t[t].push(y.at(&[s, unit, ci, cj]).as_f64());
                }
            }
        }
    }
    Ok(out)
}

/// True when some stimulus drives the unit to at least [`STABILITY_THRESHOLD`] at every iteration.
pub fn is_stable(responses: &[Vec<f64>]) -> bool {
    let stimuli = responses.first().map_or(0, Vec::len);
    (0..stimuli).any(|s| responses.iter().all(|per_t| per_t[s] >= STABILITY_THRESHOLD))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub unit: usize,
    pub offset: (f64, f64),
    /// Preferred bar orientation.
    pub orientation: f64,
    pub response: f64,
    /// False when no mapping bar changes the unit's response.
    pub mappable: bool,
}

/// Argmax over the 5×5 grid × 16 orientations of first-iteration responses to
/// bars of [`MAPPING_LENGTH`]. Ties go to the lowest `position * 16 + orientation` index.
pub fn map_receptive_fields<S: Scalar>(model: &Model<S>, settings: &ProbeSettings) -> Result<Vec<ReceptiveField>> {
    let grid = grid_offsets();
    let oris = orientations();
    let images: Vec<_> = grid
        .iter()
        .flat_map(|&off| {
            oris.iter()
                .map(move |&o| render_bar(&BarStimulus::new(o, MAPPING_LENGTH, off), settings.image_size))
        })
        .collect();
    let responses = probe_central(model, settings, &images)?;
    Ok(responses
        .iter()
        .enumerate()
        .map(|(unit, per_t)| {
            let first = &per_t[0];
            let (best, &response) = first
                .iter()
                .enumerate()
                .fold((0, &first[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            let min = first.iter().cloned().fold(f64::INFINITY, f64::min);
            ReceptiveField {
                unit,
                offset: grid[best / oris.len()],
                orientation: oris[best % oris.len()],
                response,
                mappable: response > min,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningCurve {
    pub parameter: Vec<f64>,
    pub mean: Vec<f64>,
    /// Standard error of the mean across units (0 for a single unit).
    pub se: Vec<f64>,
    pub n_units: usize,
}

impl TuningCurve {
    /// Averages `curves[unit][value]`.
    pub fn from_units(parameter: Vec<f64>, curves: &[Vec<f64>]) -> Self {
        let n = curves.len();
        let (mut mean, mut se) = (Vec::new(), Vec::new());
        for i in 0..parameter.len() {
            let xs: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let s = if n > 1 {
                (crate::metrics::sample_var(&xs) / n as f64).sqrt()
            } else {
                0.0
            };
            mean.push(m);
            se.push(s);
        }
        TuningCurve {
            parameter,
            mean,
            se,
            n_units: n,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,mean,se,n_units\n");
        for i in 0..self.parameter.len() {
            let _ = writeln!(s, "{},{},{},{}", self.parameter[i], self.mean[i], self.se[i], self.n_units);
        }
        s
    }
}

/// `(R_peak - R_largest) / R_peak`, where `R_largest` is the response at the last parameter value.
pub fn suppression_index(curve: &[f64]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::Invalid("a suppression index needs at least two points".into()));
    }
    let peak = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Invalid(format!("peak response {peak} is not positive")));
    }
    Ok((peak - curve[curve.len() - 1]) / peak)
}

/// A sweep over one stimulus parameter for every stability-passing unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub units: Vec<usize>,
    /// `[unit][t][value]` for the kept units.
    pub responses: Vec<Vec<Vec<f64>>>,
    pub first: TuningCurve,
    pub last: TuningCurve,
}

impl Tuning {
    fn from_sweeps(parameter: Vec<f64>, sweeps: Vec<(usize, Vec<Vec<f64>>)>) -> Result<Self> {
        let kept: Vec<_> = sweeps.into_iter().filter(|(_, r)| is_stable(r)).collect();
        if kept.is_empty() {
            return Err(Error::Data("no unit passes the stability filter".into()));
        }
        let first: Vec<_> = kept.iter().map(|(_, r)| r[0].clone()).collect();
        let last: Vec<_> = kept.iter().map(|(_, r)| r[r.len() - 1].clone()).collect();
        Ok(Tuning {
            units: kept.iter().map(|(u, _)| *u).collect(),
            first: TuningCurve::from_units(parameter.clone(), &first),
            last: TuningCurve::from_units(parameter, &last),
            responses: kept.into_iter().map(|(_, r)| r).collect(),
        })
    }

    /// Suppression index of the population curve at the first and last iteration.
    pub fn suppression(&self) -> Result<(f64, f64)> {
        Ok((suppression_index(&self.first.mean)?, suppression_index(&self.last.mean)?))
    }
}

fn unit_sweep<S: Scalar>(model: &Model<S>, settings: &ProbeSettings, unit: usize, images: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(probe_central(model, settings, images)?.swap_remove(unit))
}

/// Bars of every sweep length at each mappable unit's preferred orientation and position.
pub fn length_tuning<S: Scalar>(model: &Model<S>, settings: &ProbeSettings, fields: &[ReceptiveField]) -> Result<Tuning> {
    let lengths = sweep_sizes();
    let mut sweeps = Vec::new();
    for rf in fields.iter().filter(|rf| rf.mappable) {
        let images: Vec<_> = lengths
            .iter()
            .map(|&l| render_bar(&BarStimulus::new(rf.orientation, l, rf.offset), settings.image_size))
            .collect();
        sweeps.push((rf.unit, unit_sweep(model, settings, rf.unit, &images)?));
    }
    Tuning::from_sweeps(lengths, sweeps)
}

/// Full-field grating `(frequency, phase)` with the largest first-iteration response,
/// modulated across the unit's preferred bar orientation and centered on its field.
pub fn optimal_grating<S: Scalar>(model: &Model<S>, settings: &ProbeSettings, rf: &ReceptiveField) -> Result<GratingStimulus> {
    let candidates: Vec<_> = frequencies()
        .into_iter()
        .flat_map(|f| {
            PHASES.iter().map(move |&p| GratingStimulus {
                offset: rf.offset,
                ..GratingStimulus::full_field(f, rf.orientation + 90.0, p)
            })
        })
        .collect();
    let images: Vec<_> = candidates.iter().map(|g| render_grating(g, settings.image_size)).collect();
    let first = &unit_sweep(model, settings, rf.unit, &images)?[0];
    let best = first
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > first[b] { i } else { b });
    Ok(candidates[best])
}

/// Gratings of every sweep diameter at each mappable unit's optimal grating.
pub fn size_tuning<S: Scalar>(model: &Model<S>, settings: &ProbeSettings, fields: &[ReceptiveField]) -> Result<Tuning> {
    let diameters = sweep_sizes();
    let mut sweeps = Vec::new();
    for rf in fields.iter().filter(|rf| rf.mappable) {
        let best = optimal_grating(model, settings, rf)?;
        let images: Vec<_> = diameters
            .iter()
            .map(|&d| {
                render_grating(
                    &GratingStimulus {
                        diameter: Some(d),
                        ..best
                    },
                    settings.image_size,
                )
            })
            .collect();
        sweeps.push((rf.unit, unit_sweep(model, settings, rf.unit, &images)?));
    }
    Tuning::from_sweeps(diameters, sweeps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalDynamics {
    /// Mean response per iteration.
    pub mean: Vec<f64>,
    pub n_units: usize,
}

/// Per-iteration response averaged over all full-field gratings (16 orientations ×
/// 16 frequencies, phase 0) and all stability-passing central units.
pub fn temporal_dynamics<S: Scalar>(model: &Model<S>, settings: &ProbeSettings) -> Result<TemporalDynamics> {
    let images: Vec<_> = orientations()
        .into_iter()
        .flat_map(|o| frequencies().into_iter().map(move |f| GratingStimulus::full_field(f, o, 0.0)))
        .map(|g| render_grating(&g, settings.image_size))
        .collect();
    let responses = probe_central(model, settings, &images)?;
    let kept: Vec<_> = responses.iter().filter(|r| is_stable(r)).collect();
    if kept.is_empty() {
        return Err(Error::Data("no unit passes the stability filter".into()));
    }
    let t_count = model.config.iterations;
    let mean = (0..t_count)
        .map(|t| {
            let total: f64 = kept.iter().map(|r| r[t].iter().sum::<f64>()).sum();
            total / (kept.len() * images.len()) as f64
        })
        .collect();
    Ok(TemporalDynamics {
        mean,
        n_units: kept.len(),
    })
}

/// Hand-built recurrent circuit with oriented dark-line detectors and lateral
/// center-surround inhibition.
///
/// Channel 0 of the first block responds to a dark horizontal line of [`CIRCUIT_LINE`]
/// pixels flanked by bright lines [`CIRCUIT_FLANK`] pixels away, channel 1 to the vertical
/// version. Both kernels sum to zero, so uniform fields are silent. The recurrent block passes each
/// channel through its center tap and inhibits it through a
/// [`LateralTemplate::CenterSurround`] lateral kernel of width [`CIRCUIT_LATERAL_KERNEL`].
pub fn suppressive_circuit(iterations: usize, lateral: LateralTemplate) -> Model<f64> {
    const GAIN: f64 = 40.0;
    let config = ModelConfig {
        activation: Activation::Relu,
        input_shape: (PROBE_SIZE, PROBE_SIZE),
        num_neurons: 1,
        later_kernel: CIRCUIT_LATERAL_KERNEL,
        ..ModelConfig::recurrent(1, 2, iterations, ReadoutMode::TwoAvg)
    };
    let mut m = build_model::<f64>(&config).expect("valid circuit config");
    let k1 = config.first_kernel;
    let mid = k1 / 2;
    let k = config.later_kernel;
    if let Block::Conv(cb) = &mut m.blocks[0] {
        cb.kernel = Tensor::zeros(&[2, 1, k1, k1]);
        let half = CIRCUIT_LINE / 2;
        let (on, off) = (1.0 / CIRCUIT_LINE as f64, 0.5 / CIRCUIT_LINE as f64);
        for i in mid - half..=mid + half {
            cb.kernel.set(&[0, 0, mid, i], -on);
            cb.kernel.set(&[1, 0, i, mid], -on);
            for flank in [mid - CIRCUIT_FLANK, mid + CIRCUIT_FLANK] {
                cb.kernel.set(&[0, 0, flank, i], off);
                cb.kernel.set(&[1, 0, i, flank], off);
            }
        }
        cb.bn.scale = Tensor::full(&[2], GAIN);
        cb.bn.shift = Tensor::zeros(&[2]);
        cb.bn.epsilon = 0.0;
    }
    m.input_bn.epsilon = 0.0;
    if let Block::Recurrent(rb) = &mut m.blocks[1] {
        rb.ff_kernel = Tensor::zeros(&[2, 2, k, k]);
        for c in 0..2 {
            rb.ff_kernel.set(&[c, c, k / 2, k / 2], 1.0);
        }
        rb.lateral_kernel = lateral.kernel(2, k);
        for bn in rb.bns.iter_mut() {
            bn.epsilon = 0.0;
        }
    }
    m.readout.feature_weights = Tensor::full(&[1, 2], 0.5);
    m
}

/// The shipped circuit: [`CIRCUIT_ITERATIONS`] iterations with [`CIRCUIT_SURROUND`].
pub fn shipped_circuit() -> Model<f64> {
    suppressive_circuit(CIRCUIT_ITERATIONS, CIRCUIT_SURROUND)
}

/// Width of the lateral kernel in [`suppressive_circuit`].
pub const CIRCUIT_LATERAL_KERNEL: usize = 9;

/// Length of the oriented line each first-block channel averages.
pub const CIRCUIT_LINE: usize = 7;

/// Distance of the bright flanks from the dark center line.
pub const CIRCUIT_FLANK: usize = 2;

/// Lateral template of the shipped suppressive circuit.
pub const CIRCUIT_SURROUND: LateralTemplate = LateralTemplate::CenterSurround {
    excitation: 0.8,
    inhibition: 8.0,
};

/// Iterations of the shipped suppressive circuit.
pub const CIRCUIT_ITERATIONS: usize = 4;
