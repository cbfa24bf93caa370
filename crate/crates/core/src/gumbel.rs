//! Gumbel-Softmax relaxation of categorical sampling.
//!
//! Adding standard Gumbel noise to logits and taking the argmax draws an
//! exact sample from the softmax distribution (the Gumbel-max trick);
//! replacing the argmax with a temperature-τ softmax makes the draw
//! differentiable. Straight-through hardening keeps the forward value a true
//! one-hot while gradients follow the soft relaxation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Clamp bound keeping the double logarithm finite.
const UNIFORM_EPS: f64 = 1e-12;

/// Standard Gumbel noise aligned with the logits it perturbs.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    values: Vec<f64>,
}

impl GumbelNoise {
    /// Noise fixed to explicit values (used by gradient checks and the
    /// zero-noise decoding limit).
    pub fn fixed(values: Vec<f64>) -> Self {
        GumbelNoise { values }
    }

    pub fn zeros(length: usize) -> Self {
        GumbelNoise {
            values: vec![0.0; length],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Map one uniform draw to a standard Gumbel variate, g = −log(−log(u)),
/// with u clamped to [1e-12, 1−1e-12].
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Draw i.i.d. standard Gumbel noise of the given length.
pub fn sample_gumbel(length: usize, rng: &mut SeededRng) -> GumbelNoise {
    GumbelNoise {
        values: (0..length).map(|_| gumbel_from_uniform(rng.uniform())).collect(),
    }
}

/// Sampling temperature τ > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be a positive real, got {tau}"
            )));
        }
        Ok(Temperature(tau))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(1.0)
    }
}

/// Per-epoch temperature: constant by default, or a linear anneal from
/// `start` to `end` over the stage (nonincreasing by contract).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TemperatureSchedule {
    Constant { tau: f64 },
    Linear { start: f64, end: f64, epochs: usize },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::Constant { tau: 1.0 }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TemperatureSchedule::Constant { tau } => {
                Temperature::new(tau)?;
            }
            TemperatureSchedule::Linear { start, end, epochs } => {
                Temperature::new(start)?;
                Temperature::new(end)?;
                if end > start {
                    return Err(Error::Parameter(format!(
                        "temperature schedule must be nonincreasing: start {start} < end {end}"
                    )));
                }
                if epochs == 0 {
                    return Err(Error::Parameter(
                        "temperature schedule needs at least one epoch".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn at_epoch(&self, epoch: usize) -> Temperature {
        match *self {
            TemperatureSchedule::Constant { tau } => Temperature(tau),
            TemperatureSchedule::Linear { start, end, epochs } => {
                if epochs <= 1 {
                    return Temperature(end);
                }
                let t = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
                Temperature(start + (end - start) * t)
            }
        }
    }
}

/// Which value the decoder feeds forward after each Gumbel-Softmax draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Hard one-hot forward, soft gradient (the training default).
    #[default]
    StraightThrough,
    /// The relaxed distribution itself; forward values stay smooth, which
    /// finite-difference checks of the full pipeline require.
    Soft,
}

/// yᵢ = exp((logitᵢ + gᵢ)/τ) / Σⱼ exp((logitⱼ + gⱼ)/τ), max-subtracted.
pub fn gumbel_softmax(logits: &[f64], tau: Temperature, noise: &GumbelNoise) -> Result<Vec<f64>> {
    if logits.len() != noise.len() {
        return Err(Error::Shape(format!(
            "gumbel_softmax length mismatch: {} logits vs {} noise entries",
            logits.len(),
            noise.len()
        )));
    }
    let t = tau.value();
    let z: Vec<f64> = logits.iter().zip(noise.values()).map(|(l, g)| l + g).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| ((v - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    for y in out.iter_mut() {
        *y /= sum;
    }
    Ok(out)
}

/// Graph form of [`gumbel_softmax`] over a single-row logits tensor; noise is
/// a constant, so gradients flow only into the logits.
pub fn gumbel_softmax_graph(
    logits: &Tensor,
    tau: Temperature,
    noise: &GumbelNoise,
) -> Result<Tensor> {
    if logits.rows() != 1 {
        return Err(Error::Shape(format!(
            "gumbel_softmax_graph expects a single logits row, got {} rows",
            logits.rows()
        )));
    }
    if logits.cols() != noise.len() {
        return Err(Error::Shape(format!(
            "gumbel_softmax_graph length mismatch: {} logits vs {} noise entries",
            logits.cols(),
            noise.len()
        )));
    }
    Ok(logits
        .add_const(noise.values())
        .scale(1.0 / tau.value())
        .row_softmax())
}

/// Plain-vector straight-through hardening: one-hot at argmax(soft), ties to
/// the lowest index. The graph form with the identity gradient contract is
/// [`Tensor::straight_through`].
pub fn straight_through(soft: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = soft.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::NotNormalized(format!(
            "straight_through input sums to {sum}"
        )));
    }
    let mut best = 0;
    for (i, v) in soft.iter().enumerate() {
        if *v > soft[best] {
            best = i;
        }
    }
    let mut out = vec![0.0; soft.len()];
    out[best] = 1.0;
    Ok(out)
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
