//! Fixed-step gradient ascent on the network input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, Objective};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularization {
    None,
    /// Proximal L2 decay after every step plus a Gaussian blur of the spatial
    /// planes every `blur_every` steps.
    Semantic {
        l2_decay: f64,
        blur_every: usize,
        blur_sigma: f64,
    },
}

impl Regularization {
    pub fn semantic_default() -> Self {
        Regularization::Semantic {
            l2_decay: 0.05,
            blur_every: 4,
            blur_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub eta: f64,
    pub steps: usize,
    pub regularization: Regularization,
    /// Inclusive clamp applied after every step.
    pub value_box: Option<(f64, f64)>,
}

impl AscentConfig {
    pub fn new(eta: f64, steps: usize) -> Self {
        AscentConfig {
            eta,
            steps,
            regularization: Regularization::None,
            value_box: None,
        }
    }

    pub fn with_box(mut self, lo: f64, hi: f64) -> Self {
        self.value_box = Some((lo, hi));
        self
    }

    pub fn with_regularization(mut self, r: Regularization) -> Self {
        self.regularization = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if let Some((lo, hi)) = self.value_box {
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!("empty value box [{lo}, {hi}]")));
            }
        }
        if let Regularization::Semantic {
            l2_decay,
            blur_every,
            blur_sigma,
        } = self.regularization
        {
            if blur_every == 0 {
                return Err(Error::InvalidConfig("blur_every must be at least 1".into()));
            }
            if l2_decay < 0.0 || blur_sigma < 0.0 {
                return Err(Error::InvalidConfig("decay and blur sigma must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AscentOutcome<T> {
    pub input: Tensor<T>,
    /// Objective before the first step and after every step.
    pub history: Vec<T>,
    /// Set when the final objective ended below the initial one.
    pub warning: bool,
}

impl<T: Scalar> AscentOutcome<T> {
    pub fn initial(&self) -> T {
        self.history[0]
    }

    pub fn last(&self) -> T {
        *self.history.last().expect("history is never empty")
    }
}

pub fn gradient_ascent<T: Scalar>(
    net: &Network<T>,
    x0: &Tensor<T>,
    objective: Objective,
    cfg: &AscentConfig,
) -> Result<AscentOutcome<T>> {
    cfg.validate()?;
    let eta = T::of(cfg.eta);
    let mut x = match cfg.value_box {
        Some((lo, hi)) => x0.clamp(T::of(lo), T::of(hi)),
        None => x0.clone(),
    };
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (value, grad) = net.value_and_gradient(&x, objective)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        if step == 0 {
            history.push(value);
        }
        for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v += eta * g;
        }
        if let Regularization::Semantic {
            l2_decay,
            blur_every,
            blur_sigma,
        } = cfg.regularization
        {
            let shrink = T::one() / (T::one() + T::of(cfg.eta * l2_decay));
            x.data_mut().iter_mut().for_each(|v| *v *= shrink);
            if (step + 1) % blur_every == 0 && blur_sigma > 0.0 {
                x = gaussian_blur(&x, blur_sigma);
            }
        }
        if let Some((lo, hi)) = cfg.value_box {
            x = x.clamp(T::of(lo), T::of(hi));
        }
        if !x.is_finite() {
            return Err(Error::Divergence { step });
        }
        let after = net.objective_value(&x, objective)?;
        if !after.is_finite() {
            return Err(Error::Divergence { step });
        }
        history.push(after);
    }
    let warning = history.last() < history.first();
    Ok(AscentOutcome {
        input: x,
        history,
        warning,
    })
}

/// Separable Gaussian blur over the last two axes with clamped borders.
/// Rank-1 tensors are returned unchanged.
pub fn gaussian_blur<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Tensor<T> {
    if x.rank() < 2 || sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let kernel: Vec<T> = weights.iter().map(|w| T::of(w / total)).collect();

    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = x.clone();
    let mut tmp = vec![T::zero(); h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (xx as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + xx] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + xx];
                }
                plane[y * w + xx] = acc;
            }
        }
    }
    out
}
