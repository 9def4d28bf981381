//! Activation maximization and last-conv activation statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use crate::ascent::{AscentConfig, Regularization};
pub use crate::network::ActivationTrace;

use crate::ascent::gradient_ascent;
use crate::error::{Error, Result};
use crate::network::{Network, Objective};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Box used when an ascent config carries none.
const FALLBACK_BOX: (f64, f64) = (-1.0, 1.0);

/// `f[k]` = mean over positions of `|A_k(x,y)|` at the last conv layer.
pub fn last_conv_distribution<T: Scalar>(trace: &ActivationTrace<T>) -> Vec<f64> {
    let stack = trace.last_conv();
    let plane: usize = stack.shape()[1..].iter().product();
    stack
        .data()
        .chunks(plane)
        .map(|c| c.iter().map(|v| v.to_f64_lossless().abs()).sum::<f64>() / plane as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neuron {
    pub layer: usize,
    pub channel: usize,
}

#[derive(Debug, Clone)]
pub struct MaximizedPattern<T> {
    pub neuron: Neuron,
    pub pattern: Tensor<T>,
    /// Spatial-mean activation of the neuron at the returned pattern.
    pub mean_activation: f64,
    pub initial_activation: f64,
    pub warning: bool,
}

/// Seeded uniform noise in the middle half of the value box.
pub fn initial_pattern<T: Scalar>(shape: &[usize], value_box: Option<(f64, f64)>, seed: u64) -> Tensor<T> {
    let (lo, hi) = value_box.unwrap_or(FALLBACK_BOX);
    let quarter = (hi - lo) / 4.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo + quarter..=hi - quarter)))
}

pub fn activation_maximization<T: Scalar>(
    net: &Network<T>,
    neuron: Neuron,
    cfg: &AscentConfig,
    seed: u64,
) -> Result<MaximizedPattern<T>> {
    let objective = Objective::Channel {
        layer: neuron.layer,
        channel: neuron.channel,
    };
    if neuron.layer >= net.num_layers() || neuron.channel >= net.output_shape(neuron.layer)[0] {
        return Err(Error::UnknownObjective(format!(
            "layer {} channel {}",
            neuron.layer, neuron.channel
        )));
    }
    let mut cfg = *cfg;
    cfg.value_box.get_or_insert(FALLBACK_BOX);
    let x0 = initial_pattern::<T>(net.input_shape(), cfg.value_box, seed);
    let outcome = gradient_ascent(net, &x0, objective, &cfg)?;
    Ok(MaximizedPattern {
        neuron,
        mean_activation: outcome.last().to_f64_lossless(),
        initial_activation: outcome.initial().to_f64_lossless(),
        warning: outcome.warning,
        pattern: outcome.input,
    })
}

/// Maximizes every channel of `layer` in parallel; channel `c` uses seed
/// `seed + c`.
pub fn maximize_layer<T: Scalar>(
    net: &Network<T>,
    layer: usize,
    cfg: &AscentConfig,
    seed: u64,
) -> Result<Vec<MaximizedPattern<T>>> {
    if layer >= net.num_layers() {
        return Err(Error::UnknownObjective(format!("layer {layer}")));
    }
    let channels = net.output_shape(layer)[0];
    (0..channels)
        .into_par_iter()
        .map(|channel| activation_maximization(net, Neuron { layer, channel }, cfg, seed.wrapping_add(channel as u64)))
        .collect()
}

/// Mean of the achieved activations over a set of optimized neurons.
pub fn aggregate_activation<T>(patterns: &[MaximizedPattern<T>]) -> f64 {
    if patterns.is_empty() {
        return 0.0;
    }
    patterns.iter().map(|p| p.mean_activation).sum::<f64>() / patterns.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trace_gives_zero_distribution() {
        let trace = ActivationTrace::from_last_conv(Tensor::<f32>::zeros(&[3, 2, 2])).unwrap();
        assert_eq!(last_conv_distribution(&trace), vec![0.0; 3]);
    }

    #[test]
    fn constant_channel() {
        let trace = ActivationTrace::from_last_conv(Tensor::<f32>::filled(&[1, 4, 4], -2.5)).unwrap();
        assert_eq!(last_conv_distribution(&trace), vec![2.5]);
    }

    #[test]
    fn init_is_seeded_and_in_middle_half() {
        let a = initial_pattern::<f32>(&[1, 4, 4], Some((0.0, 1.0)), 7);
        let b = initial_pattern::<f32>(&[1, 4, 4], Some((0.0, 1.0)), 7);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.25..=0.75).contains(&v)));
        assert_ne!(a, initial_pattern::<f32>(&[1, 4, 4], Some((0.0, 1.0)), 8));
    }
}
