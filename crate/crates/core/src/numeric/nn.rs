//! Parameterized layers built on top of [`Graph`] ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numeric::graph::{Graph, Var};
use crate::numeric::params::{ParamId, ParamStore};
use crate::numeric::Tensor;

pub(crate) fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches")
}

/// Fully connected layer applied to the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(rng, &[cin, cout], cin), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3x3 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[3, 3, cin, cout], 9 * cin),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv3x3(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        g.batch_norm(store, x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// conv3x3 → batch norm → ReLU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnRelu {
    pub conv: Conv3x3,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv3x3::new(store, &format!("{name}.conv"), cin, cout, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

/// Class weights `−ln(freq_c)` from label counts, with the frequency
/// clamped to `[1e-6, 1 − 1e-6]`.
pub fn class_weights_from_labels(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for l in labels {
        if l < num_classes {
            counts[l] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .map(|&c| {
            let freq = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            class_weight(freq)
        })
        .collect()
}

pub fn class_weight(freq: f64) -> f64 {
    -freq.clamp(1e-6, 1.0 - 1e-6).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_frequency_weight_is_ln2() {
        assert!((class_weight(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn weights_are_positive_even_for_dominant_or_missing_classes() {
        let w = class_weights_from_labels([0, 0, 0, 0], 3);
        assert!(w.iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!((w[1] - 1e6f64.ln()).abs() < 1e-9);
    }
}
