//! Layer parameter containers and initialization.

use rand::Rng;

use super::{Element, Tensor};

/// 3×3 convolution parameters (padding 1).
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>, // [out, in, 3, 3]
    pub bias: Tensor<T>,   // [out]
    pub stride: usize,
}

impl<T: Element> Conv2d<T> {
    /// Kaiming-uniform initialization: U(−√(6/fan_in), √(6/fan_in)).
    pub fn init(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_vec(
            &[out_ch, in_ch, 3, 3],
            (0..out_ch * in_ch * 9)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect(),
        )
        .expect("conv weight");
        Self {
            weight,
            bias: Tensor::zeros(&[out_ch]),
            stride,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Batch normalization parameters with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn init(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Fold train-mode batch statistics into the running estimates, using the
    /// unbiased variance as the running target.
    pub fn update_running(&mut self, stats: &super::BnStats) {
        let m = stats.count as f64;
        let correction = if m > 1.5 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * stats.mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c]
                + self.momentum * stats.var[c] * correction;
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

/// Fully connected layer parameters.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>, // [out, in]
    pub bias: Tensor<T>,   // [out]
}

impl<T: Element> Linear<T> {
    pub fn init(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_f as f64).sqrt();
        let weight = Tensor::from_vec(
            &[out_f, in_f],
            (0..out_f * in_f)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect(),
        )
        .expect("linear weight");
        Self {
            weight,
            bias: Tensor::zeros(&[out_f]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}
