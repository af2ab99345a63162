//! Parameterised layers and the named-parameter visitor shared by all models.

use crate::error::Result;
use crate::tensor::{Conv2dOptions, Float, Rng, Tensor};

/// Anything holding named trainable tensors.
pub trait Module<T: Float> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit_params("", &mut |_, t| t.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Sum of element counts over a parameter list.
pub fn param_count<T: Float>(params: &[(String, Tensor<T>)]) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

fn uniform_param<T: Float>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::random_uniform(shape, -bound, bound, rng).requiring_grad()
}

fn zeros_param<T: Float>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).requiring_grad()
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub opts: Conv2dOptions,
}

impl<T: Float> Conv2d<T> {
    /// Xavier-uniform weights, zero bias.
    pub fn new(cin: usize, cout: usize, kernel: usize, opts: Conv2dOptions, rng: &mut Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        let fan_out = cout * kernel * kernel;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: uniform_param(&[cout, cin, kernel, kernel], bound, rng),
            bias: zeros_param(&[cout]),
            opts,
        }
    }

    pub fn zeroed(cin: usize, cout: usize, kernel: usize, opts: Conv2dOptions) -> Self {
        Self {
            weight: zeros_param(&[cout, cin, kernel, kernel]),
            bias: zeros_param(&[cout]),
            opts,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.opts)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(din: usize, dout: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Self {
            weight: uniform_param(&[dout, din], bound, rng),
            bias: zeros_param(&[dout]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, &self.bias)
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Channels a group must hold; single-channel groups erase each channel's
/// spatial mean, which is all the signal a flat image carries.
pub const MIN_GROUP_WIDTH: usize = 4;

/// Largest divisor of `channels` not exceeding 32 that leaves at least
/// `MIN_GROUP_WIDTH` channels per group (one group for narrower inputs).
pub fn default_groups(channels: usize) -> usize {
    (1..=32.min(channels)).rev().find(|g| channels.is_multiple_of(*g) && channels / g >= MIN_GROUP_WIDTH).unwrap_or(1)
}

impl<T: Float> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]).requiring_grad(),
            beta: zeros_param(&[channels]),
            groups: default_groups(channels),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gamma, &self.beta, GROUP_NORM_EPS)
    }
}

impl<T: Float> Module<T> for GroupNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct Embedding<T: Float> {
    pub table: Tensor<T>,
}

impl<T: Float> Embedding<T> {
    pub fn new(rows: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            table: Tensor::random_normal(&[rows, dim], rng).requiring_grad(),
        }
    }

    pub fn forward(&self, idx: &[usize]) -> Result<Tensor<T>> {
        self.table.embedding(idx)
    }
}

impl<T: Float> Module<T> for Embedding<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "table"), &self.table);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "table"), &mut self.table);
    }
}

/// Overwrites every parameter of `m` with values drawn uniformly from
/// [−scale, scale]. Used to move models off degenerate initialisations.
pub fn randomize<T: Float, M: Module<T> + ?Sized>(m: &mut M, scale: f64, rng: &mut Rng) {
    m.visit_params_mut("", &mut |_, t| {
        t.update_data(|d| {
            for v in d {
                *v = T::lit(scale * (2.0 * rng.uniform() - 1.0));
            }
        })
    });
}

/// Copies parameter values by name from `src` into `dst`, converting precision.
pub fn copy_params<A: Float, B: Float>(src: &dyn Module<A>, dst: &mut dyn Module<B>) -> Result<()> {
    let values: std::collections::HashMap<String, Vec<f64>> = src
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.to_f64_vec()))
        .collect();
    let mut missing = None;
    dst.visit_params_mut("", &mut |name, t| match values.get(&name) {
        Some(v) if v.len() == t.numel() => t.update_data(|d| {
            for (x, &y) in d.iter_mut().zip(v) {
                *x = B::lit(y);
            }
        }),
        _ => missing = Some(name),
    });
    if let Some(name) = missing {
        crate::error::bail!(Input, "parameter {name} missing or mis-shaped in source");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count() {
        let c = Conv2d::<f32>::new(64, 64, 3, Conv2dOptions::same3x3(), &mut Rng::new(0));
        assert_eq!(c.param_count(), 36_928);
    }

    #[test]
    fn empty_param_list_counts_zero() {
        assert_eq!(param_count::<f32>(&[]), 0);
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(default_groups(64), 16);
        assert_eq!(default_groups(8), 2);
        assert_eq!(default_groups(24), 6);
        assert_eq!(default_groups(48), 12);
        assert_eq!(default_groups(384), 32);
        assert_eq!(default_groups(3), 1);
    }
}
