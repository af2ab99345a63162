//! Centered finite-difference gradient verification in double precision.
//!
//! The numeric side only ever calls the forward function, so it checks the
//! recorded backward closures independently.

use crate::error::{bail, Result};
use crate::nn::Module;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// Relative error; gradients smaller than 1e-6 are compared on that
    /// scale instead, since centered differences carry ~1e-11 rounding noise.
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(GradSample::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Checks every element of every input of `f`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requiring_grad()).collect();
    f(&leaves)?.backward()?;
    let mut report = GradReport::default();
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for i in 0..leaf.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let perturbed: Vec<Tensor<f64>> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut d = t.to_vec();
                        if j == which {
                            d[i] += delta;
                        }
                        Tensor::from_vec(d, t.shape())
                    })
                    .collect::<Result<_>>()?;
                crate::tensor::no_grad(|| f(&perturbed))?.item()
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            report.samples.push(GradSample {
                name: format!("input{which}"),
                index: i,
                analytic: analytic[i],
                numeric,
            });
        }
    }
    Ok(report)
}

/// Checks `count` randomly chosen scalar parameters of `model`.
///
/// `loss` must be a deterministic function of the parameters.
pub fn check_module<M, F>(model: &mut M, loss: F, count: usize, step: f64, rng: &mut Rng) -> Result<GradReport>
where
    M: Module<f64>,
    F: Fn(&M) -> Result<Tensor<f64>>,
{
    model.zero_grad();
    loss(model)?.backward()?;
    let params = model.named_params();
    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    if total == 0 {
        bail!(Contract, "model has no parameters");
    }
    let mut report = GradReport::default();
    for _ in 0..count {
        let mut flat = rng.below(total);
        let mut pick = 0;
        while flat >= params[pick].1.numel() {
            flat -= params[pick].1.numel();
            pick += 1;
        }
        let (name, tensor) = &params[pick];
        let analytic = tensor.grad().map_or(0.0, |g| g[flat]);
        shift_param(model, name, flat, step);
        let plus = crate::tensor::no_grad(|| loss(model))?.item()?;
        shift_param(model, name, flat, -2.0 * step);
        let minus = crate::tensor::no_grad(|| loss(model))?.item()?;
        shift_param(model, name, flat, step);
        report.samples.push(GradSample {
            name: name.clone(),
            index: flat,
            analytic,
            numeric: (plus - minus) / (2.0 * step),
        });
    }
    model.zero_grad();
    Ok(report)
}

fn shift_param<M: Module<f64>>(model: &mut M, name: &str, index: usize, delta: f64) {
    model.visit_params_mut("", &mut |n, t| {
        if n == name {
            t.update_data(|d| d[index] += delta);
        }
    });
}
