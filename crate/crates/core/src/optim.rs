use std::collections::BTreeMap;

use crate::error::{bail, Result};
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Float> {
    pub shape: Vec<usize>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Float = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    /// Restores saved moments; shapes are checked against the model on the next step.
    pub fn restore(&mut self, step: u64, state: BTreeMap<String, Moments<T>>) {
        self.step = step;
        self.state = state;
    }

    /// Applies one update to every parameter that holds a gradient.
    pub fn step(&mut self, model: &mut dyn Module<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        let mut mismatch = None;
        let state = &mut self.state;
        model.visit_params_mut("", &mut |name, p| {
            let Some(g) = p.grad() else { return };
            let st = state.entry(name.clone()).or_insert_with(|| Moments {
                shape: p.shape().to_vec(),
                m: vec![T::zero(); p.numel()],
                v: vec![T::zero(); p.numel()],
            });
            if st.m.len() != p.numel() {
                mismatch = Some(name);
                return;
            }
            p.update_data(|d| {
                for i in 0..d.len() {
                    let gi = g[i].as_f64();
                    let m = b1 * st.m[i].as_f64() + (1.0 - b1) * gi;
                    let v = b2 * st.v[i].as_f64() + (1.0 - b2) * gi * gi;
                    st.m[i] = T::lit(m);
                    st.v[i] = T::lit(v);
                    let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                    d[i] = T::lit(d[i].as_f64() * decay - lr * update);
                }
            });
        });
        if let Some(name) = mismatch {
            bail!(Dimension, "optimizer state for {name} does not match the parameter shape");
        }
        Ok(())
    }
}

/// Convenience for tests: a bag of free tensors acting as a module.
#[derive(Clone, Debug, Default)]
pub struct ParamList<T: Float>(pub Vec<Tensor<T>>);

impl<T: Float> Module<T> for ParamList<T> {
    fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, t) in self.0.iter().enumerate() {
            f(crate::nn::join(p, &i.to_string()), t);
        }
    }

    fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, t) in self.0.iter_mut().enumerate() {
            f(crate::nn::join(p, &i.to_string()), t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn with_grad(values: Vec<f32>, grad_scale: f32) -> ParamList<f32> {
        let n = values.len();
        let p = Tensor::param(values, &[n]).unwrap();
        p.mul_scalar(grad_scale).square().sum().mul_scalar(0.5).backward().unwrap();
        ParamList(vec![p])
    }

    #[test]
    fn zero_lr_without_decay_is_bitwise_identity() {
        let mut rng = Rng::new(1);
        let vals: Vec<f32> = (0..16).map(|_| rng.normal() as f32).collect();
        let mut params = with_grad(vals.clone(), 1.0);
        let mut opt = AdamW::new(0.0, 0.0);
        opt.step(&mut params).unwrap();
        assert_eq!(params.0[0].data(), vals.as_slice());
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let vals = vec![1.5f32, -2.0, 0.25];
        let mut params = with_grad(vals.clone(), 0.0);
        let mut opt = AdamW::new(1e-4, 1e-4);
        opt.step(&mut params).unwrap();
        for (p, v) in params.0[0].data().iter().zip(&vals) {
            assert!(((*p as f64) - (*v as f64) * (1.0 - 1e-8)).abs() < 1e-7);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = with_grad(vec![3.0f32, -1.0], 1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut params).unwrap();
        let d = params.0[0].data();
        assert!((d[0] - 2.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let p = Tensor::<f64>::param(vec![4.0, -3.0], &[2]).unwrap();
        let mut params = ParamList(vec![p]);
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            params.0[0].zero_grad();
            params.0[0].square().sum().backward().unwrap();
            opt.step(&mut params).unwrap();
        }
        assert!(params.0[0].data().iter().all(|v| v.abs() < 0.05));
    }
}
