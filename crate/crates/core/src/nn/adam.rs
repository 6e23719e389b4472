use super::{Matrix, Module};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over the trainable tensors of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new<M: Module>(model: &M) -> Self {
        let zeros = || -> Vec<Matrix> {
            model
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update<M: Module>(&mut self, model: &mut M, grads: &M, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let params = model.params_mut().into_iter();
        let gs = grads.params().into_iter();
        for (((p, g), m), v) in params.zip(gs).zip(&mut self.m).zip(&mut self.v) {
            let p = p.data_mut();
            let (g, m, v) = (g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }

    /// Moment tensors and the step counter under stable names, for
    /// checkpointing alongside the model.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let mut out = vec![(format!("{prefix}.step"), Matrix::row_vector(&[self.step as f64]))];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}.m.{i}"), m.clone()));
            out.push((format!("{prefix}.v.{i}"), v.clone()));
        }
        out
    }

    pub fn restore(&mut self, prefix: &str, lookup: impl Fn(&str) -> Option<Matrix>) -> Result<()> {
        let missing = |name: &str| Error::Weights(format!("missing tensor {name}"));
        let step_name = format!("{prefix}.step");
        let step = lookup(&step_name).ok_or_else(|| missing(&step_name))?;
        self.step = step.data().first().copied().unwrap_or(0.0) as u64;
        for i in 0..self.m.len() {
            for (slot, kind) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let name = format!("{prefix}.{kind}.{i}");
                let t = lookup(&name).ok_or_else(|| missing(&name))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Weights(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    fn scalar_model(x: f64) -> Dense {
        let mut d = Dense::zeros(1, 1);
        d.weight.set(0, 0, x);
        d
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut model = scalar_model(0.7);
        let grads = model.zeros_like();
        let mut adam = Adam::new(&model);
        for _ in 0..10 {
            adam.update(&mut model, &grads, 1e-2);
        }
        assert_eq!(model.weight.get(0, 0), 0.7);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [1e-3, 0.5, -40.0] {
            let mut model = scalar_model(0.0);
            let mut grads = model.zeros_like();
            grads.weight.set(0, 0, g);
            let mut adam = Adam::new(&model);
            adam.update(&mut model, &grads, 1e-3);
            let step = model.weight.get(0, 0);
            assert!((step.abs() - 1e-3).abs() < 1e-8);
            assert!(step * g < 0.0);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut model = scalar_model(1.0);
        let mut adam = Adam::new(&model);
        let mut steps = 0;
        while model.weight.get(0, 0).abs() >= 1e-3 && steps < 2000 {
            let mut grads = model.zeros_like();
            grads.weight.set(0, 0, 2.0 * model.weight.get(0, 0));
            adam.update(&mut model, &grads, 1e-2);
            steps += 1;
        }
        assert!(model.weight.get(0, 0).abs() < 1e-3, "after {steps} steps");
    }

    #[test]
    fn state_round_trip() {
        let mut model = scalar_model(1.0);
        let mut grads = model.zeros_like();
        grads.weight.set(0, 0, 0.3);
        let mut adam = Adam::new(&model);
        adam.update(&mut model, &grads, 1e-2);
        let saved = adam.tensors("opt");
        let mut restored = Adam::new(&model);
        restored
            .restore("opt", |n| saved.iter().find(|(k, _)| k == n).map(|(_, m)| m.clone()))
            .unwrap();
        assert_eq!(restored, adam);
    }
}
