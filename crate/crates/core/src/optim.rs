//! Adam with fixed hyperparameters.

use crate::model::ModelParams;
use crate::prune::WeightMasks;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Entries masked out by `frozen` keep their value and their
    /// moment estimates.
    pub fn update(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>], frozen: Option<&WeightMasks>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let mask = frozen.and_then(|f| f.mask(id));
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let w = params.tensor_mut(id).data_mut();
            for i in 0..w.len() {
                if mask.is_some_and(|mk| !mk[i]) {
                    continue;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Grows state for parameters appended after construction.
    pub fn resize(&mut self, params: &ModelParams) {
        for t in &params.tensors()[self.m.len()..] {
            self.m.push(vec![0.0; t.len()]);
            self.v.push(vec![0.0; t.len()]);
        }
    }
}
