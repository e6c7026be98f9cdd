use std::collections::BTreeMap;

use super::{DiffError, ParamStore};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every trainable parameter and clears all gradients.
    ///
    /// Frozen parameters keep both their value and their moments.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), DiffError> {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.trainable && !p.has_grad) {
            return Err(DiffError::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let lr = self.lr * p.lr_scale;
            for (((theta, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
