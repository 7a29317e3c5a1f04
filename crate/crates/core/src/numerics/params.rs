use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::dense::DenseMatrix;

/// Named trainable matrices with their gradient and Adam moment buffers.
/// Entries keep insertion order so that updates are reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<Param>,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    m1: DenseMatrix,
    m2: DenseMatrix,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            step: 0,
        }
    }

    /// Registers a parameter initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, DenseMatrix::from_vec(rows, cols, data));
    }

    pub fn add(&mut self, name: &str, value: DenseMatrix) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        let (r, c) = value.shape();
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad: DenseMatrix::zeros(r, c),
            m1: DenseMatrix::zeros(r, c),
            m2: DenseMatrix::zeros(r, c),
        });
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> &DenseMatrix {
        &self.entries[self.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"))].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut DenseMatrix {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].value
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut DenseMatrix {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.data().len()).sum()
    }

    fn locate_flat(&self, flat: usize) -> (usize, usize) {
        let mut offset = flat;
        for (i, p) in self.entries.iter().enumerate() {
            let len = p.value.data().len();
            if offset < len {
                return (i, offset);
            }
            offset -= len;
        }
        panic!("flat index {flat} out of range");
    }

    /// Mutable access to one scalar by position across all parameters, in
    /// registration order. Used by gradient probing.
    pub fn flat_value_mut(&mut self, flat: usize) -> &mut f64 {
        let (i, k) = self.locate_flat(flat);
        &mut self.entries[i].value.data_mut()[k]
    }

    pub fn flat_grad(&self, flat: usize) -> f64 {
        let (i, k) = self.locate_flat(flat);
        self.entries[i].grad.data()[k]
    }
}

/// One Adam update with bias correction, applied in place to every
/// parameter; gradients are zeroed afterward. The step counter is shared
/// across all entries.
pub fn adam_step(params: &mut ParameterSet, cfg: &AdamConfig) {
    params.step += 1;
    let t = params.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for p in &mut params.entries {
        let g = p.grad.data();
        let m1 = p.m1.data_mut();
        let m2 = p.m2.data_mut();
        let v = p.value.data_mut();
        for k in 0..g.len() {
            m1[k] = cfg.beta1 * m1[k] + (1.0 - cfg.beta1) * g[k];
            m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m1[k] / bc1;
            let vhat = m2[k] / bc2;
            v[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        p.grad.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParameterSet::new();
        params.add("w", DenseMatrix::from_vec(1, 2, vec![1.5, -0.5]));
        adam_step(&mut params, &AdamConfig::default());
        assert_eq!(params.value("w").data(), &[1.5, -0.5]);
    }

    #[test]
    fn update_opposes_gradient_sign() {
        // one step on f(w) = w^2 at w = 1: grad = 2, w must decrease
        let mut params = ParameterSet::new();
        params.add("w", DenseMatrix::scalar(1.0));
        params.grad_mut("w").set(0, 0, 2.0);
        adam_step(
            &mut params,
            &AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        assert!(params.value("w").as_scalar() < 1.0);
    }

    #[test]
    fn five_steps_match_scalar_reference() {
        // hand-stepped scalar Adam on f(w) = (w - 3)^2 starting from w = 0
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut params = ParameterSet::new();
        params.add("w", DenseMatrix::scalar(0.0));

        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5u32 {
            let g = 2.0 * (params.value("w").as_scalar() - 3.0);
            params.grad_mut("w").set(0, 0, g);
            adam_step(&mut params, &cfg);

            let g_ref = 2.0 * (w - 3.0);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g_ref;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g_ref * g_ref;
            let mhat = m / (1.0 - cfg.beta1.powi(t as i32));
            let vhat = v / (1.0 - cfg.beta2.powi(t as i32));
            w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);

            assert!((params.value("w").as_scalar() - w).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_zeroed_after_step() {
        let mut params = ParameterSet::new();
        params.add("w", DenseMatrix::scalar(1.0));
        params.grad_mut("w").set(0, 0, 3.0);
        adam_step(&mut params, &AdamConfig::default());
        assert_eq!(params.value("w").data().len(), 1);
        assert_eq!(params.grad_mut("w").as_scalar(), 0.0);
    }
}
