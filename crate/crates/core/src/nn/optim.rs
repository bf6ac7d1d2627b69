use serde::{Deserialize, Serialize};

use super::{Grads, Graph, Tensor, Var};
use crate::error::{shape_err, Result};

/// Named parameter tensors. Frozen entries are bound as constants and never
/// updated by the optimizer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(trainable);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn n_trainable_values(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(v, _)| v.numel())
            .sum()
    }

    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Places every parameter on `g`, trainable ones as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| if t { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update from gradients indexed like `params` (missing entries count as zero).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(shape_err!("adam: {} grads for {} params", grads.len(), params.len()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            if !params.trainable[i] {
                continue;
            }
            let Some(g) = g else { continue };
            let p = params.values[i].data_mut();
            if g.len() != p.len() {
                return Err(shape_err!("adam: gradient length {} for parameter of {}", g.len(), p.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Collects the gradients of bound parameters in store order.
pub fn param_grads(grads: &mut Grads, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Precision;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = ParamStore::new();
        ps.push("x", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &[Some(vec![0.0, 0.0])], 0.1).unwrap();
        assert_eq!(ps.get(0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        ps.push("x", Tensor::scalar(0.0), true);
        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &[Some(vec![1.0])], 1e-3).unwrap();
        assert!((ps.get(0).item() + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn minimizes_square() {
        let mut ps = ParamStore::new();
        ps.push("x", Tensor::scalar(5.0), true);
        let mut adam = AdamState::new(&ps);
        for _ in 0..2000 {
            let mut g = Graph::new(Precision::F64);
            let vars = ps.bind(&mut g);
            let sq = g.mul(vars[0], vars[0]).unwrap();
            let mut grads = g.backward(sq).unwrap();
            let pg = param_grads(&mut grads, &vars);
            adam.step(&mut ps, &pg, 0.01).unwrap();
        }
        assert!(ps.get(0).item().abs() < 0.1, "{}", ps.get(0).item());
    }

    #[test]
    fn frozen_params_untouched_and_shape_checked() {
        let mut ps = ParamStore::new();
        ps.push("w", Tensor::scalar(1.0), false);
        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &[Some(vec![5.0])], 1.0).unwrap();
        assert_eq!(ps.get(0).item(), 1.0);
        assert!(adam.step(&mut ps, &[], 1.0).is_err());
    }
}
