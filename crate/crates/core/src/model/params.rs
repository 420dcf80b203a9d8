//! Named parameter registry, Glorot-style initialization, and Adam.

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};
use rand::Rng;
use std::collections::HashMap;
use std::path::Path;

/// Ordered name -> tensor map. Insertion order is fixed by the network
/// builder, so RNG draws and gradient reductions are reproducible.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter '{name}'"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.idx(name)?].1)
    }

    pub fn by_idx(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn by_idx_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn values_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Marks parameters trainable per the predicate; the rest are frozen.
    pub fn set_trainable(&mut self, trainable: impl Fn(&str) -> bool) {
        for (name, t) in &mut self.entries {
            t.set_requires_grad(trainable(name));
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Serializes in sorted-name order so checkpoints are byte-stable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sorted: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.clone().with_requires_grad(false)))
            .collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        write_checkpoint(path, &sorted)
    }

    /// Replaces every parameter from a checkpoint that must contain all of
    /// them (extra tensors in the file are an error).
    pub fn load_full(&mut self, path: &Path) -> Result<()> {
        let ckpt = read_checkpoint(path)?;
        if ckpt.len() != self.entries.len() {
            return Err(Error::validation(format!(
                "checkpoint holds {} tensors but the model has {} parameters \
                 (variant/config mismatch?)",
                ckpt.len(),
                self.entries.len()
            )));
        }
        self.copy_from(&ckpt, |_| true)?;
        Ok(())
    }

    /// Copies matching names selected by `want` from a checkpoint; every
    /// selected parameter must be present with the right shape. Returns the
    /// number of tensors copied.
    pub fn load_matching(&mut self, path: &Path, want: impl Fn(&str) -> bool) -> Result<usize> {
        let ckpt = read_checkpoint(path)?;
        self.copy_from(&ckpt, want)
    }

    fn copy_from(&mut self, ckpt: &[(String, Tensor)], want: impl Fn(&str) -> bool) -> Result<usize> {
        let by_name: HashMap<&str, &Tensor> = ckpt.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut copied = 0;
        for (name, t) in &mut self.entries {
            if !want(name) {
                continue;
            }
            let src = by_name.get(name.as_str()).ok_or_else(|| {
                Error::validation(format!("checkpoint is missing parameter '{name}'"))
            })?;
            if src.shape() != t.shape() {
                return Err(Error::validation(format!(
                    "checkpoint parameter '{name}' has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            let keep = t.requires_grad();
            *t = (*src).clone().with_requires_grad(keep);
            copied += 1;
        }
        Ok(copied)
    }
}

/// Uniform Glorot init in `[-limit, limit]` with
/// `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

/// Adam with bias correction; parameters without gradients are untouched.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = (0..params.len()).map(|_| Vec::new()).collect();
            self.v = (0..params.len()).map(|_| Vec::new()).collect();
        }
        if grads.len() != params.len() {
            return Err(Error::usage(format!(
                "gradient list has {} entries for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let tensor = params.by_idx_mut(idx);
            if g.len() != tensor.numel() {
                return Err(Error::dimension(format!(
                    "gradient length {} for parameter of size {}",
                    g.len(),
                    tensor.numel()
                )));
            }
            if self.m[idx].is_empty() {
                self.m[idx] = vec![0.0; g.len()];
                self.v[idx] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = tensor.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = Params::new();
        params.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        params.set_trainable(|_| true);
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            let x = params.get("x").unwrap().data().to_vec();
            let grads = vec![Some(x.iter().map(|&v| 2.0 * v).collect())];
            adam.step(&mut params, &grads).unwrap();
        }
        for &v in params.get("x").unwrap().data() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut params = Params::new();
        params.insert("a", Tensor::scalar(1.0));
        params.insert("b", Tensor::scalar(2.0));
        let mut adam = Adam::new(0.5);
        adam.step(&mut params, &[Some(vec![1.0]), None]).unwrap();
        assert_ne!(params.get("a").unwrap().data()[0], 1.0);
        assert_eq!(params.get("b").unwrap().data()[0], 2.0);
    }

    #[test]
    fn save_load_roundtrip_and_prefix_loading() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        params.insert("enc.w", glorot_uniform(&[4, 3], 3, 4, &mut rng));
        params.insert("dec.w", glorot_uniform(&[2, 2], 2, 2, &mut rng));
        let path = dir.path().join("p.vxw");
        params.save(&path).unwrap();

        let mut other = params.clone();
        other.by_idx_mut(0).data_mut()[0] = 99.0;
        other.by_idx_mut(1).data_mut()[0] = 99.0;
        let copied = other.load_matching(&path, |n| n.starts_with("enc.")).unwrap();
        assert_eq!(copied, 1);
        assert_ne!(other.get("enc.w").unwrap().data()[0], 99.0);
        assert_eq!(other.get("dec.w").unwrap().data()[0], 99.0);

        other.load_full(&path).unwrap();
        assert_ne!(other.get("dec.w").unwrap().data()[0], 99.0);
    }

    #[test]
    fn load_full_rejects_mismatched_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = Params::new();
        params.insert("w", Tensor::scalar(1.0));
        let path = dir.path().join("p.vxw");
        params.save(&path).unwrap();
        let mut bigger = Params::new();
        bigger.insert("w", Tensor::scalar(1.0));
        bigger.insert("extra", Tensor::scalar(1.0));
        assert!(matches!(
            bigger.load_full(&path),
            Err(Error::Validation(_))
        ));
    }
}
