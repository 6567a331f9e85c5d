//! Central registry of trainable parameters.
//!
//! Modules hold `ParamId` handles instead of tensors; every forward pass
//! fetches the current tensor from the store. The optimizer replaces a
//! parameter's data in place while keeping its leaf identity, so gradients
//! looked up by id keep matching across steps.

use rand::Rng;

use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore<E: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    /// Register a trainable leaf. Names must be unique; they become the
    /// checkpoint keys.
    pub fn add(&mut self, name: impl Into<String>, data: Vec<E>, shape: &[usize]) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(Tensor::leaf(data, shape));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> Tensor<E> {
        self.tensors[id.0].clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Replace a parameter's values, preserving its leaf identity and shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<E>) {
        let old = &self.tensors[id.0];
        assert_eq!(data.len(), old.numel());
        self.tensors[id.0] =
            Tensor::leaf_with_id(data, old.shape(), old.leaf_id().expect("store holds leaves"));
    }

    /// Overwrite by checkpoint name; errors if unknown or shape mismatch.
    pub fn set_by_name(&mut self, name: &str, data: Vec<E>) -> crate::Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("unknown parameter {name}")))?;
        if data.len() != self.tensors[idx].numel() {
            return Err(crate::Error::Checkpoint(format!(
                "parameter {name}: expected {} values, got {}",
                self.tensors[idx].numel(),
                data.len()
            )));
        }
        self.set_data(ParamId(idx), data);
        Ok(())
    }

    /// A store with the same names but the given tensors, for probing
    /// parameters under finite differences.
    pub fn with_tensors(&self, tensors: &[Tensor<E>]) -> Self {
        assert_eq!(tensors.len(), self.tensors.len());
        ParamStore { names: self.names.clone(), tensors: tensors.to_vec() }
    }

    pub fn tensors(&self) -> Vec<Tensor<E>> {
        self.tensors.clone()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Standard normal samples scaled by `std` (Box-Muller).
pub fn randn<E: Element, R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<E> {
    (0..len)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            E::of_f64(z * std)
        })
        .collect()
}

/// Fan-in scaled init for conv/linear weights.
pub fn randn_fan_in<E: Element, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<E> {
    randn(rng, len, (2.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_data_preserves_leaf_identity() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![1.0, 2.0], &[2]);
        let before = store.get(id).leaf_id().unwrap();
        store.set_data(id, vec![3.0, 4.0]);
        let t = store.get(id);
        assert_eq!(t.leaf_id().unwrap(), before);
        assert_eq!(t.data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradients_follow_replaced_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![2.0], &[1]);
        store.set_data(id, vec![5.0]);
        let w = store.get(id);
        let loss = w.mul(&w).unwrap().sum_all();
        let grads = loss.backward();
        assert_eq!(grads.get(&w).unwrap(), &[10.0]);
    }

    #[test]
    fn set_by_name_rejects_unknown_and_mismatched() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", vec![0.0; 4], &[2, 2]);
        assert!(store.set_by_name("v", vec![0.0; 4]).is_err());
        assert!(store.set_by_name("w", vec![0.0; 3]).is_err());
        assert!(store.set_by_name("w", vec![1.0; 4]).is_ok());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", vec![0.0], &[1]);
        store.add("w", vec![0.0], &[1]);
    }
}
