use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Stable handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Matrix,
    grad: Matrix,
}

/// Named learnable tensors, each paired with a gradient buffer of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Gradients for a subset of the parameters in a store, keyed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Grads {
    pub(crate) slots: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.params.len();
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    /// Registers a weight with uniform fan-in initialization
    /// `U(-1/sqrt(cols), 1/sqrt(cols))`, seeded from `seed` and the name so the
    /// value does not depend on registration order.
    pub fn register_uniform(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.register(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        Ok(self.value(self.id(name)?))
    }

    /// Replaces a parameter value; the shape must match.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self.id(name)?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Grads) -> Result<()> {
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                let p = self
                    .params
                    .get_mut(i)
                    .ok_or_else(|| Error::UnknownParam(format!("#{i}")))?;
                p.grad.add_scaled(g, 1.0)?;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.as_mut_slice().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies every value from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other.get(&p.name)?;
            if src.shape() != p.value.shape() {
                return Err(Error::shape("copy_values_from", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// FNV-1a, used to derive per-parameter init seeds.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.register("a", Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(s.register("a", Matrix::zeros(1, 2)), Err(Error::DuplicateParam(_))));
    }

    #[test]
    fn zero_grad_resets_to_exact_zero() {
        let mut s = ParamStore::new();
        let id = s.register("w", Matrix::zeros(2, 2)).unwrap();
        s.grad_mut(id).fill(3.5);
        s.zero_grad();
        assert!(s.grad(id).as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(s.grad(id).shape(), s.value(id).shape());
    }

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::new();
        a.register_uniform("x", 3, 4, 7).unwrap();
        a.register_uniform("y", 3, 4, 7).unwrap();
        let mut b = ParamStore::new();
        b.register_uniform("y", 3, 4, 7).unwrap();
        b.register_uniform("x", 3, 4, 7).unwrap();
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
        assert_ne!(a.get("x").unwrap(), a.get("y").unwrap());
        let bound = 0.5;
        assert!(a.get("x").unwrap().as_slice().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn set_rejects_wrong_shape() {
        let mut s = ParamStore::new();
        s.register("w", Matrix::zeros(2, 2)).unwrap();
        assert!(s.set("w", Matrix::zeros(2, 3)).is_err());
        assert!(matches!(s.set("nope", Matrix::zeros(2, 2)), Err(Error::UnknownParam(_))));
    }
}
