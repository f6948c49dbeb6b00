//! Named parameter storage with per-parameter gradient accumulators.

use std::collections::BTreeMap;

use super::{NumericsError, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// All learnable parameters of a model, grouped by owner (e.g. `adapter`,
/// `bottom`, `pool`, `top`, `head`).
///
/// Names are unique across the store and never change once registered.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Registers a parameter. Fails if the name is already taken.
    pub fn add(
        &mut self,
        group: &str,
        name: &str,
        value: Tensor,
    ) -> Result<ParamId, NumericsError> {
        let full = format!("{group}.{name}");
        if self.by_name.contains_key(&full) {
            return Err(NumericsError::DuplicateParam(full));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: full.clone(),
            group: group.to_string(),
            value,
            grad,
        });
        self.by_name.insert(full, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.iter().map(|p| p.group.clone()).collect();
        g.dedup();
        g.sort();
        g.dedup();
        g
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        if self.params.len() != other.params.len() {
            return Err(NumericsError::LayoutMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(NumericsError::LayoutMismatch(format!(
                    "{} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.add("g", "w", Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(
            s.add("g", "w", Tensor::zeros(1, 1)),
            Err(NumericsError::DuplicateParam(_))
        ));
        assert_eq!(s.lookup("g.w"), Some(ParamId(0)));
    }

    #[test]
    fn zero_grad_clears_accumulators() {
        let mut s = ParamStore::new(0);
        let id = s.add("g", "w", Tensor::zeros(2, 3)).unwrap();
        s.accumulate_grad(id, &Tensor::filled(2, 3, 1.5));
        assert_eq!(s.grad(id).shape(), s.value(id).shape());
        s.zero_grad();
        assert!(s.grad(id).data().iter().all(|&g| g == 0.0));
    }
}
