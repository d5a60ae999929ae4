//! Named parameter storage shared between models, optimizers, and checkpoints.

use ndarray::ArrayD;
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::Scalar;

static NEXT_PARAM_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to one tensor inside a [`ParamSet`].
///
/// Ids are globally unique across all sets in the process, so several sets
/// (for example a model plus a test-only "input" parameter) can contribute
/// leaves to the same graph without their gradients being confused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// An ordered, named collection of parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamSet<S> {
    ids: Vec<ParamId>,
    names: Vec<String>,
    values: Vec<ArrayD<S>>,
    by_name: HashMap<String, usize>,
    by_id: HashMap<ParamId, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            ids: Vec::new(),
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
            by_id: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name.
    ///
    /// # Panics
    /// Panics if the name is already taken; parameter names are a flat
    /// namespace used as checkpoint keys, so collisions are programmer error.
    pub fn add(&mut self, name: &str, value: ArrayD<S>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed));
        let slot = self.values.len();
        self.by_name.insert(name.to_string(), slot);
        self.by_id.insert(id, slot);
        self.ids.push(id);
        self.names.push(name.to_string());
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    fn slot(&self, id: ParamId) -> usize {
        *self
            .by_id
            .get(&id)
            .unwrap_or_else(|| panic!("parameter id {id:?} does not belong to this set"))
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[self.slot(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        let slot = self.slot(id);
        &mut self.values[slot]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[self.slot(id)]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&slot| self.ids[slot])
    }

    /// Ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids.iter().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    /// Replaces the value of an existing parameter; shapes must match.
    pub fn set(&mut self, id: ParamId, value: ArrayD<S>) {
        let slot = self.slot(id);
        assert_eq!(
            self.values[slot].shape(),
            value.shape(),
            "shape mismatch setting parameter {}",
            self.names[slot]
        );
        self.values[slot] = value;
    }

    /// Element-wise converts every tensor into another scalar type.
    ///
    /// The result is a fresh set with new ids; look tensors up by name.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, value) in self.iter() {
            out.add(name, value.mapv(|x| T::from_f64(x.to_f64())));
        }
        out
    }

    /// A deep copy of the raw tensors, in registration order.
    pub fn clone_values(&self) -> Vec<ArrayD<S>> {
        self.values.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trips_names_and_values() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let a = ps.add("w", ArrayD::zeros(ndarray::IxDyn(&[2, 3])));
        let b = ps.add("b", ArrayD::zeros(ndarray::IxDyn(&[3])));
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.num_scalars(), 9);
        assert_eq!(ps.name(a), "w");
        assert_eq!(ps.id_of("b"), Some(b));
        assert_eq!(ps.id_of("missing"), None);
    }

    #[test]
    fn ids_are_unique_across_sets() {
        let mut a: ParamSet<f32> = ParamSet::new();
        let mut b: ParamSet<f32> = ParamSet::new();
        let ia = a.add("w", ArrayD::zeros(ndarray::IxDyn(&[1])));
        let ib = b.add("w", ArrayD::zeros(ndarray::IxDyn(&[2])));
        assert_ne!(ia, ib);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn rejects_duplicate_names() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("w", ArrayD::zeros(ndarray::IxDyn(&[1])));
        ps.add("w", ArrayD::zeros(ndarray::IxDyn(&[1])));
    }

    #[test]
    #[should_panic(expected = "does not belong to this set")]
    fn foreign_id_lookup_panics() {
        let mut a: ParamSet<f32> = ParamSet::new();
        let mut b: ParamSet<f32> = ParamSet::new();
        let ia = a.add("w", ArrayD::zeros(ndarray::IxDyn(&[1])));
        b.add("w", ArrayD::zeros(ndarray::IxDyn(&[1])));
        let _ = b.get(ia);
    }
}
