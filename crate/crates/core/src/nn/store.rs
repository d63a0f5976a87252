//! Named parameter storage shared by the model, the optimizer, and
//! checkpointing.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Result, WxError};

/// All tensors flow through the graph as dynamic-dimensional `f64` arrays.
pub type TensorD = ArrayD<f64>;

/// Stable handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: TensorD,
    /// Non-trainable entries (batch-norm running statistics) are stored and
    /// checkpointed but never touched by the optimizer.
    pub trainable: bool,
}

/// Insertion-ordered parameter registry; iteration order is creation order,
/// which keeps optimizer traversal and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: IndexMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: TensorD, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &TensorD {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut TensorD {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Flips the optimizer-visibility of one parameter (weight freezing).
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Snapshot of every tensor, in registration order.
    pub fn export(&self) -> Vec<(String, TensorD)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites an existing parameter, enforcing shape agreement.
    pub fn load_value(&mut self, name: &str, value: TensorD) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| WxError::Checkpoint {
            name: name.to_string(),
            reason: "parameter not present in model".into(),
        })?;
        let current = self.get(id);
        if current.shape() != value.shape() {
            return Err(WxError::Checkpoint {
                name: name.to_string(),
                reason: format!(
                    "shape mismatch: model {:?}, checkpoint {:?}",
                    current.shape(),
                    value.shape()
                ),
            });
        }
        self.params[id.0].value = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn registry_round_trip() {
        let mut store = ParamStore::new();
        let a = store.add("w", ArrayD::zeros(vec![2, 3]), true);
        let b = store.add("running_mean", ArrayD::zeros(vec![3]), false);
        assert_eq!(store.len(), 2);
        assert_eq!(store.name(a), "w");
        assert!(store.is_trainable(a));
        assert!(!store.is_trainable(b));
        assert_eq!(store.trainable_ids(), vec![a]);
        assert_eq!(store.id_of("running_mean"), Some(b));
        assert_eq!(store.scalar_count(), 9);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", ArrayD::zeros(vec![1]), true);
        store.add("w", ArrayD::zeros(vec![1]), true);
    }

    #[test]
    fn load_checks_shape() {
        let mut store = ParamStore::new();
        store.add("w", ArrayD::zeros(vec![2, 3]), true);
        assert!(store.load_value("w", ArrayD::ones(vec![2, 3])).is_ok());
        assert!(store.load_value("w", ArrayD::ones(vec![3, 2])).is_err());
        assert!(store.load_value("missing", ArrayD::ones(vec![1])).is_err());
        assert_eq!(store.get(store.id_of("w").unwrap())[[0, 0]], 1.0);
    }
}
