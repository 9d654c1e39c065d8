//! Named parameter storage and the per-evaluation pass that binds
//! parameters onto a tape.

use crate::error::{FlowError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// All parameters of a model, keyed by unique name path.
#[derive(Clone)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name '{name}'");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| FlowError::Invalid(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| FlowError::Invalid(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(FlowError::shape(format!(
                "parameter '{name}': stored shape {:?} vs assigned {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Iterates in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// What a pass is for; controls which leaves request gradients.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    /// Parameters are differentiated (training).
    Train,
    /// Parameters are frozen constants; other leaves may request gradients.
    Solve,
    /// Pure evaluation, no gradient bookkeeping at all.
    Eval,
}

/// One recorded evaluation over a frozen view of the parameters.
pub struct Pass<'m, T: Scalar> {
    pub tape: Tape<T>,
    store: &'m ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
    kind: PassKind,
}

impl<'m, T: Scalar> Pass<'m, T> {
    pub fn new(store: &'m ParamStore<T>, kind: PassKind) -> Self {
        let tape = match kind {
            PassKind::Eval => Tape::new_eval(),
            _ => Tape::new(),
        };
        Pass {
            tape,
            store,
            bound: BTreeMap::new(),
            kind,
        }
    }

    /// Node for a named parameter, bound once per pass.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let needs_grad = self.kind == PassKind::Train;
        let id = self.tape.leaf(value, needs_grad);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Parameter-name → node bindings made so far.
    pub fn bindings(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }
}
