//! Named parameter tensors and their binding onto a tape.

use super::{Grads, NodeId, Tape, Tensor};

/// Ordered collection of named learnable tensors. Construction order is the
/// canonical order used by the optimizer state and the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a tensor; returns its slot id.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn total_entries(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Lazily creates one tape leaf per parameter slot during a forward pass and
/// maps gradients back to slots afterwards.
#[derive(Debug)]
pub struct ParamBinding {
    nodes: Vec<Option<NodeId>>,
}

impl ParamBinding {
    pub fn new(n_slots: usize) -> Self {
        ParamBinding {
            nodes: vec![None; n_slots],
        }
    }

    pub fn for_params(params: &ParamSet) -> Self {
        ParamBinding::new(params.len())
    }

    /// Tape node for a slot, created on first use.
    pub fn node(&mut self, tape: &mut Tape, params: &ParamSet, slot: usize) -> NodeId {
        if let Some(id) = self.nodes[slot] {
            return id;
        }
        let id = tape.leaf(params.get(slot));
        self.nodes[slot] = Some(id);
        id
    }

    pub fn node_of(&self, slot: usize) -> Option<NodeId> {
        self.nodes[slot]
    }

    /// Gradients per slot; slots untouched by the forward pass get zeros.
    pub fn collect(&self, grads: &Grads, params: &ParamSet) -> Vec<Tensor> {
        (0..self.nodes.len())
            .map(|slot| {
                let shape = params.get(slot);
                match self.nodes[slot] {
                    Some(id) => Tensor::from_vec(shape.rows, shape.cols, grads.of(id).to_vec()),
                    None => Tensor::zeros(shape.rows, shape.cols),
                }
            })
            .collect()
    }
}
