use std::collections::BTreeMap;

use super::{Grads, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters of a store recorded on one tape.
pub struct Bound<'t> {
    tape: Option<&'t Tape>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// No parameters and no tape.
    pub fn empty() -> Self {
        Bound {
            tape: None,
            vars: Vec::new(),
        }
    }

    /// No parameters, recording on `tape`.
    pub fn on(tape: &'t Tape) -> Self {
        Bound {
            tape: Some(tape),
            vars: Vec::new(),
        }
    }

    pub fn tape(&self) -> Option<&'t Tape> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape: Some(tape),
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Adds the gradients of a backward pass into each tensor's buffer.
    pub fn absorb(&mut self, grads: &Grads, bound: &Bound<'_>) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Snapshot as a name → tensor map, each name prefixed with `prefix/`.
    pub fn export(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.grad = None;
                (format!("{prefix}/{n}"), t)
            })
            .collect()
    }

    /// Overwrites every parameter from `entries[prefix/name]`.
    pub fn import(&mut self, prefix: &str, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}/{name}");
            let src = entries
                .get(&key)
                .ok_or_else(|| Error::Format(format!("missing tensor `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "`{key}`: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
            t.grad = None;
        }
        Ok(())
    }

    /// Hex SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            for e in t.shape() {
                h.update((*e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
