use std::collections::HashMap;

use super::graph::{add_assign, Graph};
use super::{Real, Tensor};
use crate::error::{arg_err, FtnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Adam first/second moments and the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    pub adam: AdamState<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics). Names are unique across both.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    index: HashMap<String, Slot>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), index: HashMap::new() }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.index.contains_key(name) {
            return arg_err(format!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let id = self.params.len();
        self.claim(name, Slot::Param(id))?;
        let n = value.numel();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            requires_grad: true,
            adam: AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 },
        });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let id = self.buffers.len();
        self.claim(name, Slot::Buffer(id))?;
        self.buffers.push((name.to_string(), value));
        Ok(BufferId(id))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.index.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters (buffers excluded).
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.params[id.0].requires_grad = on;
    }

    /// Adds the parameter gradients recorded on `graph` into `grad`.
    pub fn absorb_grads(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => add_assign(acc, &g),
                slot => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Parameters currently holding a gradient.
    pub fn with_grads(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.grad.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Parameters then buffers, in insertion order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(n, t)| (n.as_str(), t)))
            .collect()
    }

    /// Overwrites every stored tensor from `named`; each name must be known,
    /// shapes must match, and nothing may be left unset.
    pub fn load_named<U: Real>(&mut self, named: &[(String, Tensor<U>)]) -> Result<()> {
        let mut seen = 0;
        for (name, t) in named {
            let slot = *self
                .index
                .get(name)
                .ok_or_else(|| FtnError::Checkpoint(format!("unknown tensor `{name}`")))?;
            let dst = match slot {
                Slot::Param(i) => &mut self.params[i].value,
                Slot::Buffer(i) => &mut self.buffers[i].1,
            };
            if dst.shape() != t.shape() {
                return Err(FtnError::Checkpoint(format!(
                    "`{name}`: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.cast();
            seen += 1;
        }
        if seen != self.index.len() {
            return Err(FtnError::Checkpoint(format!(
                "checkpoint has {seen} tensors, model has {}",
                self.index.len()
            )));
        }
        Ok(())
    }
}
