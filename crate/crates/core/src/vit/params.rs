use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{CheckpointEntry, Gradients, Tape, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, t));
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.position(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn to_checkpoint(&self) -> Vec<CheckpointEntry> {
        self.entries
            .iter()
            .map(|(n, t)| CheckpointEntry::f64(n.clone(), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `entries`; names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for e in entries {
            let i = self.position(&e.name).ok_or_else(|| {
                Error::format("checkpoint", format!("unexpected tensor `{}`", e.name))
            })?;
            let slot = &mut self.entries[i].1;
            if slot.shape() != e.tensor.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor `{}` has shape {:?}, model expects {:?}",
                        e.name,
                        e.tensor.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = e.tensor.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::format(
                "checkpoint",
                format!("missing tensor `{}`", self.entries[i].0),
            ));
        }
        Ok(())
    }
}

/// A tape plus lazily registered parameters.
///
/// Parameters are copied onto the tape the first time a forward pass asks for
/// them, as tracked leaves when `trainable` and as constants otherwise.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p Params,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let t = self.params.tensor_at(i);
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t.clone())
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Runs backward from `loss`; returns gradients indexed like the parameter set.
    pub fn backward(mut self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        Ok(ParamGrads {
            grads: self
                .bound
                .iter()
                .map(|b| b.and_then(|v| grads.raw(v).map(<[f64]>::to_vec)))
                .collect(),
        })
    }

    pub fn raw_backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)
    }
}

/// Per-parameter gradients; `None` where the loss does not depend on the parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn get(&self, i: usize) -> Option<&[f64]> {
        self.grads.get(i)?.as_deref()
    }

    /// Adds these gradients into the tensors' grad buffers.
    pub fn accumulate_into(&self, params: &mut Params) -> Result<()> {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                params.tensor_at_mut(i).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}
