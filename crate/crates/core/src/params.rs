//! Named parameters and their binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use cfn_autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CfnError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// FNV-1a, used to give every parameter its own stream independent of
/// declaration order.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn initialize(decl: &ParamDecl, seed: u64) -> Tensor {
    match decl.init {
        Init::Zeros => Tensor::zeros(&decl.shape),
        Init::Kaiming { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&decl.name));
            Tensor::from_fn(&decl.shape, |_| normal.sample(&mut rng))
        }
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn initialize(decls: &[ParamDecl], seed: u64) -> Result<Self> {
        let mut store = Self {
            names: Vec::with_capacity(decls.len()),
            tensors: Vec::with_capacity(decls.len()),
            index: HashMap::new(),
        };
        for d in decls {
            store.insert(d.name.clone(), initialize(d, seed))?;
        }
        Ok(store)
    }

    /// Builds a store from named tensors, keeping their order.
    pub fn from_pairs(pairs: Vec<(String, Tensor)>) -> Result<Self> {
        let mut store = Self {
            names: Vec::with_capacity(pairs.len()),
            tensors: Vec::with_capacity(pairs.len()),
            index: HashMap::new(),
        };
        for (name, tensor) in pairs {
            store.insert(name, tensor)?;
        }
        Ok(store)
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(CfnError::Invariant(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| CfnError::Invariant(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(CfnError::Invariant(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// A parameter store exposed to one forward pass. Each parameter becomes a
/// tape variable the first time it is used.
pub struct Bound<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binds `store` names to existing variables, in store order.
    pub fn from_vars(tape: &'t Tape, store: &'t ParamStore, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(CfnError::Invariant(format!(
                "{} variables for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Self {
            tape,
            store,
            trainable: true,
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
        })
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn contains(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| CfnError::Invariant(format!("parameter {name} was never declared")))?;
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[i] {
            return Ok(v);
        }
        let t = self.store.tensors[i].clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        vars[i] = Some(v);
        Ok(v)
    }

    /// Gradients aligned with the store's order; `None` for parameters that
    /// were not used or received no gradient.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| v.grad()))
            .collect()
    }
}
