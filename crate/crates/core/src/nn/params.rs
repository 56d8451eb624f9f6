use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Tensor, Var};

/// Named parameter tensors of a model, kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names: every parameter is registered exactly once.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.tensors.contains_key(&name),
            "parameter {name} registered twice"
        );
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }
}

/// Deterministic initializer: each tensor draws from its own stream derived
/// from `(seed, name)`, so adding a parameter never shifts the others.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    seed: u64,
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
    }
}

/// Which bound parameters are leaves that receive gradients.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    All,
    Nothing,
    Only(&'a BTreeSet<String>),
}

impl Trainable<'_> {
    fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

/// Lazily binds stored parameters onto a tape for one forward pass.
pub struct Bound<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    trainable: Trainable<'t>,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, trainable: Trainable<'t>) -> Self {
        Bound {
            tape,
            store,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    /// Panics if `name` is not registered.
    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let var = if self.trainable.contains(name) {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients of every bound trainable parameter; parameters the root does
    /// not depend on get zeros.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars.borrow().iter() {
            if !self.trainable.contains(name) {
                continue;
            }
            let g = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(&var.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
