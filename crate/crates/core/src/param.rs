use std::collections::HashMap;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Which optimizer treatment a trainable tensor gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Full-precision parameter (`W_f`).
    Full,
    /// Logits of a searchable weight.
    Logits,
    /// Latent weight trained through the straight-through estimator.
    Latent,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Full => 0,
            ParamKind::Logits => 1,
            ParamKind::Latent => 2,
        }
    }
}

/// A trainable tensor with a network-unique id.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: usize,
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

impl Param {
    pub fn new(id: usize, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        Param { id, name: name.into(), kind, value }
    }
}

/// Borrowed view of any trainable tensor in a network.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub id: usize,
    pub name: &'a str,
    pub kind: ParamKind,
    pub value: &'a Tensor,
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub id: usize,
    pub name: &'a str,
    pub kind: ParamKind,
    pub value: &'a mut Tensor,
}

/// Binds parameters to graph leaves, at most once per graph.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<usize, Var>,
    trainable: bool,
}

impl Binder {
    /// Leaves created by this binder receive gradients.
    pub fn trainable() -> Self {
        Binder { vars: HashMap::new(), trainable: true }
    }

    /// Leaves are constants; nothing is differentiated.
    pub fn frozen() -> Self {
        Binder { vars: HashMap::new(), trainable: false }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn bind(&mut self, g: &mut Graph, p: &Param) -> Var {
        self.bind_tensor(g, p.id, &p.value)
    }

    pub fn bind_tensor(&mut self, g: &mut Graph, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let v = if self.trainable { g.param(value.clone()) } else { g.constant(value.clone()) };
        self.vars.insert(id, v);
        v
    }

    pub fn var(&self, id: usize) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().map(|(&k, &v)| (k, v))
    }
}
