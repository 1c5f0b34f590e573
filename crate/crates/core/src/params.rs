//! Named parameter and buffer storage shared by every layer of a model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable tensors plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Entry<T>>,
    buffers: Vec<Entry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Entry {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Entry {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Entry<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Entry<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.buffers
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|e| e.value.len()).sum()
    }

    /// Records every parameter on the tape; `trainable` selects whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|e| tape.leaf(e.value.clone(), trainable))
                .collect(),
        }
    }

    /// Writes buffer values queued on a [`Ctx`] during a training pass.
    pub fn apply_updates(&mut self, updates: Vec<(BufferId, Tensor<T>)>) {
        for (id, value) in updates {
            self.buffers[id.0].value = value;
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let conv = |e: &Entry<T>| Entry {
            name: e.name.clone(),
            value: e.value.cast(),
        };
        ParamStore {
            params: self.params.iter().map(conv).collect(),
            buffers: self.buffers.iter().map(conv).collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Uses `vars`, in parameter order, in place of a fresh binding.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub bound: &'a Bound,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    /// Buffer values computed during the pass, applied by the caller.
    pub updates: Vec<(BufferId, Tensor<T>)>,
    /// Replaces each batch-norm layer's own running-average momentum.
    pub bn_momentum: Option<f64>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        bound: &'a Bound,
        store: &'a ParamStore<T>,
        mode: Mode,
    ) -> Self {
        Ctx {
            tape,
            bound,
            store,
            mode,
            updates: Vec::new(),
            bn_momentum: None,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.get(id)
    }
}

/// Weight initializers driven by a seeded generator.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    /// He (Kaiming) normal: std `sqrt(2 / fan_in)`.
    pub fn he_normal<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    /// Xavier (Glorot) uniform on `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform<T: Element>(
        &mut self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        Tensor::from_fn(shape, |_| T::of(dist.sample(self.rng)))
    }

    pub fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::of(dist.sample(self.rng)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}
