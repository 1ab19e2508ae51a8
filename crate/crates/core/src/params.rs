//! Named parameter storage and per-pass graph binding.

use std::ops::{Deref, DerefMut};

use tubestream_tensor::{Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Owned parameter tensors addressed by [`ParamId`] or by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// `rows × cols` weight with entries drawn from `N(0, 1/rows)`.
    pub fn add_weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let std = 1.0 / (rows as f64).sqrt();
        self.add(name, Tensor::randn([rows, cols], std, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replace all values, checking names and shapes line up.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Format {
                what: "parameters",
                detail: format!("expected {} tensors, found {}", self.values.len(), named.len()),
            });
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Format {
                    what: "parameters",
                    detail: format!(
                        "tensor {i}: expected {} {:?}, found {name} {:?}",
                        self.names[i],
                        self.values[i].shape(),
                        t.shape()
                    ),
                });
            }
            self.values[i] = t;
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// A tape plus lazily bound parameter leaves for one forward pass.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// `track` controls whether parameters are differentiable leaves.
    pub fn new(params: &'p ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of the last backward pass, one per parameter (zeros when unused).
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => self.tape.grad_tensor(v),
                None => Tensor::zeros(self.params.get(id).shape().to_vec()),
            })
            .collect()
    }

    /// Whether parameter `id` received any gradient signal.
    pub fn reached(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some_and(|v| self.tape.grad(v).is_some())
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
