//! Named parameter storage with group tags, and the per-forward binding of
//! stored parameters onto a tape.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Parameter groups used by the freeze/unfreeze schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    EncoderLora,
    Fusion,
    Projector,
    /// Base decoder weights. Never trained after pretraining.
    Lm,
    LmLora,
    /// Auxiliary heads used only while pre-adapting encoders.
    Head,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Encoder,
        Group::EncoderLora,
        Group::Fusion,
        Group::Projector,
        Group::Lm,
        Group::LmLora,
        Group::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::EncoderLora => "encoder_lora",
            Group::Fusion => "fusion",
            Group::Projector => "projector",
            Group::Lm => "lm",
            Group::LmLora => "lm_lora",
            Group::Head => "head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

pub type GroupSet = BTreeSet<Group>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (matrices yes, biases and gains no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group,
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies every parameter of `other` whose name also exists here.
    /// Returns the number of copied tensors.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for p in &other.params {
            if let Some(id) = self.find(&p.name) {
                let dst = &mut self.params[id.0].value;
                if dst.shape() != p.value.shape() {
                    return Err(Error::shape("load_matching", dst.shape(), p.value.shape()));
                }
                *dst = p.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// A new store holding only the parameters of `groups`.
    pub fn subset(&self, groups: &GroupSet) -> ParamStore {
        ParamStore {
            params: self.params.iter().filter(|p| groups.contains(&p.group)).cloned().collect(),
        }
    }

    /// Snapshot of the values in the given groups, for freeze checks.
    pub fn snapshot(&self, groups: &GroupSet) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Gradients for the trainable parameters touched by one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub grads: Vec<(ParamId, Tensor)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// A tape plus lazily bound parameters from one store. Parameters in a
/// trainable group become gradient-tracking leaves, all others constants.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    trainable: GroupSet,
    bound: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, trainable: GroupSet) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    /// Inference-only graph: nothing requires a gradient.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Graph::new(store, GroupSet::new())
    }

    /// Every group trainable.
    pub fn all_trainable(store: &'s ParamStore) -> Self {
        Graph::new(store, Group::ALL.into_iter().collect())
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = self
            .tape
            .leaf(p.value.clone(), self.trainable.contains(&p.group));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Backward pass; collects gradients of bound trainable parameters.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if self.tape.requires_grad(*v) {
                    let g = grads
                        .take(*v)
                        .unwrap_or_else(|| Tensor::zeros(self.tape.value(*v).shape()));
                    out.push((ParamId(i), g));
                }
            }
        }
        Ok(ParamGrads { grads: out })
    }

    pub fn grads(&self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)
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

/// Scaled uniform initialisation, bound `1/sqrt(fan_in)`.
pub fn init_matrix<R: rand::Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_round_trip() {
        for g in Group::ALL {
            assert_eq!(g.as_str().parse::<Group>().unwrap(), g);
        }
        assert!(matches!("decoder".parse::<Group>(), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Projector, Tensor::full(&[1, 2], 2.0), true);
        let b = store.add("b", Group::Lm, Tensor::full(&[1, 2], 3.0), true);
        let mut g = Graph::new(&store, [Group::Projector].into_iter().collect());
        let va = g.param(a);
        let vb = g.param(b);
        assert_eq!(g.param(a), va);
        let p = g.mul(va, vb).unwrap();
        let loss = g.sum(p);
        let grads = g.param_grads(loss).unwrap();
        assert_eq!(grads.grads.len(), 1);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(b).is_none());
    }
}
