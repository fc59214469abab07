//! Named parameter tensors grouped by the component that owns them, and the
//! per-forward binding of those tensors onto a tape.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    VisionEncoder,
    Bridge,
    Aggregator,
    MlpProj,
    LmBase,
    AdapterImg,
    AdapterReg,
    Gates,
    SoftPrompt,
    Embeddings,
}

impl Group {
    pub const ALL: [Group; 10] = [
        Group::VisionEncoder,
        Group::Bridge,
        Group::Aggregator,
        Group::MlpProj,
        Group::LmBase,
        Group::AdapterImg,
        Group::AdapterReg,
        Group::Gates,
        Group::SoftPrompt,
        Group::Embeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::VisionEncoder => "vision_encoder",
            Group::Bridge => "bridge",
            Group::Aggregator => "aggregator",
            Group::MlpProj => "mlp_proj",
            Group::LmBase => "lm_base",
            Group::AdapterImg => "adapter_img",
            Group::AdapterReg => "adapter_reg",
            Group::Gates => "gates",
            Group::SoftPrompt => "soft_prompt",
            Group::Embeddings => "embeddings",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
    pub group: Group,
}

/// Parameters keyed by dotted name, iterated in name order. All parameters
/// start frozen; only the staging code flips trainable flags.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    /// Stages completed on these parameters, in order.
    pub provenance: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!(
                "parameter {name} registered twice"
            )));
        }
        self.params.insert(
            name,
            Param {
                tensor,
                trainable: false,
                group,
            },
        );
        Ok(())
    }

    pub(crate) fn insert_param(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }

    pub fn randn(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        stddev: f64,
        group: Group,
        rng: &mut Rng,
    ) -> Result<()> {
        let t = Tensor::randn(shape, rng, stddev)?;
        self.insert(name, t, group)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], group: Group) -> Result<()> {
        self.insert(name, Tensor::zeros(shape)?, group)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize], group: Group) -> Result<()> {
        self.insert(name, Tensor::ones(shape)?, group)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in(&self, group: Group) -> Vec<&str> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn numel_in(&self, group: Group) -> usize {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Marks exactly the parameters of `groups` trainable.
    pub fn set_trainable_groups(&mut self, groups: &BTreeSet<Group>) {
        for (_, p) in self.iter_mut() {
            p.trainable = groups.contains(&p.group);
        }
    }

    pub fn trainable_groups(&self) -> BTreeSet<Group> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.group)
            .collect()
    }

    /// Copies of all tensors in `group`, keyed by name.
    pub fn snapshot(&self, group: Group) -> BTreeMap<String, Tensor> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, p)| (n.to_string(), p.tensor.clone()))
            .collect()
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// A tape plus the lazily created leaves for parameters used in one forward
/// pass. Trainable parameters become gradient-tracking leaves; frozen ones
/// become constants, so no backward pass can ever reach them.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
    track_grads: bool,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            track_grads: true,
        }
    }

    /// Binds every parameter as a constant; for evaluation and decoding.
    pub fn inference(store: &'s ParamStore) -> Self {
        Ctx {
            track_grads: false,
            ..Ctx::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let v = self
            .tape
            .leaf(p.tensor.clone(), self.track_grads && p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes later lookups of `name` to `var` instead of the stored tensor.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Gradients of trainable parameters touched by the last backward pass.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| self.store.param(name).is_some_and(|p| p.trainable))
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.clone(), g)))
            .collect()
    }

    /// Names of every bound parameter that received a gradient.
    pub fn names_with_grad(&self) -> BTreeSet<String> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.tape.grad(v).is_some())
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Runs `f` with frozen parameter bindings on top of an existing tape, so
/// that gradient checks can differentiate a block with respect to one input.
pub fn on_tape<R>(
    store: &ParamStore,
    tape: &mut Tape,
    f: impl FnOnce(&mut Ctx<'_>) -> Result<R>,
) -> Result<R> {
    let mut ctx = Ctx::inference(store);
    ctx.tape = std::mem::take(tape);
    let out = f(&mut ctx);
    *tape = std::mem::take(&mut ctx.tape);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.zeros("a", &[2], Group::Bridge).unwrap();
        assert!(s.zeros("a", &[2], Group::Bridge).is_err());
    }

    #[test]
    fn frozen_params_never_get_grads() {
        let mut s = ParamStore::new();
        s.ones("w", &[2], Group::LmBase).unwrap();
        s.ones("g", &[2], Group::Gates).unwrap();
        s.set_trainable_groups(&[Group::Gates].into_iter().collect());
        let mut ctx = Ctx::new(&s);
        let w = ctx.param("w").unwrap();
        let g = ctx.param("g").unwrap();
        let p = ctx.tape.mul(w, g).unwrap();
        let l = ctx.tape.sum(p);
        ctx.tape.backward(l).unwrap();
        let grads = ctx.grads();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["g"]);
        assert!(ctx.tape.grad(w).is_none());
    }

    #[test]
    fn hash_tracks_values() {
        let mut s = ParamStore::new();
        s.ones("w", &[2], Group::LmBase).unwrap();
        let h0 = s.content_hash();
        s.get_mut("w").unwrap().data_mut()[0] = 2.0;
        assert_ne!(h0, s.content_hash());
    }
}
