//! Named parameter registry.
//!
//! Every learnable tensor lives here as a [`Param`], tagged with the
//! [`ParamGroup`] that decides its learning rate and whether a given model
//! variant trains it. Frozen parameters are handed to the forward pass
//! detached, so backward never materialises gradients for them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TslmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Language-model weights (embeddings, blocks, head).
    Backbone,
    /// Low-rank adapter factors attached to backbone projections.
    Adapter,
    /// Patch encoder plus transformer encoder or perceiver resampler.
    Encoder,
    /// Soft-prompt projection into the backbone embedding space.
    Projector,
    /// Gated cross-attention blocks and the latent lifting map.
    CrossAttn,
    /// Learned embeddings of `<TS>` and `<endofchunk>`.
    SpecialTokens,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Adapter,
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::CrossAttn,
        ParamGroup::SpecialTokens,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Projector => "projector",
            ParamGroup::CrossAttn => "cross-attn",
            ParamGroup::SpecialTokens => "special-tokens",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

#[derive(Clone)]
pub struct Param {
    name: Arc<str>,
    var: Var,
    group: ParamGroup,
    trainable: Arc<AtomicBool>,
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", &self.var.dims())
            .field("group", &self.group)
            .field("trainable", &self.is_trainable())
            .finish()
    }
}

impl Param {
    /// The tensor to use in a forward pass: tracked when trainable,
    /// detached otherwise.
    pub fn t(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, on: bool) {
        self.trainable.store(on, Ordering::Relaxed)
    }

    pub fn numel(&self) -> usize {
        self.var.elem_count()
    }

    /// Overwrite the values in place, keeping the variable identity.
    pub fn set(&self, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.var.dtype())?;
        if value.dims() != self.var.dims() {
            return Err(TslmError::Shape(format!(
                "{}: expected {:?}, got {:?}",
                self.name,
                self.var.dims(),
                value.dims()
            )));
        }
        self.var.set(&value)?;
        Ok(())
    }

    /// SHA-256 over the little-endian f64 rendering of the values.
    pub fn digest(&self) -> Result<String> {
        let values = crate::ops::to_f64_vec(self.var.as_tensor())?;
        let mut h = Sha256::new();
        for v in values {
            h.update(v.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// One row of a trainable/frozen census.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CensusEntry {
    pub name: String,
    pub group: ParamGroup,
    pub numel: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Census {
    pub entries: Vec<CensusEntry>,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

impl Census {
    pub fn total(&self) -> usize {
        self.trainable_params + self.frozen_params
    }

    pub fn groups(&self, trainable: bool) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self
            .entries
            .iter()
            .filter(|e| e.trainable == trainable)
            .map(|e| e.group)
            .collect();
        g.sort();
        g.dedup();
        g
    }
}

pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, group: ParamGroup) -> Result<Param> {
        if self.params.contains_key(name) {
            return Err(TslmError::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| TslmError::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let param = Param {
            name: Arc::from(name),
            var: Var::from_tensor(&t)?,
            group,
            trainable: Arc::new(AtomicBool::new(true)),
        };
        self.params.insert(name.to_string(), param.clone());
        Ok(param)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    /// Mark exactly the parameters whose group is in `groups` as trainable.
    pub fn select_trainable(&self, groups: &[ParamGroup]) {
        for p in self.params.values() {
            p.set_trainable(groups.contains(&p.group));
        }
    }

    pub fn trainable(&self) -> Vec<Param> {
        self.params.values().filter(|p| p.is_trainable()).cloned().collect()
    }

    pub fn census(&self) -> Census {
        let entries: Vec<CensusEntry> = self
            .params
            .values()
            .map(|p| CensusEntry {
                name: p.name().to_string(),
                group: p.group,
                numel: p.numel(),
                trainable: p.is_trainable(),
            })
            .collect();
        let trainable_params = entries.iter().filter(|e| e.trainable).map(|e| e.numel).sum();
        let frozen_params = entries.iter().filter(|e| !e.trainable).map(|e| e.numel).sum();
        Census { entries, trainable_params, frozen_params }
    }

    /// Deep copies of every parameter value, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Restore values for the names present in `values`; other parameters
    /// are left alone.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, v) in values {
            if let Some(p) = self.params.get(name) {
                p.set(v)?;
            }
        }
        Ok(())
    }

    pub fn digests(&self, filter: impl Fn(&Param) -> bool) -> Result<BTreeMap<String, String>> {
        self.params
            .iter()
            .filter(|(_, p)| filter(p))
            .map(|(k, p)| Ok((k.clone(), p.digest()?)))
            .collect()
    }
}
