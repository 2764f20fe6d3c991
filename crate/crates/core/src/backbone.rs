//! Small pre-LN decoder-only language model with optional low-rank adapters
//! on the attention projections.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TslmError};
use crate::ops::{causal_attention, layer_norm, linear, linear_add};
use crate::params::{Init, Param, ParamGroup, ParamStore};
use crate::tokenizer::BASE_VOCAB;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_context: usize,
    /// Adapter rank for variants that train adapters; 0 disables them.
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: BASE_VOCAB,
            d_model: 128,
            depth: 4,
            heads: 4,
            max_context: 2048,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.heads == 0 || self.max_context == 0 {
            return Err(TslmError::Config(format!("backbone has a zero dimension: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(TslmError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `A` (d_in x r) and `B` (r x d_out) factors; the adapted map is
/// `x W + scale * (x A) B`.
pub struct LowRankAdapter {
    pub a: Param,
    pub b: Param,
    pub scale: f64,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.a.var().dims()[1]
    }

    /// `scale * A B`, the dense weight update the adapter represents.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok((self.a.t().matmul(&self.b.t())? * self.scale)?)
    }
}

/// A bias-free projection with an optional adapter.
pub struct Projection {
    pub weight: Param,
    pub adapter: Option<LowRankAdapter>,
}

impl Projection {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.adapter {
            None => linear(x, &self.weight.t(), None),
            Some(ad) => {
                let low = linear(&(linear(x, &ad.a.t(), None)? * ad.scale)?, &ad.b.t(), None)?;
                linear_add(x, &self.weight.t(), None, Some(&low))
            }
        }
    }

    fn attach(&mut self, store: &mut ParamStore, rank: usize, alpha: f64) -> Result<()> {
        let dims = self.weight.var().dims().to_vec();
        let name = self.weight.name().to_string();
        let bound = 1.0 / (dims[0] as f64).sqrt();
        self.adapter = Some(LowRankAdapter {
            a: store.create(&format!("{name}.lora_a"), &[dims[0], rank], Init::Uniform(bound), ParamGroup::Adapter)?,
            b: store.create(&format!("{name}.lora_b"), &[rank, dims[1]], Init::Zeros, ParamGroup::Adapter)?,
            scale: alpha / rank as f64,
        });
        Ok(())
    }
}

pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&format!("{prefix}.gamma"), &[dim], Init::Ones, group)?,
            beta: store.create(&format!("{prefix}.beta"), &[dim], Init::Zeros, group)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma.t(), &self.beta.t())
    }
}

pub struct Block {
    ln1: LayerNorm,
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub wo: Projection,
    ln2: LayerNorm,
    fc1_w: Param,
    fc1_b: Param,
    fc2_w: Param,
    fc2_b: Param,
}

/// Per-layer keys and values of the tokens processed so far.
#[derive(Default, Clone)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Something that rewrites the residual stream right before a block runs.
/// `pos_offset` is the absolute position of the first row of `x`.
pub trait LayerHook {
    fn before_layer(&self, layer: usize, x: &Tensor, pos_offset: usize) -> Result<Tensor>;
}

pub struct Backbone {
    cfg: BackboneConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub lm_head: Param,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let g = ParamGroup::Backbone;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.depth.max(1) as f64).sqrt();
        let tok_emb = store.create("backbone.tok_emb", &[cfg.vocab_size, d], Init::Normal(std), g)?;
        let pos_emb = store.create("backbone.pos_emb", &[cfg.max_context, d], Init::Normal(std), g)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("backbone.layers.{i}");
            let mut proj = |name: &str, init: f64| -> Result<Projection> {
                Ok(Projection {
                    weight: store.create(&format!("{p}.attn.{name}"), &[d, d], Init::Normal(init), g)?,
                    adapter: None,
                })
            };
            let (wq, wk, wv, wo) = (proj("wq", std)?, proj("wk", std)?, proj("wv", std)?, proj("wo", resid_std)?);
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, g)?,
                wq,
                wk,
                wv,
                wo,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, g)?,
                fc1_w: store.create(&format!("{p}.mlp.fc1.weight"), &[d, 4 * d], Init::Normal(std), g)?,
                fc1_b: store.create(&format!("{p}.mlp.fc1.bias"), &[4 * d], Init::Zeros, g)?,
                fc2_w: store.create(&format!("{p}.mlp.fc2.weight"), &[4 * d, d], Init::Normal(resid_std), g)?,
                fc2_b: store.create(&format!("{p}.mlp.fc2.bias"), &[d], Init::Zeros, g)?,
            });
        }
        let ln_f = LayerNorm::new(store, "backbone.ln_f", d, g)?;
        let lm_head = store.create("backbone.lm_head", &[d, cfg.vocab_size], Init::Normal(std), g)?;
        Ok(Self { cfg, tok_emb, pos_emb, blocks, ln_f, lm_head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Add rank-`r` adapters to every attention projection.
    pub fn attach_adapters(&mut self, store: &mut ParamStore, rank: usize, alpha: f64) -> Result<()> {
        if rank == 0 {
            return Err(TslmError::Config("adapter rank must be at least 1".into()));
        }
        for b in &mut self.blocks {
            for p in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                if p.adapter.is_none() {
                    p.attach(store, rank, alpha)?;
                }
            }
        }
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| b.wq.adapter.is_some())
    }

    /// Embedding rows for `ids`, shape `(len, d_model)`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(TslmError::Shape(format!("token id {bad} outside vocabulary")));
        }
        let idx = Tensor::new(ids, self.tok_emb.var().device())?;
        Ok(self.tok_emb.t().index_select(&idx, 0)?)
    }

    /// Logits `(B, T, vocab)` for token ids `(B, T)`.
    pub fn forward_ids(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let rows = ids.iter().map(|r| self.embed_tokens(r)).collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&rows, 0)?;
        self.forward_embeds(&x, None, None)
    }

    /// Run the transformer on input embeddings `(B, T, d_model)`.
    pub fn forward_embeds(
        &self,
        x: &Tensor,
        hook: Option<&dyn LayerHook>,
        mut cache: Option<&mut KvCache>,
    ) -> Result<Tensor> {
        let (_, t, d) = x.dims3()?;
        if d != self.cfg.d_model {
            return Err(TslmError::Shape(format!("embedding width {d} != d_model {}", self.cfg.d_model)));
        }
        let offset = cache.as_ref().map(|c| c.len).unwrap_or(0);
        if offset + t > self.cfg.max_context {
            return Err(TslmError::ContextOverflow { len: offset + t, max: self.cfg.max_context });
        }
        let pos = self.pos_emb.t().narrow(0, offset, t)?;
        let mut h = x.broadcast_add(&pos)?;
        if let Some(c) = cache.as_deref_mut() {
            c.layers.resize(self.blocks.len(), None);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(hook) = hook {
                h = hook.before_layer(i, &h, offset)?;
            }
            let slot = cache.as_deref_mut().map(|c| &mut c.layers[i]);
            h = block.forward(&h, &self.cfg, offset, slot)?;
        }
        if let Some(c) = cache {
            c.len = offset + t;
        }
        let h = self.ln_f.forward(&h)?;
        linear(&h, &self.lm_head.t(), None)
    }
}

impl Block {
    fn forward(
        &self,
        x: &Tensor,
        cfg: &BackboneConfig,
        offset: usize,
        cache: Option<&mut Option<(Tensor, Tensor)>>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = self.attention(&h, cfg, offset, cache)?;
        let x = (x + a)?;
        let h = self.ln2.forward(&x)?;
        let h = linear(&h, &self.fc1_w.t(), Some(&self.fc1_b.t()))?.gelu()?;
        let h = linear(&h, &self.fc2_w.t(), Some(&self.fc2_b.t()))?;
        Ok((x + h)?)
    }

    fn attention(
        &self,
        x: &Tensor,
        cfg: &BackboneConfig,
        offset: usize,
        cache: Option<&mut Option<(Tensor, Tensor)>>,
    ) -> Result<Tensor> {
        let q = self.wq.forward(x)?;
        let mut k = self.wk.forward(x)?;
        let mut v = self.wv.forward(x)?;
        if let Some(slot) = cache {
            if let Some((pk, pv)) = slot.as_ref() {
                k = Tensor::cat(&[pk, &k], 1)?;
                v = Tensor::cat(&[pv, &v], 1)?;
            }
            *slot = Some((k.clone(), v.clone()));
        }
        let y = causal_attention(&q, &k, &v, cfg.heads, offset)?;
        self.wo.forward(&y)
    }
}
