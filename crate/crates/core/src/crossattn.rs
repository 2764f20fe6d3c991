//! Cross-attention fusion: a perceiver resampler turns each series into a
//! fixed set of latents, and gated cross-attention blocks placed before
//! every n-th backbone layer let text positions read the latents of their
//! own chunk.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LayerHook, LayerNorm};
use crate::error::{Result, TslmError};
use crate::ops::{attention, blocked, linear, softmax};
use crate::params::{Init, Param, ParamGroup, ParamStore};
use crate::timeseries::{PatchConfig, PatchEmbeddingSequence, PatchEncoder};
use crate::tokenizer::{END_OF_CHUNK_TOKEN, TS_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossAttnConfig {
    pub n_latent: usize,
    pub resampler_layers: usize,
    pub resampler_heads: usize,
    /// A gated block precedes layers 0, n, 2n, ...
    pub every_n: usize,
    pub d_k: usize,
}

impl Default for CrossAttnConfig {
    fn default() -> Self {
        Self { n_latent: 64, resampler_layers: 2, resampler_heads: 4, every_n: 2, d_k: 64 }
    }
}

/// Latents of one chunk, `(N_latent, d_time)`.
#[derive(Debug, Clone)]
pub struct LatentSummary {
    pub latents: Tensor,
    pub source_chunk: usize,
}

struct ResamplerLayer {
    ln_latent: LayerNorm,
    wq: Param,
    wk: Param,
    wv: Param,
    wo: Param,
    ln_ff: LayerNorm,
    fc1_w: Param,
    fc1_b: Param,
    fc2_w: Param,
    fc2_b: Param,
}

pub struct PerceiverResampler {
    pub latent_queries: Param,
    layers: Vec<ResamplerLayer>,
    heads: usize,
}

impl PerceiverResampler {
    pub fn new(store: &mut ParamStore, d: usize, n_latent: usize, n_layers: usize, heads: usize) -> Result<Self> {
        if n_latent == 0 {
            return Err(TslmError::Config("n_latent must be positive".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TslmError::Config(format!("resampler width {d} not divisible by {heads} heads")));
        }
        let g = ParamGroup::Encoder;
        let std = 1.0 / (d as f64).sqrt();
        let latent_queries = store.create("encoder.resampler.latents", &[n_latent, d], Init::Normal(0.02), g)?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("encoder.resampler.layers.{i}");
            let mut w = |n: &str, shape: &[usize], init: Init| store.create(&format!("{p}.{n}"), shape, init, g);
            let (wq, wk, wv, wo) = (
                w("attn.wq", &[d, d], Init::Normal(std))?,
                w("attn.wk", &[d, d], Init::Normal(std))?,
                w("attn.wv", &[d, d], Init::Normal(std))?,
                w("attn.wo", &[d, d], Init::Normal(std * 0.5))?,
            );
            let (fc1_w, fc1_b, fc2_w, fc2_b) = (
                w("mlp.fc1.weight", &[d, 4 * d], Init::Normal(std))?,
                w("mlp.fc1.bias", &[4 * d], Init::Zeros)?,
                w("mlp.fc2.weight", &[4 * d, d], Init::Normal(0.5 / (4.0 * d as f64).sqrt()))?,
                w("mlp.fc2.bias", &[d], Init::Zeros)?,
            );
            layers.push(ResamplerLayer {
                ln_latent: LayerNorm::new(store, &format!("{p}.ln_latent"), d, g)?,
                wq,
                wk,
                wv,
                wo,
                ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d, g)?,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        Ok(Self { latent_queries, layers, heads })
    }

    pub fn n_latent(&self) -> usize {
        self.latent_queries.var().dims()[0]
    }

    /// `(C, N, d)` patches to `(C, N_latent, d)` latents.
    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let (c, n, d) = patches.dims3()?;
        if n == 0 {
            return Err(TslmError::EmptySeries);
        }
        let m = self.n_latent();
        let mut lat = self.latent_queries.t().unsqueeze(0)?.broadcast_as((c, m, d))?.contiguous()?;
        for l in &self.layers {
            let h = l.ln_latent.forward(&lat)?;
            let q = linear(&h, &l.wq.t(), None)?;
            let k = linear(patches, &l.wk.t(), None)?;
            let v = linear(patches, &l.wv.t(), None)?;
            let y = attention(&q, &k, &v, self.heads)?;
            lat = (lat + linear(&y, &l.wo.t(), None)?)?;
            let h = l.ln_ff.forward(&lat)?;
            let h = linear(&h, &l.fc1_w.t(), Some(&l.fc1_b.t()))?.gelu()?;
            lat = (lat + linear(&h, &l.fc2_w.t(), Some(&l.fc2_b.t()))?)?;
        }
        Ok(lat)
    }

    pub fn resample(&self, patches: &PatchEmbeddingSequence, source_chunk: usize) -> Result<LatentSummary> {
        let lat = self.forward(&patches.embeddings.unsqueeze(0)?)?;
        Ok(LatentSummary { latents: lat.squeeze(0)?, source_chunk })
    }
}

pub struct GatedCrossAttnBlock {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    /// Scalar gate; the residual update is scaled by `tanh(gate)`.
    pub gate: Param,
    pub layer_index: usize,
    d_k: usize,
}

impl GatedCrossAttnBlock {
    pub fn new(store: &mut ParamStore, layer_index: usize, d_model: usize, d_k: usize) -> Result<Self> {
        if d_k == 0 {
            return Err(TslmError::Config("cross-attention d_k must be positive".into()));
        }
        let g = ParamGroup::CrossAttn;
        let p = format!("xattn.{layer_index}");
        let std = 1.0 / (d_model as f64).sqrt();
        Ok(Self {
            wq: store.create(&format!("{p}.wq"), &[d_model, d_k], Init::Normal(std), g)?,
            wk: store.create(&format!("{p}.wk"), &[d_model, d_k], Init::Normal(std), g)?,
            wv: store.create(&format!("{p}.wv"), &[d_model, d_k], Init::Normal(std), g)?,
            wo: store.create(&format!("{p}.wo"), &[d_k, d_model], Init::Normal(1.0 / (d_k as f64).sqrt()), g)?,
            gate: store.create(&format!("{p}.gate"), &[1], Init::Zeros, g)?,
            layer_index,
            d_k,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    /// `x + tanh(gate) * softmax(Q K^T / sqrt(d_k) + mask) V W_O` with
    /// `x: (B, T, d_model)`, `kv: (B, S, d_model)`, `mask: (B, T, S)`
    /// additive (0 or -inf). Rows that are fully masked contribute nothing.
    pub fn forward(&self, x: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = (linear(x, &self.wq.t(), None)? * (1.0 / (self.d_k as f64).sqrt()))?;
        let k = linear(kv, &self.wk.t(), None)?;
        let v = linear(kv, &self.wv.t(), None)?;
        let mut logits = q.matmul(&k.transpose(D::Minus1, D::Minus2)?.contiguous()?)?;
        if let Some(m) = mask {
            logits = logits.broadcast_add(m)?;
        }
        let y = linear(&softmax(&logits)?.matmul(&v)?, &self.wo.t(), None)?;
        let g = self.gate.t().tanh()?;
        Ok((x + y.broadcast_mul(&g)?)?)
    }

    pub fn num_params(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.gate].iter().map(|p| p.numel()).sum()
    }
}

/// Layers that get a gated block in front of them.
pub fn block_layers(depth: usize, every_n: usize) -> Result<Vec<usize>> {
    if every_n == 0 {
        return Err(TslmError::Config("block spacing n must be positive".into()));
    }
    if depth == 0 {
        return Err(TslmError::Config("cannot insert cross-attention into a backbone without layers".into()));
    }
    Ok((0..depth).step_by(every_n).collect())
}

/// For each position, the chunk whose `<TS>` most recently precedes it (the
/// `<TS>` itself and its `<endofchunk>` included). Positions before the
/// first `<TS>` get `None`.
pub fn chunk_assignment(ids: &[u32], n_chunks: usize) -> Result<Vec<Option<usize>>> {
    let mut current: Option<usize> = None;
    let mut seen = 0usize;
    let mut out = Vec::with_capacity(ids.len());
    for (pos, &id) in ids.iter().enumerate() {
        if id == TS_TOKEN {
            current = Some(seen);
            seen += 1;
        } else if id == END_OF_CHUNK_TOKEN && current.is_none() {
            return Err(TslmError::Chunks(format!("<endofchunk> at position {pos} before any <TS>")));
        }
        out.push(current);
    }
    if seen != n_chunks {
        return Err(TslmError::Chunks(format!("{seen} <TS> markers but {n_chunks} series")));
    }
    Ok(out)
}

/// Additive mask `(T, n_chunks * n_latent)` from a chunk assignment.
/// Positions beyond `assign.len()` inherit the last assignment, which is
/// what generation past the prompt needs.
pub fn chunk_mask(
    assign: &[Option<usize>],
    from: usize,
    len: usize,
    n_chunks: usize,
    n_latent: usize,
    dtype: candle_core::DType,
    device: &Device,
) -> Result<Tensor> {
    let s = n_chunks * n_latent;
    let neg = blocked(dtype);
    let last = assign.last().copied().flatten();
    let mut m = vec![neg; len * s];
    for t in 0..len {
        let a = assign.get(from + t).copied().unwrap_or(last);
        if let Some(c) = a {
            m[t * s + c * n_latent..t * s + (c + 1) * n_latent].fill(0.0);
        }
    }
    Ok(Tensor::from_vec(m, (len, s), device)?.to_dtype(dtype)?)
}

pub struct CrossAttnFusion {
    pub patch: PatchEncoder,
    pub resampler: PerceiverResampler,
    pub lift_w: Param,
    pub lift_b: Param,
    pub blocks: Vec<GatedCrossAttnBlock>,
    /// Rows for `<TS>` and `<endofchunk>`.
    pub special: Param,
    cfg: CrossAttnConfig,
}

impl CrossAttnFusion {
    pub fn new(patch_cfg: PatchConfig, cfg: &CrossAttnConfig, backbone: &Backbone, store: &mut ParamStore) -> Result<Self> {
        let d_model = backbone.config().d_model;
        let d_time = patch_cfg.embed_dim;
        let patch = PatchEncoder::new(patch_cfg, store, "encoder.patch")?;
        let resampler =
            PerceiverResampler::new(store, d_time, cfg.n_latent, cfg.resampler_layers, cfg.resampler_heads)?;
        let lift_w = store.create(
            "xattn.lift.weight",
            &[d_time, d_model],
            Init::Normal(1.0 / (d_time as f64).sqrt()),
            ParamGroup::CrossAttn,
        )?;
        let lift_b = store.create("xattn.lift.bias", &[d_model], Init::Zeros, ParamGroup::CrossAttn)?;
        let blocks = block_layers(backbone.config().depth, cfg.every_n)?
            .into_iter()
            .map(|l| GatedCrossAttnBlock::new(store, l, d_model, cfg.d_k))
            .collect::<Result<Vec<_>>>()?;
        let special = store.create("special_tokens", &[2, d_model], Init::Normal(0.02), ParamGroup::SpecialTokens)?;
        Ok(Self { patch, resampler, lift_w, lift_b, blocks, special, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &CrossAttnConfig {
        &self.cfg
    }

    /// Latents lifted to the backbone width, `(C, N_latent, d_model)`, for
    /// equal-length normalized series.
    pub fn latents(&self, series: &[&[f64]]) -> Result<Tensor> {
        let lat = self.resampler.forward(&self.patch.encode_batch(series)?)?;
        linear(&lat, &self.lift_w.t(), Some(&self.lift_b.t()))
    }

    /// Embeddings for ids that may include the two special tokens.
    pub fn embed_marked(&self, backbone: &Backbone, ids: &[u32]) -> Result<Tensor> {
        let v = backbone.config().vocab_size as u32;
        let remapped: Vec<u32> = ids
            .iter()
            .map(|&i| match i {
                TS_TOKEN => Ok(v),
                END_OF_CHUNK_TOKEN => Ok(v + 1),
                i if i < v => Ok(i),
                i => Err(TslmError::Shape(format!("token id {i} outside vocabulary"))),
            })
            .collect::<Result<_>>()?;
        let table = Tensor::cat(&[backbone.tok_emb.t(), self.special.t()], 0)?;
        let idx = Tensor::new(remapped.as_slice(), table.device())?;
        Ok(table.index_select(&idx, 0)?)
    }
}

/// Per-batch conditioning state handed to the backbone as a layer hook.
pub struct ChunkConditioning<'a> {
    pub fusion: &'a CrossAttnFusion,
    /// `(B, C_max * N_latent, d_model)`; rows of missing chunks are zeros
    /// and never attended.
    pub kv: Tensor,
    pub assignments: Vec<Vec<Option<usize>>>,
    pub n_chunks: usize,
}

impl ChunkConditioning<'_> {
    pub fn mask(&self, from: usize, len: usize) -> Result<Tensor> {
        let n_latent = self.fusion.resampler.n_latent();
        let rows = self
            .assignments
            .iter()
            .map(|a| chunk_mask(a, from, len, self.n_chunks, n_latent, self.kv.dtype(), self.kv.device()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}

impl LayerHook for ChunkConditioning<'_> {
    fn before_layer(&self, layer: usize, x: &Tensor, pos_offset: usize) -> Result<Tensor> {
        let Some(block) = self.fusion.blocks.iter().find(|b| b.layer_index == layer) else {
            return Ok(x.clone());
        };
        if self.n_chunks == 0 {
            return Ok(x.clone());
        }
        let (_, t, _) = x.dims3()?;
        block.forward(x, &self.kv, Some(&self.mask(pos_offset, t)?))
    }
}
