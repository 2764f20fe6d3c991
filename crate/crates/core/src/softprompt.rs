//! Soft-prompt fusion: encode patches with a small bidirectional
//! transformer, project them to the backbone width, and splice them between
//! the text segments of a prompt.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::LayerNorm;
use crate::data::MultimodalPrompt;
use crate::error::{Result, TslmError};
use crate::ops::{attention, linear};
use crate::params::{Init, Param, ParamGroup, ParamStore};
use crate::timeseries::{PatchConfig, PatchEmbeddingSequence, PatchEncoder};
use crate::tokenizer::CharTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftPromptConfig {
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Two-layer MLP with hidden width `2 * d_llm` when true, a single
    /// affine map otherwise.
    pub mlp_projector: bool,
}

impl Default for SoftPromptConfig {
    fn default() -> Self {
        Self { encoder_layers: 2, encoder_heads: 4, mlp_projector: true }
    }
}

/// Pre-LN bidirectional transformer layer over patch embeddings.
pub struct EncoderLayer {
    ln1: LayerNorm,
    wq: Param,
    wk: Param,
    wv: Param,
    wo: Param,
    ln2: LayerNorm,
    fc1_w: Param,
    fc1_b: Param,
    fc2_w: Param,
    fc2_b: Param,
    heads: usize,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TslmError::Config(format!("encoder width {d} not divisible by {heads} heads")));
        }
        let g = ParamGroup::Encoder;
        let std = 1.0 / (d as f64).sqrt();
        let mut w = |n: &str, shape: &[usize], init: Init| store.create(&format!("{prefix}.{n}"), shape, init, g);
        Ok(Self {
            wq: w("attn.wq", &[d, d], Init::Normal(std))?,
            wk: w("attn.wk", &[d, d], Init::Normal(std))?,
            wv: w("attn.wv", &[d, d], Init::Normal(std))?,
            wo: w("attn.wo", &[d, d], Init::Normal(std * 0.5))?,
            fc1_w: w("mlp.fc1.weight", &[d, 4 * d], Init::Normal(std))?,
            fc1_b: w("mlp.fc1.bias", &[4 * d], Init::Zeros)?,
            fc2_w: w("mlp.fc2.weight", &[4 * d, d], Init::Normal(0.5 / (4.0 * d as f64).sqrt()))?,
            fc2_b: w("mlp.fc2.bias", &[d], Init::Zeros)?,
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d, g)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d, g)?,
            heads,
        })
    }

    /// `x`: `(B, N, d)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let q = linear(&h, &self.wq.t(), None)?;
        let k = linear(&h, &self.wk.t(), None)?;
        let v = linear(&h, &self.wv.t(), None)?;
        let y = attention(&q, &k, &v, self.heads)?;
        let x = (x + linear(&y, &self.wo.t(), None)?)?;
        let h = self.ln2.forward(&x)?;
        let h = linear(&h, &self.fc1_w.t(), Some(&self.fc1_b.t()))?.gelu()?;
        Ok((x + linear(&h, &self.fc2_w.t(), Some(&self.fc2_b.t()))?)?)
    }
}

pub struct Projector {
    pub w1: Param,
    pub b1: Param,
    /// Present for the MLP form only.
    pub second: Option<(Param, Param)>,
}

impl Projector {
    pub fn new(store: &mut ParamStore, d_enc: usize, d_llm: usize, mlp: bool) -> Result<Self> {
        let g = ParamGroup::Projector;
        let hidden = if mlp { 2 * d_llm } else { d_llm };
        let w1 = store.create("projector.fc1.weight", &[d_enc, hidden], Init::Normal(1.0 / (d_enc as f64).sqrt()), g)?;
        let b1 = store.create("projector.fc1.bias", &[hidden], Init::Zeros, g)?;
        let second = if mlp {
            Some((
                store.create("projector.fc2.weight", &[hidden, d_llm], Init::Normal(0.02), g)?,
                store.create("projector.fc2.bias", &[d_llm], Init::Zeros, g)?,
            ))
        } else {
            None
        };
        Ok(Self { w1, b1, second })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = linear(x, &self.w1.t(), Some(&self.b1.t()))?;
        match &self.second {
            None => Ok(h),
            Some((w2, b2)) => linear(&h.gelu()?, &w2.t(), Some(&b2.t())),
        }
    }
}

/// `N x d_llm` projected time-series tokens of one series.
#[derive(Debug, Clone)]
pub struct SoftPromptTokens {
    pub tokens: Tensor,
}

impl SoftPromptTokens {
    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct SoftPromptFusion {
    pub patch: PatchEncoder,
    pub layers: Vec<EncoderLayer>,
    final_ln: Option<LayerNorm>,
    pub projector: Projector,
    d_llm: usize,
}

impl SoftPromptFusion {
    pub fn new(patch_cfg: PatchConfig, cfg: &SoftPromptConfig, d_llm: usize, store: &mut ParamStore) -> Result<Self> {
        let patch = PatchEncoder::new(patch_cfg, store, "encoder.patch")?;
        let d = patch_cfg.embed_dim;
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.layers.{i}"), d, cfg.encoder_heads))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = if layers.is_empty() {
            None
        } else {
            Some(LayerNorm::new(store, "encoder.ln_f", d, ParamGroup::Encoder)?)
        };
        let projector = Projector::new(store, d, d_llm, cfg.mlp_projector)?;
        Ok(Self { patch, layers, final_ln, projector, d_llm })
    }

    pub fn d_llm(&self) -> usize {
        self.d_llm
    }

    /// Transformer-encode and project `(B, N, d_enc)` patch embeddings.
    pub fn encode_embeddings(&self, e: &Tensor) -> Result<Tensor> {
        let d_enc = self.patch.config().embed_dim;
        let (_, _, d) = e.dims3()?;
        if d != d_enc {
            return Err(TslmError::Shape(format!("patch width {d} != encoder width {d_enc}")));
        }
        let mut h = e.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        if let Some(ln) = &self.final_ln {
            h = ln.forward(&h)?;
        }
        self.projector.forward(&h)
    }

    pub fn encode_and_project(&self, patches: &PatchEmbeddingSequence) -> Result<SoftPromptTokens> {
        let z = self.encode_embeddings(&patches.embeddings.unsqueeze(0)?)?;
        Ok(SoftPromptTokens { tokens: z.squeeze(0)? })
    }

    /// Soft tokens for many normalized series at once. Series of equal
    /// length share one batched pass; the output keeps input order.
    pub fn project_series(&self, series: &[&[f64]]) -> Result<Vec<SoftPromptTokens>> {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in series.iter().enumerate() {
            by_len.entry(s.len()).or_default().push(i);
        }
        let mut out: Vec<Option<SoftPromptTokens>> = vec![None; series.len()];
        for idx in by_len.values() {
            let group: Vec<&[f64]> = idx.iter().map(|&i| series[i]).collect();
            let z = self.encode_embeddings(&self.patch.encode_batch(&group)?)?;
            for (row, &i) in idx.iter().enumerate() {
                out[i] = Some(SoftPromptTokens { tokens: z.get(row)? });
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every series projected")).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Pre,
    Series(usize),
    Desc(usize),
    Post,
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Vocabulary ids of a text segment; `None` for time-series blocks.
    pub ids: Option<Vec<u32>>,
    pub len: usize,
}

/// One flat `(total_length, d_llm)` embedding matrix plus the segment
/// layout it was built from.
#[derive(Debug, Clone)]
pub struct InterleavedSequence {
    pub segments: Vec<Segment>,
    pub embeddings: Tensor,
    pub total_length: usize,
}

/// Lay out `[pre, Z_1, desc_1, ..., Z_K, desc_K, post]`.
pub fn assemble_interleaved(
    prompt: &MultimodalPrompt,
    token_sets: &[SoftPromptTokens],
    embed: &dyn Fn(&[u32]) -> Result<Tensor>,
) -> Result<InterleavedSequence> {
    if token_sets.len() != prompt.chunks.len() {
        return Err(TslmError::Chunks(format!(
            "{} chunks but {} soft-token sets",
            prompt.chunks.len(),
            token_sets.len()
        )));
    }
    let tok = CharTokenizer;
    let mut segments = Vec::with_capacity(2 + 2 * token_sets.len());
    let mut parts = Vec::with_capacity(segments.capacity());
    let push_text = |kind, text: &str, segments: &mut Vec<Segment>, parts: &mut Vec<Tensor>| -> Result<()> {
        let ids = tok.encode(text);
        if !ids.is_empty() {
            parts.push(embed(&ids)?);
        }
        segments.push(Segment { kind, len: ids.len(), ids: Some(ids) });
        Ok(())
    };
    push_text(SegmentKind::Pre, &prompt.pre, &mut segments, &mut parts)?;
    for (i, (z, chunk)) in token_sets.iter().zip(&prompt.chunks).enumerate() {
        segments.push(Segment { kind: SegmentKind::Series(i), ids: None, len: z.len() });
        parts.push(z.tokens.clone());
        push_text(SegmentKind::Desc(i), &chunk.desc, &mut segments, &mut parts)?;
    }
    push_text(SegmentKind::Post, &prompt.post, &mut segments, &mut parts)?;
    let total_length = segments.iter().map(|s| s.len).sum();
    if parts.is_empty() {
        return Err(TslmError::Shape("prompt assembles to an empty sequence".into()));
    }
    let embeddings = Tensor::cat(&parts, 0)?;
    Ok(InterleavedSequence { segments, embeddings, total_length })
}

/// Analytic length of the assembled soft-prompt sequence (no target).
pub fn token_count(prompt: &MultimodalPrompt, patch_size: usize) -> usize {
    prompt.pre.chars().count()
        + prompt
            .chunks
            .iter()
            .map(|c| c.values.len().div_ceil(patch_size) + c.desc.chars().count())
            .sum::<usize>()
        + prompt.post.chars().count()
}
