//! A backbone plus one fusion strategy, with batching, loss, and decoding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, KvCache, LayerHook};
use crate::crossattn::{chunk_assignment, ChunkConditioning, CrossAttnConfig, CrossAttnFusion};
use crate::data::MultimodalPrompt;
use crate::error::{Result, TslmError};
use crate::eval::tokenize_series_as_text;
use crate::ops::to_f64_vec;
use crate::params::{Census, ParamGroup, ParamStore};
use crate::softprompt::{assemble_interleaved, token_count, SoftPromptConfig, SoftPromptFusion};
use crate::timeseries::PatchConfig;
use crate::tokenizer::{CharTokenizer, END_OF_CHUNK_LITERAL, EOS, TS_LITERAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "softprompt")]
    SoftPrompt,
    #[serde(rename = "flamingo")]
    Flamingo,
    /// Series rendered as digit text for the plain backbone, adapters trained.
    #[serde(rename = "tokenized-baseline")]
    TokenizedBaseline,
    /// Series dropped, only the descriptions are kept; trains the backbone
    /// itself (language-model pretraining on the prompt text).
    #[serde(rename = "text-only")]
    TextOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SoftPrompt, Variant::Flamingo, Variant::TokenizedBaseline, Variant::TextOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::SoftPrompt => "softprompt",
            Variant::Flamingo => "flamingo",
            Variant::TokenizedBaseline => "tokenized-baseline",
            Variant::TextOnly => "text-only",
        }
    }

    /// Parameter groups this variant optimizes; everything else is frozen.
    pub fn trainable_groups(&self) -> &'static [ParamGroup] {
        match self {
            Variant::SoftPrompt => &[ParamGroup::Encoder, ParamGroup::Adapter, ParamGroup::Projector],
            Variant::Flamingo => &[ParamGroup::Encoder, ParamGroup::CrossAttn, ParamGroup::SpecialTokens],
            Variant::TokenizedBaseline => &[ParamGroup::Adapter],
            Variant::TextOnly => &[ParamGroup::Backbone],
        }
    }

    fn uses_adapters(&self) -> bool {
        matches!(self, Variant::SoftPrompt | Variant::TokenizedBaseline)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TslmError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| TslmError::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub precision: Precision,
    pub backbone: BackboneConfig,
    pub patch: PatchConfig,
    pub softprompt: SoftPromptConfig,
    pub crossattn: CrossAttnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SoftPrompt,
            precision: Precision::F32,
            backbone: BackboneConfig::default(),
            patch: PatchConfig::default(),
            softprompt: SoftPromptConfig::default(),
            crossattn: CrossAttnConfig::default(),
        }
    }
}

pub enum Fusion {
    Text,
    SoftPrompt(SoftPromptFusion),
    CrossAttn(CrossAttnFusion),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sampled { temperature: f64, seed: u64 },
}

/// Padded model inputs for a batch of prompts with their targets.
pub struct Batch<'a> {
    /// `(B, T, d_model)`.
    pub embeds: Tensor,
    /// `(B, T)` next-token ids.
    pub targets: Tensor,
    /// `(B, T)` 1 on target positions, 0 on prompt and padding.
    pub mask: Tensor,
    pub cond: Option<ChunkConditioning<'a>>,
}

pub struct TslmModel {
    cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fusion: Fusion,
}

impl TslmModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(cfg.precision.dtype(), seed);
        let mut backbone = Backbone::new(cfg.backbone.clone(), &mut store)?;
        if cfg.variant.uses_adapters() && cfg.backbone.lora_rank > 0 {
            backbone.attach_adapters(&mut store, cfg.backbone.lora_rank, cfg.backbone.lora_alpha)?;
        }
        let fusion = match cfg.variant {
            Variant::SoftPrompt => {
                Fusion::SoftPrompt(SoftPromptFusion::new(cfg.patch, &cfg.softprompt, cfg.backbone.d_model, &mut store)?)
            }
            Variant::Flamingo => Fusion::CrossAttn(CrossAttnFusion::new(cfg.patch, &cfg.crossattn, &backbone, &mut store)?),
            Variant::TokenizedBaseline | Variant::TextOnly => Fusion::Text,
        };
        store.select_trainable(cfg.variant.trainable_groups());
        Ok(Self { cfg, store, backbone, fusion })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn census(&self) -> Census {
        self.store.census()
    }

    /// Copy plain backbone weights (not adapters) from `src`.
    pub fn load_backbone_from(&self, src: &TslmModel) -> Result<usize> {
        let mut n = 0;
        for p in src.store.iter().filter(|p| p.group() == ParamGroup::Backbone) {
            if let Some(dst) = self.store.get(p.name()) {
                dst.set(p.var().as_tensor())?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    /// Flat prompt text for the text-based variants and the cross-attention
    /// variant (which carries `<TS>`/`<endofchunk>` markers).
    pub fn prompt_text(&self, p: &MultimodalPrompt) -> Result<String> {
        let mut s = p.pre.clone();
        for c in &p.chunks {
            match self.cfg.variant {
                Variant::Flamingo => {
                    s.push_str(TS_LITERAL);
                    s.push_str(&c.desc);
                    s.push_str(END_OF_CHUNK_LITERAL);
                }
                Variant::TokenizedBaseline => {
                    s.push_str(&c.desc);
                    s.push('\n');
                    s.push_str(&tokenize_series_as_text(&c.values)?.text);
                    s.push('\n');
                }
                Variant::TextOnly | Variant::SoftPrompt => s.push_str(&c.desc),
            }
        }
        s.push_str(&p.post);
        Ok(s)
    }

    /// Analytic length of the assembled prompt (target excluded).
    pub fn prompt_token_count(&self, p: &MultimodalPrompt) -> Result<usize> {
        Ok(match self.cfg.variant {
            Variant::SoftPrompt => token_count(p, self.cfg.patch.patch_size),
            Variant::Flamingo => {
                p.pre.chars().count()
                    + p.chunks.iter().map(|c| 2 + c.desc.chars().count()).sum::<usize>()
                    + p.post.chars().count()
            }
            _ => self.prompt_text(p)?.chars().count(),
        })
    }

    /// Keys and values the gated blocks attend over for this prompt.
    pub fn cross_kv_count(&self, p: &MultimodalPrompt) -> usize {
        match &self.fusion {
            Fusion::CrossAttn(f) => p.chunks.len() * f.resampler.n_latent(),
            _ => 0,
        }
    }

    /// Prompt embeddings `(P, d_model)` for each sample, plus chunk
    /// assignments for the cross-attention variant.
    fn prompt_embeddings(&self, samples: &[&MultimodalPrompt]) -> Result<(Vec<Tensor>, Vec<Vec<Option<usize>>>)> {
        let tok = CharTokenizer;
        match &self.fusion {
            Fusion::SoftPrompt(sp) => {
                let series: Vec<&[f64]> = samples.iter().flat_map(|s| s.chunks.iter().map(|c| c.values.as_slice())).collect();
                let mut sets = sp.project_series(&series)?.into_iter();
                let embed = |ids: &[u32]| self.backbone.embed_tokens(ids);
                let mut out = Vec::with_capacity(samples.len());
                for s in samples {
                    let own: Vec<_> = sets.by_ref().take(s.chunks.len()).collect();
                    out.push(assemble_interleaved(s, &own, &embed)?.embeddings);
                }
                Ok((out, vec![]))
            }
            Fusion::CrossAttn(f) => {
                let mut out = Vec::with_capacity(samples.len());
                let mut assigns = Vec::with_capacity(samples.len());
                for s in samples {
                    let ids = tok.encode_marked(&self.prompt_text(s)?);
                    assigns.push(chunk_assignment(&ids, s.chunks.len())?);
                    out.push(f.embed_marked(&self.backbone, &ids)?);
                }
                Ok((out, assigns))
            }
            Fusion::Text => {
                let mut out = Vec::with_capacity(samples.len());
                for s in samples {
                    let ids = tok.encode(&self.prompt_text(s)?);
                    if ids.is_empty() {
                        return Err(TslmError::Shape("empty prompt".into()));
                    }
                    out.push(self.backbone.embed_tokens(&ids)?);
                }
                Ok((out, vec![]))
            }
        }
    }

    /// `(B, C_max * N_latent, d_model)` lifted latents, chunk-major per row.
    fn cross_kv(&self, f: &CrossAttnFusion, samples: &[&MultimodalPrompt]) -> Result<(Tensor, usize)> {
        let c_max = samples.iter().map(|s| s.chunks.len()).max().unwrap_or(0);
        let d = self.cfg.backbone.d_model;
        let m = f.resampler.n_latent();
        let dtype = self.store.dtype();
        if c_max == 0 {
            return Ok((Tensor::zeros((samples.len(), 0, d), dtype, self.device())?, 0));
        }
        let mut by_len: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (b, s) in samples.iter().enumerate() {
            for (c, ch) in s.chunks.iter().enumerate() {
                by_len.entry(ch.values.len()).or_default().push((b, c));
            }
        }
        let mut slots: Vec<Vec<Option<Tensor>>> = samples.iter().map(|_| vec![None; c_max]).collect();
        for keys in by_len.values() {
            let series: Vec<&[f64]> = keys.iter().map(|&(b, c)| samples[b].chunks[c].values.as_slice()).collect();
            let lat = f.latents(&series)?;
            for (i, &(b, c)) in keys.iter().enumerate() {
                slots[b][c] = Some(lat.get(i)?);
            }
        }
        let zeros = Tensor::zeros((m, d), dtype, self.device())?;
        let rows = slots
            .into_iter()
            .map(|row| {
                let parts: Vec<Tensor> = row.into_iter().map(|t| t.unwrap_or_else(|| zeros.clone())).collect();
                Tensor::cat(&parts, 0)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok((Tensor::stack(&rows, 0)?, c_max))
    }

    fn conditioning<'a>(
        &'a self,
        samples: &[&MultimodalPrompt],
        assignments: Vec<Vec<Option<usize>>>,
    ) -> Result<Option<ChunkConditioning<'a>>> {
        match &self.fusion {
            Fusion::CrossAttn(f) => {
                let (kv, n_chunks) = self.cross_kv(f, samples)?;
                Ok(Some(ChunkConditioning { fusion: f, kv, assignments, n_chunks }))
            }
            _ => Ok(None),
        }
    }

    /// Prompt embeddings followed by the target text and EOS, teacher forced.
    pub fn make_batch<'a>(&'a self, samples: &[&MultimodalPrompt]) -> Result<Batch<'a>> {
        if samples.is_empty() {
            return Err(TslmError::Shape("empty batch".into()));
        }
        let tok = CharTokenizer;
        let (prompts, assigns) = self.prompt_embeddings(samples)?;
        let mut seqs = Vec::with_capacity(samples.len());
        let mut tgts = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for (s, prompt) in samples.iter().zip(prompts) {
            let p = prompt.dims()[0];
            let mut target = tok.encode(&s.target);
            target.push(EOS);
            // inputs: prompt + target[..-1]; position p - 1 + i predicts target[i]
            let n = p + target.len() - 1;
            let input = if target.len() > 1 {
                Tensor::cat(&[prompt, self.backbone.embed_tokens(&target[..target.len() - 1])?], 0)?
            } else {
                prompt
            };
            let mut t = vec![0u32; n];
            let mut m = vec![0.0f64; n];
            for (i, &id) in target.iter().enumerate() {
                t[p - 1 + i] = id;
                m[p - 1 + i] = 1.0;
            }
            seqs.push(input);
            tgts.push(t);
            masks.push(m);
        }
        let t_max = seqs.iter().map(|s| s.dims()[0]).max().unwrap_or(0);
        if t_max > self.cfg.backbone.max_context {
            return Err(TslmError::ContextOverflow { len: t_max, max: self.cfg.backbone.max_context });
        }
        let d = self.cfg.backbone.d_model;
        let dtype = self.store.dtype();
        let mut padded = Vec::with_capacity(seqs.len());
        for s in seqs {
            let n = s.dims()[0];
            padded.push(if n < t_max { Tensor::cat(&[s, Tensor::zeros((t_max - n, d), dtype, self.device())?], 0)? } else { s });
        }
        for (t, m) in tgts.iter_mut().zip(masks.iter_mut()) {
            t.resize(t_max, 0);
            m.resize(t_max, 0.0);
        }
        let b = samples.len();
        let targets = Tensor::from_vec(tgts.concat(), (b, t_max), self.device())?;
        let mask = Tensor::from_vec(masks.concat(), (b, t_max), self.device())?.to_dtype(dtype)?;
        let cond = self.conditioning(samples, assigns)?;
        Ok(Batch { embeds: Tensor::stack(&padded, 0)?, targets, mask, cond })
    }

    pub fn logits(&self, batch: &Batch<'_>) -> Result<Tensor> {
        let hook = batch.cond.as_ref().map(|c| c as &dyn LayerHook);
        self.backbone.forward_embeds(&batch.embeds, hook, None)
    }

    /// Mean next-token negative log-likelihood over target positions.
    pub fn loss(&self, samples: &[&MultimodalPrompt]) -> Result<Tensor> {
        let batch = self.make_batch(samples)?;
        lm_loss(&self.logits(&batch)?, &batch.targets, &batch.mask)
    }

    /// Decode a continuation of the sample's prompt.
    pub fn generate(&self, sample: &MultimodalPrompt, max_new_tokens: usize, mode: DecodeMode) -> Result<String> {
        if max_new_tokens == 0 {
            return Ok(String::new());
        }
        let (prompts, assigns) = self.prompt_embeddings(&[sample])?;
        let cond = self.conditioning(&[sample], assigns)?;
        let hook = cond.as_ref().map(|c| c as &dyn LayerHook);
        let mut cache = KvCache::new();
        let mut x = prompts.into_iter().next().expect("one prompt").unsqueeze(0)?;
        let mut rng = match mode {
            DecodeMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeMode::Greedy => None,
        };
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            if cache.len() + x.dims()[1] > self.cfg.backbone.max_context {
                break;
            }
            let logits = self.backbone.forward_embeds(&x, hook, Some(&mut cache))?;
            let t = logits.dims()[1];
            let last = to_f64_vec(&logits.get(0)?.get(t - 1)?)?;
            let next = match (mode, rng.as_mut()) {
                (DecodeMode::Sampled { temperature, .. }, Some(r)) => sample_index(&last, temperature, r)?,
                _ => argmax(&last),
            } as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            x = self.backbone.embed_tokens(&[next])?.unsqueeze(0)?;
        }
        Ok(CharTokenizer.decode(&out))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_index(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if temperature <= 0.0 {
        return Ok(argmax(logits));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&w).map_err(|e| TslmError::Config(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Masked mean of `-log softmax(logits)[target]`.
pub fn lm_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let denom = crate::ops::scalar_f64(&mask.sum_all()?)?;
    if denom <= 0.0 {
        return Err(TslmError::EmptyMask);
    }
    let logp = candle_nn::ops::log_softmax(logits, candle_core::D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(candle_core::D::Minus1)?.contiguous()?, candle_core::D::Minus1)?;
    let picked = picked.squeeze(candle_core::D::Minus1)?;
    let nll = (picked * mask.to_dtype(logits.dtype())?)?.sum_all()?.neg()?;
    Ok((nll / denom)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_trend_qa, Chunk, Split};
    use crate::ops::scalar_f64;

    pub(crate) fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            precision: Precision::F64,
            backbone: BackboneConfig { d_model: 16, depth: 2, heads: 2, max_context: 2048, lora_rank: 2, lora_alpha: 4.0, ..Default::default() },
            patch: PatchConfig { patch_size: 4, embed_dim: 8, max_patches: 64 },
            softprompt: SoftPromptConfig { encoder_layers: 1, encoder_heads: 2, mlp_projector: true },
            crossattn: CrossAttnConfig { n_latent: 4, resampler_layers: 1, resampler_heads: 2, every_n: 1, d_k: 8 },
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 100;
        let logits = Tensor::zeros((1, 3, v), DType::F64, &Device::Cpu).unwrap();
        let targets = Tensor::new(&[[1u32, 5, 7]], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let l = scalar_f64(&lm_loss(&logits, &targets, &mask).unwrap()).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut row = vec![0.0f64; 10];
        row[3] = 60.0;
        let logits = Tensor::from_vec(row, (1, 1, 10), &Device::Cpu).unwrap();
        let t = Tensor::new(&[[3u32]], &Device::Cpu).unwrap();
        let m = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        assert!(scalar_f64(&lm_loss(&logits, &t, &m).unwrap()).unwrap() < 1e-20);
    }

    #[test]
    fn three_token_hand_computation() {
        let z = [[0.5f64, -1.0, 2.0], [0.0, 0.3, -0.7], [1.5, 1.5, 0.0]];
        let targets = [2u32, 0, 1];
        let logits = Tensor::new(&[z], &Device::Cpu).unwrap();
        let t = Tensor::new(&[targets], &Device::Cpu).unwrap();
        let m = Tensor::new(&[[1.0f64, 1.0, 1.0]], &Device::Cpu).unwrap();
        let got = scalar_f64(&lm_loss(&logits, &t, &m).unwrap()).unwrap();
        let mut want = 0.0;
        for (row, &y) in z.iter().zip(&targets) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want -= row[y as usize] - lse;
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let logits = Tensor::zeros((1, 2, 4), DType::F64, &Device::Cpu).unwrap();
        let t = Tensor::new(&[[0u32, 1]], &Device::Cpu).unwrap();
        let m = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(lm_loss(&logits, &t, &m), Err(TslmError::EmptyMask)));
    }

    #[test]
    fn census_matches_variant_theta() {
        for v in Variant::ALL {
            let m = TslmModel::new(tiny_cfg(v), 0).unwrap();
            let c = m.census();
            let mut want = v.trainable_groups().to_vec();
            want.sort();
            assert_eq!(c.groups(true), want, "{v}");
            assert_eq!(c.total(), m.store.num_params());
            assert_eq!(c.entries.len(), m.store.len());
            if v == Variant::Flamingo {
                assert!(c.entries.iter().filter(|e| e.name.starts_with("backbone.")).all(|e| !e.trainable));
                assert!(c.entries.iter().any(|e| e.name.ends_with(".gate") && e.trainable));
            }
            if v == Variant::SoftPrompt {
                assert!(c.entries.iter().filter(|e| e.name.contains("lora_")).all(|e| e.trainable));
                assert!(c.entries.iter().filter(|e| e.group == ParamGroup::Backbone).all(|e| !e.trainable));
            }
        }
    }

    #[test]
    fn batch_layout_and_loss_for_every_variant() {
        let corpus = gen_trend_qa(12, 1).unwrap();
        let refs: Vec<&MultimodalPrompt> = corpus.iter().take(3).collect();
        for v in Variant::ALL {
            let m = TslmModel::new(tiny_cfg(v), 0).unwrap();
            let b = m.make_batch(&refs).unwrap();
            let target_tokens: usize = refs.iter().map(|s| s.target.len() + 1).sum();
            assert_eq!(scalar_f64(&b.mask.sum_all().unwrap()).unwrap() as usize, target_tokens);
            let p = m.prompt_token_count(refs[0]).unwrap();
            let own = m.make_batch(&refs[..1]).unwrap();
            assert_eq!(own.embeds.dims()[1], p + refs[0].target.len(), "{v}");
            let l = scalar_f64(&m.loss(&refs).unwrap()).unwrap();
            assert!(l.is_finite() && l > 0.0);
        }
    }

    #[test]
    fn greedy_generation_is_deterministic_and_budgeted() {
        let corpus = gen_trend_qa(10, 2).unwrap();
        for v in [Variant::SoftPrompt, Variant::Flamingo] {
            let m = TslmModel::new(tiny_cfg(v), 3).unwrap();
            let a = m.generate(&corpus[0], 12, DecodeMode::Greedy).unwrap();
            let b = m.generate(&corpus[0], 12, DecodeMode::Greedy).unwrap();
            assert_eq!(a, b);
            assert!(a.chars().count() <= 12);
            assert_eq!(m.generate(&corpus[0], 0, DecodeMode::Greedy).unwrap(), "");
            let s1 = m.generate(&corpus[0], 8, DecodeMode::Sampled { temperature: 1.0, seed: 5 }).unwrap();
            let s2 = m.generate(&corpus[0], 8, DecodeMode::Sampled { temperature: 1.0, seed: 5 }).unwrap();
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn zero_chunk_flamingo_matches_plain_backbone() {
        let m = TslmModel::new(tiny_cfg(Variant::Flamingo), 4).unwrap();
        let Fusion::CrossAttn(f) = &m.fusion else { unreachable!() };
        for b in &f.blocks {
            b.gate.set(&Tensor::new(&[0.9f64], &Device::Cpu).unwrap()).unwrap();
        }
        let p = MultimodalPrompt {
            pre: "no series here ".into(),
            chunks: vec![],
            post: "?".into(),
            target: "ok".into(),
            label: String::new(),
            split: Split::Test,
        };
        let batch = m.make_batch(&[&p]).unwrap();
        let a = to_f64_vec(&m.logits(&batch).unwrap()).unwrap();
        let b = to_f64_vec(&m.backbone.forward_embeds(&batch.embeds, None, None).unwrap()).unwrap();
        assert_eq!(a, b);
        let _ = Chunk { values: vec![], mean: 0.0, std: 0.0, desc: String::new() };
    }

    #[test]
    fn context_overflow_surfaces() {
        let mut cfg = tiny_cfg(Variant::SoftPrompt);
        cfg.backbone.max_context = 40;
        let m = TslmModel::new(cfg, 0).unwrap();
        let corpus = gen_trend_qa(10, 0).unwrap();
        assert!(matches!(m.loss(&[&corpus[0]]), Err(TslmError::ContextOverflow { .. })));
    }
}
