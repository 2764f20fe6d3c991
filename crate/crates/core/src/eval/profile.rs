//! Peak-memory sweep over series count and length.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::backbone::BackboneConfig;
use crate::data::gen_simulation;
use crate::error::{Result, TslmError};
use crate::model::{ModelConfig, TslmModel, Variant};

pub const GRID_L: [usize; 4] = [10, 100, 1000, 10000];
pub const GRID_N: [usize; 5] = [1, 2, 3, 4, 5];

/// Named backbones for the sweep. `toy` is the model the training checks
/// use; `base` is wide enough that its weights, not the activations of a
/// short prompt, dominate the footprint, as with pretrained decoders.
pub const BACKBONE_PRESETS: [&str; 2] = ["toy", "base"];

/// Context limit for profiling, so that the largest soft-prompt cells
/// overflow while `L = 10000, N = 1` still runs.
pub const PROFILE_CONTEXT: usize = 4096;

pub fn backbone_preset(name: &str) -> Result<BackboneConfig> {
    let (d_model, depth, heads) = match name {
        "toy" => (128, 4, 4),
        "base" => (1024, 8, 8),
        _ => return Err(TslmError::Config(format!("unknown backbone preset '{name}'"))),
    };
    Ok(BackboneConfig { d_model, depth, heads, max_context: PROFILE_CONTEXT, ..Default::default() })
}

/// Model configuration for one grid column.
pub fn profile_config(variant: Variant, backbone: &str) -> Result<ModelConfig> {
    Ok(ModelConfig { variant, backbone: backbone_preset(backbone)?, ..Default::default() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryStatus {
    Ok,
    ContextOverflow,
    Oom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub variant: Variant,
    pub backbone: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    /// Input positions of one training sequence (prompt plus target).
    pub token_count: usize,
    /// Cross-attention keys per sequence; 0 for the other variants.
    pub kv_count: usize,
    pub peak_mem_bytes: usize,
    pub status: MemoryStatus,
}

/// One forward and backward pass at batch size 1 on a simulation sample
/// with `n` series of length `l`. Peak bytes cover everything live during
/// the pass, weights included.
pub fn profile_memory(model: &TslmModel, backbone: &str, n: usize, l: usize, seed: u64) -> Result<MemoryRecord> {
    let sample = gen_simulation(n, l, 1, seed)?.remove(0);
    let token_count = model.prompt_token_count(&sample)? + sample.target.chars().count();
    let mut rec = MemoryRecord {
        variant: model.variant(),
        backbone: backbone.to_string(),
        n,
        l,
        token_count,
        kv_count: model.cross_kv_count(&sample),
        peak_mem_bytes: 0,
        status: MemoryStatus::Ok,
    };
    if token_count > model.config().backbone.max_context {
        rec.status = MemoryStatus::ContextOverflow;
        return Ok(rec);
    }
    alloc::reset_peak();
    let outcome = model.loss(&[&sample]).and_then(|loss| Ok(loss.backward()?));
    match outcome {
        Ok(grads) => {
            rec.peak_mem_bytes = alloc::peak_bytes();
            drop(grads);
        }
        Err(TslmError::ContextOverflow { .. }) => rec.status = MemoryStatus::ContextOverflow,
        Err(e) => {
            log::warn!("profiling {} N={n} L={l} failed: {e}", model.variant());
            rec.status = MemoryStatus::Oom;
        }
    }
    Ok(rec)
}

/// Every (L, N) cell for each named model configuration.
pub fn profile_grid(models: &[(String, ModelConfig)], ls: &[usize], ns: &[usize], seed: u64) -> Result<Vec<MemoryRecord>> {
    let mut out = Vec::new();
    for (label, cfg) in models {
        let model = TslmModel::new(cfg.clone(), seed)?;
        for &l in ls {
            for &n in ns {
                let r = profile_memory(&model, label, n, l, seed)?;
                log::info!("{} {label} L={l} N={n}: {:?} {} bytes", cfg.variant, r.status, r.peak_mem_bytes);
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Rows `L-N`, one column per variant and backbone; cells are MiB or the
/// status when the pass did not run.
pub fn grid_table(records: &[MemoryRecord]) -> String {
    let mut cols: Vec<(Variant, String)> = Vec::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    let mut cells: BTreeMap<(usize, usize, usize), String> = BTreeMap::new();
    for r in records {
        let key = (r.variant, r.backbone.clone());
        let c = cols.iter().position(|k| *k == key).unwrap_or_else(|| {
            cols.push(key);
            cols.len() - 1
        });
        if !rows.contains(&(r.l, r.n)) {
            rows.push((r.l, r.n));
        }
        let cell = match r.status {
            MemoryStatus::Ok => format!("{:.2}", r.peak_mem_bytes as f64 / (1u64 << 20) as f64),
            MemoryStatus::ContextOverflow => "overflow".into(),
            MemoryStatus::Oom => "OOM".into(),
        };
        cells.insert((r.l, r.n, c), cell);
    }
    rows.sort();
    let mut s = String::from("L-N");
    for (v, b) in &cols {
        let _ = write!(s, ",{v}/{b}");
    }
    s.push('\n');
    for (l, n) in rows {
        let _ = write!(s, "{l}-{n}");
        for c in 0..cols.len() {
            let _ = write!(s, ",{}", cells.get(&(l, n, c)).map(String::as_str).unwrap_or("-"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Precision;

    fn cfg(v: Variant) -> ModelConfig {
        let mut c = ModelConfig { variant: v, precision: Precision::F32, ..Default::default() };
        c.backbone.d_model = 16;
        c.backbone.depth = 2;
        c.backbone.heads = 2;
        c.backbone.max_context = 1000;
        c.patch.embed_dim = 8;
        c.softprompt.encoder_heads = 2;
        c.crossattn.n_latent = 4;
        c.crossattn.d_k = 8;
        c.crossattn.resampler_heads = 2;
        c
    }

    #[test]
    fn token_count_matches_assembled_batch() {
        for v in [Variant::SoftPrompt, Variant::Flamingo] {
            let m = TslmModel::new(cfg(v), 0).unwrap();
            for (n, l) in [(1, 10), (3, 100), (2, 37)] {
                let r = profile_memory(&m, "t", n, l, 1).unwrap();
                assert_eq!(r.status, MemoryStatus::Ok);
                let s = gen_simulation(n, l, 1, 1).unwrap().remove(0);
                assert_eq!(m.make_batch(&[&s]).unwrap().embeds.dims()[1], r.token_count);
                assert!(r.peak_mem_bytes > 0);
            }
        }
    }

    #[test]
    fn overflow_is_a_status() {
        let m = TslmModel::new(cfg(Variant::SoftPrompt), 0).unwrap();
        let r = profile_memory(&m, "t", 5, 1000, 1).unwrap();
        assert_eq!(r.status, MemoryStatus::ContextOverflow);
        assert_eq!(r.peak_mem_bytes, 0);
    }

    #[test]
    fn table_layout() {
        let recs = profile_grid(&[("t".into(), cfg(Variant::Flamingo))], &[10, 100], &[1, 2], 0).unwrap();
        let t = grid_table(&recs);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "L-N,flamingo/t");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("10-1,"));
        let kv: Vec<usize> = recs.iter().map(|r| r.kv_count).collect();
        assert_eq!(kv, vec![4, 8, 4, 8]);
        let json = serde_json::to_string(&recs[0]).unwrap();
        assert!(json.contains("\"N\":1") && json.contains("\"status\":\"ok\""));
    }
}
