//! Univariate series, scale-preserving normalization, and the patch encoder.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TslmError};
use crate::params::{Init, Param, ParamGroup, ParamStore};

/// One univariate signal plus the statistics needed to describe its
/// original scale in text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub sample_rate_text: String,
}

impl TimeSeries {
    /// Wrap raw values; `mean`/`std` are computed from them.
    pub fn new(values: Vec<f64>, sample_rate_text: impl Into<String>) -> Self {
        let (mean, std) = mean_std(&values);
        Self { values, mean, std, sample_rate_text: sample_rate_text.into() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input: normalized to zeros with `std = 0` recorded.
    pub fn is_degenerate(&self) -> bool {
        self.std == 0.0
    }

    /// Min-max scale the values into [-1, 1]; `mean` and `std` carry the
    /// statistics of the input values (population std).
    pub fn normalize(&self) -> Result<TimeSeries> {
        if self.values.is_empty() {
            return Err(TslmError::EmptySeries);
        }
        check_finite(&self.values)?;
        let (mean, std) = mean_std(&self.values);
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let values = if hi > lo {
            self.values
                .iter()
                .map(|&v| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0))
                .collect()
        } else {
            log::debug!("constant series of length {} normalized to zeros", self.values.len());
            vec![0.0; self.values.len()]
        };
        let std = if hi > lo { std } else { 0.0 };
        Ok(TimeSeries { values, mean, std, sample_rate_text: self.sample_rate_text.clone() })
    }

    /// `This is <label> data over <rate> with mean=<mean> and std=<std>.`
    pub fn describe(&self, label: &str) -> String {
        format!(
            "This is {label} data over {} with mean={} and std={}.",
            self.sample_rate_text,
            fmt_g(self.mean),
            fmt_g(self.std)
        )
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TslmError::NonFinite { index }),
        None => Ok(()),
    }
}

/// C `%g` formatting: six significant digits, trailing zeros removed,
/// scientific notation outside `1e-4 <= |x| < 1e6`.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Rows in the learnable positional table.
    pub max_patches: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch_size: 4, embed_dim: 128, max_patches: 2560 }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.max_patches == 0 {
            return Err(TslmError::Config(format!("patch config has a zero dimension: {self:?}")));
        }
        Ok(())
    }

    /// Right-padding to a multiple of `p` gives `ceil(L / p)` patches.
    pub fn num_patches(&self, len: usize) -> usize {
        len.div_ceil(self.patch_size)
    }
}

/// `N x d_enc` patch embeddings of one series.
#[derive(Debug, Clone)]
pub struct PatchEmbeddingSequence {
    pub embeddings: Tensor,
    pub num_patches: usize,
}

impl PatchEmbeddingSequence {
    pub fn new(embeddings: Tensor) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        Ok(Self { embeddings, num_patches: n })
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.dims()[1]
    }
}

/// Conv1D with kernel = stride = `p` (a per-patch linear map) plus a
/// learnable positional table.
pub struct PatchEncoder {
    cfg: PatchConfig,
    /// `p x d_enc`; row `k` is the kernel tap at offset `k` within a patch.
    pub weight: Param,
    pub bias: Param,
    pub positions: Param,
}

impl PatchEncoder {
    pub fn new(cfg: PatchConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (cfg.patch_size as f64).sqrt();
        Ok(Self {
            cfg,
            weight: store.create(
                &format!("{prefix}.conv.weight"),
                &[cfg.patch_size, cfg.embed_dim],
                Init::Uniform(bound),
                ParamGroup::Encoder,
            )?,
            bias: store.create(&format!("{prefix}.conv.bias"), &[cfg.embed_dim], Init::Zeros, ParamGroup::Encoder)?,
            positions: store.create(
                &format!("{prefix}.positions"),
                &[cfg.max_patches, cfg.embed_dim],
                Init::Normal(0.02),
                ParamGroup::Encoder,
            )?,
        })
    }

    pub fn config(&self) -> &PatchConfig {
        &self.cfg
    }

    /// Encode one normalized series.
    pub fn encode(&self, series: &TimeSeries) -> Result<PatchEmbeddingSequence> {
        let e = self.encode_batch(&[series.values.as_slice()])?;
        PatchEmbeddingSequence::new(e.squeeze(0)?)
    }

    /// Encode several series of equal length into `(C, N, d_enc)`.
    pub fn encode_batch(&self, series: &[&[f64]]) -> Result<Tensor> {
        let len = series.first().map(|s| s.len()).unwrap_or(0);
        if len == 0 {
            return Err(TslmError::EmptySeries);
        }
        if series.iter().any(|s| s.len() != len) {
            return Err(TslmError::Shape("encode_batch needs equal-length series".into()));
        }
        let p = self.cfg.patch_size;
        let n = self.cfg.num_patches(len);
        if n > self.cfg.max_patches {
            return Err(TslmError::Config(format!(
                "series of length {len} needs {n} patches, positional table holds {}",
                self.cfg.max_patches
            )));
        }
        let mut flat = Vec::with_capacity(series.len() * n * p);
        for s in series {
            check_finite(s)?;
            flat.extend_from_slice(s);
            flat.resize(flat.len() + n * p - len, 0.0);
        }
        let w = self.weight.t();
        let x = Tensor::from_vec(flat, (series.len() * n, p), w.device())?.to_dtype(w.dtype())?;
        let e = x.matmul(&w)?.broadcast_add(&self.bias.t())?;
        let e = e.reshape((series.len(), n, self.cfg.embed_dim))?;
        let pos = self.positions.t().narrow(0, 0, n)?;
        Ok(e.broadcast_add(&pos)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn normalize_preserves_scale_in_description() {
        let ts = TimeSeries::new(vec![49.0, 73.0], "24 hours sampled at 50 Hz");
        let n = ts.normalize().unwrap();
        assert_eq!(n.mean, 61.0);
        assert_eq!(n.std, 12.0);
        let d = n.describe("heart-rate");
        assert_eq!(d, "This is heart-rate data over 24 hours sampled at 50 Hz with mean=61 and std=12.");
    }

    #[test]
    fn zero_series_is_flagged_not_fatal() {
        let n = TimeSeries::new(vec![0.0; 8], "8 steps").normalize().unwrap();
        assert_eq!(n.values, vec![0.0; 8]);
        assert_eq!((n.mean, n.std), (0.0, 0.0));
        assert!(n.is_degenerate());
    }

    #[test]
    fn two_point_min_max() {
        let raw = vec![0.0, 10.0];
        let n = TimeSeries::new(raw.clone(), "2 steps").normalize().unwrap();
        assert_eq!(n.values, vec![-1.0, 1.0]);
        // brute-force recomputation of the statistics
        let mean = raw.iter().sum::<f64>() / 2.0;
        let std = (raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0).sqrt();
        assert_eq!((n.mean, n.std), (mean, std));
        assert_eq!((mean, std), (5.0, 5.0));
    }

    #[test]
    fn normalize_rejects_non_finite_and_empty() {
        assert!(matches!(
            TimeSeries::new(vec![1.0, f64::NAN], "x").normalize(),
            Err(TslmError::NonFinite { index: 1 })
        ));
        assert!(matches!(TimeSeries::new(vec![], "x").normalize(), Err(TslmError::EmptySeries)));
    }

    #[test]
    fn fmt_g_matches_c_printf() {
        let cases = [
            (61.0, "61"),
            (12.0, "12"),
            (0.5, "0.5"),
            (-3.2434, "-3.2434"),
            (1.0 / 3.0, "0.333333"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (999999.5, "1e+06"),
            (100.0, "100"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g(x), want, "fmt_g({x})");
        }
    }

    #[test]
    fn patch_count_law_exhaustive() {
        for p in 1..=8 {
            for len in 1..=64 {
                let cfg = PatchConfig { patch_size: p, embed_dim: 3, max_patches: 64 };
                let mut store = ParamStore::new(DType::F64, 0);
                let enc = PatchEncoder::new(cfg, &mut store, "enc").unwrap();
                let values: Vec<f64> = (0..len).map(|i| (i as f64 * 0.1).sin()).collect();
                let out = enc.encode(&TimeSeries::new(values, "")).unwrap();
                let expect = (len + p - 1) / p;
                assert_eq!(out.num_patches, expect);
                assert_eq!(out.embeddings.dims(), &[expect, 3]);
            }
        }
    }

    #[test]
    fn zero_state_gives_zero_embeddings() {
        let cfg = PatchConfig { patch_size: 4, embed_dim: 8, max_patches: 32 };
        let mut store = ParamStore::new(DType::F64, 1);
        let enc = PatchEncoder::new(cfg, &mut store, "enc").unwrap();
        for p in store.iter() {
            p.set(&p.var().zeros_like().unwrap()).unwrap();
        }
        let out = enc.encode(&TimeSeries::new(vec![0.3; 64], "")).unwrap();
        assert_eq!(out.num_patches, 16);
        let v = crate::ops::to_f64_vec(&out.embeddings).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tap_kernel_recovers_first_sample_of_each_patch() {
        let cfg = PatchConfig { patch_size: 2, embed_dim: 3, max_patches: 8 };
        let mut store = ParamStore::new(DType::F64, 2);
        let enc = PatchEncoder::new(cfg, &mut store, "enc").unwrap();
        // channel 1 taps offset 0; everything else zero
        let mut w = vec![0.0; 6];
        w[1] = 1.0;
        enc.weight.set(&Tensor::from_vec(w.clone(), (2, 3), &candle_core::Device::Cpu).unwrap()).unwrap();
        enc.positions.set(&enc.positions.var().zeros_like().unwrap()).unwrap();
        let input = [0.25, -0.5, 0.75, 1.0];
        let out = enc.encode(&TimeSeries::new(input.to_vec(), "")).unwrap();
        let got: Vec<Vec<f64>> = out.embeddings.to_vec2().unwrap();
        // naive loop oracle
        for (i, row) in got.iter().enumerate() {
            for c in 0..3 {
                let expect: f64 = (0..2).map(|k| input[i * 2 + k] * w[k * 3 + c]).sum();
                assert_eq!(row[c], expect);
            }
        }
        assert_eq!(got[0][1], 0.25);
        assert_eq!(got[1][1], 0.75);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = PatchEncoder::new(PatchConfig::default(), &mut store, "enc").unwrap();
        assert!(matches!(enc.encode(&TimeSeries::new(vec![], "")), Err(TslmError::EmptySeries)));
        assert!(matches!(
            enc.encode(&TimeSeries::new(vec![0.0, f64::INFINITY], "")),
            Err(TslmError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn locality_of_patch_perturbation() {
        let cfg = PatchConfig { patch_size: 4, embed_dim: 5, max_patches: 16 };
        let mut store = ParamStore::new(DType::F64, 3);
        let enc = PatchEncoder::new(cfg, &mut store, "enc").unwrap();
        let base: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).cos()).collect();
        let a: Vec<Vec<f64>> = enc.encode(&TimeSeries::new(base.clone(), "")).unwrap().embeddings.to_vec2().unwrap();
        for patch in 0..5 {
            let mut moved = base.clone();
            moved[patch * 4 + 2] += 0.5;
            let b: Vec<Vec<f64>> =
                enc.encode(&TimeSeries::new(moved, "")).unwrap().embeddings.to_vec2().unwrap();
            for row in 0..5 {
                assert_eq!(a[row] == b[row], row != patch, "patch {patch} row {row}");
            }
        }
    }
}
