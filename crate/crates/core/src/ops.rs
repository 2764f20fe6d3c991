//! Tensor helpers shared by the backbone and both fusion modules.
//!
//! The softmax here is a fused custom op: the forward pass keeps only its
//! input and output alive in the autograd graph, and the backward pass is a
//! single fused kernel. Rows whose logits are all `-inf` produce zeros, which
//! is what the chunk-scoped cross-attention mask relies on.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType, D};
use num_traits::Float;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct FusedSoftmax {
    /// When set, key `j` is visible to query row `i` only if `j <= i + offset`.
    causal_offset: Option<usize>,
}

fn contiguous<'a, T>(src: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&src[a..b]),
        None => candle_core::bail!("fused softmax expects a contiguous tensor"),
    }
}

fn softmax_rows<T: WithDType + Float>(
    src: &[T],
    layout: &Layout,
    causal_offset: Option<usize>,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let src = contiguous(src, layout)?;
    let dims = layout.shape().dims();
    let cols = *dims.last().unwrap_or(&1);
    let rows_per_mat = if dims.len() >= 2 { dims[dims.len() - 2] } else { 1 };
    let mut dst = vec![T::zero(); src.len()];
    if cols > 0 {
        for (r, (s, d)) in src.chunks(cols).zip(dst.chunks_mut(cols)).enumerate() {
            let limit = match causal_offset {
                Some(off) => ((r % rows_per_mat) + off + 1).min(cols),
                None => cols,
            };
            let mut max = T::neg_infinity();
            for &v in &s[..limit] {
                if v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for (o, &v) in d[..limit].iter_mut().zip(&s[..limit]) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in d[..limit].iter_mut() {
                *o = *o / sum;
            }
        }
    }
    Ok((T::to_cpu_storage_owned(dst), layout.shape().clone()))
}

impl CustomOp1 for FusedSoftmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match storage {
            CpuStorage::F32(s) => softmax_rows(s, layout, self.causal_offset),
            CpuStorage::F64(s) => softmax_rows(s, layout, self.causal_offset),
            _ => candle_core::bail!("fused softmax supports f32 and f64 only"),
        }
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.contiguous()?;
        let res = res.contiguous()?;
        Ok(Some(res.apply_op2_no_bwd(&grad, &SoftmaxGrad)?))
    }
}

/// d_in = s * (g - sum(g * s)) row-wise.
struct SoftmaxGrad;

fn softmax_grad_rows<T: WithDType + Float>(
    s: &[T],
    ls: &Layout,
    g: &[T],
    lg: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let s = contiguous(s, ls)?;
    let g = contiguous(g, lg)?;
    let cols = *ls.shape().dims().last().unwrap_or(&1);
    let mut out = vec![T::zero(); s.len()];
    if cols > 0 {
        for ((sr, gr), o) in s.chunks(cols).zip(g.chunks(cols)).zip(out.chunks_mut(cols)) {
            let mut dot = T::zero();
            for (&a, &b) in sr.iter().zip(gr) {
                dot = dot + a * b;
            }
            for ((o, &a), &b) in o.iter_mut().zip(sr).zip(gr) {
                *o = a * (b - dot);
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), ls.shape().clone()))
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => softmax_grad_rows(a, l1, b, l2),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => softmax_grad_rows(a, l1, b, l2),
            _ => candle_core::bail!("fused softmax grad: dtype mismatch"),
        }
    }
}

/// Softmax over the last dimension.
pub fn softmax(xs: &Tensor) -> Result<Tensor> {
    Ok(xs.contiguous()?.apply_op1(FusedSoftmax { causal_offset: None })?)
}

/// Softmax over the last dimension of `(.., q, k)` logits with a causal
/// mask applied in-kernel: query row `i` sees keys `0..=i + offset`.
pub fn causal_softmax(xs: &Tensor, offset: usize) -> Result<Tensor> {
    Ok(xs.contiguous()?.apply_op1(FusedSoftmax { causal_offset: Some(offset) })?)
}

/// `x @ w (+ b)` for `w` and `b` outside the autograd graph. Plain `matmul`
/// would still build (and keep) a gradient for `w` during backward; this op
/// only propagates to `x`, which matters when a large backbone is frozen.
struct FrozenMatmul {
    w: Tensor,
    b: Option<Tensor>,
}

impl FrozenMatmul {
    fn apply(&self, s: &CpuStorage, l: &Layout, extra: Option<(&CpuStorage, &Layout)>) -> candle_core::Result<(CpuStorage, Shape)> {
        let mut y = cpu_tensor(s, l)?.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b)?;
        }
        if let Some((s, l)) = extra {
            y = (y + cpu_tensor(s, l)?)?;
        }
        into_storage(&y)
    }
}

impl CustomOp1 for FrozenMatmul {
    fn name(&self) -> &'static str {
        "frozen-matmul"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        self.apply(s, l, None)
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.matmul(&self.w.t()?)?))
    }
}

/// The same with a tracked `(rows, out)` addend, so a low-rank update joins
/// the frozen product without another full-width intermediate.
impl CustomOp2 for FrozenMatmul {
    fn name(&self) -> &'static str {
        "frozen-matmul-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        if l2.shape().dims() != [l1.dims()[0], self.w.dim(1)?] {
            candle_core::bail!("frozen matmul addend has shape {:?}", l2.shape());
        }
        self.apply(s1, l1, Some((s2, l2)))
    }

    fn bwd(&self, _x: &Tensor, _a: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.matmul(&self.w.t()?)?), Some(grad.clone())))
    }
}

/// `x @ w (+ b) (+ add)` over the last dimension of `x`, any number of
/// leading dims; `add` has the output's shape. A `w` that is not a variable
/// is treated as a constant (see [`FrozenMatmul`]).
pub fn linear_add(x: &Tensor, w: &Tensor, b: Option<&Tensor>, add: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims();
    let inner = *dims.last().unwrap_or(&0);
    let out = w.dim(1)?;
    let rows = x.elem_count() / inner.max(1);
    let x2 = x.reshape((rows, inner))?;
    let frozen = !w.track_op() && !b.is_some_and(|b| b.track_op());
    let y = if frozen && (x.track_op() || add.is_some_and(|a| a.track_op())) {
        let op = FrozenMatmul { w: w.contiguous()?, b: b.cloned() };
        match add {
            None => x2.contiguous()?.apply_op1(op)?,
            Some(a) => x2.contiguous()?.apply_op2(&a.reshape((rows, out))?.contiguous()?, op)?,
        }
    } else {
        let mut y = x2.matmul(w)?;
        if let Some(b) = b {
            y = y.broadcast_add(b)?;
        }
        if let Some(a) = add {
            y = (y + a.reshape((rows, out))?)?;
        }
        y
    };
    let mut shape = dims.to_vec();
    *shape.last_mut().unwrap() = out;
    Ok(y.reshape(shape)?)
}

pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    linear_add(x, w, b, None)
}

const LN_EPS: f64 = 1e-5;

/// Layer norm over the last dimension as one op: the graph keeps the input
/// alone and the backward pass recomputes the row statistics.
struct FusedLayerNorm;

fn ln_stats<T: Float>(row: &[T]) -> (T, T) {
    let n = T::from(row.len()).unwrap_or_else(T::one);
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, (var + T::from(LN_EPS).unwrap_or_else(T::zero)).sqrt().recip())
}

fn ln_forward<T: Float>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let d = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let (mean, rstd) = ln_stats(row);
        out.extend(row.iter().zip(g.iter().zip(b)).map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi));
    }
    out
}

fn ln_backward<T: Float>(x: &[T], g: &[T], go: &[T]) -> Triple<T> {
    let d = g.len();
    let n = T::from(d).unwrap_or_else(T::one);
    let mut dx = Vec::with_capacity(x.len());
    let mut dg = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    for (row, gr) in x.chunks_exact(d).zip(go.chunks_exact(d)) {
        let (mean, rstd) = ln_stats(row);
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            let gy = gr[j] * g[j];
            s1 = s1 + gy;
            s2 = s2 + gy * xhat[j];
            dg[j] = dg[j] + gr[j] * xhat[j];
            db[j] = db[j] + gr[j];
        }
        let (m1, m2) = (s1 / n, s2 / n);
        dx.extend((0..d).map(|j| rstd * (gr[j] * g[j] - m1 - xhat[j] * m2)));
    }
    (dx, dg, db)
}

impl candle_core::CustomOp3 for FusedLayerNorm {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        sx: &CpuStorage,
        lx: &Layout,
        sg: &CpuStorage,
        lg: &Layout,
        sb: &CpuStorage,
        lb: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let storage = match (sx, sg, sb) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(ln_forward(contiguous(x, lx)?, contiguous(g, lg)?, contiguous(b, lb)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(ln_forward(contiguous(x, lx)?, contiguous(g, lg)?, contiguous(b, lb)?))
            }
            _ => candle_core::bail!("layer norm needs matching f32 or f64 inputs"),
        };
        Ok((storage, lx.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        g: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (sx, lx) = x.storage_and_layout();
        let (sg, lg) = g.storage_and_layout();
        let (so, lo) = grad.storage_and_layout();
        use candle_core::Storage::Cpu;
        let dev = x.device();
        let (dx, dg, db) = match (&*sx, &*sg, &*so) {
            (Cpu(CpuStorage::F32(x_)), Cpu(CpuStorage::F32(g_)), Cpu(CpuStorage::F32(o_))) => {
                let (a, b, c) = ln_backward(contiguous(x_, lx)?, contiguous(g_, lg)?, contiguous(o_, lo)?);
                (Tensor::from_vec(a, x.shape(), dev)?, Tensor::from_vec(b, g.shape(), dev)?, Tensor::from_vec(c, g.shape(), dev)?)
            }
            (Cpu(CpuStorage::F64(x_)), Cpu(CpuStorage::F64(g_)), Cpu(CpuStorage::F64(o_))) => {
                let (a, b, c) = ln_backward(contiguous(x_, lx)?, contiguous(g_, lg)?, contiguous(o_, lo)?);
                (Tensor::from_vec(a, x.shape(), dev)?, Tensor::from_vec(b, g.shape(), dev)?, Tensor::from_vec(c, g.shape(), dev)?)
            }
            _ => candle_core::bail!("layer norm backward needs matching f32 or f64 cpu tensors"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Normalise the last dimension of `x`, then scale by `gamma` and shift by
/// `beta` (both `(d,)`).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = x.dim(D::Minus1)?;
    if gamma.dims() != [d] || beta.dims() != [d] {
        return Err(crate::error::TslmError::Shape(format!("layer norm over {d} with gamma {:?}", gamma.dims())));
    }
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, FusedLayerNorm)?)
}

/// Multi-head attention that never keeps the score matrix: the graph holds
/// q, k, v and the output, the forward pass works through blocks of query
/// rows, and the backward pass recomputes each block's probabilities.
/// Transient memory is one block of scores.
struct FusedAttention {
    heads: usize,
    scale: f64,
    /// Query row `i` sees keys `0..=i + offset` when set.
    causal_offset: Option<usize>,
}

const ATTN_BLOCK: usize = 128;

fn cpu_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let dev = candle_core::Device::Cpu;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(contiguous(v, l)?, l.shape(), &dev),
        CpuStorage::F64(v) => Tensor::from_slice(contiguous(v, l)?, l.shape(), &dev),
        _ => candle_core::bail!("expected f32 or f64 storage"),
    }
}

fn into_storage(t: &Tensor) -> candle_core::Result<(CpuStorage, Shape)> {
    let t = t.contiguous()?;
    let shape = t.shape().clone();
    let (st, l) = t.storage_and_layout();
    let (a, b) = l.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("non-contiguous result".into()))?;
    match &*st {
        candle_core::Storage::Cpu(CpuStorage::F32(v)) => Ok((CpuStorage::F32(v[a..b].to_vec()), shape)),
        candle_core::Storage::Cpu(CpuStorage::F64(v)) => Ok((CpuStorage::F64(v[a..b].to_vec()), shape)),
        _ => candle_core::bail!("expected an f32 or f64 cpu tensor"),
    }
}

struct AttnPlan {
    b: usize,
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    scale: f64,
    causal_offset: Option<usize>,
}

impl AttnPlan {
    /// `(B, rows, d)` to `(B, heads, rows, d / heads)`.
    fn split(&self, t: &Tensor) -> candle_core::Result<Tensor> {
        let rows = t.dim(1)?;
        t.reshape((self.b, rows, self.heads, self.d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    fn merge(&self, t: &Tensor) -> candle_core::Result<Tensor> {
        let rows = t.dim(2)?;
        t.transpose(1, 2)?.contiguous()?.reshape((self.b, rows, self.d))
    }

    /// Keys visible to any row of the block starting at `r0`.
    fn visible(&self, r0: usize, rb: usize) -> usize {
        match self.causal_offset {
            Some(off) => (r0 + rb + off).min(self.n),
            None => self.n,
        }
    }

    /// Probabilities `(B, heads, rb, nv)` of query rows `r0..r0 + rb`.
    fn probs(&self, qb: &Tensor, kb: &Tensor, r0: usize) -> candle_core::Result<Tensor> {
        let (rb, nv) = (qb.dim(2)?, kb.dim(2)?);
        let mut s = (qb.matmul(&kb.t()?)? * self.scale)?;
        if let Some(off) = self.causal_offset {
            let mask: Vec<f64> = (0..rb)
                .flat_map(|i| (0..nv).map(move |j| if j <= r0 + i + off { 0.0 } else { f64::NEG_INFINITY }))
                .collect();
            let mask = Tensor::from_vec(mask, (rb, nv), qb.device())?.to_dtype(qb.dtype())?;
            s = s.broadcast_add(&mask)?;
        }
        let e = s.broadcast_sub(&s.max_keepdim(D::Minus1)?)?.exp()?;
        e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.m).step_by(ATTN_BLOCK).map(|r0| (r0, ATTN_BLOCK.min(self.m - r0)))
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
        if self.n == 0 || self.m == 0 {
            return q.zeros_like();
        }
        let (qh, kh, vh) = (self.split(q)?, self.split(k)?, self.split(v)?);
        let mut out = Vec::new();
        for (r0, rb) in self.blocks() {
            let nv = self.visible(r0, rb);
            let p = self.probs(&qh.narrow(2, r0, rb)?, &kh.narrow(2, 0, nv)?, r0)?;
            out.push(p.matmul(&vh.narrow(2, 0, nv)?)?);
        }
        self.merge(&Tensor::cat(&out, 2)?)
    }

    fn backward(&self, q: &Tensor, k: &Tensor, v: &Tensor, o: &Tensor, go: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        if self.n == 0 || self.m == 0 {
            return Ok((q.zeros_like()?, k.zeros_like()?, v.zeros_like()?));
        }
        let (qh, kh, vh, gh) = (self.split(q)?, self.split(k)?, self.split(v)?, self.split(go)?);
        let rowdot = (&gh * self.split(o)?)?.sum_keepdim(D::Minus1)?;
        let mut dk = kh.zeros_like()?;
        let mut dv = vh.zeros_like()?;
        let mut dq = Vec::new();
        for (r0, rb) in self.blocks() {
            let nv = self.visible(r0, rb);
            let (qb, gb) = (qh.narrow(2, r0, rb)?, gh.narrow(2, r0, rb)?);
            let (kb, vb) = (kh.narrow(2, 0, nv)?, vh.narrow(2, 0, nv)?);
            let p = self.probs(&qb, &kb, r0)?;
            let dp = gb.matmul(&vb.t()?)?;
            let ds = ((p.clone() * dp.broadcast_sub(&rowdot.narrow(2, r0, rb)?)?)? * self.scale)?;
            dq.push(ds.matmul(&kb)?);
            let pad = self.n - nv;
            dk = (dk + ds.t()?.matmul(&qb)?.pad_with_zeros(2, 0, pad)?)?;
            dv = (dv + p.t()?.matmul(&gb)?.pad_with_zeros(2, 0, pad)?)?;
        }
        Ok((self.merge(&Tensor::cat(&dq, 2)?)?, self.merge(&dk)?, self.merge(&dv)?))
    }
}

type Triple<T> = (Vec<T>, Vec<T>, Vec<T>);

impl FusedAttention {
    fn plan(&self, q: &Shape, k: &Shape) -> candle_core::Result<AttnPlan> {
        let (b, m, d) = q.dims3()?;
        let (bk, n, dk) = k.dims3()?;
        if b != bk || d != dk || d % self.heads != 0 {
            candle_core::bail!("attention shapes {q:?} / {k:?} with {} heads", self.heads);
        }
        Ok(AttnPlan { b, m, n, d, heads: self.heads, scale: self.scale, causal_offset: self.causal_offset })
    }
}

impl candle_core::CustomOp3 for FusedAttention {
    fn name(&self) -> &'static str {
        "fused-attention"
    }

    fn cpu_fwd(
        &self,
        sq: &CpuStorage,
        lq: &Layout,
        sk: &CpuStorage,
        lk: &Layout,
        sv: &CpuStorage,
        lv: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if sq.dtype() != sk.dtype() || sq.dtype() != sv.dtype() {
            candle_core::bail!("fused attention needs matching dtypes");
        }
        let plan = self.plan(lq.shape(), lk.shape())?;
        into_storage(&plan.forward(&cpu_tensor(sq, lq)?, &cpu_tensor(sk, lk)?, &cpu_tensor(sv, lv)?)?)
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let plan = self.plan(q.shape(), k.shape())?;
        let (dq, dk, dv) = plan.backward(&q.detach(), &k.detach(), &v.detach(), &res.detach(), &grad.detach())?;
        Ok((Some(dq), Some(dk), Some(dv)))
    }
}

fn fused_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal_offset: Option<usize>) -> Result<Tensor> {
    let d = q.dim(2)?;
    if heads == 0 || d % heads != 0 {
        return Err(crate::error::TslmError::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    Ok(q.contiguous()?.apply_op3(&k.contiguous()?, &v.contiguous()?, FusedAttention { heads, scale, causal_offset })?)
}

/// Multi-head attention of `q` `(B, M, d)` over `k`, `v` `(B, N, d)`,
/// returning `(B, M, d)`. Heads split `d` evenly; scores are scaled by
/// `1/sqrt(d/heads)`. No mask.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    fused_attention(q, k, v, heads, None)
}

/// As [`attention`], with query row `i` limited to keys `0..=i + offset`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, offset: usize) -> Result<Tensor> {
    fused_attention(q, k, v, heads, Some(offset))
}

/// Additive attention mask entry for a blocked key.
pub fn blocked(dtype: DType) -> f64 {
    match dtype {
        DType::F64 | DType::F32 => f64::NEG_INFINITY,
        _ => -1e4,
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn frozen_weight_gets_no_gradient() {
        let dev = Device::Cpu;
        let xv = Var::from_tensor(&Tensor::new(&[[1.0f64, -2.0, 0.5], [0.3, 0.0, 2.0]], &dev).unwrap()).unwrap();
        let w = Tensor::new(&[[0.2f64, 1.0], [-0.7, 0.4], [1.5, -0.1]], &dev).unwrap();
        let frozen = linear(xv.as_tensor(), &w, None).unwrap();
        let plain = xv.as_tensor().matmul(&w).unwrap();
        assert_eq!(to_f64_vec(&frozen).unwrap(), to_f64_vec(&plain).unwrap());
        let g1 = frozen.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = plain.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let a = to_f64_vec(g1.get(xv.as_tensor()).unwrap()).unwrap();
        let b = to_f64_vec(g2.get(xv.as_tensor()).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(g1.get(&w).is_none());
        assert!(g2.get(&w).is_some());
    }

    #[test]
    fn frozen_bias_and_addend_match_plain_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.0f64, 1.0, (2, 3, 4), &dev).unwrap()).unwrap();
        let add = Var::from_tensor(&Tensor::randn(0.0f64, 1.0, (2, 3, 5), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0.0f64, 1.0, (4, 5), &dev).unwrap();
        let b = Tensor::randn(0.0f64, 1.0, 5, &dev).unwrap();
        let fused = linear_add(x.as_tensor(), &w, Some(&b), Some(add.as_tensor())).unwrap();
        let plain = (x.as_tensor().broadcast_matmul(&w).unwrap().broadcast_add(&b).unwrap() + add.as_tensor()).unwrap();
        assert_eq!(fused.dims(), &[2, 3, 5]);
        let g1 = fused.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = plain.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &add] {
            let a = to_f64_vec(g1.get(v.as_tensor()).unwrap()).unwrap();
            let c = to_f64_vec(g2.get(v.as_tensor()).unwrap()).unwrap();
            for (p, q) in a.iter().zip(&c) {
                assert!((p - q).abs() < 1e-10);
            }
        }
        assert!(g1.get(&w).is_none() && g1.get(&b).is_none());
    }

    fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
        let (b, m, d) = q.dims3().unwrap();
        let n = k.dim(1).unwrap();
        let hd = d / heads;
        let split = |t: &Tensor, r| t.reshape((b, r, heads, hd)).unwrap().transpose(1, 2).unwrap().contiguous().unwrap();
        let (qs, ks, vs) = (split(q, m), split(k, n), split(v, n));
        let s = (qs.matmul(&ks.t().unwrap()).unwrap() / (hd as f64).sqrt()).unwrap();
        let e = s.exp().unwrap();
        let p = e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap();
        p.matmul(&vs).unwrap().transpose(1, 2).unwrap().reshape((b, m, d)).unwrap()
    }

    #[test]
    fn fused_attention_matches_reference_values_and_grads() {
        let dev = Device::Cpu;
        let mut seed = 1u64;
        let mut rnd = |shape: (usize, usize, usize)| {
            let n = shape.0 * shape.1 * shape.2;
            let v: Vec<f64> = (0..n)
                .map(|_| {
                    seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect();
            Var::from_vec(v, shape, &dev).unwrap()
        };
        let (q, k, v) = (rnd((2, 3, 8)), rnd((2, 5, 8)), rnd((2, 5, 8)));
        let w = rnd((2, 3, 8));
        let fused = attention(q.as_tensor(), k.as_tensor(), v.as_tensor(), 2).unwrap();
        let refr = reference_attention(q.as_tensor(), k.as_tensor(), v.as_tensor(), 2);
        for (a, b) in to_f64_vec(&fused).unwrap().iter().zip(to_f64_vec(&refr).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g1 = (fused * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (refr * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        for t in [&q, &k, &v] {
            let a = to_f64_vec(g1.get(t.as_tensor()).expect("fused grad")).unwrap();
            let b = to_f64_vec(g2.get(t.as_tensor()).expect("reference grad")).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn causal_attention_spanning_several_blocks_matches_dense_reference() {
        let dev = Device::Cpu;
        let t = 2 * ATTN_BLOCK + 37;
        let mk = || Var::from_tensor(&Tensor::randn(0.0f64, 1.0, (1, t, 6), &dev).unwrap()).unwrap();
        let (q, k, v) = (mk(), mk(), mk());
        let w = Tensor::randn(0.0f64, 1.0, (1, t, 6), &dev).unwrap();
        let fused = causal_attention(q.as_tensor(), k.as_tensor(), v.as_tensor(), 2, 0).unwrap();
        let mask: Vec<f64> = (0..t).flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { f64::NEG_INFINITY })).collect();
        let mask = Tensor::from_vec(mask, (t, t), &dev).unwrap();
        let split = |x: &Tensor| x.reshape((1, t, 2, 3)).unwrap().transpose(1, 2).unwrap().contiguous().unwrap();
        let s = (split(q.as_tensor()).matmul(&split(k.as_tensor()).t().unwrap()).unwrap() / 3f64.sqrt()).unwrap();
        let e = s.broadcast_add(&mask).unwrap().exp().unwrap();
        let p = e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap();
        let dense = p.matmul(&split(v.as_tensor())).unwrap().transpose(1, 2).unwrap().reshape((1, t, 6)).unwrap();
        for (a, b) in to_f64_vec(&fused).unwrap().iter().zip(to_f64_vec(&dense).unwrap()) {
            assert!((a - b).abs() < 1e-10);
        }
        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (dense * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for x in [&q, &k, &v] {
            let a = to_f64_vec(g1.get(x.as_tensor()).unwrap()).unwrap();
            let b = to_f64_vec(g2.get(x.as_tensor()).unwrap()).unwrap();
            for (p, r) in a.iter().zip(&b) {
                assert!((p - r).abs() < 1e-9, "{p} vs {r}");
            }
        }
    }

    #[test]
    fn causal_fused_attention_matches_masked_reference() {
        let dev = Device::Cpu;
        let vals = |n: usize, k: f64| -> Vec<f64> { (0..n).map(|i| (i as f64 * k).sin() * 0.9).collect() };
        let q = Var::from_vec(vals(2 * 2 * 4, 0.7), (2, 2, 4), &dev).unwrap();
        let k = Var::from_vec(vals(2 * 5 * 4, 1.3), (2, 5, 4), &dev).unwrap();
        let v = Var::from_vec(vals(2 * 5 * 4, 2.1), (2, 5, 4), &dev).unwrap();
        // two new queries after three cached keys
        let y = causal_attention(q.as_tensor(), k.as_tensor(), v.as_tensor(), 2, 3).unwrap();
        let (hd, heads) = (2usize, 2usize);
        let (qv, kv, vv) = (to_f64_vec(q.as_tensor()).unwrap(), to_f64_vec(k.as_tensor()).unwrap(), to_f64_vec(v.as_tensor()).unwrap());
        let got = to_f64_vec(&y).unwrap();
        for b in 0..2 {
            for h in 0..heads {
                for i in 0..2 {
                    let vis = i + 4;
                    let s: Vec<f64> = (0..vis)
                        .map(|j| (0..hd).map(|t| qv[(b * 2 + i) * 4 + h * hd + t] * kv[(b * 5 + j) * 4 + h * hd + t]).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let z: f64 = s.iter().map(|x| x.exp()).sum();
                    for t in 0..hd {
                        let want: f64 = (0..vis).map(|j| s[j].exp() / z * vv[(b * 5 + j) * 4 + h * hd + t]).sum();
                        assert!((got[(b * 2 + i) * 4 + h * hd + t] - want).abs() < 1e-12);
                    }
                }
            }
        }
        // gradient through the causal kernel against finite differences
        let w = vals(16, 0.3);
        let wt = Tensor::from_vec(w.clone(), (2, 2, 4), &dev).unwrap();
        let loss = |qq: &Tensor| causal_attention(qq, k.as_tensor(), v.as_tensor(), 2, 3).unwrap().mul(&wt).unwrap().sum_all().unwrap();
        let g = loss(q.as_tensor()).backward().unwrap();
        let gq = to_f64_vec(g.get(q.as_tensor()).unwrap()).unwrap();
        for idx in [0usize, 5, 11, 15] {
            let mut plus = qv.clone();
            plus[idx] += 1e-6;
            let mut minus = qv.clone();
            minus[idx] -= 1e-6;
            let f = |x: Vec<f64>| scalar_f64(&loss(&Tensor::from_vec(x, (2, 2, 4), &dev).unwrap())).unwrap();
            let num = (f(plus) - f(minus)) / 2e-6;
            assert!((num - gq[idx]).abs() < 1e-7, "{num} vs {}", gq[idx]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_rows_vanish() {
        let x = Tensor::new(&[[0.0f64, 1.0, 2.0], [f64::NEG_INFINITY; 3]], &Device::Cpu).unwrap();
        let y = to_f64_vec(&softmax(&x).unwrap()).unwrap();
        assert!((y[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(&y[3..], &[0.0, 0.0, 0.0]);
        let c = to_f64_vec(&causal_softmax(&Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap(), 0).unwrap()).unwrap();
        assert_eq!(c, vec![1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn fused_layer_norm_matches_composed_reference() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.0f64, 1.5, (2, 3, 5), &dev).unwrap()).unwrap();
        let g = Var::from_tensor(&Tensor::randn(1.0f64, 0.3, 5, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0.0f64, 0.3, 5, &dev).unwrap()).unwrap();
        let w = Tensor::randn(0.0f64, 1.0, (2, 3, 5), &dev).unwrap();
        let reference = |x: &Tensor| {
            let mean = x.mean_keepdim(D::Minus1).unwrap();
            let c = x.broadcast_sub(&mean).unwrap();
            let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
            let n = c.broadcast_div(&(var + LN_EPS).unwrap().sqrt().unwrap()).unwrap();
            n.broadcast_mul(g.as_tensor()).unwrap().broadcast_add(b.as_tensor()).unwrap()
        };
        let fused = layer_norm(x.as_tensor(), g.as_tensor(), b.as_tensor()).unwrap();
        let slow = reference(x.as_tensor());
        for (a, c) in to_f64_vec(&fused).unwrap().iter().zip(to_f64_vec(&slow).unwrap()) {
            assert!((a - c).abs() < 1e-12);
        }
        let gf = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gs = (slow * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            let a = to_f64_vec(gf.get(v.as_tensor()).unwrap()).unwrap();
            let c = to_f64_vec(gs.get(v.as_tensor()).unwrap()).unwrap();
            for (p, q) in a.iter().zip(&c) {
                assert!((p - q).abs() < 1e-10, "{p} vs {q}");
            }
        }
    }
}
