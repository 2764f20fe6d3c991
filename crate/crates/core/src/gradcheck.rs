//! Central finite-difference check of autograd gradients.

use candle_core::Tensor;

use crate::error::{Result, TslmError};
use crate::ops::{scalar_f64, to_f64_vec};
use crate::params::Param;

#[derive(Debug, Clone)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }

    /// Relative error within `rel`, or absolute error below `abs_floor` for
    /// entries whose true gradient is essentially zero.
    pub fn passes(&self, rel: f64, abs_floor: f64) -> bool {
        (self.analytic - self.numeric).abs() <= abs_floor || self.rel_err() <= rel
    }
}

/// Compare d loss / d param at `indices` (flat) against
/// `(f(x + eps) - f(x - eps)) / 2 eps`. `loss` is re-evaluated for every
/// probe, so it must read the parameter afresh each call.
pub fn check_param(
    loss: &dyn Fn() -> Result<Tensor>,
    param: &Param,
    indices: &[usize],
    eps: f64,
) -> Result<Vec<GradProbe>> {
    let l = loss()?;
    let grads = l.backward()?;
    let g = grads
        .get(param.var().as_tensor())
        .ok_or_else(|| TslmError::Shape(format!("no gradient reached {}", param.name())))?;
    let g = to_f64_vec(g)?;
    let original = param.var().as_tensor().copy()?;
    let base = to_f64_vec(&original)?;
    let shape = original.dims().to_vec();
    let mut out = Vec::with_capacity(indices.len());
    let eval_at = |values: &[f64]| -> Result<f64> {
        param.set(&Tensor::from_vec(values.to_vec(), shape.as_slice(), original.device())?)?;
        scalar_f64(&loss()?)
    };
    for &i in indices {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        let plus = eval_at(&v)?;
        v[i] = base[i] - eps;
        let minus = eval_at(&v)?;
        out.push(GradProbe {
            param: param.name().to_string(),
            index: i,
            analytic: g[i],
            numeric: (plus - minus) / (2.0 * eps),
        });
    }
    param.set(&original)?;
    Ok(out)
}
