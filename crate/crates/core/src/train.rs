//! Staged training: per-group AdamW, linear warmup/decay, global-norm
//! clipping, per-epoch validation with early stopping.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::data::MultimodalPrompt;
use crate::error::{Result, TslmError};
use crate::model::TslmModel;
use crate::ops::scalar_f64;
use crate::params::{Census, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub lr_encoder: f64,
    pub lr_adapter: f64,
    pub lr_projector: f64,
    pub lr_cross_attn: f64,
    pub lr_special_tokens: f64,
    pub lr_backbone: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    /// Cap on validation samples scored per epoch; 0 means all.
    pub val_limit: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr_encoder: 2e-4,
            lr_adapter: 2e-4,
            lr_projector: 1e-4,
            lr_cross_attn: 2e-4,
            lr_special_tokens: 2e-4,
            lr_backbone: 2e-4,
            warmup_fraction: 0.1,
            grad_clip: 1.0,
            weight_decay: 0.01,
            epochs: 200,
            patience: 5,
            batch_size: 8,
            grad_accum: 1,
            seed: 0,
            val_limit: 0,
        }
    }
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TslmError::Config(m.into()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        Ok(())
    }

    pub fn lr(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Adapter => self.lr_adapter,
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Projector => self.lr_projector,
            ParamGroup::CrossAttn => self.lr_cross_attn,
            ParamGroup::SpecialTokens => self.lr_special_tokens,
        }
    }
}

/// Multiplier on the base learning rate for update `step` (0-based) of
/// `total`: rises linearly to 1 at the end of warmup, then falls linearly to
/// 0 at `total`.
pub fn lr_factor(step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if step < warmup {
        step as f64 / warmup as f64
    } else if total > warmup {
        (total - step.min(total)) as f64 / (total - warmup) as f64
    } else {
        1.0
    }
}

pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).round() as usize).max(1).min(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr_factor: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning-rate multiplier at the last update of the epoch.
    pub lr_factor: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub peak_mem_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// 1-based epoch of the restored weights; 0 means the initial state.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub planned_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
}

impl TrainReport {
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,split,loss,lr,grad_norm,peak_mem_bytes")?;
        for e in &self.epochs {
            writeln!(w, "{},train,{},{},{},{}", e.epoch, e.train_loss, e.lr_factor, e.grad_norm_pre, e.peak_mem_bytes)?;
            writeln!(w, "{},val,{},{},{},{}", e.epoch, e.val_loss, e.lr_factor, e.grad_norm_post, e.peak_mem_bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_step_log(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,epoch,loss,lr,grad_norm_pre,grad_norm_post")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{},{},{}", s.step, s.epoch, s.loss, s.lr_factor, s.grad_norm_pre, s.grad_norm_post)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The trainable/frozen listing for a model.
pub fn freeze_report(model: &TslmModel) -> Census {
    model.census()
}

struct GroupOpt {
    base_lr: f64,
    opt: AdamW,
}

fn global_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar_f64(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

fn scale_grads(grads: &mut GradStore, vars: &[Var], k: f64) -> Result<()> {
    for v in vars {
        if let Some(g) = grads.remove(v.as_tensor()) {
            grads.insert(v.as_tensor(), (g * k)?);
        }
    }
    Ok(())
}

/// Mean loss over `samples` in batches, no updates.
pub fn evaluate_loss(model: &TslmModel, samples: &[MultimodalPrompt], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for batch in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&MultimodalPrompt> = batch.iter().collect();
        total += scalar_f64(&model.loss(&refs)?.detach())? * batch.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train the model's trainable parameters on `train`, choosing the epoch
/// with the lowest loss on `val`. On return the model holds the best
/// weights seen (the initial ones if no epoch improved on them).
pub fn train_stage(
    model: &TslmModel,
    train: &[MultimodalPrompt],
    val: &[MultimodalPrompt],
    opt: &OptimSettings,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    opt.validate()?;
    let val = if opt.val_limit > 0 && val.len() > opt.val_limit { &val[..opt.val_limit] } else { val };
    let per_update = opt.batch_size * opt.grad_accum;
    let updates_per_epoch = train.len().div_ceil(per_update);
    let total = updates_per_epoch * opt.epochs;
    let warmup = warmup_steps(total, opt.warmup_fraction);

    let trainable = model.store.trainable();
    let mut groups: BTreeMap<ParamGroup, Vec<Var>> = BTreeMap::new();
    for p in &trainable {
        groups.entry(p.group()).or_default().push(p.var().clone());
    }
    let all_vars: Vec<Var> = trainable.iter().map(|p| p.var().clone()).collect();
    let mut optims = Vec::new();
    for (g, vars) in groups {
        let base_lr = opt.lr(g);
        let params = ParamsAdamW { lr: 0.0, weight_decay: opt.weight_decay, ..Default::default() };
        optims.push(GroupOpt { base_lr, opt: AdamW::new(vars, params)? });
    }

    // without a validation split the training loss picks the epoch
    let initial_val = if val.is_empty() { f64::INFINITY } else { evaluate_loss(model, val, opt.batch_size)? };
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut best = model.store.snapshot()?;
    let mut report = TrainReport {
        initial_val_loss: initial_val,
        epochs: vec![],
        steps: vec![],
        best_epoch: 0,
        best_val_loss: initial_val,
        stopped_early: false,
        planned_steps: total,
        warmup_steps: warmup,
        batch_size: opt.batch_size,
        grad_accum: opt.grad_accum,
    };
    if opt.epochs == 0 || train.is_empty() || all_vars.is_empty() {
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=opt.epochs {
        alloc::reset_peak();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0.0;
        let (mut last_pre, mut last_post, mut last_lr) = (0.0, 0.0, 0.0);
        for update in order.chunks(per_update) {
            let mut acc: Option<GradStore> = None;
            let mut update_loss = 0.0;
            let micro: Vec<&[usize]> = update.chunks(opt.batch_size).collect();
            // each micro-batch loss is a mean over its target tokens, so
            // weighting by token share makes the sum equal one big batch
            let tokens = |ix: &[usize]| ix.iter().map(|&i| train[i].target.chars().count() + 1).sum::<usize>() as f64;
            let update_tokens = tokens(update);
            for mb in &micro {
                let refs: Vec<&MultimodalPrompt> = mb.iter().map(|&i| &train[i]).collect();
                let loss = model.loss(&refs)?;
                let lv = scalar_f64(&loss)?;
                if !lv.is_finite() {
                    return Err(TslmError::Diverged { epoch, step, loss: lv });
                }
                update_loss += lv * tokens(mb);
                // weight each micro-batch by its share of the update
                let grads = (loss * (tokens(mb) / update_tokens))?.backward()?;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for v in &all_vars {
                            if let Some(g) = grads.get(v.as_tensor()) {
                                let sum = match a.remove(v.as_tensor()) {
                                    Some(prev) => (prev + g)?,
                                    None => g.clone(),
                                };
                                a.insert(v.as_tensor(), sum);
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty update");
            let pre = global_norm(&grads, &all_vars)?;
            if !pre.is_finite() {
                return Err(TslmError::Diverged { epoch, step, loss: pre });
            }
            if pre > opt.grad_clip {
                scale_grads(&mut grads, &all_vars, opt.grad_clip / pre)?;
            }
            let post = global_norm(&grads, &all_vars)?;
            let f = lr_factor(step, total, warmup);
            for g in optims.iter_mut() {
                g.opt.set_learning_rate(g.base_lr * f);
                g.opt.step(&grads)?;
            }
            let mean_loss = update_loss / update_tokens;
            report.steps.push(StepRecord { step, epoch, loss: mean_loss, lr_factor: f, grad_norm_pre: pre, grad_norm_post: post });
            if step % 50 == 0 {
                log::info!("epoch {epoch} step {step}/{total} loss {mean_loss:.4} lr x{f:.3} |g| {pre:.3}");
            }
            loss_sum += update_loss;
            loss_n += update_tokens;
            (last_pre, last_post, last_lr) = (pre, post, f);
            step += 1;
        }
        let train_loss = loss_sum / loss_n;
        let val_loss = if val.is_empty() { train_loss } else { evaluate_loss(model, val, opt.batch_size)? };
        if !val_loss.is_finite() {
            return Err(TslmError::Diverged { epoch, step, loss: val_loss });
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr_factor: last_lr,
            grad_norm_pre: last_pre,
            grad_norm_post: last_post,
            peak_mem_bytes: alloc::peak_bytes(),
        };
        log::info!("epoch {epoch}: train {:.4} val {:.4}", rec.train_loss, rec.val_loss);
        on_epoch(&rec);
        report.epochs.push(rec);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.store.snapshot()?;
        } else if epoch - best_epoch >= opt.patience {
            report.stopped_early = true;
            break;
        }
    }
    model.store.restore(&best)?;
    report.best_epoch = best_epoch;
    report.best_val_loss = best_val;
    Ok(report)
}

/// Lowest-loss epoch index helper for log assertions: the epoch after which
/// no validation improvement happened.
pub fn last_improvement(epochs: &[EpochRecord], initial: f64) -> usize {
    let mut best = initial;
    let mut at = 0;
    for e in epochs {
        if e.val_loss < best {
            best = e.val_loss;
            at = e.epoch;
        }
    }
    at
}
