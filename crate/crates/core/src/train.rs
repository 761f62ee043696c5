//! AdamW training with linear warmup, cosine annealing, early stopping and
//! checkpointing.
//!
//! Batches run sample-parallel: each sample owns a private tape, and the
//! per-sample gradients are reduced in sample order, so results are bitwise
//! identical regardless of thread count. All shuffling derives from
//! (seed, epoch), which lets a resumed run reproduce the continuous one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{round_to_f32, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{bind_params, forward_on_tape, ModelInput, SmtParams};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_peak: f64,
    pub lr_warmup_start: f64,
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of the peak.
    pub cosine_final_ratio: f64,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 100,
            lr_peak: 5e-4,
            lr_warmup_start: 5e-5,
            warmup_epochs: 2,
            cosine_final_ratio: 0.5,
            early_stop_patience: 20,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.lr_peak <= 0.0 || self.lr_warmup_start <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("learning rates and eps must be positive".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate at a (possibly fractional) epoch position: linear warmup
/// from `lr_warmup_start` to `lr_peak` over `warmup_epochs`, then cosine
/// annealing down to `lr_peak * cosine_final_ratio` at `epochs`.
pub fn lr_schedule(epoch_fraction: f64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs as f64;
    let e = cfg.epochs as f64;
    if epoch_fraction < w {
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * epoch_fraction / w;
    }
    let lr_final = cfg.lr_peak * cfg.cosine_final_ratio;
    if e <= w {
        return cfg.lr_peak;
    }
    let progress = ((epoch_fraction - w) / (e - w)).clamp(0.0, 1.0);
    lr_final + (cfg.lr_peak - lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter AdamW moments, indexed like `SmtParams::tensors`
/// (empty slots for the fixed tensors).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &SmtParams) -> Self {
        let m = params
            .tensors
            .iter()
            .map(|t| if t.learnable { vec![0.0; t.numel()] } else { Vec::new() })
            .collect::<Vec<_>>();
        OptimizerState { step: 0, v: m.clone(), m }
    }

    /// Round moments to storage precision (done when a resumable checkpoint
    /// is written, so resumed runs match continuous ones bitwise).
    pub fn canonicalize(&mut self) {
        for m in self.m.iter_mut() {
            round_to_f32(m);
        }
        for v in self.v.iter_mut() {
            round_to_f32(v);
        }
    }
}

/// One AdamW step: bias-corrected adaptive update plus decoupled weight
/// decay, both computed from the pre-step parameter values. Tensors flagged
/// `weight_decay = false` (biases, LN, positions, prediction token) skip the
/// decay term.
pub fn adamw_step(
    params: &mut SmtParams,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    debug_assert_eq!(grads.len(), params.tensors.len());
    for (i, tensor) in params.tensors.iter().enumerate() {
        if !tensor.learnable {
            continue;
        }
        if !grads[i].iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGrad { param: tensor.name.clone() });
        }
    }
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);

    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        if !tensor.learnable {
            continue;
        }
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let decay = if tensor.weight_decay { cfg.weight_decay } else { 0.0 };
        for j in 0..tensor.values.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            let theta = tensor.values[j];
            tensor.values[j] = theta - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * theta);
        }
    }
    Ok(())
}

/// One training example: model inputs plus the normalized target.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: ModelInput,
    pub target: f64,
}

/// Mean per-sample squared-error loss and mean gradients over a batch.
/// Sample passes run in parallel; the reduction is in sample order.
pub fn batch_grads(params: &SmtParams, batch: &[&TrainSample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new();
            let binding = bind_params(&mut tape, params);
            let nodes = forward_on_tape(&mut tape, params, &binding, &sample.input)?;
            let target = tape.leaf(vec![sample.target], vec![1, 1]);
            let loss = tape.mse_loss(nodes.pred, target)?;
            tape.backward(loss)?;
            let grads = params
                .tensors
                .iter()
                .zip(&binding.leaves)
                .map(|(t, &leaf)| {
                    if t.learnable {
                        tape.grad(leaf).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            Ok((tape.scalar(loss), grads))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut acc: Vec<Vec<f64>> = params
        .tensors
        .iter()
        .map(|t| if t.learnable { vec![0.0; t.numel()] } else { Vec::new() })
        .collect();
    for result in per_sample {
        let (loss, grads) = result?;
        loss_sum += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (av, gv) in a.iter_mut().zip(g) {
                *av += gv;
            }
        }
    }
    for a in acc.iter_mut() {
        for v in a.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum * scale, acc))
}

/// Mean squared error of the model over a sample set (normalized scale).
pub fn evaluate_mse(params: &SmtParams, samples: &[TrainSample]) -> Result<f64> {
    let preds: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| crate::model::predict(params, &s.input))
        .collect();
    let mut sum = 0.0;
    for (pred, sample) in preds.into_iter().zip(samples) {
        let d = pred? - sample.target;
        sum += d * d;
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Mid-run resumable checkpoint, when one was requested.
    pub snapshot: Option<Checkpoint>,
}

/// Optimizer state plus position for continuing an interrupted run.
pub struct ResumeState {
    pub optimizer: OptimizerState,
    pub next_epoch: usize,
    pub best_val_loss: f64,
}

impl ResumeState {
    pub fn from_checkpoint(ckpt: &Checkpoint, params: &SmtParams) -> Result<Self> {
        let optimizer = ckpt
            .restore_optimizer(params)
            .ok_or_else(|| Error::Contract("checkpoint carries no optimizer state".into()))?;
        Ok(ResumeState {
            optimizer,
            next_epoch: ckpt.epoch as usize + 1,
            best_val_loss: ckpt.best_val_loss,
        })
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn train(
    params: &mut SmtParams,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(params, train_set, val_set, cfg, None, None)
}

/// Full training driver. `snapshot_epoch` writes a resumable checkpoint after
/// that epoch (canonicalizing the live state to storage precision); `resume`
/// continues from such a checkpoint.
pub fn train_with(
    params: &mut SmtParams,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
    snapshot_epoch: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("train and validation splits must be non-empty".into()));
    }

    let (mut state, start_epoch, mut best_val) = match resume {
        Some(r) => (r.optimizer, r.next_epoch, r.best_val_loss),
        None => (OptimizerState::new(params), 0, f64::INFINITY),
    };
    let mut best: Option<Checkpoint> = None;
    let mut snapshot = None;
    let mut history = Vec::new();
    let mut epochs_since_improvement = 0usize;

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(epoch as f64, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        let mut train_loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_grads(params, &batch)?;
            adamw_step(params, &grads, &mut state, lr, cfg)?;
            train_loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_mse = train_loss_sum / seen as f64;
        let val_mse = evaluate_mse(params, val_set)?;
        history.push(EpochStats { epoch, lr, train_mse, val_mse });

        if val_mse < best_val {
            best_val = val_mse;
            epochs_since_improvement = 0;
            best = Some(Checkpoint::from_params(params, *cfg, None, best_val, epoch as u32));
        } else {
            epochs_since_improvement += 1;
        }

        if snapshot_epoch == Some(epoch) {
            // round live state to storage precision so a resume is bitwise
            // equal to continuing this very run
            for t in params.tensors.iter_mut() {
                round_to_f32(&mut t.values);
            }
            state.canonicalize();
            snapshot = Some(Checkpoint::from_params(
                params,
                *cfg,
                Some(&state),
                best_val,
                epoch as u32,
            ));
        }

        if epochs_since_improvement >= cfg.early_stop_patience {
            break;
        }
    }

    let best = best.unwrap_or_else(|| {
        Checkpoint::from_params(params, *cfg, None, best_val, cfg.epochs.saturating_sub(1) as u32)
    });
    Ok(TrainOutcome { best, history, snapshot })
}

/// Write per-epoch statistics as CSV (`epoch,lr,train_mse,val_mse`).
pub fn write_history(path: &std::path::Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_mse,val_mse\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_mse, h.val_mse));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
