//! Deterministic training: AdamW with decoupled weight decay, cosine LR
//! schedule with linear warmup, global-norm gradient clipping, fixed-order
//! gradient accumulation, and per-batch validation losses for pairing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batches, fixed_val_batches, Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{EvalOptions, Model, ParamStore};
use crate::numkern::{Scalar, Tape};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// LR at the final step, as a fraction of peak.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints (final state is still available).
    pub checkpoint_every: usize,
    /// 0 disables periodic validation.
    pub eval_every: usize,
    pub val_batches: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            warmup_steps: 200,
            final_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            grad_accum: 1,
            batch_size: 8,
            seed: 42,
            checkpoint_every: 0,
            eval_every: 0,
            val_batches: 50,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".to_string()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".to_string()));
        }
        if self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::Config("grad_accum and batch_size must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must be in [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// Linear warmup to peak, then cosine decay to final_lr_fraction·lr.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.lr;
        }
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let t = (step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64;
    let floor = cfg.final_lr_fraction;
    cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// First/second moment buffers, one pair per parameter block.
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        AdamState { m, v, step: 0 }
    }
}

/// One decoupled-weight-decay Adam step with bias correction.
///
/// Decay applies only to blocks flagged for it (norms, embeddings,
/// centroids, and the output scalar are exempt). Frozen blocks and blocks
/// without gradients are untouched.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::of_f64(1.0 - cfg.beta1.powf(t));
    let bc2 = T::of_f64(1.0 - cfg.beta2.powf(t));
    let lr_t = T::of_f64(lr);
    let eps = T::of_f64(cfg.eps);
    let wd = T::of_f64(cfg.weight_decay);
    for (i, grad) in grads.iter().enumerate() {
        let param = params.at_mut(i);
        if !param.trainable {
            continue;
        }
        let Some(g) = grad else { continue };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = param.tensor.data_mut();
        for j in 0..data.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let mut update = lr_t * m_hat / (v_hat.sqrt() + eps);
            if param.decay {
                update = update + lr_t * wd * data[j];
            }
            data[j] = data[j] - update;
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let mut sq = T::zero();
    for g in grads.iter().flatten() {
        for &x in g {
            sq = sq + x * x;
        }
    }
    let norm = sq.sqrt().as_f64();
    if norm > max_norm && norm > 0.0 {
        let scale = T::of_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub balance_loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
    pub avg_hops: f64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step={} lm_loss={} balance_loss={} lr={} tokens_seen={} avg_hops={}",
            self.step, self.lm_loss, self.balance_loss, self.lr, self.tokens_seen, self.avg_hops
        )
    }
}

/// Mean loss and perplexity over a fixed validation set, with the
/// per-batch loss vector retained for paired statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_loss: f64,
    pub ppl: f64,
    pub per_batch: Vec<f64>,
}

/// Evaluate on explicit batches (probes reuse this with eval switches).
pub fn eval_on_batches(
    model: &Model<f32>,
    val_batches: &[Batch],
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if val_batches.is_empty() {
        return Err(Error::Config("no validation batches".to_string()));
    }
    let mut per_batch = Vec::with_capacity(val_batches.len());
    for batch in val_batches {
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, batch, false, None, opts)?;
        per_batch.push(tape.value(out.lm_loss).data()[0] as f64);
    }
    let mean_loss = per_batch.iter().sum::<f64>() / per_batch.len() as f64;
    Ok(EvalResult { mean_loss, ppl: mean_loss.exp(), per_batch })
}

/// Perplexity over the fixed enumerated windows of a validation corpus.
pub fn eval_ppl(
    model: &Model<f32>,
    val: &Corpus,
    batch_size: usize,
    max_batches: usize,
) -> Result<EvalResult> {
    let vb = fixed_val_batches(val, batch_size, model.config.seq_len, max_batches)?;
    eval_on_batches(model, &vb, &EvalOptions::default())
}

/// Training artifacts: the metrics log plus any periodic validation runs.
#[derive(Debug)]
pub struct TrainResult {
    pub metrics: Vec<MetricsRecord>,
    pub val_history: Vec<(usize, EvalResult)>,
}

/// Deterministic training loop. Given the same (model seed, config,
/// corpus), the metrics log reproduces bitwise at 32-bit precision.
pub fn train_loop(
    model: &mut Model<f32>,
    train: &Corpus,
    val: Option<&Corpus>,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
    mut on_checkpoint: impl FnMut(usize, &Model<f32>) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let seq_len = model.config.seq_len;
    let mut stream = batches(train, cfg.batch_size, seq_len, cfg.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut state = AdamState::new(&model.params);
    let mut metrics = Vec::new();
    let mut val_history = Vec::new();
    let mut tokens_seen: u64 = 0;
    let opts = EvalOptions::default();
    let inv_accum = 1.0 / cfg.grad_accum as f32;

    for step in 1..=cfg.steps {
        let mut acc_grads: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
        let mut lm_sum = 0.0f64;
        let mut bal_sum = 0.0f64;
        let mut hop_sum = 0usize;
        let mut hop_count = 0usize;
        for _ in 0..cfg.grad_accum {
            let batch = stream.next_batch();
            tokens_seen += (batch.inputs.len() * seq_len) as u64;
            let mut tape = Tape::new();
            let out = model.forward_batch(&mut tape, &batch, true, Some(&mut dropout_rng), &opts)?;
            let lm = tape.value(out.lm_loss).data()[0] as f64;
            let bal = out
                .balance_loss
                .map(|b| tape.value(b).data()[0] as f64)
                .unwrap_or(0.0);
            if !lm.is_finite() || !bal.is_finite() {
                let rec = MetricsRecord {
                    step,
                    lm_loss: lm,
                    balance_loss: bal,
                    lr: lr_at(step, cfg),
                    tokens_seen,
                    avg_hops: 0.0,
                };
                on_record(&rec);
                return Err(Error::Train(format!("non-finite loss at step {step}: {}", rec.to_line())));
            }
            lm_sum += lm;
            bal_sum += bal;
            for layer in &out.traces {
                for t in layer {
                    hop_sum += t.executed_hops();
                    hop_count += 1;
                }
            }
            tape.backward(out.total_loss)?;
            let grads = model.grads_from_tape(&tape, &out.param_vars);
            for (slot, g) in acc_grads.iter_mut().zip(grads) {
                if let Some(g) = g {
                    match slot {
                        Some(acc) => {
                            for (a, x) in acc.iter_mut().zip(&g) {
                                *a += x * inv_accum;
                            }
                        }
                        None => {
                            *slot = Some(g.iter().map(|x| x * inv_accum).collect());
                        }
                    }
                }
            }
        }
        clip_grad_norm(&mut acc_grads, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        adamw_step(&mut model.params, &acc_grads, &mut state, cfg, lr);

        if step % cfg.log_every == 0 || step == 1 || step == cfg.steps {
            let rec = MetricsRecord {
                step,
                lm_loss: lm_sum / cfg.grad_accum as f64,
                balance_loss: bal_sum / cfg.grad_accum as f64,
                lr,
                tokens_seen,
                avg_hops: if hop_count > 0 { hop_sum as f64 / hop_count as f64 } else { 0.0 },
            };
            on_record(&rec);
            metrics.push(rec);
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            if let Some(val) = val {
                val_history.push((step, eval_ppl(model, val, cfg.batch_size, cfg.val_batches)?));
            }
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            on_checkpoint(step, model)?;
        }
    }
    on_checkpoint(cfg.steps, model)?;
    Ok(TrainResult { metrics, val_history })
}
