//! Pre-LN transformer language model with tied embeddings and either
//! multi-hop expert sublayers or a dense FFN.
//!
//! Each block is `x ← x + MHA(LN(x))` then `x ← x + FFN(LN(x))`, with
//! rotary position embeddings inside attention and a causal mask. The
//! checkpoint format is a text header (version, config as key=value lines)
//! followed by named parameter blocks as little-endian 32-bit floats.

use std::collections::HashMap;
use std::io::{BufRead, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layer::{
    stmoe_forward, ExpertKind, HopTelemetry, LayerRun, LayerVars, PoolVars, TrajectoryTrace,
};
use crate::numkern::{Scalar, Tape, Tensor, Var};
use crate::routing::{routing_param_count, RouterKind};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnMode {
    Stmoe,
    Dense,
}

impl FfnMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FfnMode::Stmoe => "stmoe",
            FfnMode::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stmoe" => Ok(FfnMode::Stmoe),
            "dense" => Ok(FfnMode::Dense),
            other => Err(Error::Config(format!("unknown ffn_mode '{other}'"))),
        }
    }
}

/// Full architectural configuration.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub ffn_mode: FfnMode,
    /// Dense mode width.
    pub d_ff: usize,
    pub num_experts: usize,
    pub d_space: usize,
    pub k: usize,
    /// Hop count per layer.
    pub hops: Vec<usize>,
    pub expert: ExpertKind,
    pub router: RouterKind,
    pub tau: f64,
    /// Allocate (and count) kinematic vectors alongside centroids.
    pub kinematic: bool,
    /// Distinct projection per hop.
    pub decoupled: bool,
    /// Learnable output scalar, with init value.
    pub magnitude_alpha: Option<f64>,
    pub balance_alpha: f64,
    pub dropout: f64,
    pub rope_base: f64,
    /// Hash routing keys: sequence index instead of token id.
    pub hash_by_position: bool,
}

impl ModelConfig {
    /// Desk-scale default: a small mirror of the reference architecture.
    pub fn desk_default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            vocab: 256,
            seq_len: 128,
            ffn_mode: FfnMode::Stmoe,
            d_ff: 128,
            num_experts: 64,
            d_space: 16,
            k: 4,
            hops: vec![3, 3],
            expert: ExpertKind::Mlp { rank: 1 },
            router: RouterKind::Cosine,
            tau: 30.0,
            kinematic: true,
            decoupled: false,
            magnitude_alpha: None,
            balance_alpha: 0.05,
            dropout: 0.1,
            rope_base: 10000.0,
            hash_by_position: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("d_model, heads, layers must be positive".to_string()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if (self.d_model / self.heads) % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary embeddings".to_string()));
        }
        if self.vocab == 0 || self.seq_len == 0 {
            return Err(Error::Config("vocab and seq_len must be positive".to_string()));
        }
        match self.ffn_mode {
            FfnMode::Dense => {
                if self.d_ff == 0 {
                    return Err(Error::Config("dense mode needs d_ff ≥ 1".to_string()));
                }
            }
            FfnMode::Stmoe => {
                if self.hops.len() != self.layers {
                    return Err(Error::Config(format!(
                        "hops list has {} entries for {} layers",
                        self.hops.len(),
                        self.layers
                    )));
                }
                if self.hops.iter().any(|&h| h == 0) {
                    return Err(Error::Config("every layer needs at least one hop".to_string()));
                }
                if self.k == 0 || self.k > self.num_experts {
                    return Err(Error::Config(format!(
                        "k {} outside 1..={}",
                        self.k, self.num_experts
                    )));
                }
                if self.router.uses_projection() && self.d_space == 0 {
                    return Err(Error::Config("d_space must be positive".to_string()));
                }
                if let ExpertKind::Mlp { rank } = self.expert {
                    if rank == 0 {
                        return Err(Error::Config("expert rank must be ≥ 1".to_string()));
                    }
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".to_string()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn projections_per_layer(&self) -> usize {
        if self.decoupled {
            self.hops.iter().copied().max().unwrap_or(1)
        } else {
            1
        }
    }
}

/// One named parameter block.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub decay: bool,
}

/// Ordered parameter storage; creation order is the canonical order for
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, name: &str, tensor: Tensor<T>, trainable: bool, decay: bool) {
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), tensor, trainable, decay });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).copied().map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }
}

/// Evaluation-time switches; all default off for training.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// All hops reuse the initial routing position.
    pub frozen_routing: bool,
    /// Relative-norm halting threshold (inference only).
    pub halting_eps: Option<f64>,
    /// Force every expert update to zero.
    pub zero_experts: bool,
}

/// Routing probabilities and selections of one layer, concatenated over
/// every batch item and hop. Feeds diagnostics and the balance-loss oracle.
pub struct BalanceEvents<T: Scalar> {
    /// [events × M].
    pub probs: Tensor<T>,
    /// k selections per event, flattened.
    pub indices: Vec<usize>,
    pub k: usize,
}

/// Result of one batch forward.
pub struct BatchOutput<T: Scalar> {
    pub lm_loss: Var,
    /// None in dense mode or for hash routing.
    pub balance_loss: Option<Var>,
    pub total_loss: Var,
    /// [layer][token across the whole batch].
    pub traces: Vec<Vec<TrajectoryTrace>>,
    /// Leaf var of every parameter, aligned with store order.
    pub param_vars: Vec<Var>,
    /// Per-sequence logits [seq × vocab].
    pub logits: Vec<Var>,
    /// Per layer; None where the layer produced no probabilities.
    pub balance_events: Vec<Option<BalanceEvents<T>>>,
}

#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded Gaussian initialization; creation order is fixed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = config.d_model;
        let base_std = 1.0 / (d as f64).sqrt();
        let out_std = base_std / (2.0 * config.layers as f64).sqrt();

        // small embedding init keeps untrained tied-head logits near uniform
        store.push("embed", Tensor::randn(vec![config.vocab, d], 0.02, &mut rng), true, false);
        for l in 0..config.layers {
            let p = |s: &str| format!("l{l}.{s}");
            store.push(&p("attn.ln.gain"), Tensor::ones(vec![d]), true, false);
            store.push(&p("attn.ln.bias"), Tensor::zeros(vec![d]), true, false);
            store.push(&p("attn.wq"), Tensor::randn(vec![d, d], base_std, &mut rng), true, true);
            store.push(&p("attn.wk"), Tensor::randn(vec![d, d], base_std, &mut rng), true, true);
            store.push(&p("attn.wv"), Tensor::randn(vec![d, d], base_std, &mut rng), true, true);
            store.push(&p("attn.wo"), Tensor::randn(vec![d, d], out_std, &mut rng), true, true);
            store.push(&p("ffn.ln.gain"), Tensor::ones(vec![d]), true, false);
            store.push(&p("ffn.ln.bias"), Tensor::zeros(vec![d]), true, false);
            match config.ffn_mode {
                FfnMode::Dense => {
                    store.push(
                        &p("ffn.w1"),
                        Tensor::randn(vec![d, config.d_ff], base_std, &mut rng),
                        true,
                        true,
                    );
                    store.push(
                        &p("ffn.w2"),
                        Tensor::randn(vec![config.d_ff, d], out_std, &mut rng),
                        true,
                        true,
                    );
                }
                FfnMode::Stmoe => {
                    let m = config.num_experts;
                    let frozen = config.router == RouterKind::RandomFixed;
                    if config.router.uses_projection() {
                        for h in 0..config.projections_per_layer() {
                            store.push(
                                &p(&format!("moe.proj{h}")),
                                Tensor::randn(vec![d, config.d_space], base_std, &mut rng),
                                !frozen,
                                true,
                            );
                        }
                        let c_std = 1.0 / (config.d_space as f64).sqrt();
                        store.push(
                            &p("moe.centroids"),
                            Tensor::randn(vec![m, config.d_space], c_std, &mut rng),
                            !frozen,
                            false,
                        );
                        if config.kinematic {
                            // counted in the budget, never used in forward
                            store.push(
                                &p("moe.kinematic"),
                                Tensor::randn(vec![m, config.d_space], c_std, &mut rng),
                                false,
                                false,
                            );
                        }
                    }
                    if config.router == RouterKind::Linear {
                        store.push(
                            &p("moe.router"),
                            Tensor::randn(vec![d, m], base_std, &mut rng),
                            true,
                            true,
                        );
                    }
                    match config.expert {
                        ExpertKind::Static => {
                            store.push(
                                &p("moe.experts_v"),
                                Tensor::randn(vec![m, d], base_std, &mut rng),
                                true,
                                true,
                            );
                        }
                        ExpertKind::Mlp { rank } => {
                            store.push(
                                &p("moe.w_down"),
                                Tensor::randn(vec![m, rank * d], base_std, &mut rng),
                                true,
                                true,
                            );
                            store.push(
                                &p("moe.w_up"),
                                Tensor::randn(vec![m, d * rank], base_std, &mut rng),
                                true,
                                true,
                            );
                        }
                    }
                }
            }
        }
        store.push("final_ln.gain", Tensor::ones(vec![d]), true, false);
        store.push("final_ln.bias", Tensor::zeros(vec![d]), true, false);
        if let Some(init) = config.magnitude_alpha {
            store.push("alpha", Tensor::from_vec(vec![1], vec![T::of_f64(init)])?, true, false);
        }
        Ok(Model { config, params: store })
    }

    fn var_of(&self, vars: &[Var], name: &str) -> Var {
        vars[*self.params.index.get(name).unwrap_or_else(|| panic!("missing param {name}"))]
    }

    /// Insert every parameter as a tape leaf.
    fn leaves(&self, tape: &mut Tape<T>, with_grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), with_grads && p.trainable))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        layer: usize,
        x: Var,
        train: bool,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let p = |s: &str| format!("l{layer}.{s}");
        let gain = self.var_of(vars, &p("attn.ln.gain"));
        let bias = self.var_of(vars, &p("attn.ln.bias"));
        let normed = tape.layer_norm(x, gain, bias, T::of_f64(LN_EPS))?;
        let q = tape.matmul(normed, self.var_of(vars, &p("attn.wq")))?;
        let k = tape.matmul(normed, self.var_of(vars, &p("attn.wk")))?;
        let v = tape.matmul(normed, self.var_of(vars, &p("attn.wv")))?;
        let q = tape.rope_apply(q, self.config.heads, self.config.rope_base)?;
        let k = tape.rope_apply(k, self.config.heads, self.config.rope_base)?;
        let hd = self.config.head_dim();
        let scale = T::of_f64(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.select_cols(q, h * hd, hd)?;
            let kh = tape.select_cols(k, h * hd, hd)?;
            let vh = tape.select_cols(v, h * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let mut out = tape.matmul(ctx, self.var_of(vars, &p("attn.wo")))?;
        out = self.dropout(tape, out, train, dropout_rng)?;
        tape.add(x, out)
    }

    fn dropout(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        train: bool,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if !train || self.config.dropout <= 0.0 {
            return Ok(x);
        }
        let rng = rng
            .as_mut()
            .ok_or_else(|| Error::Config("training with dropout needs an RNG".to_string()))?;
        let keep = 1.0 - self.config.dropout;
        let scale = T::of_f64(1.0 / keep);
        let mask: Vec<T> = (0..tape.value(x).numel())
            .map(|_| {
                if rand::Rng::gen_range(&mut **rng, 0.0..1.0) < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }

    /// One transformer block over [seq × d_model] rows of a single sequence.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        layer: usize,
        x: Var,
        token_ids: &[usize],
        train: bool,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
        opts: &EvalOptions,
    ) -> Result<(Var, Vec<TrajectoryTrace>, Vec<HopTelemetry>)> {
        let x = self.attention(tape, vars, layer, x, train, dropout_rng)?;
        let p = |s: &str| format!("l{layer}.{s}");
        let gain = self.var_of(vars, &p("ffn.ln.gain"));
        let bias = self.var_of(vars, &p("ffn.ln.bias"));
        let normed = tape.layer_norm(x, gain, bias, T::of_f64(LN_EPS))?;
        match self.config.ffn_mode {
            FfnMode::Dense => {
                let h1 = tape.matmul(normed, self.var_of(vars, &p("ffn.w1")))?;
                let act = tape.silu(h1)?;
                let mut out = tape.matmul(act, self.var_of(vars, &p("ffn.w2")))?;
                out = self.dropout(tape, out, train, dropout_rng)?;
                let y = tape.add(x, out)?;
                Ok((y, Vec::new(), Vec::new()))
            }
            FfnMode::Stmoe => {
                let projections: Vec<Var> = if self.config.router.uses_projection() {
                    (0..self.config.projections_per_layer())
                        .map(|h| self.var_of(vars, &p(&format!("moe.proj{h}"))))
                        .collect()
                } else {
                    Vec::new()
                };
                let centroids = if self.config.router.uses_projection() {
                    Some(self.var_of(vars, &p("moe.centroids")))
                } else {
                    None
                };
                let linear = if self.config.router == RouterKind::Linear {
                    Some(self.var_of(vars, &p("moe.router")))
                } else {
                    None
                };
                let pool = match self.config.expert {
                    ExpertKind::Static => {
                        PoolVars::Static { v: self.var_of(vars, &p("moe.experts_v")) }
                    }
                    ExpertKind::Mlp { rank } => PoolVars::Mlp {
                        down: self.var_of(vars, &p("moe.w_down")),
                        up: self.var_of(vars, &p("moe.w_up")),
                        rank,
                    },
                };
                let alpha = if self.config.magnitude_alpha.is_some() {
                    Some(self.var_of(vars, "alpha"))
                } else {
                    None
                };
                let layer_vars = LayerVars { projections, centroids, linear, pool, alpha };
                let token_keys: Vec<u64> = if self.config.hash_by_position {
                    (0..token_ids.len() as u64).collect()
                } else {
                    token_ids.iter().map(|&t| t as u64).collect()
                };
                let run = LayerRun {
                    hops: self.config.hops[layer],
                    k: self.config.k,
                    router: self.config.router,
                    tau: self.config.tau,
                    decoupled: self.config.decoupled,
                    halting_eps: opts.halting_eps,
                    frozen_routing: opts.frozen_routing,
                    layer_index: layer,
                    token_keys: &token_keys,
                    zero_experts: opts.zero_experts,
                };
                let lo = stmoe_forward(tape, &run, &layer_vars, normed)?;
                let update = self.dropout(tape, lo.update, train, dropout_rng)?;
                let y = tape.add(x, update)?;
                Ok((y, lo.traces, lo.telemetry))
            }
        }
    }

    /// Teacher-forced forward over a batch; loss is LM cross-entropy plus
    /// the per-layer balance terms.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        train: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        opts: &EvalOptions,
    ) -> Result<BatchOutput<T>> {
        if batch.inputs.is_empty() {
            return Err(Error::Shape("empty batch".to_string()));
        }
        let vars = self.leaves(tape, train);
        let embed = self.var_of(&vars, "embed");
        let mut ce_losses = Vec::with_capacity(batch.inputs.len());
        let mut logits_out = Vec::with_capacity(batch.inputs.len());
        let mut traces: Vec<Vec<TrajectoryTrace>> = vec![Vec::new(); self.config.layers];
        let mut telemetry: Vec<Vec<HopTelemetry>> =
            (0..self.config.layers).map(|_| Vec::new()).collect();
        for (ids, targets) in batch.inputs.iter().zip(&batch.targets) {
            let mut x = tape.embedding(embed, ids)?;
            for l in 0..self.config.layers {
                let (y, tr, te) =
                    self.block_forward(tape, &vars, l, x, ids, train, &mut dropout_rng, opts)?;
                x = y;
                traces[l].extend(tr);
                telemetry[l].extend(te);
            }
            let gain = self.var_of(&vars, "final_ln.gain");
            let bias = self.var_of(&vars, "final_ln.bias");
            let normed = tape.layer_norm(x, gain, bias, T::of_f64(LN_EPS))?;
            let logits = tape.matmul_nt(normed, embed)?;
            ce_losses.push(tape.cross_entropy(logits, targets)?);
            logits_out.push(logits);
        }
        let mut lm_sum = ce_losses[0];
        for &l in &ce_losses[1..] {
            lm_sum = tape.add(lm_sum, l)?;
        }
        let lm_loss = tape.scale(lm_sum, T::of_f64(1.0 / ce_losses.len() as f64))?;

        let balance_events: Vec<Option<BalanceEvents<T>>> = telemetry
            .iter()
            .map(|layer_tel| {
                if layer_tel.is_empty() {
                    return None;
                }
                let m = tape.value(layer_tel[0].probs).shape()[1];
                let mut data = Vec::new();
                let mut indices = Vec::new();
                let mut rows = 0;
                for tel in layer_tel {
                    data.extend_from_slice(tape.value(tel.probs).data());
                    indices.extend_from_slice(&tel.indices);
                    rows += tel.rows;
                }
                Some(BalanceEvents {
                    probs: Tensor::from_vec(vec![rows, m], data).expect("consistent telemetry"),
                    indices,
                    k: layer_tel[0].k,
                })
            })
            .collect();

        let balance = self.balance_term(tape, &telemetry)?;
        let total_loss = match balance {
            Some(b) => tape.add(lm_loss, b)?,
            None => lm_loss,
        };
        Ok(BatchOutput {
            lm_loss,
            balance_loss: balance,
            total_loss,
            traces,
            param_vars: vars,
            logits: logits_out,
            balance_events,
        })
    }

    /// α·M·Σ fᵢp̄ᵢ summed over layers; f is constant, p̄ carries gradient.
    fn balance_term(
        &self,
        tape: &mut Tape<T>,
        telemetry: &[Vec<HopTelemetry>],
    ) -> Result<Option<Var>> {
        if self.config.ffn_mode == FfnMode::Dense || self.config.balance_alpha == 0.0 {
            return Ok(None);
        }
        let mut per_layer_terms: Vec<Var> = Vec::new();
        for layer_tel in telemetry {
            if layer_tel.is_empty() {
                continue;
            }
            let m = tape.value(layer_tel[0].probs).shape()[1];
            let total_rows: usize = layer_tel.iter().map(|t| t.rows).sum();
            let mut mean_probs: Option<Var> = None;
            let mut counts = vec![0u64; m];
            let mut total_assignments = 0u64;
            for tel in layer_tel {
                let chunk_mean = tape.mean_rows(tel.probs)?;
                let weighted =
                    tape.scale(chunk_mean, T::of_f64(tel.rows as f64 / total_rows as f64))?;
                mean_probs = Some(match mean_probs {
                    Some(acc) => tape.add(acc, weighted)?,
                    None => weighted,
                });
                for &i in &tel.indices {
                    counts[i] += 1;
                }
                total_assignments += (tel.rows * tel.k) as u64;
            }
            let f: Vec<T> = counts
                .iter()
                .map(|&c| T::of_f64(c as f64 / total_assignments as f64))
                .collect();
            let dot = tape.dot_const(mean_probs.expect("nonempty telemetry"), f)?;
            per_layer_terms.push(tape.scale(dot, T::of_f64(self.config.balance_alpha * m as f64))?);
        }
        if per_layer_terms.is_empty() {
            return Ok(None);
        }
        let mut acc = per_layer_terms[0];
        for &t in &per_layer_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Write gradients accumulated on the tape back into the store order.
    pub fn grads_from_tape(&self, tape: &Tape<T>, param_vars: &[Var]) -> Vec<Option<Vec<T>>> {
        param_vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect()
    }

    /// Per-component parameter counts.
    pub fn param_count(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown::default();
        for p in self.params.iter() {
            let n = p.tensor.numel() as u64;
            let name = p.name.as_str();
            if name == "embed" {
                b.embedding += n;
            } else if name.contains(".ln.") || name.starts_with("final_ln") {
                b.norms += n;
            } else if name.contains(".attn.") {
                b.attention += n;
            } else if name.contains(".moe.proj")
                || name.contains(".moe.centroids")
                || name.contains(".moe.kinematic")
                || name.contains(".moe.router")
            {
                b.routing += n;
            } else if name.contains(".moe.") || name.contains(".ffn.w") {
                b.experts += n;
            } else {
                b.other += n;
            }
            b.total += n;
        }
        b
    }
}

/// Parameter counts by component. Dense-mode FFN weights count as experts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: u64,
    pub attention: u64,
    pub routing: u64,
    pub experts: u64,
    pub norms: u64,
    pub other: u64,
    pub total: u64,
}

impl ParamBreakdown {
    pub fn rows(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("embedding", self.embedding),
            ("attention", self.attention),
            ("routing", self.routing),
            ("experts", self.experts),
            ("norms", self.norms),
            ("other", self.other),
            ("total", self.total),
        ]
    }
}

/// Closed-form breakdown from the config alone; no parameter allocation,
/// so it runs instantly at any scale. Matches `Model::param_count` block
/// for block (verified by the enumeration tests).
pub fn breakdown_from_config(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.d_model as u64;
    let l = cfg.layers as u64;
    let mut b = ParamBreakdown {
        embedding: cfg.vocab as u64 * d,
        attention: l * 4 * d * d,
        routing: expected_routing_params(cfg),
        norms: l * 4 * d + 2 * d,
        ..Default::default()
    };
    b.experts = match cfg.ffn_mode {
        FfnMode::Dense => l * 2 * d * cfg.d_ff as u64,
        FfnMode::Stmoe => {
            let m = cfg.num_experts as u64;
            match cfg.expert {
                ExpertKind::Static => l * m * d,
                ExpertKind::Mlp { rank } => l * 2 * m * rank as u64 * d,
            }
        }
    };
    b.other = if cfg.magnitude_alpha.is_some() { 1 } else { 0 };
    b.total = b.embedding + b.attention + b.routing + b.experts + b.norms + b.other;
    b
}

/// Expected routing budget for this config from the closed-form count.
pub fn expected_routing_params(cfg: &ModelConfig) -> u64 {
    if cfg.ffn_mode == FfnMode::Dense {
        return 0;
    }
    match cfg.router {
        RouterKind::Cosine | RouterKind::RandomFixed => {
            if cfg.decoupled {
                // per-hop projections break the closed form; count directly
                let per_layer = cfg.projections_per_layer() * cfg.d_model * cfg.d_space
                    + cfg.num_experts * cfg.d_space
                    + if cfg.kinematic { cfg.num_experts * cfg.d_space } else { 0 };
                (cfg.layers * per_layer) as u64
            } else {
                routing_param_count(
                    cfg.router,
                    cfg.d_model,
                    cfg.d_space,
                    cfg.num_experts,
                    cfg.layers,
                    cfg.kinematic,
                )
            }
        }
        RouterKind::Linear => routing_param_count(
            cfg.router,
            cfg.d_model,
            cfg.d_space,
            cfg.num_experts,
            cfg.layers,
            false,
        ),
        RouterKind::Hash => 0,
    }
}

// ── checkpoint format ────────────────────────────────────────────────

const CKPT_MAGIC: &str = "stmoe-ckpt v1";

/// Save parameters as little-endian f32 blocks with a text header carrying
/// the fully resolved config. Byte-exact round-trip is part of the format
/// contract.
pub fn save_checkpoint<P: AsRef<Path>>(
    model: &Model<f32>,
    config_lines: &[(String, String)],
    path: P,
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("config {}\n", config_lines.len()).as_bytes());
    for (k, v) in config_lines {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out.extend_from_slice(format!("blocks {}\n", model.params.len()).as_bytes());
    for p in model.params.iter() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(
            format!("block {} {} {}\n", p.name, p.tensor.shape().len(), dims.join(" ")).as_bytes(),
        );
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Parse a checkpoint into its config lines and named raw blocks.
pub fn read_checkpoint<P: AsRef<Path>>(
    path: P,
) -> Result<(Vec<(String, String)>, Vec<(String, Vec<usize>, Vec<f32>)>)> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
    let mut reader = std::io::BufReader::new(file);
    let mut line = String::new();

    let read_line = |reader: &mut std::io::BufReader<std::fs::File>,
                         line: &mut String|
     -> Result<String> {
        line.clear();
        let n = reader.read_line(line)?;
        if n == 0 {
            return Err(Error::Checkpoint("unexpected end of file".to_string()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };

    let magic = read_line(&mut reader, &mut line)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic '{magic}'")));
    }
    let header = read_line(&mut reader, &mut line)?;
    let n_config: usize = header
        .strip_prefix("config ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad config header '{header}'")))?;
    let mut config_lines = Vec::with_capacity(n_config);
    for _ in 0..n_config {
        let l = read_line(&mut reader, &mut line)?;
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line '{l}'")))?;
        config_lines.push((k.to_string(), v.to_string()));
    }
    let header = read_line(&mut reader, &mut line)?;
    let n_blocks: usize = header
        .strip_prefix("blocks ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad blocks header '{header}'")))?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let l = read_line(&mut reader, &mut line)?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some("block") {
            return Err(Error::Checkpoint(format!("bad block line '{l}'")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint("block line missing name".to_string()))?
            .to_string();
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("block line missing rank".to_string()))?;
        let dims: Vec<usize> = parts
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint("bad block dims".to_string()))?;
        if dims.len() != ndim {
            return Err(Error::Checkpoint("block rank/dims mismatch".to_string()));
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        reader.read_exact(&mut raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut newline = [0u8; 1];
        reader.read_exact(&mut newline).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if newline[0] != b'\n' {
            return Err(Error::Checkpoint("missing block terminator".to_string()));
        }
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        blocks.push((name, dims, data));
    }
    Ok((config_lines, blocks))
}

/// Rebuild a model from a checkpoint given its reconstructed config.
pub fn load_checkpoint_into(
    config: ModelConfig,
    blocks: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(config, 0)?;
    if blocks.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} blocks, model expects {}",
            blocks.len(),
            model.params.len()
        )));
    }
    for (name, dims, data) in blocks {
        let param = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown block '{name}'")))?;
        if param.tensor.shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "block '{name}': shape {:?} vs expected {:?}",
                dims,
                param.tensor.shape()
            )));
        }
        param.tensor = Tensor::from_vec(dims.clone(), data.clone())?;
    }
    Ok(model)
}
