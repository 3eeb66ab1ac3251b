//! Mechanistic probe battery, runnable on any checkpoint.
//!
//! Every probe is read-only: it evaluates the model with the relevant
//! switches and folds trace statistics batch by batch, so parameters are
//! never touched and trace memory never exceeds one batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::experts::{vocab_projection, MlpPool};
use crate::layer::{flop_savings_from_avg, hop_jaccard, ExpertKind, TrajectoryTrace};
use crate::model::{EvalOptions, FfnMode, Model};
use crate::numkern::{l2_norm_f64, Tape};
use crate::train::EvalResult;

/// Probe output: named scalars, an optional per-layer breakdown, and the
/// sample size behind every aggregate.
#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub name: String,
    pub metrics: Vec<(String, f64)>,
    pub per_layer: Option<Vec<(usize, f64)>>,
    pub sample_size: usize,
}

impl ProbeReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    /// Line-delimited machine-readable form.
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = vec![format!("probe={} sample_size={}", self.name, self.sample_size)];
        for (k, v) in &self.metrics {
            out.push(format!("{k}={v}"));
        }
        if let Some(per_layer) = &self.per_layer {
            for (l, v) in per_layer {
                out.push(format!("layer{l}={v}"));
            }
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = l2_norm_f64(a);
    let nb = l2_norm_f64(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between first- and second-hop updates across traces of one
/// layer. Tokens with fewer than two hops are excluded.
pub(crate) fn echo_from_traces(traces: &[TrajectoryTrace]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in traces {
        if t.hops.len() >= 2 {
            sum += cosine(&t.hops[0].update, &t.hops[1].update);
            n += 1;
        }
    }
    (sum, n)
}

struct FoldStats {
    per_layer_echo: Vec<(f64, usize)>,
    jaccard_sum: f64,
    jaccard_n: usize,
    hops_sum: usize,
    hops_n: usize,
    tokens: usize,
}

/// One evaluation pass collecting losses and trace statistics.
fn fold_eval(
    model: &Model<f32>,
    batches: &[Batch],
    opts: &EvalOptions,
) -> Result<(EvalResult, FoldStats)> {
    if batches.is_empty() {
        return Err(Error::Config("no evaluation batches".to_string()));
    }
    let layers = model.config.layers;
    let mut stats = FoldStats {
        per_layer_echo: vec![(0.0, 0); layers],
        jaccard_sum: 0.0,
        jaccard_n: 0,
        hops_sum: 0,
        hops_n: 0,
        tokens: 0,
    };
    let mut per_batch = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, batch, false, None, opts)?;
        per_batch.push(tape.value(out.lm_loss).data()[0] as f64);
        for (l, layer_traces) in out.traces.iter().enumerate() {
            let (s, n) = echo_from_traces(layer_traces);
            stats.per_layer_echo[l].0 += s;
            stats.per_layer_echo[l].1 += n;
            for t in layer_traces {
                if let Some(j) = hop_jaccard(t) {
                    stats.jaccard_sum += j;
                    stats.jaccard_n += 1;
                }
                stats.hops_sum += t.executed_hops();
                stats.hops_n += 1;
            }
        }
        stats.tokens += batch.inputs.len() * model.config.seq_len;
    }
    let mean_loss = per_batch.iter().sum::<f64>() / per_batch.len() as f64;
    Ok((EvalResult { mean_loss, ppl: mean_loss.exp(), per_batch }, stats))
}

fn require_moe(model: &Model<f32>) -> Result<()> {
    if model.config.ffn_mode != FfnMode::Stmoe {
        return Err(Error::Unsupported("probe needs an expert model, not dense".to_string()));
    }
    Ok(())
}

fn require_multi_hop(model: &Model<f32>) -> Result<()> {
    require_moe(model)?;
    if model.config.hops.iter().all(|&h| h < 2) {
        return Err(Error::Unsupported("probe needs at least one layer with ≥ 2 hops".to_string()));
    }
    Ok(())
}

/// Token-weighted mean cos(Δh₀, Δh₁) across layers, with per-layer means.
pub fn echo_chamber_with(
    model: &Model<f32>,
    batches: &[Batch],
    opts: &EvalOptions,
) -> Result<ProbeReport> {
    require_multi_hop(model)?;
    let (_, stats) = fold_eval(model, batches, opts)?;
    let total_sum: f64 = stats.per_layer_echo.iter().map(|(s, _)| s).sum();
    let total_n: usize = stats.per_layer_echo.iter().map(|(_, n)| n).sum();
    if total_n == 0 {
        return Err(Error::Unsupported("no token executed two hops".to_string()));
    }
    let per_layer = stats
        .per_layer_echo
        .iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(l, (s, n))| (l, s / *n as f64))
        .collect();
    Ok(ProbeReport {
        name: "echo_chamber".to_string(),
        metrics: vec![("mean_cos".to_string(), total_sum / total_n as f64)],
        per_layer: Some(per_layer),
        sample_size: total_n,
    })
}

pub fn echo_chamber(model: &Model<f32>, batches: &[Batch]) -> Result<ProbeReport> {
    echo_chamber_with(model, batches, &EvalOptions::default())
}

/// Same checkpoint with and without hop-to-hop re-routing.
#[derive(Clone, Debug)]
pub struct FrozenReport {
    pub normal_ppl: f64,
    pub frozen_ppl: f64,
    pub normal_jaccard: Option<f64>,
    pub frozen_jaccard: Option<f64>,
    pub normal_losses: Vec<f64>,
    pub frozen_losses: Vec<f64>,
}

impl FrozenReport {
    pub fn delta_ppl_pct(&self) -> f64 {
        100.0 * (self.frozen_ppl - self.normal_ppl) / self.normal_ppl
    }

    pub fn report(&self) -> ProbeReport {
        let mut metrics = vec![
            ("normal_ppl".to_string(), self.normal_ppl),
            ("frozen_ppl".to_string(), self.frozen_ppl),
            ("delta_ppl_pct".to_string(), self.delta_ppl_pct()),
        ];
        if let Some(j) = self.normal_jaccard {
            metrics.push(("normal_jaccard".to_string(), j));
        }
        if let Some(j) = self.frozen_jaccard {
            metrics.push(("frozen_jaccard".to_string(), j));
        }
        ProbeReport {
            name: "frozen_routing".to_string(),
            metrics,
            per_layer: None,
            sample_size: self.normal_losses.len(),
        }
    }
}

pub fn frozen_routing_eval(model: &Model<f32>, batches: &[Batch]) -> Result<FrozenReport> {
    require_moe(model)?;
    let (normal, nstats) = fold_eval(model, batches, &EvalOptions::default())?;
    let frozen_opts = EvalOptions { frozen_routing: true, ..Default::default() };
    let (frozen, fstats) = fold_eval(model, batches, &frozen_opts)?;
    let jac = |s: &FoldStats| {
        if s.jaccard_n > 0 {
            Some(s.jaccard_sum / s.jaccard_n as f64)
        } else {
            None
        }
    };
    Ok(FrozenReport {
        normal_ppl: normal.ppl,
        frozen_ppl: frozen.ppl,
        normal_jaccard: jac(&nstats),
        frozen_jaccard: jac(&fstats),
        normal_losses: normal.per_batch,
        frozen_losses: frozen.per_batch,
    })
}

fn mlp_pool_of(model: &Model<f32>, layer: usize) -> Result<MlpPool<f32>> {
    let ExpertKind::Mlp { rank } = model.config.expert else {
        return Err(Error::Unsupported("probe needs MLP experts".to_string()));
    };
    let down = model
        .params
        .get(&format!("l{layer}.moe.w_down"))
        .ok_or_else(|| Error::Unsupported("layer has no expert pool".to_string()))?
        .tensor
        .clone();
    let up = model.params.get(&format!("l{layer}.moe.w_up")).unwrap().tensor.clone();
    MlpPool::new(down, up, rank)
}

/// Per-expert best-match alignment between two checkpoints: top-n vocab
/// projection Jaccard and raw up-vector cosine, with Monte Carlo baselines.
#[derive(Clone, Debug)]
pub struct AlignmentReport {
    pub mean_best_vocab_jaccard: f64,
    pub mean_best_up_cosine: f64,
    pub random_jaccard_baseline: f64,
    pub random_cosine_baseline: f64,
    pub experts_compared: usize,
}

impl AlignmentReport {
    pub fn report(&self) -> ProbeReport {
        ProbeReport {
            name: "cross_seed_alignment".to_string(),
            metrics: vec![
                ("mean_best_vocab_jaccard".to_string(), self.mean_best_vocab_jaccard),
                ("mean_best_up_cosine".to_string(), self.mean_best_up_cosine),
                ("random_jaccard_baseline".to_string(), self.random_jaccard_baseline),
                ("random_cosine_baseline".to_string(), self.random_cosine_baseline),
            ],
            per_layer: None,
            sample_size: self.experts_compared,
        }
    }
}

fn jaccard_sets(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

pub fn cross_seed_alignment(
    a: &Model<f32>,
    b: &Model<f32>,
    top_n: usize,
) -> Result<AlignmentReport> {
    require_moe(a)?;
    require_moe(b)?;
    if a.config.d_model != b.config.d_model
        || a.config.layers != b.config.layers
        || a.config.num_experts != b.config.num_experts
        || a.config.vocab != b.config.vocab
    {
        return Err(Error::Config("checkpoints have different architectures".to_string()));
    }
    let emb_a = &a.params.get("embed").unwrap().tensor;
    let emb_b = &b.params.get("embed").unwrap().tensor;
    let d = a.config.d_model;
    let mut jac_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut count = 0usize;
    for layer in 0..a.config.layers {
        let pool_a = mlp_pool_of(a, layer)?;
        let pool_b = mlp_pool_of(b, layer)?;
        let m = pool_a.num_experts();
        let tops_b: Vec<Vec<usize>> =
            (0..m).map(|e| vocab_projection(&pool_b, e, emb_b, top_n)).collect::<Result<_>>()?;
        let ups_b: Vec<Vec<f64>> = (0..m)
            .map(|e| pool_b.w_up.data()[e * d..(e + 1) * d].iter().map(|v| *v as f64).collect())
            .collect();
        for e in 0..m {
            let top_a = vocab_projection(&pool_a, e, emb_a, top_n)?;
            let up_a: Vec<f64> =
                pool_a.w_up.data()[e * d..(e + 1) * d].iter().map(|v| *v as f64).collect();
            let best_j = tops_b
                .iter()
                .map(|tb| jaccard_sets(&top_a, tb))
                .fold(f64::MIN, f64::max);
            let best_c = ups_b.iter().map(|ub| cosine(&up_a, ub)).fold(f64::MIN, f64::max);
            jac_sum += best_j;
            cos_sum += best_c;
            count += 1;
        }
    }
    let m = a.config.num_experts;
    let (jac_base, cos_base) = random_alignment_baselines(a.config.vocab, top_n, m, d, 4242);
    Ok(AlignmentReport {
        mean_best_vocab_jaccard: jac_sum / count as f64,
        mean_best_up_cosine: cos_sum / count as f64,
        random_jaccard_baseline: jac_base,
        random_cosine_baseline: cos_base,
        experts_compared: count,
    })
}

/// Monte Carlo estimates of the no-alignment floor: Jaccard of two random
/// top-n id sets, and best-match cosine of M random unit vectors.
pub fn random_alignment_baselines(
    vocab: usize,
    top_n: usize,
    m: usize,
    d: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut set = std::collections::BTreeSet::new();
        while set.len() < top_n {
            set.insert(rng.gen_range(0..vocab));
        }
        set.into_iter().collect()
    };
    let trials = 2000;
    let mut jac = 0.0;
    for _ in 0..trials {
        let a = pick(&mut rng);
        let b = pick(&mut rng);
        jac += jaccard_sets(&a, &b);
    }
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let n = l2_norm_f64(&v);
        v.into_iter().map(|x| x / n).collect()
    };
    let cos_trials = 10usize.max(4000 / m.max(1));
    let mut cos_acc = 0.0;
    let mut cos_n = 0usize;
    for _ in 0..cos_trials {
        let side_b: Vec<Vec<f64>> = (0..m).map(|_| unit(&mut rng)).collect();
        for _ in 0..m.min(64) {
            let va = unit(&mut rng);
            let best = side_b.iter().map(|vb| cosine(&va, vb)).fold(f64::MIN, f64::max);
            cos_acc += best;
            cos_n += 1;
        }
    }
    (jac / trials as f64, cos_acc / cos_n as f64)
}

/// Evaluate with every expert update forced to zero (attention-only).
#[derive(Clone, Debug)]
pub struct ZeroingReport {
    pub baseline_ppl: f64,
    pub zeroed_ppl: f64,
}

impl ZeroingReport {
    pub fn ratio(&self) -> f64 {
        self.zeroed_ppl / self.baseline_ppl
    }

    pub fn report(&self) -> ProbeReport {
        ProbeReport {
            name: "expert_zeroing".to_string(),
            metrics: vec![
                ("baseline_ppl".to_string(), self.baseline_ppl),
                ("zeroed_ppl".to_string(), self.zeroed_ppl),
                ("ratio".to_string(), self.ratio()),
            ],
            per_layer: None,
            sample_size: 0,
        }
    }
}

pub fn expert_zeroing(model: &Model<f32>, batches: &[Batch]) -> Result<ZeroingReport> {
    require_moe(model)?;
    let (baseline, _) = fold_eval(model, batches, &EvalOptions::default())?;
    let opts = EvalOptions { zero_experts: true, ..Default::default() };
    let (zeroed, _) = fold_eval(model, batches, &opts)?;
    Ok(ZeroingReport { baseline_ppl: baseline.ppl, zeroed_ppl: zeroed.ppl })
}

/// One row of the halting sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub eps: f64,
    pub avg_hops: f64,
    pub savings_pct: f64,
    pub ppl: f64,
    pub delta_ppl_pct: f64,
}

impl SweepRow {
    pub fn to_line(&self) -> String {
        format!(
            "eps={} avg_hops={} flop_savings_pct={} ppl={} delta_ppl_pct={}",
            self.eps, self.avg_hops, self.savings_pct, self.ppl, self.delta_ppl_pct
        )
    }
}

/// Zero-shot halting sweep at each ε, against the ε=0 reference.
/// Needs a uniform hop depth so savings = 1 − hops/H holds row by row.
pub fn halting_sweep(
    model: &Model<f32>,
    batches: &[Batch],
    eps_grid: &[f64],
) -> Result<Vec<SweepRow>> {
    require_multi_hop(model)?;
    let h = model.config.hops[0];
    if model.config.hops.iter().any(|&x| x != h) {
        return Err(Error::Unsupported(
            "halting sweep needs a uniform hop depth across layers".to_string(),
        ));
    }
    if eps_grid.is_empty() {
        return Err(Error::Config("empty eps grid".to_string()));
    }
    let (reference, _) = fold_eval(model, batches, &EvalOptions::default())?;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        if eps < 0.0 {
            return Err(Error::Config("eps must be ≥ 0".to_string()));
        }
        let opts = EvalOptions { halting_eps: Some(eps), ..Default::default() };
        let (result, stats) = fold_eval(model, batches, &opts)?;
        let avg_hops = stats.hops_sum as f64 / stats.hops_n as f64;
        rows.push(SweepRow {
            eps,
            avg_hops,
            savings_pct: flop_savings_from_avg(avg_hops, h)?,
            ppl: result.ppl,
            delta_ppl_pct: 100.0 * (result.ppl - reference.ppl) / reference.ppl,
        });
    }
    Ok(rows)
}
