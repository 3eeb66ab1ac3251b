//! Multi-hop expert layer: route, update, accumulate, re-route.
//!
//! Each hop routes every still-active token, applies its weighted expert
//! update to the accumulated state, then recomputes the routing position
//! from that updated state (unless it is the final hop or routing is
//! frozen). Relative-norm halting is inference-only: a token whose update
//! falls below ε·(‖state‖+1e-6) keeps that update and skips remaining hops.

use crate::error::{Error, Result};
use crate::numkern::{l2_norm_f64, Scalar, Tape, Tensor, Var};
use crate::routing::{hash_route, route_rows_on_tape, RouterKind, L2_EPS};

/// Denominator guard in the halting criterion.
pub const HALT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    Static,
    Mlp { rank: usize },
}

/// Layer-stack configuration for the expert sublayers.
#[derive(Clone, Debug)]
pub struct StMoeConfig {
    /// Hop count per layer; uniform stacks repeat one value.
    pub hops: Vec<usize>,
    pub k: usize,
    pub router: RouterKind,
    pub expert: ExpertKind,
    /// Distinct projection matrix per hop.
    pub decoupled: bool,
    /// Learnable output scalar on the accumulated update, with init value.
    pub magnitude_alpha: Option<f64>,
    pub halting_eps: Option<f64>,
    /// All hops reuse the initial position (probe mode).
    pub frozen_routing: bool,
}

impl StMoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops.is_empty() || self.hops.iter().any(|&h| h == 0) {
            return Err(Error::Config("hops must be ≥ 1 for every layer".to_string()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be ≥ 1".to_string()));
        }
        if let Some(eps) = self.halting_eps {
            if eps < 0.0 {
                return Err(Error::Config("halting_eps must be ≥ 0".to_string()));
            }
        }
        Ok(())
    }

    pub fn max_hops(&self) -> usize {
        self.hops.iter().copied().max().unwrap_or(1)
    }
}

/// One executed hop of one token.
#[derive(Clone, Debug)]
pub struct HopRecord {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
    pub update_norm: f64,
    pub relative_norm: f64,
    /// Routing-space position (empty for linear and hash routing).
    pub position: Vec<f64>,
    /// The Δh vector itself, retained for the probe battery.
    pub update: Vec<f64>,
}

/// Per-token trajectory telemetry.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryTrace {
    pub hops: Vec<HopRecord>,
    pub halted_at: Option<usize>,
}

impl TrajectoryTrace {
    pub fn executed_hops(&self) -> usize {
        self.hops.len()
    }
}

/// Routing probabilities of one hop, kept for the balance loss.
pub(crate) struct HopTelemetry {
    pub probs: Var,
    pub indices: Vec<usize>,
    pub rows: usize,
    pub k: usize,
}

pub(crate) enum PoolVars {
    Static { v: Var },
    Mlp { down: Var, up: Var, rank: usize },
}

pub(crate) struct LayerVars {
    /// One projection, or `hops` projections when decoupled. Empty for
    /// linear and hash routing.
    pub projections: Vec<Var>,
    pub centroids: Option<Var>,
    pub linear: Option<Var>,
    pub pool: PoolVars,
    /// Shared model-level output scalar.
    pub alpha: Option<Var>,
}

/// Per-layer slice of the run configuration.
pub(crate) struct LayerRun<'a> {
    pub hops: usize,
    pub k: usize,
    pub router: RouterKind,
    pub tau: f64,
    pub decoupled: bool,
    pub halting_eps: Option<f64>,
    pub frozen_routing: bool,
    pub layer_index: usize,
    /// Hash-routing key per token row (token id, or sequence index).
    pub token_keys: &'a [u64],
    /// Force Δh to zero (ablation probe); routing still runs nowhere.
    pub zero_experts: bool,
}

fn positions_for<T: Scalar>(
    tape: &mut Tape<T>,
    proj: Var,
    state_rows: Var,
) -> Result<Var> {
    let projected = tape.matmul(state_rows, proj)?;
    tape.l2_normalize(projected, T::of_f64(L2_EPS))
}

/// Layer output plus the bare update term for residual composition.
pub(crate) struct LayerOutput {
    /// x + (α·)h_accum.
    #[allow(dead_code)] // consumed by the layer tests; blocks add `update` to their own stream
    pub out: Var,
    /// (α·)h_accum alone, for callers adding it to their own residual stream.
    pub update: Var,
    pub traces: Vec<TrajectoryTrace>,
    pub telemetry: Vec<HopTelemetry>,
}

/// Forward pass of one expert sublayer over `x` [tokens × d_model].
///
/// Returns the layer output, per-token traces, and per-hop routing
/// probabilities for the balance loss (empty for hash routing).
pub(crate) fn stmoe_forward<T: Scalar>(
    tape: &mut Tape<T>,
    run: &LayerRun<'_>,
    vars: &LayerVars,
    x: Var,
) -> Result<LayerOutput> {
    let (t_rows, d_model) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
    if run.token_keys.len() != t_rows {
        return Err(Error::Shape("token key count differs from rows".to_string()));
    }
    let mut traces: Vec<TrajectoryTrace> = vec![TrajectoryTrace::default(); t_rows];
    let mut telemetry: Vec<HopTelemetry> = Vec::new();

    if run.zero_experts {
        // attention-only ablation: h_accum stays zero
        let update = tape.constant(Tensor::zeros(vec![t_rows, d_model]));
        return Ok(LayerOutput { out: x, update, traces, telemetry });
    }

    let mut accum = tape.constant(Tensor::zeros(vec![t_rows, d_model]));
    let mut state = x;
    let mut active: Vec<usize> = (0..t_rows).collect();

    // frozen mode pins every hop to the position computed from x
    let frozen_pos = if run.frozen_routing && run.router.uses_projection() {
        Some(positions_for(tape, vars.projections[0], x)?)
    } else {
        None
    };

    for hop in 0..run.hops {
        if active.is_empty() {
            break;
        }
        let all_active = active.len() == t_rows;
        let state_act = if all_active { state } else { tape.gather_rows(state, &active)? };

        let (indices, weights, probs, pos_act) = match run.router {
            RouterKind::Cosine | RouterKind::RandomFixed => {
                let pos_act = if let Some(p0) = frozen_pos {
                    if all_active {
                        p0
                    } else {
                        tape.gather_rows(p0, &active)?
                    }
                } else {
                    let proj = if run.decoupled {
                        vars.projections[hop]
                    } else {
                        vars.projections[0]
                    };
                    positions_for(tape, proj, state_act)?
                };
                let centroids = vars.centroids;
                let (idx, w, p) = route_rows_on_tape(
                    tape,
                    run.router,
                    centroids,
                    None,
                    run.tau,
                    pos_act,
                    run.k,
                )?;
                (idx, w, Some(p), Some(pos_act))
            }
            RouterKind::Linear => {
                let (idx, w, p) = route_rows_on_tape(
                    tape,
                    RouterKind::Linear,
                    None,
                    vars.linear,
                    1.0,
                    state_act,
                    run.k,
                )?;
                (idx, w, Some(p), None)
            }
            RouterKind::Hash => {
                let mut idx = Vec::with_capacity(active.len() * run.k);
                let m = match &vars.pool {
                    PoolVars::Static { v } => tape.value(*v).shape()[0],
                    PoolVars::Mlp { down, .. } => tape.value(*down).shape()[0],
                };
                for &t in &active {
                    let d = hash_route::<T>(run.token_keys[t], run.layer_index, m, run.k)?;
                    idx.extend(d.indices);
                }
                let w = T::of_f64(1.0 / run.k as f64);
                let weights = tape.constant(Tensor::from_vec(
                    vec![active.len(), run.k],
                    vec![w; active.len() * run.k],
                )?);
                (idx, weights, None, None)
            }
        };

        let delta_act = match &vars.pool {
            PoolVars::Static { v } => tape.moe_static_update(*v, &indices, run.k, weights)?,
            PoolVars::Mlp { down, up, rank } => {
                tape.moe_mlp_update(*down, *up, *rank, &indices, run.k, weights, state_act)?
            }
        };

        // telemetry and halting decisions read forward values only
        let mut halted_now: Vec<bool> = vec![false; active.len()];
        {
            let delta_vals = tape.value(delta_act);
            let state_vals = tape.value(state_act);
            let weight_vals = tape.value(weights);
            for (a_i, &t) in active.iter().enumerate() {
                let drow = &delta_vals.data()[a_i * d_model..(a_i + 1) * d_model];
                let srow = &state_vals.data()[a_i * d_model..(a_i + 1) * d_model];
                let update_norm = l2_norm_f64(drow);
                let relative_norm = update_norm / (l2_norm_f64(srow) + HALT_EPS);
                let position = match pos_act {
                    Some(p) => {
                        let pv = tape.value(p);
                        let cols = pv.shape()[1];
                        pv.data()[a_i * cols..(a_i + 1) * cols]
                            .iter()
                            .map(|v| v.as_f64())
                            .collect()
                    }
                    None => Vec::new(),
                };
                traces[t].hops.push(HopRecord {
                    experts: indices[a_i * run.k..(a_i + 1) * run.k].to_vec(),
                    weights: weight_vals.data()[a_i * run.k..(a_i + 1) * run.k]
                        .iter()
                        .map(|v| v.as_f64())
                        .collect(),
                    update_norm,
                    relative_norm,
                    position,
                    update: drow.iter().map(|v| v.as_f64()).collect(),
                });
                if let Some(eps) = run.halting_eps {
                    if relative_norm < eps {
                        halted_now[a_i] = true;
                        traces[t].halted_at = Some(hop);
                    }
                }
            }
        }

        if let Some(p) = probs {
            telemetry.push(HopTelemetry {
                probs: p,
                indices: indices.clone(),
                rows: active.len(),
                k: run.k,
            });
        }

        let delta_full =
            if all_active { delta_act } else { tape.scatter_rows(delta_act, &active, t_rows)? };
        accum = tape.add(accum, delta_full)?;
        state = tape.add(state, delta_full)?;

        if run.halting_eps.is_some() {
            active = active
                .iter()
                .enumerate()
                .filter(|&(a_i, _)| !halted_now[a_i])
                .map(|(_, &t)| t)
                .collect();
        }
    }

    let update = match vars.alpha {
        Some(alpha) => tape.scale_by_scalar(accum, alpha)?,
        None => accum,
    };
    let out = tape.add(x, update)?;
    Ok(LayerOutput { out, update, traces, telemetry })
}

/// Fraction of expert FLOPs skipped, in percent: 100·(1 − avg hops/H).
pub fn flop_savings_from_avg(avg_hops: f64, h: usize) -> Result<f64> {
    if h == 0 {
        return Err(Error::Config("H must be ≥ 1".to_string()));
    }
    Ok(100.0 * (1.0 - avg_hops / h as f64))
}

/// Savings over a collection of traces with configured depth `h`.
pub fn flop_savings(traces: &[TrajectoryTrace], h: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Config("no traces".to_string()));
    }
    let total: usize = traces.iter().map(|t| t.executed_hops()).sum();
    flop_savings_from_avg(total as f64 / traces.len() as f64, h)
}

/// Mean executed hops over traces.
pub fn mean_hops(traces: &[TrajectoryTrace]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().map(|t| t.executed_hops()).sum::<usize>() as f64 / traces.len() as f64
}

/// Line-delimited trace dump: one record per executed hop with fields
/// token, hop, experts, weights, update_norm, relative_norm, halted.
pub fn dump_traces(traces: &[TrajectoryTrace]) -> Vec<String> {
    let mut out = Vec::new();
    for (token, trace) in traces.iter().enumerate() {
        for (hop, rec) in trace.hops.iter().enumerate() {
            let experts =
                rec.experts.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
            let weights =
                rec.weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
            let halted = trace.halted_at == Some(hop);
            out.push(format!(
                "token={token} hop={hop} experts={experts} weights={weights} update_norm={} relative_norm={} halted={halted}",
                rec.update_norm, rec.relative_norm
            ));
        }
    }
    out
}

/// Mean Jaccard similarity between consecutive hops' expert sets.
/// Undefined (None) for trajectories with fewer than two executed hops.
pub fn hop_jaccard(trace: &TrajectoryTrace) -> Option<f64> {
    if trace.hops.len() < 2 {
        return None;
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for pair in trace.hops.windows(2) {
        let a: std::collections::BTreeSet<usize> = pair[0].experts.iter().copied().collect();
        let b: std::collections::BTreeSet<usize> = pair[1].experts.iter().copied().collect();
        let inter = a.intersection(&b).count();
        let union = a.union(&b).count();
        acc += inter as f64 / union as f64;
        n += 1;
    }
    Some(acc / n as f64)
}

#[cfg(test)]
mod tests;
