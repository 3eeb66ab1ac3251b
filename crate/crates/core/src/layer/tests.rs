//! Layer tests: degenerate hop counts, a hand-unrolled multi-hop oracle,
//! halting behavior, frozen routing, and the accounting identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::experts::{update_static, StaticPool};
use crate::routing::{position, route, RoutingSpace};

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[derive(Clone)]
enum FixturePool {
    Static(Tensor<f64>),
    Mlp { down: Tensor<f64>, up: Tensor<f64>, rank: usize },
}

#[derive(Clone)]
struct Fixture {
    hops: usize,
    k: usize,
    tau: f64,
    projections: Vec<Tensor<f64>>,
    centroids: Tensor<f64>,
    pool: FixturePool,
}

#[derive(Clone, Copy, Default)]
struct RunOpts {
    halting_eps: Option<f64>,
    frozen: bool,
    alpha: Option<f64>,
    decoupled: bool,
}

impl Fixture {
    fn random(
        hops: usize,
        k: usize,
        d_model: usize,
        d_space: usize,
        m: usize,
        mlp_rank: Option<usize>,
        n_proj: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let projections =
            (0..n_proj).map(|_| rand_tensor(vec![d_model, d_space], rng)).collect();
        let centroids = rand_tensor(vec![m, d_space], rng);
        let pool = match mlp_rank {
            None => FixturePool::Static(rand_tensor(vec![m, d_model], rng)),
            Some(r) => FixturePool::Mlp {
                down: rand_tensor(vec![m, r * d_model], rng),
                up: rand_tensor(vec![m, d_model * r], rng),
                rank: r,
            },
        };
        Fixture { hops, k, tau: 30.0, projections, centroids, pool }
    }

    fn run(&self, x: &Tensor<f64>, opts: RunOpts) -> (Tensor<f64>, Vec<TrajectoryTrace>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let projections: Vec<Var> =
            self.projections.iter().map(|p| tape.constant(p.clone())).collect();
        let centroids = tape.constant(self.centroids.clone());
        let pool = match &self.pool {
            FixturePool::Static(v) => PoolVars::Static { v: tape.constant(v.clone()) },
            FixturePool::Mlp { down, up, rank } => PoolVars::Mlp {
                down: tape.constant(down.clone()),
                up: tape.constant(up.clone()),
                rank: *rank,
            },
        };
        let alpha = opts
            .alpha
            .map(|a| tape.leaf(Tensor::from_vec(vec![1], vec![a]).unwrap(), true));
        let vars = LayerVars { projections, centroids: Some(centroids), linear: None, pool, alpha };
        let token_keys: Vec<u64> = (0..x.shape()[0] as u64).collect();
        let run = LayerRun {
            hops: self.hops,
            k: self.k,
            router: RouterKind::Cosine,
            tau: self.tau,
            decoupled: opts.decoupled,
            halting_eps: opts.halting_eps,
            frozen_routing: opts.frozen,
            layer_index: 0,
            token_keys: &token_keys,
            zero_experts: false,
        };
        let lo = stmoe_forward(&mut tape, &run, &vars, xv).unwrap();
        (tape.value(lo.out).clone(), lo.traces)
    }
}

// Plain-loop reference for the multi-hop forward, written independently
// of the tape. One token at a time, fresh state sum per hop.
fn oracle_forward(fx: &Fixture, x: &[f64], d_model: usize) -> Vec<f64> {
    let d_space = fx.projections[0].shape()[1];
    let m = fx.centroids.shape()[0];
    let mut h_accum = vec![0.0f64; d_model];
    for hop in 0..fx.hops {
        let state: Vec<f64> = x.iter().zip(&h_accum).map(|(a, b)| a + b).collect();
        let proj = &fx.projections[if fx.projections.len() > 1 { hop } else { 0 }];
        let mut pos = vec![0.0f64; d_space];
        for j in 0..d_space {
            for i in 0..d_model {
                pos[j] += state[i] * proj.data()[i * d_space + j];
            }
        }
        let norm = pos.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        for v in pos.iter_mut() {
            *v /= norm;
        }
        let mut scores = vec![0.0f64; m];
        for e in 0..m {
            let row = &fx.centroids.data()[e * d_space..(e + 1) * d_space];
            let cn = row.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
            scores[e] = fx.tau * row.iter().zip(&pos).map(|(c, p)| (c / cn) * p).sum::<f64>();
        }
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let sel = &order[..fx.k];
        let wsum: f64 = sel.iter().map(|&e| probs[e]).sum();
        for (j, &e) in sel.iter().enumerate() {
            let w = probs[e] / wsum;
            match &fx.pool {
                FixturePool::Static(v) => {
                    for c in 0..d_model {
                        h_accum[c] += w * v.data()[e * d_model + c];
                    }
                }
                FixturePool::Mlp { down, up, rank } => {
                    let wd = &down.data()[e * rank * d_model..(e + 1) * rank * d_model];
                    let wu = &up.data()[e * d_model * rank..(e + 1) * d_model * rank];
                    for r in 0..*rank {
                        let zz: f64 = state
                            .iter()
                            .zip(&wd[r * d_model..(r + 1) * d_model])
                            .map(|(a, b)| a * b)
                            .sum();
                        let act = zz / (1.0 + (-zz).exp());
                        for c in 0..d_model {
                            h_accum[c] += w * wu[c * rank + r] * act;
                        }
                    }
                }
            }
            let _ = j;
        }
    }
    x.iter().zip(&h_accum).map(|(a, b)| a + b).collect()
}

#[test]
fn single_hop_reduces_to_route_plus_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fx = Fixture::random(1, 3, 6, 4, 8, None, 1, &mut rng);
    let x = rand_tensor(vec![2, 6], &mut rng);
    let (out, traces) = fx.run(&x, RunOpts::default());
    let space = RoutingSpace::cosine(fx.projections[0].clone(), fx.centroids.clone(), None, 30.0);
    let FixturePool::Static(v) = &fx.pool else { unreachable!() };
    let pool = StaticPool { v: v.clone() };
    for t in 0..2 {
        let h = Tensor::from_vec(vec![6], x.data()[t * 6..(t + 1) * 6].to_vec()).unwrap();
        let pos = position(&space, &h).unwrap();
        let d = route(&space, &pos, 3).unwrap();
        assert_eq!(traces[t].hops[0].experts, d.indices);
        let delta = update_static(&pool, &d).unwrap();
        for c in 0..6 {
            let want = h.data()[c] + delta.data()[c];
            assert!((out.data()[t * 6 + c] - want).abs() < 1e-12);
        }
        assert_eq!(traces[t].executed_hops(), 1);
    }
}

#[test]
fn zero_pool_returns_input_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fx = Fixture::random(3, 2, 5, 3, 4, None, 1, &mut rng);
    fx.pool = FixturePool::Static(Tensor::zeros(vec![4, 5]));
    let x = rand_tensor(vec![3, 5], &mut rng);
    let (out, _) = fx.run(&x, RunOpts::default());
    assert_eq!(out.data(), x.data());

    let mut fx2 = Fixture::random(3, 2, 5, 3, 4, Some(1), 1, &mut rng);
    fx2.pool = FixturePool::Mlp {
        down: Tensor::zeros(vec![4, 5]),
        up: Tensor::zeros(vec![4, 5]),
        rank: 1,
    };
    let (out2, _) = fx2.run(&x, RunOpts::default());
    assert_eq!(out2.data(), x.data());
}

#[test]
fn three_hop_forward_matches_hand_unrolled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mlp_rank in [None, Some(1), Some(2)] {
        let fx = Fixture::random(3, 2, 8, 4, 4, mlp_rank, 1, &mut rng);
        let x = rand_tensor(vec![3, 8], &mut rng);
        let (out, traces) = fx.run(&x, RunOpts::default());
        for t in 0..3 {
            let want = oracle_forward(&fx, &x.data()[t * 8..(t + 1) * 8], 8);
            for c in 0..8 {
                let got = out.data()[t * 8 + c];
                assert!(
                    (got - want[c]).abs() < 1e-10,
                    "rank {mlp_rank:?} token {t} col {c}: {got} vs {}",
                    want[c]
                );
            }
            assert_eq!(traces[t].executed_hops(), 3);
        }
    }
}

#[test]
fn decoupled_oracle_uses_per_hop_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fx = Fixture::random(3, 2, 8, 4, 4, Some(1), 3, &mut rng);
    let x = rand_tensor(vec![2, 8], &mut rng);
    let (out, _) = fx.run(&x, RunOpts { decoupled: true, ..Default::default() });
    for t in 0..2 {
        let want = oracle_forward(&fx, &x.data()[t * 8..(t + 1) * 8], 8);
        for c in 0..8 {
            assert!((out.data()[t * 8 + c] - want[c]).abs() < 1e-10);
        }
    }
}

#[test]
fn halting_eps_zero_never_halts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fx = Fixture::random(3, 2, 6, 3, 4, Some(1), 1, &mut rng);
    let x = rand_tensor(vec![4, 6], &mut rng);
    let (_, traces) = fx.run(&x, RunOpts { halting_eps: Some(0.0), ..Default::default() });
    assert!(traces.iter().all(|t| t.executed_hops() == 3 && t.halted_at.is_none()));
    assert_eq!(mean_hops(&traces), 3.0);
}

#[test]
fn halting_huge_eps_halts_after_first_hop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fx = Fixture::random(3, 2, 6, 3, 4, Some(1), 1, &mut rng);
    let x = rand_tensor(vec![4, 6], &mut rng);
    let (_, traces) = fx.run(&x, RunOpts { halting_eps: Some(1e9), ..Default::default() });
    assert!(traces.iter().all(|t| t.executed_hops() == 1 && t.halted_at == Some(0)));
    assert_eq!(mean_hops(&traces), 1.0);
}

#[test]
fn halting_criterion_arithmetic() {
    // every expert shares the vector 0.05·e₂, so ‖Δh‖ = 0.05 exactly;
    // x = e₁ has norm 1, and 0.05/(1+1e-6) < 0.1 must trigger the halt
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut fx = Fixture::random(3, 2, 4, 3, 4, None, 1, &mut rng);
    let mut pool = Tensor::<f64>::zeros(vec![4, 4]);
    for e in 0..4 {
        pool.data_mut()[e * 4 + 1] = 0.05;
    }
    fx.pool = FixturePool::Static(pool);
    let mut x = Tensor::<f64>::zeros(vec![1, 4]);
    x.data_mut()[0] = 1.0;
    let (_, traces) = fx.run(&x, RunOpts { halting_eps: Some(0.1), ..Default::default() });
    let rec = &traces[0].hops[0];
    assert!((rec.update_norm - 0.05).abs() < 1e-12);
    assert!((rec.relative_norm - 0.05 / (1.0 + 1e-6)).abs() < 1e-12);
    assert_eq!(traces[0].halted_at, Some(0));
    assert_eq!(traces[0].executed_hops(), 1);
}

#[test]
fn mean_hops_non_increasing_in_eps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fx = Fixture::random(4, 2, 8, 4, 6, Some(1), 1, &mut rng);
    let x = rand_tensor(vec![12, 8], &mut rng);
    let mut last = f64::INFINITY;
    for eps in [0.0, 0.05, 0.1, 0.3, 0.8, 2.0, 1e6] {
        let (_, traces) = fx.run(&x, RunOpts { halting_eps: Some(eps), ..Default::default() });
        let hops = mean_hops(&traces);
        assert!(hops <= last + 1e-12, "eps {eps}: {hops} > {last}");
        last = hops;
    }
}

#[test]
fn masked_halting_matches_sequential_per_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fx = Fixture::random(4, 2, 8, 4, 6, Some(1), 1, &mut rng);
    let x = rand_tensor(vec![6, 8], &mut rng);
    let opts = RunOpts { halting_eps: Some(0.35), ..Default::default() };
    let (batch_out, batch_traces) = fx.run(&x, opts);
    // at least one token must actually halt early for this to exercise masking
    assert!(batch_traces.iter().any(|t| t.halted_at.is_some()));
    for t in 0..6 {
        let xt = Tensor::from_vec(vec![1, 8], x.data()[t * 8..(t + 1) * 8].to_vec()).unwrap();
        let (solo_out, solo_traces) = fx.run(&xt, opts);
        for c in 0..8 {
            assert_eq!(
                solo_out.data()[c].to_bits(),
                batch_out.data()[t * 8 + c].to_bits(),
                "token {t} col {c} differs between masked and sequential"
            );
        }
        assert_eq!(solo_traces[0].executed_hops(), batch_traces[t].executed_hops());
        assert_eq!(solo_traces[0].halted_at, batch_traces[t].halted_at);
    }
}

#[test]
fn frozen_routing_gives_unit_jaccard_and_collinear_static_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let fx = Fixture::random(3, 2, 6, 3, 5, None, 1, &mut rng);
    let x = rand_tensor(vec![4, 6], &mut rng);
    let (_, traces) = fx.run(&x, RunOpts { frozen: true, ..Default::default() });
    for trace in &traces {
        assert_eq!(hop_jaccard(trace), Some(1.0));
        // identical selections + static experts ⇒ identical Δh per hop
        let first = &trace.hops[0].update;
        for hop in &trace.hops[1..] {
            let dot: f64 = first.iter().zip(&hop.update).map(|(a, b)| a * b).sum();
            let n0 = l2_norm_f64(first);
            let n1 = l2_norm_f64(&hop.update);
            assert!((dot / (n0 * n1) - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn alpha_of_one_is_bitwise_identical_to_unscaled() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fx = Fixture::random(3, 2, 8, 4, 6, Some(1), 1, &mut rng);
    let x = rand_tensor(vec![5, 8], &mut rng);
    let (plain, _) = fx.run(&x, RunOpts::default());
    let (scaled, _) = fx.run(&x, RunOpts { alpha: Some(1.0), ..Default::default() });
    for (a, b) in plain.data().iter().zip(scaled.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn equal_initialization_makes_decoupled_match_shared_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shared = Fixture::random(3, 2, 8, 4, 6, Some(1), 1, &mut rng);
    let mut decoupled = shared.clone();
    decoupled.projections = vec![shared.projections[0].clone(); 3];
    let x = rand_tensor(vec![4, 8], &mut rng);
    let (a, _) = shared.run(&x, RunOpts::default());
    let (b, _) = decoupled.run(&x, RunOpts { decoupled: true, ..Default::default() });
    for (x0, x1) in a.data().iter().zip(b.data()) {
        assert_eq!(x0.to_bits(), x1.to_bits());
    }
}

#[test]
fn flop_savings_reference_operating_points() {
    assert!((flop_savings_from_avg(2.25, 3).unwrap() - 25.0).abs() < 1e-9);
    // the reference operating point is quoted at one decimal: 1 − 2.21/3 → 26.3%
    let s = flop_savings_from_avg(2.21, 3).unwrap();
    assert!(((s * 10.0).round() / 10.0 - 26.3).abs() < 1e-9);
    assert!((flop_savings_from_avg(3.0, 3).unwrap() - 0.0).abs() < 1e-12);
}

#[test]
fn flop_savings_identity_holds_on_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let fx = Fixture::random(3, 2, 6, 3, 4, Some(1), 1, &mut rng);
    let x = rand_tensor(vec![8, 6], &mut rng);
    for eps in [0.0, 0.2, 0.6] {
        let (_, traces) = fx.run(&x, RunOpts { halting_eps: Some(eps), ..Default::default() });
        let savings = flop_savings(&traces, 3).unwrap();
        let identity = 100.0 * (1.0 - mean_hops(&traces) / 3.0);
        assert!((savings - identity).abs() < 1e-12);
    }
    let (_, traces) = fx.run(&x, RunOpts { halting_eps: Some(0.0), ..Default::default() });
    assert_eq!(flop_savings(&traces, 3).unwrap(), 0.0);
}

#[test]
fn hop_jaccard_arithmetic_cases() {
    let rec = |experts: Vec<usize>| HopRecord {
        experts,
        weights: vec![],
        update_norm: 0.0,
        relative_norm: 0.0,
        position: vec![],
        update: vec![],
    };
    let disjoint = TrajectoryTrace {
        hops: vec![rec(vec![1, 2]), rec(vec![3, 4])],
        halted_at: None,
    };
    assert_eq!(hop_jaccard(&disjoint), Some(0.0));
    let overlap = TrajectoryTrace {
        hops: vec![rec(vec![1, 2, 3, 4]), rec(vec![3, 4, 5, 6])],
        halted_at: None,
    };
    assert!((hop_jaccard(&overlap).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    let single = TrajectoryTrace { hops: vec![rec(vec![1])], halted_at: None };
    assert_eq!(hop_jaccard(&single), None);
}

#[test]
fn trace_dump_carries_all_hop_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let fx = Fixture::random(2, 2, 6, 3, 4, None, 1, &mut rng);
    let x = rand_tensor(vec![2, 6], &mut rng);
    let (_, traces) = fx.run(&x, RunOpts { halting_eps: Some(1e9), ..Default::default() });
    let lines = dump_traces(&traces);
    assert_eq!(lines.len(), 2); // every token halts after hop 0
    assert!(lines[0].starts_with("token=0 hop=0 experts="));
    assert!(lines[0].contains("update_norm="));
    assert!(lines[0].contains("relative_norm="));
    assert!(lines[0].ends_with("halted=true"));
    assert!(lines[1].starts_with("token=1 "));
}

#[test]
fn hash_routing_layer_uses_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let v = rand_tensor(vec![8, 6], &mut rng);
    let x = rand_tensor(vec![3, 6], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pool = PoolVars::Static { v: tape.constant(v) };
    let vars =
        LayerVars { projections: vec![], centroids: None, linear: None, pool, alpha: None };
    let keys = vec![7u64, 7, 99];
    let run = LayerRun {
        hops: 2,
        k: 4,
        router: RouterKind::Hash,
        tau: 1.0,
        decoupled: false,
        halting_eps: None,
        frozen_routing: false,
        layer_index: 1,
        token_keys: &keys,
        zero_experts: false,
    };
    let lo = stmoe_forward(&mut tape, &run, &vars, xv).unwrap();
    let traces = lo.traces;
    assert!(lo.telemetry.is_empty());
    // same key ⇒ same trajectory; weights all 1/k
    assert_eq!(traces[0].hops[0].experts, traces[1].hops[0].experts);
    assert_ne!(traces[0].hops[0].experts, traces[2].hops[0].experts);
    for trace in &traces {
        for hop in &trace.hops {
            for &w in &hop.weights {
                assert!((w - 0.25).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_experts_flag_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let fx = Fixture::random(3, 2, 6, 3, 4, Some(1), 1, &mut rng);
    let x = rand_tensor(vec![2, 6], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let projections: Vec<Var> =
        fx.projections.iter().map(|p| tape.constant(p.clone())).collect();
    let centroids = tape.constant(fx.centroids.clone());
    let FixturePool::Mlp { down, up, rank } = &fx.pool else { unreachable!() };
    let pool = PoolVars::Mlp {
        down: tape.constant(down.clone()),
        up: tape.constant(up.clone()),
        rank: *rank,
    };
    let vars =
        LayerVars { projections, centroids: Some(centroids), linear: None, pool, alpha: None };
    let keys = vec![0u64, 1];
    let run = LayerRun {
        hops: 3,
        k: 2,
        router: RouterKind::Cosine,
        tau: 30.0,
        decoupled: false,
        halting_eps: None,
        frozen_routing: false,
        layer_index: 0,
        token_keys: &keys,
        zero_experts: true,
    };
    let lo = stmoe_forward(&mut tape, &run, &vars, xv).unwrap();
    assert_eq!(tape.value(lo.out).data(), x.data());
    assert!(tape.value(lo.update).data().iter().all(|&v| v == 0.0));
    assert!(lo.traces.iter().all(|t| t.executed_hops() == 0));
}
