//! Kernel tests: spec'd op examples plus the central-difference suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::numkern::{finite_diff_grad, l2_norm_f64, Tape, Tensor, Var};

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Check tape gradients of an arbitrary op against central differences.
///
/// `build` composes the op under test from leaf vars; the harness reduces
/// its output to a scalar through a fixed pseudo-random weighting so every
/// output element influences the loss differently.
fn gradcheck<F>(inputs: &[Tensor<f64>], build: F, tol: f64, what: &str)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |tensors: &[Tensor<f64>]| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let n = tape.value(out).numel();
        let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * (i as f64 % 7.0)).collect();
        let scalar = tape.dot_const(out, weights).unwrap();
        tape.backward(scalar).unwrap();
        let loss = tape.value(scalar).data()[0];
        let grads = vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect();
        (loss, grads)
    };
    let (_, analytic) = run(inputs);
    for (i, input) in inputs.iter().enumerate() {
        let fd = finite_diff_grad(
            |probe| {
                let mut tensors: Vec<Tensor<f64>> = inputs.to_vec();
                tensors[i] = probe.clone();
                run(&tensors).0
            },
            input,
            1e-5,
        );
        let ad = analytic[i].as_ref().expect("missing gradient");
        for (j, (&a, &f)) in ad.iter().zip(fd.data()).enumerate() {
            let denom = a.abs().max(f.abs()).max(0.1);
            assert!(
                (a - f).abs() / denom < tol,
                "{what}: input {i} elem {j}: tape {a} vs fd {f}"
            );
        }
    }
}

// ── matmul ───────────────────────────────────────────────────────────

#[test]
fn matmul_identity_and_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(vec![3, 3], &mut rng);
    let mut tape = Tape::new();
    let idv = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    let out = tape.matmul(idv, av).unwrap();
    assert_eq!(tape.value(out).data(), a.data());

    let z = tape.constant(Tensor::zeros(vec![3, 2]));
    let out = tape.matmul(av, z).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn matmul_grad_of_sum_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(vec![4, 5], &mut rng);
    let b = rand_tensor(vec![5, 3], &mut rng);
    let mut tape = Tape::new();
    let av = tape.leaf(a, true);
    let bv = tape.constant(b.clone());
    let prod = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    let got = tape.grad(av).unwrap();
    // d/da sum(a·b) = ones · bᵀ, i.e. grad[i][p] = Σⱼ b[p][j]
    for i in 0..4 {
        for p in 0..5 {
            let want: f64 = (0..3).map(|j| b.data()[p * 3 + j]).sum();
            assert!((got[i * 5 + p] - want).abs() < 1e-12);
        }
    }
}

// ── l2_normalize ─────────────────────────────────────────────────────

#[test]
fn l2_normalize_matches_three_four_five() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
    let out = tape.l2_normalize(v, 1e-8).unwrap();
    assert!((tape.value(out).data()[0] - 0.6).abs() < 1e-7);
    assert!((tape.value(out).data()[1] - 0.8).abs() < 1e-7);
}

#[test]
fn l2_normalize_zero_vector_is_fixed_point() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros(vec![2]));
    let out = tape.l2_normalize(v, 1e-8).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
}

#[test]
fn l2_normalize_output_has_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let v = rand_tensor(vec![16], &mut rng);
        let mut tape = Tape::new();
        let vv = tape.constant(v);
        let out = tape.l2_normalize(vv, 1e-8).unwrap();
        let norm = l2_norm_f64(tape.value(out).data());
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
    }
}

// ── softmax ──────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_input_gives_uniform_output() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros(vec![4]));
    let out = tape.softmax(v).unwrap();
    for &p in tape.value(out).data() {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_saturates_at_large_margin() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::from_vec(vec![2], vec![30.0, 0.0]).unwrap());
    let out = tape.softmax(v).unwrap();
    assert!(tape.value(out).data()[0] > 1.0 - 1e-12);
}

#[test]
fn softmax_matches_exp_sum_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = rand_tensor(vec![8], &mut rng);
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let out = tape.softmax(vv).unwrap();
    let sum: f64 = v.data().iter().map(|x| x.exp()).sum();
    for (got, x) in tape.value(out).data().iter().zip(v.data()) {
        assert!((got - x.exp() / sum).abs() < 1e-12);
    }
}

#[test]
fn softmax_sums_to_one_for_extreme_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1e4..1e4)).collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(vec![12], data).unwrap());
        let out = tape.softmax(v).unwrap();
        let total: f64 = tape.value(out).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

// ── silu ─────────────────────────────────────────────────────────────

#[test]
fn silu_zero_and_derivative_at_zero() {
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap(), true);
    let out = tape.silu(v).unwrap();
    assert_eq!(tape.value(out).data()[0], 0.0);
    let loss = tape.sum(out).unwrap();
    tape.backward(loss).unwrap();
    assert!((tape.grad(v).unwrap()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn silu_derivative_matches_finite_difference() {
    for &x in &[-2.0, -0.5, 1.0, 3.0] {
        let t = Tensor::from_vec(vec![1], vec![x]).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut tape = Tape::new();
                let v = tape.constant(p.clone());
                let out = tape.silu(v).unwrap();
                tape.value(out).data()[0]
            },
            &t,
            1e-5,
        );
        let mut tape = Tape::new();
        let v = tape.leaf(t, true);
        let out = tape.silu(v).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        let ad = tape.grad(v).unwrap()[0];
        let rel = (ad - fd.data()[0]).abs() / ad.abs();
        assert!(rel < 1e-6, "x={x}: ad {ad} fd {}", fd.data()[0]);
    }
}

// ── layer_norm ───────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_input_gives_zeros() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![4], vec![3.5; 4]).unwrap());
    let gain = tape.constant(Tensor::ones(vec![4]));
    let bias = tape.constant(Tensor::zeros(vec![4]));
    let out = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_zero_gain_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(vec![8], &mut rng);
    let bias_vals: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let gain = tape.constant(Tensor::zeros(vec![8]));
    let bias = tape.constant(Tensor::from_vec(vec![8], bias_vals.clone()).unwrap());
    let out = tape.layer_norm(xv, gain, bias, 1e-5).unwrap();
    assert_eq!(tape.value(out).data(), bias_vals.as_slice());
}

#[test]
fn layer_norm_normalizes_before_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(vec![32], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let gain = tape.constant(Tensor::ones(vec![32]));
    let bias = tape.constant(Tensor::zeros(vec![32]));
    let out = tape.layer_norm(xv, gain, bias, 1e-9).unwrap();
    let vals = tape.value(out).data();
    let mean: f64 = vals.iter().sum::<f64>() / 32.0;
    let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
    assert!(mean.abs() < 1e-5);
    assert!((var - 1.0).abs() < 1e-5);
}

// ── rope ─────────────────────────────────────────────────────────────

#[test]
fn rope_position_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(vec![1, 8], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = tape.rope_apply(xv, 2, 10000.0).unwrap();
    assert_eq!(tape.value(out).data(), x.data());
}

#[test]
fn rope_preserves_per_head_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(vec![6, 12], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = tape.rope_apply(xv, 3, 10000.0).unwrap();
    for s in 0..6 {
        for h in 0..3 {
            let a = &x.data()[s * 12 + h * 4..s * 12 + h * 4 + 4];
            let b = &tape.value(out).data()[s * 12 + h * 4..s * 12 + h * 4 + 4];
            assert!((l2_norm_f64(a) - l2_norm_f64(b)).abs() < 1e-5);
        }
    }
}

#[test]
fn rope_rejects_odd_head_dim() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 6]));
    assert!(matches!(tape.rope_apply(x, 2, 10000.0), Err(Error::Shape(_))));
}

#[test]
fn rope_dot_products_depend_only_on_relative_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seq = 7;
    let dim = 8;
    let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tile = |row: &[f64]| {
        let mut data = Vec::with_capacity(seq * dim);
        for _ in 0..seq {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![seq, dim], data).unwrap()
    };
    let mut tape = Tape::new();
    let qv = tape.constant(tile(&q));
    let kv = tape.constant(tile(&k));
    let qr = tape.rope_apply(qv, 1, 10000.0).unwrap();
    let kr = tape.rope_apply(kv, 1, 10000.0).unwrap();
    let scores = tape.matmul_nt(qr, kr).unwrap();
    let sv = tape.value(scores).data();
    for i in 0..seq {
        for j in 0..seq {
            let (di, dj) = (i + 1, j + 1);
            if di < seq && dj < seq {
                assert!(
                    (sv[i * seq + j] - sv[di * seq + dj]).abs() < 1e-8,
                    "dot not shift-invariant at ({i},{j})"
                );
            }
        }
    }
}

// ── cross_entropy ────────────────────────────────────────────────────

#[test]
fn cross_entropy_uniform_logits_give_log_vocab() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(vec![3, 256]));
    let loss = tape.cross_entropy(logits, &[0, 100, 255]).unwrap();
    assert!((tape.value(loss).data()[0] - 256.0f64.ln()).abs() < 1e-9);
}

#[test]
fn cross_entropy_confident_correct_is_near_zero() {
    let mut data = vec![0.0; 2 * 8];
    data[3] = 30.0;
    data[8 + 5] = 30.0;
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_vec(vec![2, 8], data).unwrap());
    let loss = tape.cross_entropy(logits, &[3, 5]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(vec![2, 8]));
    assert!(matches!(tape.cross_entropy(logits, &[1, 8]), Err(Error::Index(_))));
}

// ── gradient suite: every differentiable op at three random shapes ───

#[test]
fn gradcheck_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for trial in 0..3 {
        let shape = vec![2 + trial, 3 + trial];
        let a = rand_tensor(shape.clone(), &mut rng);
        let b = rand_tensor(shape.clone(), &mut rng);
        gradcheck(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), 1e-4, "add");
        gradcheck(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), 1e-4, "sub");
        gradcheck(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-4, "mul");
        gradcheck(&[a.clone()], |t, v| t.scale(v[0], 1.7).unwrap(), 1e-4, "scale");
        gradcheck(&[a.clone()], |t, v| t.silu(v[0]).unwrap(), 1e-4, "silu");
        let mask: Vec<f64> = (0..a.numel()).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
        gradcheck(&[a.clone()], move |t, v| t.mul_const(v[0], mask.clone()).unwrap(), 1e-4, "mul_const");
        let s = Tensor::from_vec(vec![1], vec![2.5]).unwrap();
        gradcheck(&[a.clone(), s], |t, v| t.scale_by_scalar(v[0], v[1]).unwrap(), 1e-4, "scale_by_scalar");
    }
}

#[test]
fn gradcheck_matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for &(m, k, n) in &[(2, 3, 4), (1, 5, 2), (4, 2, 3)] {
        let a = rand_tensor(vec![m, k], &mut rng);
        let b = rand_tensor(vec![k, n], &mut rng);
        gradcheck(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap(), 1e-4, "matmul");
        let bt = rand_tensor(vec![n, k], &mut rng);
        gradcheck(&[a, bt], |t, v| t.matmul_nt(v[0], v[1]).unwrap(), 1e-4, "matmul_nt");
    }
}

#[test]
fn gradcheck_row_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for &(r, c) in &[(2, 5), (3, 4), (1, 8)] {
        let x = rand_tensor(vec![r, c], &mut rng);
        gradcheck(&[x.clone()], |t, v| t.softmax(v[0]).unwrap(), 1e-4, "softmax");
        gradcheck(&[x.clone()], |t, v| t.l2_normalize(v[0], 1e-8).unwrap(), 1e-4, "l2_normalize");
        let gain = rand_tensor(vec![c], &mut rng);
        let bias = rand_tensor(vec![c], &mut rng);
        gradcheck(
            &[x.clone(), gain, bias],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            1e-4,
            "layer_norm",
        );
        gradcheck(&[x.clone()], |t, v| t.mean_rows(v[0]).unwrap(), 1e-4, "mean_rows");
        // strictly positive rows keep the row-sum away from zero
        let mut pos = x.clone();
        for v in pos.data_mut() {
            *v = v.abs() + 0.5;
        }
        gradcheck(&[pos], |t, v| t.div_rows_by_sum(v[0]).unwrap(), 1e-4, "div_rows_by_sum");
    }
    for &n in &[2usize, 4, 6] {
        let x = rand_tensor(vec![n, n], &mut rng);
        gradcheck(&[x], |t, v| t.causal_softmax(v[0]).unwrap(), 1e-4, "causal_softmax");
    }
}

#[test]
fn gradcheck_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..3u64 {
        let r = 3 + trial as usize;
        let x = rand_tensor(vec![r, 6], &mut rng);
        gradcheck(&[x.clone()], |t, v| t.select_cols(v[0], 1, 3).unwrap(), 1e-4, "select_cols");
        let y = rand_tensor(vec![r, 2], &mut rng);
        gradcheck(
            &[x.clone(), y],
            |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
            1e-4,
            "concat_cols",
        );
        gradcheck(&[x.clone()], |t, v| t.sum(v[0]).unwrap(), 1e-4, "sum");
        let w: Vec<f64> = (0..x.numel()).map(|i| (i as f64) * 0.1 - 0.7).collect();
        gradcheck(&[x.clone()], move |t, v| t.dot_const(v[0], w.clone()).unwrap(), 1e-4, "dot_const");
        let rows: Vec<usize> = vec![r - 1, 0, 1];
        gradcheck(&[x.clone()], move |t, v| t.gather_rows(v[0], &rows).unwrap(), 1e-4, "gather_rows");
        let dests: Vec<usize> = (0..r).map(|i| (i * 3 + 1) % 8).collect();
        gradcheck(
            &[x.clone()],
            move |t, v| t.scatter_rows(v[0], &dests, 8).unwrap(),
            1e-4,
            "scatter_rows",
        );
        let idx: Vec<usize> = (0..r * 2).map(|i| (i * 3 + 1) % 6).collect();
        gradcheck(
            &[x.clone()],
            move |t, v| t.gather_rows_cols(v[0], &idx, 2).unwrap(),
            1e-4,
            "gather_rows_cols",
        );
    }
}

#[test]
fn gradcheck_rope_and_cross_entropy_and_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for &(seq, heads, hd) in &[(3, 1, 4), (2, 2, 4), (4, 2, 2)] {
        let x = rand_tensor(vec![seq, heads * hd], &mut rng);
        gradcheck(&[x], move |t, v| t.rope_apply(v[0], heads, 10000.0).unwrap(), 1e-4, "rope");
    }
    for &(n, vocab) in &[(2, 5), (4, 3), (8, 16)] {
        let logits = rand_tensor(vec![n, vocab], &mut rng);
        let targets: Vec<usize> = (0..n).map(|i| (i * 7) % vocab).collect();
        gradcheck(
            &[logits],
            move |t, v| t.cross_entropy(v[0], &targets).unwrap(),
            1e-4,
            "cross_entropy",
        );
    }
    for &(vocab, d, n) in &[(5, 3, 4), (7, 2, 6), (4, 4, 2)] {
        let table = rand_tensor(vec![vocab, d], &mut rng);
        let ids: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % vocab).collect();
        gradcheck(&[table], move |t, v| t.embedding(v[0], &ids).unwrap(), 1e-4, "embedding");
    }
}

#[test]
fn gradcheck_moe_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for &(m, d, tokens, k) in &[(4, 3, 2, 2), (6, 4, 3, 3), (3, 2, 4, 1)] {
        let pool = rand_tensor(vec![m, d], &mut rng);
        let mut weights = rand_tensor(vec![tokens, k], &mut rng);
        for v in weights.data_mut() {
            *v = v.abs() + 0.1;
        }
        let indices: Vec<usize> = (0..tokens * k).map(|i| (i * 2 + 1) % m).collect();
        let idx = indices.clone();
        gradcheck(
            &[pool, weights.clone()],
            move |t, v| t.moe_static_update(v[0], &idx, k, v[1]).unwrap(),
            1e-4,
            "moe_static_update",
        );
        for &rank in &[1usize, 2] {
            let wd = rand_tensor(vec![m, rank * d], &mut rng);
            let wu = rand_tensor(vec![m, d * rank], &mut rng);
            let h = rand_tensor(vec![tokens, d], &mut rng);
            let idx = indices.clone();
            gradcheck(
                &[wd, wu, weights.clone(), h],
                move |t, v| t.moe_mlp_update(v[0], v[1], rank, &idx, k, v[2], v[3]).unwrap(),
                1e-4,
                "moe_mlp_update",
            );
        }
    }
}

// ── determinism ──────────────────────────────────────────────────────

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = rand_tensor(vec![5, 7], &mut rng);
        let b = rand_tensor(vec![7, 4], &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(a, true);
        let bv = tape.leaf(b, true);
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.softmax(c).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        (
            tape.value(l).data()[0].to_bits(),
            tape.grad(av).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
