//! Op-level oracle tests: every primitive's gradient is checked against
//! central finite differences, and the worked softmax/backward examples are
//! frozen against hand oracles.

use proptest::prelude::*;
use rand::Rng;

use super::graph::{Graph, NodeId};
use super::scalar::Scalar;
use super::tensor::{ParamId, ParamSet, ParamStore, Parameter, Tensor};
use crate::seeds;

const TOL_F64: f64 = 1e-5;
const TOL_F32: f64 = 1e-3;
const FD_STEP: f64 = 1e-4;

fn rand_values<F: Scalar>(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<F> {
    let mut rng = seeds::rng_for(&[0xFD, seed]);
    (0..n)
        .map(|_| F::from_f64(lo + (hi - lo) * rng.random::<f64>()))
        .collect()
}

fn cast_inputs<F: Scalar>(inputs: &[(Vec<usize>, Vec<f64>)]) -> Vec<(Vec<usize>, Vec<F>)> {
    inputs
        .iter()
        .map(|(s, v)| (s.clone(), v.iter().map(|&x| F::from_f64(x)).collect()))
        .collect()
}

/// Evaluate the weighted-sum loss of `build` at precision `F`, optionally
/// collecting per-input analytic gradients.
fn eval_loss<F: Scalar>(
    inputs: &[(Vec<usize>, Vec<F>)],
    build: fn(&mut Graph<F>, &[NodeId]) -> NodeId,
    want_grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(shape, v)| g.leaf(shape.clone(), v.clone(), true))
        .collect();
    let out = build(&mut g, &ids);
    let w = g.constant(
        g.shape(out).to_vec(),
        rand_values(g.values(out).len(), 99, 0.1, 1.0),
    );
    let weighted = g.mul(out, w);
    let loss = g.sum(weighted);
    let loss_val = g.scalar_value(loss).as_f64();
    let grads = if want_grads {
        g.backward(loss).unwrap();
        ids.iter()
            .map(|&id| g.grad(id).expect("leaf grad").iter().map(|v| v.as_f64()).collect())
            .collect()
    } else {
        Vec::new()
    };
    (loss_val, grads)
}

/// Check analytic gradients at precision `FA` against central finite
/// differences of the same computation evaluated in f64. Running the FD side
/// in f64 keeps the difference quotient clear of f32 rounding noise; the
/// comparison still measures the 32-bit backward pass.
fn fd_check<FA: Scalar>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build_ad: fn(&mut Graph<FA>, &[NodeId]) -> NodeId,
    build_fd: fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    tol: f64,
) {
    let typed = cast_inputs::<FA>(inputs);
    // The f64 reference evaluates at the values FA actually sees.
    let rounded: Vec<(Vec<usize>, Vec<f64>)> = typed
        .iter()
        .map(|(s, v)| (s.clone(), v.iter().map(|x| x.as_f64()).collect()))
        .collect();
    let (_, grads) = eval_loss(&typed, build_ad, true);

    for (ii, (_, vals)) in rounded.iter().enumerate() {
        for e in 0..vals.len() {
            let mut plus = rounded.clone();
            plus[ii].1[e] += FD_STEP;
            let mut minus = rounded.clone();
            minus[ii].1[e] -= FD_STEP;
            let fd = (eval_loss::<f64>(&plus, build_fd, false).0
                - eval_loss::<f64>(&minus, build_fd, false).0)
                / (2.0 * FD_STEP);
            let ad = grads[ii][e];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                rel < tol,
                "input {ii} entry {e}: ad={ad} fd={fd} rel={rel} tol={tol}"
            );
        }
    }
}

// Each op body is written once and instantiated at both precisions: f64
// against the tight tolerance, f32 against the relaxed one.
macro_rules! fd_case {
    ($name:ident, $inputs:expr, |$g:ident, $ids:ident| $body:expr) => {
        #[test]
        fn $name() {
            fn build<F: Scalar>($g: &mut Graph<F>, $ids: &[NodeId]) -> NodeId {
                $body
            }
            let inputs: Vec<(Vec<usize>, Vec<f64>)> = $inputs;
            fd_check::<f64>(&inputs, build::<f64>, build::<f64>, TOL_F64);
            fd_check::<f32>(&inputs, build::<f32>, build::<f64>, TOL_F32);
        }
    };
}

fn unit(shape: Vec<usize>, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape, rand_values(n, seed, -1.0, 1.0))
}

fn positive(shape: Vec<usize>, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape, rand_values(n, seed, 0.5, 1.5))
}

fd_case!(fd_matmul, vec![unit(vec![3, 4], 1), unit(vec![4, 5], 2)], |g, ids| {
    g.matmul(ids[0], ids[1])
});

fd_case!(fd_matmul_bt, vec![unit(vec![3, 4], 3), unit(vec![5, 4], 4)], |g, ids| {
    g.matmul_bt(ids[0], ids[1])
});

fd_case!(fd_add_same, vec![unit(vec![2, 3], 5), unit(vec![2, 3], 6)], |g, ids| {
    g.add(ids[0], ids[1])
});

fd_case!(fd_add_broadcast, vec![unit(vec![4, 3], 7), unit(vec![3], 8)], |g, ids| {
    g.add(ids[0], ids[1])
});

fd_case!(fd_sub, vec![unit(vec![2, 3], 9), unit(vec![2, 3], 10)], |g, ids| {
    g.sub(ids[0], ids[1])
});

fd_case!(fd_mul_same, vec![unit(vec![2, 3], 11), unit(vec![2, 3], 12)], |g, ids| {
    g.mul(ids[0], ids[1])
});

fd_case!(fd_mul_broadcast, vec![unit(vec![4, 3], 13), unit(vec![3], 14)], |g, ids| {
    g.mul(ids[0], ids[1])
});

fd_case!(fd_div, vec![unit(vec![2, 3], 15), positive(vec![2, 3], 16)], |g, ids| {
    g.div(ids[0], ids[1])
});

fd_case!(fd_mul_scalar, vec![unit(vec![2, 3], 17)], |g, ids| {
    g.mul_scalar(ids[0], Scalar::from_f64(-1.7))
});

fd_case!(fd_gelu, vec![unit(vec![3, 3], 18)], |g, ids| g.gelu(ids[0]));

fd_case!(fd_softmax, vec![unit(vec![3, 5], 19)], |g, ids| g.softmax(ids[0]));

fd_case!(fd_log_softmax, vec![unit(vec![3, 5], 20)], |g, ids| {
    g.log_softmax(ids[0])
});

fd_case!(
    fd_layer_norm,
    vec![unit(vec![3, 4], 21), positive(vec![4], 22), unit(vec![4], 23)],
    |g, ids| g.layer_norm(ids[0], ids[1], ids[2])
);

fd_case!(fd_gather_rows, vec![unit(vec![4, 3], 24)], |g, ids| {
    g.gather_rows(ids[0], vec![2, 0, 2, 1])
});

fd_case!(fd_scatter_add_rows, vec![unit(vec![3, 2], 25)], |g, ids| {
    g.scatter_add_rows(ids[0], vec![4, 0, 4], 5)
});

fd_case!(fd_select_per_row, vec![unit(vec![3, 4], 26)], |g, ids| {
    g.select_per_row(ids[0], vec![1, 3, 0])
});

fd_case!(
    fd_scale_rows,
    vec![unit(vec![3, 4], 27), unit(vec![3], 28)],
    |g, ids| g.scale_rows(ids[0], ids[1])
);

fd_case!(
    fd_stack_rows,
    vec![unit(vec![3], 29), unit(vec![3], 30)],
    |g, ids| g.stack_rows(&[ids[0], ids[1], ids[0]])
);

fd_case!(
    fd_concat_rows,
    vec![unit(vec![2, 3], 31), unit(vec![4, 3], 32)],
    |g, ids| g.concat_rows(&[ids[0], ids[1]])
);

fd_case!(
    fd_concat_cols,
    vec![unit(vec![3, 2], 33), unit(vec![3, 4], 34)],
    |g, ids| g.concat_cols(&[ids[0], ids[1]])
);

fd_case!(fd_slice_cols, vec![unit(vec![3, 5], 35)], |g, ids| {
    g.slice_cols(ids[0], 1, 3)
});

fd_case!(fd_slice_rows, vec![unit(vec![5, 3], 36)], |g, ids| {
    g.slice_rows(ids[0], 2, 2)
});

fd_case!(fd_sum, vec![unit(vec![3, 3], 37)], |g, ids| g.sum(ids[0]));

fd_case!(fd_mean, vec![unit(vec![3, 3], 38)], |g, ids| g.mean(ids[0]));

fd_case!(fd_cross_entropy, vec![unit(vec![4, 6], 39)], |g, ids| {
    g.cross_entropy(ids[0], vec![0, 5, 2, 2])
});

fd_case!(fd_soft_cross_entropy, vec![unit(vec![3, 5], 40)], |g, ids| {
    // Teacher rows: fixed positive weights, deliberately not normalized to
    // exercise the exact gradient formula.
    let t = g.constant(vec![3, 5], rand_values(15, 41, 0.05, 0.4));
    g.soft_cross_entropy(ids[0], t)
});

fd_case!(fd_attention_composition, vec![unit(vec![4, 6], 42)], |g, ids| {
    // Causal single-head attention composed from primitives.
    let q = g.slice_cols(ids[0], 0, 3);
    let k = g.slice_cols(ids[0], 3, 3);
    let scores = g.matmul_bt(q, k);
    let scaled = g.mul_scalar(scores, Scalar::from_f64(1.0 / 3.0f64.sqrt()));
    let mask_vals: Vec<_> = (0..16)
        .map(|i| {
            let (r, c) = (i / 4, i % 4);
            if c > r {
                Scalar::from_f64(f64::NEG_INFINITY)
            } else {
                Scalar::from_f64(0.0)
            }
        })
        .collect();
    let mask = g.constant(vec![4, 4], mask_vals);
    let masked = g.add(scaled, mask);
    let probs = g.softmax(masked);
    g.matmul(probs, q)
});

// ───── worked examples ─────

#[test]
fn softmax_uniform_inputs_give_uniform_probs() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![4], vec![0.0; 4], false);
    let y = g.softmax(x);
    assert_eq!(g.values(y), &[0.25, 0.25, 0.25, 0.25]);
}

#[test]
fn softmax_matches_direct_exp_sum_oracle() {
    // Oracle: direct evaluation of exp/sum at f64.
    let logits = [2.0f64, 1.0, 0.5, -1.0];
    let exps: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
    let total: f64 = exps.iter().sum();
    let expected: Vec<f64> = exps.iter().map(|e| e / total).collect();
    // Frozen values from the oracle above.
    let frozen = [0.609459, 0.224208, 0.135991, 0.030342];

    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![4], logits.to_vec(), false);
    let y = g.softmax(x);
    for i in 0..4 {
        assert!((g.values(y)[i] - expected[i]).abs() < 1e-12);
        assert!((g.values(y)[i] - frozen[i]).abs() < 1e-4);
    }
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g: Graph<f64> = Graph::new();
    let p = g.leaf(vec![2, 3], vec![0.3; 6], true);
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_constant_leaves_zero_grads() {
    let mut g: Graph<f64> = Graph::new();
    let p = g.leaf(vec![3], vec![1.0, 2.0, 3.0], true);
    let c = g.constant(vec![1], vec![5.0]);
    let loss = g.sum(c);
    g.backward(loss).unwrap();
    // No path from loss to p: grad never allocated.
    assert!(g.grad(p).is_none());
    let _ = p;
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g: Graph<f64> = Graph::new();
    let p = g.leaf(vec![2], vec![1.0, 2.0], true);
    let err = g.backward(p).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn two_consumer_gradients_accumulate_additively() {
    // y = sum(x*a) + sum(x*b) => dx = a + b.
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![3], vec![0.5, -0.25, 2.0], true);
    let a = g.constant(vec![3], vec![1.0, 2.0, 3.0]);
    let b = g.constant(vec![3], vec![10.0, 20.0, 30.0]);
    let xa = g.mul(x, a);
    let xb = g.mul(x, b);
    let s1 = g.sum(xa);
    let s2 = g.sum(xb);
    let loss = g.add(s1, s2);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[11.0, 22.0, 33.0]);
}

#[test]
fn mlp_cross_entropy_gradients_match_finite_differences() {
    // Random 2-layer MLP into a vocab-8 cross-entropy.
    fn build<F: Scalar>(g: &mut Graph<F>, ids: &[NodeId]) -> NodeId {
        let h = g.matmul(ids[0], ids[1]);
        let h = g.add(h, ids[2]);
        let h = g.gelu(h);
        let logits = g.matmul(h, ids[3]);
        let logits = g.add(logits, ids[4]);
        g.cross_entropy(logits, vec![3, 0, 7, 1])
    }
    let inputs = vec![
        unit(vec![4, 6], 50),  // x (treated as data but checked too)
        unit(vec![6, 10], 51), // w1
        unit(vec![10], 52),    // b1
        unit(vec![10, 8], 53), // w2
        unit(vec![8], 54),     // b2
    ];
    fd_check::<f64>(&inputs, build::<f64>, build::<f64>, TOL_F64);
}

#[test]
fn gradcheck_passes_linear_regression_and_flags_corruption() {
    use super::gradcheck::{grad_check, GradCheckConfig};

    let xs = [0.0f64, 0.5, 1.0, 1.5];
    let ys = [1.0f64, 2.1, 2.9, 4.2];
    let mut store = ParamSet {
        params: vec![
            Parameter::new(ParamId(0), "w", Tensor::scalar(0.3f64), 0),
            Parameter::new(ParamId(1), "b", Tensor::scalar(-0.2f64), 0),
        ],
    };
    let loss_fn = |store: &mut ParamSet<f64>, want_grad: bool| {
        let mut g: Graph<f64> = Graph::new();
        let w = g.param(&store.params[0]);
        let b = g.param(&store.params[1]);
        let x = g.constant(vec![4], xs.to_vec());
        let y = g.constant(vec![4], ys.to_vec());
        let wx_one = g.mul(x, w); // scalar suffix-broadcasts
        let pred = g.add(wx_one, b);
        let err = g.sub(pred, y);
        let sq = g.mul(err, err);
        let loss = g.mean(sq);
        if want_grad {
            g.backward(loss).unwrap();
            g.accumulate_param_grads(store);
        }
        Ok(g.scalar_value(loss))
    };

    // Quadratic loss: central differences are exact up to roundoff.
    let report = grad_check(
        &mut store,
        loss_fn,
        &GradCheckConfig {
            tolerance: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);

    // Negative control: a corrupted backward rule must fail the check.
    let corrupted = |store: &mut ParamSet<f64>, want_grad: bool| {
        let v = loss_fn(store, want_grad)?;
        if want_grad {
            store.for_each_param_mut(&mut |p| {
                if let Some(gr) = p.tensor.grad.as_mut() {
                    for x in gr.iter_mut() {
                        *x *= 1.5;
                    }
                }
            });
        }
        Ok(v)
    };
    let report = grad_check(
        &mut store,
        corrupted,
        &GradCheckConfig {
            tolerance: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!report.passed());
}

// ───── shape errors ─────

#[test]
#[should_panic(expected = "matmul: shape mismatch between [2, 3] and [2, 3]")]
fn matmul_names_op_and_shapes_on_mismatch() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(vec![2, 3], vec![0.0; 6], false);
    let b = g.leaf(vec![2, 3], vec![0.0; 6], false);
    let _ = g.matmul(a, b);
}

#[test]
#[should_panic(expected = "add: shape mismatch")]
fn add_rejects_incompatible_shapes() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(vec![2, 3], vec![0.0; 6], false);
    let b = g.leaf(vec![2], vec![0.0; 2], false);
    let _ = g.add(a, b);
}

#[test]
#[should_panic(expected = "gather_rows: index 7 out of 4 rows")]
fn gather_rejects_out_of_range_index() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(vec![4, 2], vec![0.0; 8], false);
    let _ = g.gather_rows(a, vec![0, 7]);
}

// ───── determinism & stability properties ─────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_under_large_magnitudes(
        scale in 1.0f64..1e4,
        seed in 0u64..1000,
    ) {
        let mut g: Graph<f64> = Graph::new();
        let vals = rand_values::<f64>(12, seed, -1.0, 1.0)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let x = g.leaf(vec![3, 4], vals, false);
        let y = g.softmax(x);
        for r in 0..3 {
            let s: f64 = g.values(y)[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
    }

    #[test]
    fn scatter_inverts_gather(seed in 0u64..500) {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![5, 3], rand_values(15, seed, -1.0, 1.0), false);
        let picked = g.gather_rows(a, vec![0, 1, 2, 3, 4]);
        let back = g.scatter_add_rows(picked, vec![0, 1, 2, 3, 4], 5);
        prop_assert_eq!(g.values(back), g.values(a));
    }
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let mut g: Graph<f32> = Graph::new();
        let a = g.leaf(vec![48, 32], rand_values(48 * 32, 7, -1.0, 1.0), true);
        let b = g.leaf(vec![32, 48], rand_values(32 * 48, 8, -1.0, 1.0), true);
        let c = g.matmul(a, b);
        let s = g.softmax(c);
        let l = g.mean(s);
        g.backward(l).unwrap();
        (
            g.values(c).to_vec(),
            g.grad(a).unwrap().to_vec(),
            g.scalar_value(l),
        )
    };
    let (c1, ga1, l1) = run();
    let (c2, ga2, l2) = run();
    assert_eq!(c1, c2);
    assert_eq!(ga1, ga2);
    assert_eq!(l1.to_bits(), l2.to_bits());
}
