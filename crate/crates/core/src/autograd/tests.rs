use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec_leaf(g: &mut Graph, v: &[f64]) -> Var {
    g.leaf(Tensor::vector(v.to_vec()), true)
}

#[test]
fn grl_forward_is_identity() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[1.0, -2.0]);
    let y = g.grl(x, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0]);
}

#[test]
fn grl_backward_flips_and_scales() {
    for (lambda, upstream, expected) in [
        (1.0, [0.5, 0.5], [-0.5, -0.5]),
        (2.0, [1.0, -1.0], [-2.0, 2.0]),
    ] {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.3, 0.7]);
        let y = g.grl(x, lambda).unwrap();
        let w = g.constant(Tensor::vector(upstream.to_vec()));
        let prod = g.mul(y, w).unwrap();
        let root = g.sum(prod);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &expected);
    }
}

#[test]
fn grl_rejects_non_positive_lambda() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[1.0]);
    assert!(matches!(g.grl(x, 0.0), Err(Error::Config(_))));
    assert!(matches!(g.grl(x, -1.0), Err(Error::Config(_))));
}

#[test]
fn double_grl_restores_gradient() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
    let a = g.grl(x, 1.0).unwrap();
    let b = g.grl(a, 1.0).unwrap();
    let root = g.sum(b);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn grl_on_sum_gives_negative_ones() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[4.0, -1.0, 0.5, 2.0]);
    let y = g.grl(x, 1.0).unwrap();
    let root = g.sum(y);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-1.0; 4]);
}

#[test]
fn pearson_examples() {
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 1.0),
        (&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], -1.0),
        (&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0], 0.8),
    ];
    for (x, y, expected) in cases {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, x);
        let b = g.constant(Tensor::vector(y.to_vec()));
        let r = g.pearson(a, b).unwrap();
        assert!((g.value(r).item() - expected).abs() < 1e-12, "{x:?} {y:?}");
    }
}

#[test]
fn pearson_zero_variance_returns_zero_and_flags() {
    let mut g = Graph::new();
    let a = vec_leaf(&mut g, &[2.0, 2.0, 2.0]);
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let r = g.pearson(a, b).unwrap();
    assert_eq!(g.value(r).item(), 0.0);
    assert_eq!(g.degenerate_correlations(), 1);
    g.backward(r).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn pearson_needs_two_samples() {
    let mut g = Graph::new();
    let a = vec_leaf(&mut g, &[1.0]);
    let b = vec_leaf(&mut g, &[1.0]);
    assert!(matches!(g.pearson(a, b), Err(Error::Contract(_))));
}

#[test]
fn quadratic_backward() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[1.0, 2.0]);
    let sq = g.mul(x, x).unwrap();
    let root = g.sum(sq);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[1.0, 2.0]);
    let sq = g.mul(x, x).unwrap();
    let root = g.sum(sq);
    g.backward(root).unwrap();
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[1.0, 2.0]);
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn unreached_leaves_get_zero_grad() {
    let mut g = Graph::new();
    let x = vec_leaf(&mut g, &[1.0, 2.0]);
    let unused = vec_leaf(&mut g, &[5.0]);
    let root = g.sum(x);
    g.backward(root).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0]);
}

#[test]
fn frozen_leaves_receive_no_grad() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = g.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(), true);
    let y = g.matmul(x, w).unwrap();
    let root = g.sum(y);
    g.backward(root).unwrap();
    assert!(g.grad(w).is_none());
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn uniform_cross_entropy_is_log_classes() {
    for classes in [2usize, 7, 256] {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(3, classes, vec![0.25; 3 * classes]).unwrap(), true);
        let loss = g.cross_entropy(logits, vec![Some(0), Some(classes - 1), Some(1)]).unwrap();
        assert!((g.value(loss).item() - (classes as f64).ln()).abs() < 1e-10);
    }
}

#[test]
fn confident_cross_entropy_tends_to_zero() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap(), true);
    let loss = g.cross_entropy(logits, vec![Some(0)]).unwrap();
    assert!(g.value(loss).item() < 1e-20);
}

#[test]
fn cross_entropy_skips_untargeted_rows() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 5.0, -5.0]).unwrap(), true);
    let loss = g.cross_entropy(logits, vec![Some(1), None]).unwrap();
    assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    g.backward(loss).unwrap();
    assert_eq!(&g.grad(logits).unwrap()[2..], &[0.0, 0.0]);
    assert!(g.cross_entropy(logits, vec![None, None]).is_err());
}

#[test]
fn segment_mean_rejects_empty_segment() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap(), true);
    assert!(g.segment_mean(x, vec![0..2, 2..2]).is_err());
    let m = g.segment_mean(x, vec![0..2, 2..3]).unwrap();
    assert_eq!(g.value(m).data(), &[1.5, 3.0]);
}

#[test]
fn gather_rows_pads_missing_rows_with_zeros() {
    let mut g = Graph::new();
    let t = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let r = g.gather_rows(t, vec![Some(1), None, Some(1)]).unwrap();
    assert_eq!(g.value(r).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
    let root = g.sum(r);
    g.backward(root).unwrap();
    assert_eq!(g.grad(t).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn causal_attention_ignores_future_rows() {
    let spec = AttentionSpec {
        n_seq: 1,
        seq_len: 3,
        n_heads: 1,
        causal: true,
    };
    let q = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let k = q.clone();
    let mut v1 = q.clone();
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v1.clone()));
    let out1 = g.attention(qv, kv, vv, spec).unwrap();
    let first_row = g.value(out1).data()[..2].to_vec();
    v1.data_mut()[4] = 100.0;
    let vv2 = g.constant(v1);
    let out2 = g.attention(qv, kv, vv2, spec).unwrap();
    assert_eq!(&g.value(out2).data()[..2], first_row.as_slice());
    // The first row only sees itself.
    assert_eq!(first_row, vec![0.1, 0.2]);
}

/// Central finite differences of `build` with respect to every input, compared
/// with the analytic gradient via a norm-wise relative error.
fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &vars);
    g.backward(root).unwrap();
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let root = build(&mut g, &vars);
        g.value(root).item()
    };
    let h = 1e-6;
    let mut num_sq = 0.0;
    let mut diff_sq = 0.0;
    let mut ana_sq = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            num_sq += numeric * numeric;
            ana_sq += analytic[j] * analytic[j];
            diff_sq += (numeric - analytic[j]).powi(2);
        }
    }
    diff_sq.sqrt() / num_sq.sqrt().max(ana_sq.sqrt()).max(1e-12)
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(&mut rng, shape));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

#[test]
fn layer_norm_and_attention_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..5 {
        let x = random(&mut rng, vec![3, 4]);
        let gamma = random(&mut rng, vec![4]);
        let beta = random(&mut rng, vec![4]);
        let err = fd_check(&[x, gamma, beta], &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, case)
        });
        assert!(err < 1e-5, "layer_norm rel err {err}");

        let (q, k, val) = (random(&mut rng, vec![6, 4]), random(&mut rng, vec![6, 4]), random(&mut rng, vec![6, 4]));
        for causal in [true, false] {
            let spec = AttentionSpec {
                n_seq: 2,
                seq_len: 3,
                n_heads: 2,
                causal,
            };
            let err = fd_check(&[q.clone(), k.clone(), val.clone()], &|g, v| {
                let y = g.attention(v[0], v[1], v[2], spec).unwrap();
                weighted_sum(g, y, case)
            });
            assert!(err < 1e-5, "attention rel err {err}");
        }
    }
}

#[test]
fn pearson_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let x = random(&mut rng, vec![8]);
        let y = random(&mut rng, vec![8]);
        let err = fd_check(&[x], &|g, v| {
            let c = g.constant(y.clone());
            g.pearson(v[0], c).unwrap()
        });
        assert!(err < 1e-5, "pearson rel err {err}");
    }
}

#[test]
fn pearson_is_affine_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = random(&mut rng, vec![10]);
        let y = random(&mut rng, vec![10]);
        let a = rng.random_range(0.1..5.0);
        let b = rng.random_range(-3.0..3.0);
        let shifted = Tensor::vector(x.data().iter().map(|v| a * v + b).collect());
        let mut g = Graph::new();
        let (xv, yv, sv) = (g.constant(x), g.constant(y), g.constant(shifted));
        let r1 = g.pearson(xv, yv).unwrap();
        let r2 = g.pearson(sv, yv).unwrap();
        assert!((g.value(r1).item() - g.value(r2).item()).abs() < 1e-10);
    }
}
