use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::model::{AdamW, AdamWConfig, ModelConfig};
use crate::neural::consecutive_sections;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `(X^T X + lambda I)^{-1} X^T Y` by LU.
fn normal_equation_oracle(x: &Matrix, y: &Matrix, lambda: f64) -> Matrix {
    let xn = x.to_nalgebra();
    let a = xn.transpose() * &xn + nalgebra::DMatrix::identity(x.cols(), x.cols()) * lambda;
    let b = xn.transpose() * y.to_nalgebra();
    Matrix::from_nalgebra(&a.lu().solve(&b).unwrap())
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn objective(x: &Matrix, y: &Matrix, w: &Matrix, lambda: f64) -> f64 {
    let r = x.matmul(w).unwrap();
    let resid: f64 = r.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
    resid + lambda * w.data().iter().map(|v| v * v).sum::<f64>()
}

#[test]
fn lambda_grid_shape() {
    let g = default_lambda_grid();
    assert_eq!(g.len(), 10);
    assert!((g[0] - 1e-2).abs() < 1e-15 && (g[9] - 1e4).abs() < 1e-9);
    assert!(g.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn lag_layout() {
    let tr = Matrix::from_fn(8, 4, |i, j| (i * 10 + j) as f64 + 1.0);
    let lagged = lag_features(&tr, 5);
    assert_eq!(lagged.cols(), 24);
    assert_eq!(&lagged.row(0)[..4], tr.row(0));
    assert!(lagged.row(0)[4..].iter().all(|&v| v == 0.0));
    assert_eq!(&lagged.row(6)[8..12], tr.row(4));
    let constant = Matrix::from_fn(8, 4, |_, j| j as f64);
    let lagged = lag_features(&constant, 5);
    for s in 0..6 {
        assert_eq!(&lagged.row(7)[s * 4..s * 4 + 4], constant.row(0));
    }
}

#[test]
fn ridge_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(&mut rng, 20, 5);
    let y = gaussian(&mut rng, 20, 3);
    let w = ridge_fit(&x, &y, 1.0).unwrap();
    assert!(max_abs_diff(&w, &normal_equation_oracle(&x, &y, 1.0)) < 1e-10);
    // Wide design goes through the kernel form.
    let x = gaussian(&mut rng, 6, 15);
    let y = gaussian(&mut rng, 6, 2);
    let w = ridge_fit(&x, &y, 0.5).unwrap();
    assert!(max_abs_diff(&w, &normal_equation_oracle(&x, &y, 0.5)) < 1e-10);
}

#[test]
fn ridge_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(&mut rng, 6, 6);
    let y = gaussian(&mut rng, 6, 2);
    let w = ridge_fit(&x, &y, 1e-12).unwrap();
    assert!(max_abs_diff(&x.matmul(&w).unwrap(), &y) < 1e-6);
    let w = ridge_fit(&x, &y, 1e12).unwrap();
    assert!(w.frobenius_norm() < 1e-6);
    assert!(matches!(ridge_fit(&x, &y, 0.0), Err(Error::Config(_))));
    assert!(ridge_fit(&x, &y, -1.0).is_err());
}

#[test]
fn ridge_is_the_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 15, 4);
    let y = gaussian(&mut rng, 15, 2);
    let w = ridge_fit(&x, &y, 2.0).unwrap();
    let best = objective(&x, &y, &w, 2.0);
    for _ in 0..50 {
        let mut p = w.clone();
        for v in p.data_mut() {
            *v += 1e-4 * rng.sample::<f64, _>(StandardNormal);
        }
        assert!(objective(&x, &y, &p, 2.0) > best);
    }
}

fn four_runs(n: usize) -> Vec<Range<usize>> {
    consecutive_sections(n, 4)
}

#[test]
fn realizable_targets_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian(&mut rng, 200, 6);
    let w = gaussian(&mut rng, 6, 5);
    let y = x.matmul(&w).unwrap();
    let cv = NestedCv::new(&x, &four_runs(200), &[0, 1, 2, 3], &default_lambda_grid()).unwrap();
    for fold in cv.run(&y).unwrap() {
        assert!(fold.r.iter().all(|&r| r > 0.99), "{:?}", fold.r);
    }
}

#[test]
fn pure_noise_alignment_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, 600, 10);
    let y = gaussian(&mut rng, 600, 50);
    let cv = NestedCv::new(&x, &four_runs(600), &[0, 1, 2, 3], &default_lambda_grid()).unwrap();
    for fold in cv.run(&y).unwrap() {
        assert!(mean(&fold.r).abs() < 0.1);
    }
}

#[test]
fn single_lambda_grid_equals_plain_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(&mut rng, 80, 5);
    let y = gaussian(&mut rng, 80, 3);
    let runs = four_runs(80);
    let cv = NestedCv::new(&x, &runs, &[2], &[3.0]).unwrap();
    let fold = &cv.run(&y).unwrap()[0];
    let train: Vec<usize> = (0..80).filter(|i| !runs[2].contains(i)).collect();
    let mut xt = x.select_rows(&train);
    let mut yt = y.select_rows(&train);
    let (mx, my) = (xt.column_means(), yt.column_means());
    xt.sub_row_vector(&mx);
    yt.sub_row_vector(&my);
    let w = ridge_fit(&xt, &yt, 3.0).unwrap();
    let mut xh = x.row_range(runs[2].clone());
    xh.sub_row_vector(&mx);
    let mut pred = xh.matmul(&w).unwrap();
    pred.add_row_vector(&my);
    assert!(max_abs_diff(&pred, &fold.predictions) < 1e-10);
    assert!(fold.lambda_per_voxel.iter().all(|&l| l == 3.0));
}

#[test]
fn poisoned_heldout_targets_do_not_change_lambdas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(&mut rng, 120, 8);
    let w = gaussian(&mut rng, 8, 6);
    let mut y = x.matmul(&w).unwrap();
    for v in y.data_mut() {
        *v += 2.0 * rng.sample::<f64, _>(StandardNormal);
    }
    let runs = four_runs(120);
    let cv = NestedCv::new(&x, &runs, &[1], &default_lambda_grid()).unwrap();
    let clean = cv.selected_lambdas(&y).unwrap();
    let mut poisoned = y.clone();
    for i in runs[1].clone() {
        poisoned.row_mut(i).iter_mut().for_each(|v| *v = 1e6 * (*v).signum());
    }
    assert_eq!(cv.selected_lambdas(&poisoned).unwrap(), clean);
}

#[test]
fn alignment_is_invariant_to_positive_affine_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian(&mut rng, 100, 5);
    let mut y = x.matmul(&gaussian(&mut rng, 5, 4)).unwrap();
    for v in y.data_mut() {
        *v += rng.sample::<f64, _>(StandardNormal);
    }
    let cv = NestedCv::new(&x, &four_runs(100), &[0], &default_lambda_grid()).unwrap();
    let base = cv.run(&y).unwrap();
    let mut scaled = y.clone();
    for i in 0..scaled.rows() {
        for (j, v) in scaled.row_mut(i).iter_mut().enumerate() {
            *v = (j as f64 + 0.5) * 3.0 * *v + 7.0 * j as f64;
        }
    }
    let other = cv.run(&scaled).unwrap();
    for (a, b) in base[0].r.iter().zip(&other[0].r) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoding_weights_reproduce_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = gaussian(&mut rng, 80, 4);
    let y = gaussian(&mut rng, 80, 3);
    let runs = four_runs(80);
    let cv = NestedCv::new(&x, &runs, &[0], &default_lambda_grid()).unwrap();
    let fold = &cv.run(&y).unwrap()[0];
    let model = cv.encoding_model(&y, 0, &fold.lambda_per_voxel).unwrap();
    assert_eq!(model.weights.rows(), 4);
    assert!(model.weights.is_finite() && model.lambda_per_voxel.iter().all(|&l| l > 0.0));
    // Predictions differ only by the intercept, so correlations match.
    let raw = x.row_range(runs[0].clone()).matmul(&model.weights).unwrap();
    for (a, b) in crate::linalg::column_pearson(&raw, &y.row_range(runs[0].clone())).iter().zip(&fold.r) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn rejects_short_heldout_run() {
    let x = Matrix::zeros(10, 2);
    let runs = vec![0..1, 1..4, 4..7, 7..10];
    assert!(matches!(
        NestedCv::new(&x, &runs, &[0], &[1.0]),
        Err(Error::Contract(_))
    ));
}

fn recording(id: &str, responses: Matrix) -> NeuralRecording {
    let v = responses.cols();
    NeuralRecording::new(id.into(), responses, vec![true; v]).unwrap()
}

#[test]
fn noise_ceiling_of_duplicates_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let signal = gaussian(&mut rng, 200, 3);
    let y = signal.matmul(&gaussian(&mut rng, 3, 12)).unwrap();
    let cohort = vec![recording("a", y.clone()), recording("b", y)];
    let nc = estimate_noise_ceiling(&cohort, &four_runs(200), &default_lambda_grid(), 2).unwrap();
    for v in nc.iter().flatten() {
        assert!(*v > 0.99, "{v}");
    }
}

#[test]
fn noise_ceiling_of_independent_noise_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cohort: Vec<_> = (0..3).map(|i| recording(&i.to_string(), gaussian(&mut rng, 200, 20))).collect();
    let nc = estimate_noise_ceiling(&cohort, &four_runs(200), &default_lambda_grid(), 1).unwrap();
    for v in nc.iter().flatten() {
        assert!(v.abs() < 0.1, "{v}");
    }
    let mean_all: f64 = nc.iter().flatten().sum::<f64>() / 60.0;
    assert!(mean_all.abs() < 0.01, "{mean_all}");
}

#[test]
fn noise_ceiling_ignores_job_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cohort: Vec<_> = (0..3).map(|i| recording(&i.to_string(), gaussian(&mut rng, 80, 6))).collect();
    let a = estimate_noise_ceiling(&cohort, &four_runs(80), &default_lambda_grid(), 1).unwrap();
    let b = estimate_noise_ceiling(&cohort, &four_runs(80), &default_lambda_grid(), 3).unwrap();
    assert_eq!(a, b);
    assert!(estimate_noise_ceiling(&cohort[..1], &four_runs(80), &[1.0], 1).is_err());
}

fn small_model(rng: &mut ChaCha8Rng, vocab: usize) -> DualHeadModel {
    let config = ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    DualHeadModel::new(config, rng).unwrap()
}

fn cyclic_corpus(n_trs: usize, period: usize) -> StimulusCorpus {
    let tokens: Vec<Token> = (0..n_trs * 4).map(|i| i % period).collect();
    StimulusCorpus::new(tokens, (0..n_trs).map(|t| t * 4..t * 4 + 4).collect(), four_runs(n_trs)).unwrap()
}

#[test]
fn tr_features_average_own_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = small_model(&mut rng, 32);
    let corpus = cyclic_corpus(12, 7);
    let f = tr_features(&model, &corpus, 3).unwrap();
    assert_eq!((f.rows(), f.cols()), (12, 16));
    let window = corpus.span_tokens(3..6).to_vec();
    let reps = model.representations(&[window]).unwrap();
    for c in 0..16 {
        let expect: f64 = (8..12).map(|p| reps[0][p * 16 + c]).sum::<f64>() / 4.0;
        assert!((f.get(5, c) - expect).abs() < 1e-12);
    }
}

#[test]
fn lm_eval_window_count_and_uniform_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = DualHeadModel::new(ModelConfig::default(), &mut rng).unwrap();
    let tokens: Vec<Token> = (0..40 * 4).map(|_| rng.random_range(0..255)).collect();
    let corpus = StimulusCorpus::new(tokens, (0..40).map(|t| t * 4..t * 4 + 4).collect(), four_runs(40)).unwrap();
    let losses = evaluate_lm(&model, &corpus, 1, 5, 0).unwrap();
    assert_eq!(losses.len(), 10 - 4);
    let m = mean(&losses);
    assert!((m - 256f64.ln()).abs() / 256f64.ln() < 0.05, "{m}");
    assert!(evaluate_lm(&model, &corpus, 4, 5, 0).is_err());
}

#[test]
fn memorized_corpus_has_near_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model = small_model(&mut rng, 16);
    let corpus = cyclic_corpus(40, 5);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 1e-2,
        ..AdamWConfig::default()
    })
    .unwrap();
    let batch: Vec<Vec<Token>> = (0..8).map(|s| corpus.span_tokens(s..s + 5).to_vec()).collect();
    for _ in 0..150 {
        let mut s = model.session();
        let out = model.forward_lm(&mut s, &batch, &mut rng).unwrap();
        s.graph.backward(out.loss).unwrap();
        let g = s.gradients();
        drop(s);
        opt.step(&mut model, &g).unwrap();
    }
    let losses = evaluate_lm(&model, &corpus, 3, 5, 0).unwrap();
    assert!(mean(&losses) < 0.05, "{}", mean(&losses));
}
