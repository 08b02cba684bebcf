//! Encoding-model evaluation: per-TR features, lagged design matrices, ridge
//! regression with nested leave-one-run-out CV, and noise ceilings.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::Token;
use crate::linalg::Matrix;
use crate::model::DualHeadModel;
use crate::neural::{NeuralRecording, StimulusCorpus};
use crate::seeds::rng_for;
use crate::stats::{mean, median};

/// TRs of text fed to the model when computing one TR's representation.
pub const CONTEXT_TRS: usize = 5;

pub const DEFAULT_LAG: usize = 5;

/// 10 log-spaced values from 1e-2 to 1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|i| 10f64.powf(-2.0 + 6.0 * i as f64 / 9.0)).collect()
}

/// Per-TR mean of last-block token representations, `n_trs x d_model`.
///
/// TR `t` is encoded inside the window of TRs `t-context+1..=t`; only the
/// tokens belonging to TR `t` are averaged.
pub fn tr_features(model: &DualHeadModel, corpus: &StimulusCorpus, context_trs: usize) -> Result<Matrix> {
    if context_trs == 0 {
        return Err(Error::config("context_trs must be positive"));
    }
    let d = model.config().d_model;
    let n = corpus.n_trs();
    let mut windows: Vec<Vec<Token>> = Vec::with_capacity(n);
    for t in 0..n {
        if corpus.tr_boundaries[t].is_empty() {
            return Err(Error::contract(format!("TR {t} has no tokens")));
        }
        let start = (t + 1).saturating_sub(context_trs);
        windows.push(corpus.span_tokens(start..t + 1).to_vec());
    }
    let reps = model.representations(&windows)?;
    let mut out = Matrix::zeros(n, d);
    for (t, rep) in reps.iter().enumerate() {
        let len = windows[t].len();
        let own = corpus.tr_boundaries[t].len();
        let row = out.row_mut(t);
        for pos in len - own..len {
            for (o, v) in row.iter_mut().zip(&rep[pos * d..(pos + 1) * d]) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= own as f64);
    }
    Ok(out)
}

/// Row `t` is `[f_t, f_{t-1}, ..., f_{t-k}]`, zero where `t - j < 0`.
pub fn lag_features(tr: &Matrix, k: usize) -> Matrix {
    let d = tr.cols();
    let mut out = Matrix::zeros(tr.rows(), (k + 1) * d);
    for t in 0..tr.rows() {
        let row = out.row_mut(t);
        for j in 0..=k.min(t) {
            row[j * d..(j + 1) * d].copy_from_slice(tr.row(t - j));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaggedFeatures {
    pub matrix: Matrix,
    pub lag: usize,
    pub model_id: String,
    pub corpus_id: String,
}

pub fn build_lagged_features(
    model: &DualHeadModel,
    corpus: &StimulusCorpus,
    k: usize,
    model_id: &str,
    corpus_id: &str,
) -> Result<LaggedFeatures> {
    if corpus.n_trs() <= k {
        return Err(Error::contract(format!("corpus has {} TRs, lag {k} needs more", corpus.n_trs())));
    }
    let tr = tr_features(model, corpus, CONTEXT_TRS)?;
    Ok(LaggedFeatures {
        matrix: lag_features(&tr, k),
        lag: k,
        model_id: model_id.into(),
        corpus_id: corpus_id.into(),
    })
}

/// Spectral form of a ridge problem on fixed training inputs:
/// `W(lambda) = right * diag(1 / (eig + lambda)) * left * Y`.
///
/// Uses the `p x p` Gram matrix when features are fewer than samples and the
/// `n x n` kernel matrix otherwise.
struct RidgeBasis {
    x_mean: Vec<f64>,
    eig: Vec<f64>,
    left: Matrix,
    right: Matrix,
}

impl RidgeBasis {
    fn new(x: &Matrix, center: bool) -> Result<Self> {
        let mut xc = x.clone();
        let x_mean = if center { x.column_means() } else { vec![0.0; x.cols()] };
        xc.sub_row_vector(&x_mean);
        let (n, p) = (xc.rows(), xc.cols());
        let (eig, left, right) = if p <= n {
            let (e, q) = sym_eigen(&xc.t_matmul(&xc)?);
            let left = q.t_matmul(&xc.transpose())?;
            (e, left, q)
        } else {
            let (e, u) = sym_eigen(&xc.matmul_t(&xc)?);
            let right = xc.t_matmul(&u)?;
            (e, u.transpose(), right)
        };
        Ok(Self {
            x_mean,
            eig,
            left,
            right,
        })
    }

    fn factors(&self, lambda: f64) -> Vec<f64> {
        self.eig.iter().map(|&e| 1.0 / (e.max(0.0) + lambda)).collect()
    }

    fn weights(&self, y: &Matrix, lambda: f64) -> Result<Matrix> {
        let mut coef = self.left.matmul(y)?;
        scale_rows(&mut coef, &self.factors(lambda));
        self.right.matmul(&coef)
    }

    /// Projection of test inputs onto the spectral basis.
    fn project(&self, x_test: &Matrix) -> Result<Matrix> {
        let mut xc = x_test.clone();
        xc.sub_row_vector(&self.x_mean);
        xc.matmul(&self.right)
    }
}

fn scale_rows(m: &mut Matrix, factors: &[f64]) {
    for (i, f) in factors.iter().enumerate() {
        m.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
}

fn sym_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let eig = nalgebra::SymmetricEigen::new(a.to_nalgebra());
    (eig.eigenvalues.iter().copied().collect(), Matrix::from_nalgebra(&eig.eigenvectors))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("ridge lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// `argmin ||XW - Y||^2 + lambda ||W||^2`, no intercept.
pub fn ridge_fit(x: &Matrix, y: &Matrix, lambda: f64) -> Result<Matrix> {
    check_lambda(lambda)?;
    if x.rows() != y.rows() {
        return Err(Error::contract(format!("X has {} rows, Y has {}", x.rows(), y.rows())));
    }
    RidgeBasis::new(x, false)?.weights(y, lambda)
}

/// Ridge fit on one set of training rows, predicting one set of test rows for
/// any target matrix and lambda. Inputs and targets are centered on training
/// means, so the intercept is unpenalized.
struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
    basis: RidgeBasis,
    test_proj: Matrix,
}

impl Split {
    fn new(x: &Matrix, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let basis = RidgeBasis::new(&x.select_rows(&train), true)?;
        let test_proj = basis.project(&x.select_rows(&test))?;
        Ok(Self {
            train,
            test,
            basis,
            test_proj,
        })
    }

    /// Centered spectral coefficients of `y` and the training means.
    fn coefficients(&self, y: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let mut yt = y.select_rows(&self.train);
        let y_mean = yt.column_means();
        yt.sub_row_vector(&y_mean);
        Ok((self.basis.left.matmul(&yt)?, y_mean))
    }

    fn predict(&self, coef: &Matrix, y_mean: &[f64], lambda: f64) -> Result<Matrix> {
        let mut c = coef.clone();
        scale_rows(&mut c, &self.basis.factors(lambda));
        let mut pred = self.test_proj.matmul(&c)?;
        pred.add_row_vector(y_mean);
        Ok(pred)
    }
}

fn rows_of(runs: &[Range<usize>], which: impl Fn(usize) -> bool) -> Vec<usize> {
    runs.iter()
        .enumerate()
        .filter(|(i, _)| which(*i))
        .flat_map(|(_, r)| r.clone())
        .collect()
}

struct OuterFold {
    heldout: usize,
    outer: Split,
    inner: Vec<Split>,
}

/// Precomputed ridge bases for nested leave-one-run-out CV on a fixed design
/// matrix. Reusable across any number of target matrices.
pub struct NestedCv {
    folds: Vec<OuterFold>,
    grid: Vec<f64>,
    n_rows: usize,
}

/// Outcome of one outer fold.
#[derive(Clone, Debug, PartialEq)]
pub struct CvFold {
    pub heldout_run: usize,
    pub lambda_per_voxel: Vec<f64>,
    /// Held-out Pearson r per voxel.
    pub r: Vec<f64>,
    /// Held-out predictions, `run length x voxels`.
    pub predictions: Matrix,
    pub heldout_rows: Vec<usize>,
}

impl NestedCv {
    pub fn new(x: &Matrix, runs: &[Range<usize>], outer_runs: &[usize], grid: &[f64]) -> Result<Self> {
        if runs.len() < 3 {
            return Err(Error::contract(format!("nested CV needs at least 3 runs, got {}", runs.len())));
        }
        if grid.is_empty() {
            return Err(Error::config("lambda grid is empty"));
        }
        for &l in grid {
            check_lambda(l)?;
        }
        if runs.last().map(|r| r.end) != Some(x.rows()) {
            return Err(Error::contract("runs do not cover the design matrix"));
        }
        let mut folds = Vec::new();
        for &h in outer_runs {
            let held = runs
                .get(h)
                .ok_or_else(|| Error::contract(format!("held-out run {h} out of range")))?;
            if held.len() < 2 {
                return Err(Error::contract(format!("held-out run {h} has fewer than 2 TRs")));
            }
            let outer = Split::new(x, rows_of(runs, |i| i != h), held.clone().collect())?;
            let inner = (0..runs.len())
                .filter(|&j| j != h)
                .map(|j| Split::new(x, rows_of(runs, |i| i != h && i != j), runs[j].clone().collect()))
                .collect::<Result<_>>()?;
            folds.push(OuterFold { heldout: h, outer, inner });
        }
        Ok(Self {
            folds,
            grid: grid.to_vec(),
            n_rows: x.rows(),
        })
    }

    /// Selects lambda per voxel from inner folds, then fits the outer training
    /// runs and scores the held-out run. Held-out targets are only read when
    /// scoring.
    pub fn run(&self, y: &Matrix) -> Result<Vec<CvFold>> {
        if y.rows() != self.n_rows {
            return Err(Error::contract(format!("targets have {} rows, features {}", y.rows(), self.n_rows)));
        }
        self.folds.iter().map(|f| self.run_fold(f, y)).collect()
    }

    pub fn selected_lambdas(&self, y: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.folds.iter().map(|f| self.select(f, y)).collect()
    }

    fn select(&self, fold: &OuterFold, y: &Matrix) -> Result<Vec<f64>> {
        let v = y.cols();
        let mut score = vec![vec![0.0; v]; self.grid.len()];
        for split in &fold.inner {
            let (coef, y_mean) = split.coefficients(y)?;
            let truth = y.select_rows(&split.test);
            for (g, &lambda) in self.grid.iter().enumerate() {
                let pred = split.predict(&coef, &y_mean, lambda)?;
                for (s, r) in score[g].iter_mut().zip(crate::linalg::column_pearson(&pred, &truth)) {
                    *s += r;
                }
            }
        }
        Ok((0..v)
            .map(|j| {
                let mut best = 0;
                for g in 1..self.grid.len() {
                    if score[g][j] > score[best][j] {
                        best = g;
                    }
                }
                self.grid[best]
            })
            .collect())
    }

    fn run_fold(&self, fold: &OuterFold, y: &Matrix) -> Result<CvFold> {
        let lambdas = self.select(fold, y)?;
        let split = &fold.outer;
        let (coef, y_mean) = split.coefficients(y)?;
        let mut predictions = Matrix::zeros(split.test.len(), y.cols());
        for &lambda in &self.grid {
            let cols: Vec<usize> = (0..y.cols()).filter(|&j| lambdas[j] == lambda).collect();
            if cols.is_empty() {
                continue;
            }
            let means: Vec<f64> = cols.iter().map(|&j| y_mean[j]).collect();
            let pred = split.predict(&coef.select_cols(&cols), &means, lambda)?;
            for (c, &j) in cols.iter().enumerate() {
                for i in 0..pred.rows() {
                    predictions.set(i, j, pred.get(i, c));
                }
            }
        }
        let truth = y.select_rows(&split.test);
        let r = crate::linalg::column_pearson(&predictions, &truth);
        Ok(CvFold {
            heldout_run: fold.heldout,
            lambda_per_voxel: lambdas,
            r,
            predictions,
            heldout_rows: split.test.clone(),
        })
    }

    /// Encoding weights of the outer fit for `heldout_run`, one lambda per
    /// voxel (as selected by `run`).
    pub fn encoding_model(&self, y: &Matrix, heldout_run: usize, lambdas: &[f64]) -> Result<EncodingModel> {
        let fold = self
            .folds
            .iter()
            .find(|f| f.heldout == heldout_run)
            .ok_or_else(|| Error::contract(format!("run {heldout_run} is not an outer fold")))?;
        let split = &fold.outer;
        let mut yt = y.select_rows(&split.train);
        let y_mean = yt.column_means();
        yt.sub_row_vector(&y_mean);
        let p = split.basis.right.rows();
        let mut weights = Matrix::zeros(p, y.cols());
        for (j, &lambda) in lambdas.iter().enumerate() {
            let w = split.basis.weights(&yt.select_cols(&[j]), lambda)?;
            for i in 0..p {
                weights.set(i, j, w.get(i, 0));
            }
        }
        Ok(EncodingModel {
            weights,
            lambda_per_voxel: lambdas.to_vec(),
            fold_id: heldout_run,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodingModel {
    pub weights: Matrix,
    pub lambda_per_voxel: Vec<f64>,
    pub fold_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub heldout_run: usize,
    /// Voxel indices (into the recording) that were evaluated.
    pub voxels: Vec<usize>,
    pub r: Vec<f64>,
    pub lambda: Vec<f64>,
    pub noise_ceiling: Option<Vec<f64>>,
    pub mean_r: f64,
    pub median_r: f64,
}

/// Nested-CV alignment of `features` to the recording's `voxels`, one report
/// per outer held-out run in `outer_runs`.
pub fn nested_cv_alignment(
    features: &Matrix,
    recording: &NeuralRecording,
    voxels: &[usize],
    runs: &[Range<usize>],
    outer_runs: &[usize],
    grid: &[f64],
) -> Result<Vec<AlignmentReport>> {
    if features.rows() != recording.n_trs() {
        return Err(Error::contract("features and recording have different TR counts"));
    }
    if voxels.is_empty() {
        return Err(Error::contract("no voxels selected for alignment"));
    }
    let y = recording.responses.select_cols(voxels);
    let cv = NestedCv::new(features, runs, outer_runs, grid)?;
    let folds = cv.run(&y)?;
    Ok(folds
        .into_iter()
        .map(|f| AlignmentReport {
            heldout_run: f.heldout_run,
            voxels: voxels.to_vec(),
            mean_r: mean(&f.r),
            median_r: median(&f.r),
            noise_ceiling: recording
                .noise_ceiling
                .as_ref()
                .map(|nc| voxels.iter().map(|&v| nc[v]).collect()),
            r: f.r,
            lambda: f.lambda_per_voxel,
        })
        .collect())
}

/// Cross-participant noise ceiling per participant and voxel.
///
/// Every other participant's full response matrix predicts the target's
/// voxels under nested CV over all runs. Held-out predictions are averaged
/// across source participants and correlated with the target per held-out
/// run; `r` is the mean over runs. The ceiling is reported as explainable
/// variance, `r * |r|`, so it keeps the sign of `r`.
/// Sources are processed `jobs` at a time; the result does not depend on
/// `jobs`.
pub fn estimate_noise_ceiling(
    cohort: &[NeuralRecording],
    runs: &[Range<usize>],
    grid: &[f64],
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = cohort.len();
    if n < 2 {
        return Err(Error::contract("noise ceiling needs at least two participants"));
    }
    let t = cohort[0].n_trs();
    if cohort.iter().any(|r| r.n_trs() != t) {
        return Err(Error::contract("participants have different TR counts"));
    }
    let outer: Vec<usize> = (0..runs.len()).collect();
    // sums[p][fold]: summed held-out predictions for target p.
    let mut sums: Vec<Vec<Matrix>> = cohort
        .iter()
        .map(|r| runs.iter().map(|run| Matrix::zeros(run.len(), r.n_voxels())).collect())
        .collect();

    let from_source = |q: usize| -> Result<Vec<(usize, Vec<CvFold>)>> {
        let cv = NestedCv::new(&cohort[q].responses, runs, &outer, grid)?;
        (0..n)
            .filter(|&p| p != q)
            .map(|p| Ok((p, cv.run(&cohort[p].responses)?)))
            .collect()
    };

    let sources: Vec<usize> = (0..n).collect();
    for chunk in sources.chunks(jobs.max(1)) {
        let results: Vec<Result<Vec<(usize, Vec<CvFold>)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&q| s.spawn(move || from_source(q))).collect();
            handles.into_iter().map(|h| h.join().expect("noise-ceiling worker panicked")).collect()
        });
        for preds in results {
            for (p, folds) in preds? {
                for (f, fold) in folds.iter().enumerate() {
                    for (a, b) in sums[p][f].data_mut().iter_mut().zip(fold.predictions.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    Ok(sums
        .iter()
        .zip(cohort)
        .map(|(folds, rec)| {
            let mut r_mean = vec![0.0; rec.n_voxels()];
            for (pred, run) in folds.iter().zip(runs) {
                let truth = rec.responses.row_range(run.clone());
                for (c, r) in r_mean.iter_mut().zip(crate::linalg::column_pearson(pred, &truth)) {
                    *c += r / runs.len() as f64;
                }
            }
            r_mean.iter().map(|r| r * r.abs()).collect()
        })
        .collect())
}

/// Per-window LM loss over overlapping `window`-TR spans (stride 1) of the
/// held-out run. Masked positions, if any, come from a stream seeded by
/// `seed`, so two models evaluated with the same seed see the same masks.
pub fn evaluate_lm(
    model: &DualHeadModel,
    corpus: &StimulusCorpus,
    heldout_run: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let run = corpus
        .run_boundaries
        .get(heldout_run)
        .ok_or_else(|| Error::contract(format!("held-out run {heldout_run} out of range")))?
        .clone();
    if run.is_empty() || window == 0 {
        return Err(Error::contract("held-out run is empty"));
    }
    let window = window.min(run.len());
    let seqs: Vec<Vec<Token>> = (run.start..=run.end - window)
        .map(|s| corpus.span_tokens(s..s + window).to_vec())
        .collect();
    model.sequence_losses(&seqs, &mut rng_for(seed, "lm-eval"))
}

#[cfg(test)]
mod tests;
