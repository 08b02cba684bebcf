//! Fine-tuning under the misaligned, preserving and tuned conditions, and the
//! gate deciding whether a misaligned/preserving pair is a usable comparison.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::encoding::AlignmentReport;
use crate::error::{Error, Result};
use crate::grammar::Token;
use crate::linalg::Matrix;
use crate::model::{AdamW, AdamWConfig, DualHeadModel};
use crate::neural::StimulusCorpus;
use crate::seeds::derive_seed;
use crate::stats::{mean, welch_t_test, wilcoxon_signed_rank, TestResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Misaligned,
    Preserving,
    Tuned,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Misaligned, Condition::Preserving, Condition::Tuned];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Misaligned => "misaligned",
            Condition::Preserving => "preserving",
            Condition::Tuned => "tuned",
        }
    }

    pub fn uses_grl(self) -> bool {
        !matches!(self, Condition::Tuned)
    }

    pub fn permutes_targets(self) -> bool {
        matches!(self, Condition::Preserving)
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown condition `{s}` (expected misaligned, preserving or tuned)")))
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub omega_lm: f64,
    pub omega_ba: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub tr_window: usize,
    pub heldout_run: usize,
    pub grl_lambda: f64,
    /// Previous TRs concatenated to the brain head input during training.
    pub train_head_lag: usize,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            omega_lm: 0.1,
            omega_ba: 10.0,
            epochs: 5,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            tr_window: 5,
            heldout_run: 0,
            grl_lambda: 1.0,
            train_head_lag: 0,
        }
    }
}

impl TrainRecipe {
    /// `omega_ba = 0` is accepted and reduces training to LM fine-tuning.
    pub fn validate(&self, n_runs: usize) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("train recipe: {m}")));
        if !(self.omega_lm > 0.0) || !(self.omega_ba >= 0.0) || !self.omega_lm.is_finite() || !self.omega_ba.is_finite() {
            return fail(format!("weights must be positive, got omega_lm {} omega_ba {}", self.omega_lm, self.omega_ba));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.tr_window == 0 {
            return fail("epochs, batch_size and tr_window must be positive".into());
        }
        if self.heldout_run >= n_runs {
            return fail(format!("heldout_run {} not in 0..{n_runs}", self.heldout_run));
        }
        if !(self.grl_lambda > 0.0) || !self.grl_lambda.is_finite() {
            return fail(format!("grl_lambda must be positive, got {}", self.grl_lambda));
        }
        if self.train_head_lag >= self.tr_window {
            return fail(format!("train_head_lag {} must be below tr_window {}", self.train_head_lag, self.tr_window));
        }
        self.optimizer.validate()
    }
}

/// `omega_lm * loss_lm + omega_ba * loss_ba`.
pub fn total_loss(loss_lm: f64, loss_ba: f64, recipe: &TrainRecipe) -> f64 {
    recipe.omega_lm * loss_lm + recipe.omega_ba * loss_ba
}

/// Brain loss node over a `[TRs, V]` prediction and target: mean over voxels
/// of `-r^2` (misaligned, preserving) or `-r` (tuned), with r computed along
/// the TR axis within the batch.
pub fn brain_loss_node(g: &mut Graph, pred: Var, target: Var, condition: Condition) -> Result<Var> {
    let (rows, _) = g.value(pred).as_matrix_dims();
    if rows < 2 {
        return Err(Error::contract(format!("brain loss needs at least 2 TRs, got {rows}")));
    }
    let r = g.pearson_cols(pred, target)?;
    let per_voxel = if condition == Condition::Tuned { r } else { g.mul(r, r)? };
    let m = g.mean(per_voxel);
    Ok(g.scale(m, -1.0))
}

/// Value of [`brain_loss_node`] for plain matrices.
pub fn brain_batch_loss(pred: &Matrix, target: &Matrix, condition: Condition) -> Result<f64> {
    if (pred.rows(), pred.cols()) != (target.rows(), target.cols()) {
        return Err(Error::contract("prediction and target shapes differ"));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::matrix(pred.rows(), pred.cols(), pred.data().to_vec())?);
    let t = g.constant(Tensor::matrix(target.rows(), target.cols(), target.data().to_vec())?);
    let loss = brain_loss_node(&mut g, p, t, condition)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss_lm: f64,
    pub loss_ba: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: DualHeadModel,
    pub curves: Vec<LossPoint>,
    /// Degenerate (flat) per-voxel correlations met during training.
    pub degenerate_correlations: usize,
}

/// Non-overlapping `window`-TR spans inside every run except `heldout`.
pub fn training_windows(runs: &[Range<usize>], heldout: usize, window: usize) -> Vec<Range<usize>> {
    runs.iter()
        .enumerate()
        .filter(|(i, _)| *i != heldout)
        .flat_map(|(_, run)| {
            let run = run.clone();
            (0..run.len() / window).map(move |k| run.start + k * window..run.start + (k + 1) * window)
        })
        .collect()
}

/// Fine-tunes a copy of `base` with LoRA adapters and a fresh brain head.
///
/// `targets` holds the selected voxels' responses, `n_trs x V`. Samples are
/// the non-overlapping training windows; each TR in a window contributes
/// one brain-head row (mean of its token representations, optionally
/// concatenated with earlier TRs of the same window). Under the preserving
/// condition the target rows of the training TRs are shuffled with a fresh
/// permutation every epoch.
pub fn train_condition(
    base: &DualHeadModel,
    corpus: &StimulusCorpus,
    targets: &Matrix,
    condition: Condition,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<TrainedRun> {
    recipe.validate(corpus.run_boundaries.len())?;
    if base.lora_active() {
        return Err(Error::contract("base model already carries adapters"));
    }
    if targets.rows() != corpus.n_trs() {
        return Err(Error::contract(format!(
            "targets have {} TRs, corpus {}",
            targets.rows(),
            corpus.n_trs()
        )));
    }
    if targets.cols() == 0 {
        return Err(Error::config("no voxels selected for training"));
    }
    let d = base.config().d_model;
    let lag = recipe.train_head_lag;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
    let mut model = base.clone();
    model.attach_lora(&mut init_rng);
    model.attach_brain_head(d * (lag + 1), targets.cols(), &mut init_rng)?;
    model.set_grl_lambda(condition.uses_grl().then_some(recipe.grl_lambda))?;

    let windows = training_windows(&corpus.run_boundaries, recipe.heldout_run, recipe.tr_window);
    let batch_trs: Vec<usize> = windows
        .chunks(recipe.batch_size)
        .map(|b| b.len() * recipe.tr_window)
        .collect();
    if batch_trs.is_empty() || batch_trs.iter().any(|&n| n < 2) {
        return Err(Error::config(format!(
            "batches need at least 2 TRs; window {} and batch size {} give {:?}",
            recipe.tr_window, recipe.batch_size, batch_trs
        )));
    }
    let train_trs: Vec<usize> = windows.iter().flat_map(|w| w.clone()).collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "order"));
    let mut perm_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "permutation"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mask"));
    let mut optimizer = AdamW::new(recipe.optimizer.clone())?;
    let mut curves = Vec::new();
    let mut degenerate = 0;
    // target_row[t] = row of `targets` paired with TR t this epoch.
    let mut target_row: Vec<usize> = (0..corpus.n_trs()).collect();

    for epoch in 0..recipe.epochs {
        if condition.permutes_targets() {
            permute_rows(&mut target_row, &train_trs, &mut perm_rng);
        }
        let mut order = windows.clone();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(recipe.batch_size) {
            let rows: Vec<usize> = batch.iter().flat_map(|w| w.clone()).map(|t| target_row[t]).collect();
            let step = batch_step(&model, corpus, batch, &targets.select_rows(&rows), condition, recipe, &mut mask_rng)?;
            degenerate += step.degenerate;
            curves.push(LossPoint {
                step: curves.len(),
                epoch,
                loss_lm: step.loss_lm,
                loss_ba: step.loss_ba,
                total: step.total,
            });
            optimizer.step(&mut model, &step.grads)?;
        }
    }
    Ok(TrainedRun {
        model,
        curves,
        degenerate_correlations: degenerate,
    })
}

/// Reassigns the target rows of `trs` by a uniform random permutation of
/// `trs`; other entries are left alone.
pub(crate) fn permute_rows<R: rand::Rng>(target_row: &mut [usize], trs: &[usize], rng: &mut R) {
    let mut shuffled = trs.to_vec();
    shuffled.shuffle(rng);
    for (&t, &s) in trs.iter().zip(&shuffled) {
        target_row[t] = s;
    }
}

pub(crate) struct StepOutput {
    pub loss_lm: f64,
    pub loss_ba: f64,
    pub total: f64,
    pub degenerate: usize,
    pub grads: Vec<(usize, Vec<f64>)>,
}

/// Forward and backward for one batch of windows paired with `target` rows.
pub(crate) fn batch_step<R: rand::Rng>(
    model: &DualHeadModel,
    corpus: &StimulusCorpus,
    batch: &[Range<usize>],
    target: &Matrix,
    condition: Condition,
    recipe: &TrainRecipe,
    mask_rng: &mut R,
) -> Result<StepOutput> {
    let tokens: Vec<Vec<Token>> = batch.iter().map(|w| corpus.span_tokens(w.clone()).to_vec()).collect();
    let mut s = model.session();
    let lm = model.forward_lm(&mut s, &tokens, mask_rng)?;
    let feats = tr_rows(&mut s.graph, lm.representations, corpus, batch, lm.seq_len, recipe.train_head_lag)?;
    let pred = model.forward_brain(&mut s, feats)?;
    let target = s.graph.constant(Tensor::matrix(target.rows(), target.cols(), target.data().to_vec())?);
    let loss_ba = brain_loss_node(&mut s.graph, pred, target, condition)?;
    let weighted_lm = s.graph.scale(lm.loss, recipe.omega_lm);
    let weighted_ba = s.graph.scale(loss_ba, recipe.omega_ba);
    let total = s.graph.add(weighted_lm, weighted_ba)?;
    s.graph.backward(total)?;
    Ok(StepOutput {
        loss_lm: s.graph.value(lm.loss).item(),
        loss_ba: s.graph.value(loss_ba).item(),
        total: s.graph.value(total).item(),
        degenerate: s.graph.degenerate_correlations(),
        grads: s.gradients(),
    })
}

/// Brain-head input rows for a batch of windows: per-TR mean of token
/// representations, concatenated with the `lag` previous TRs of the same
/// window (zero rows before the window start).
pub(crate) fn tr_rows(
    g: &mut Graph,
    reps: Var,
    corpus: &StimulusCorpus,
    batch: &[Range<usize>],
    seq_len: usize,
    lag: usize,
) -> Result<Var> {
    let mut segments = Vec::new();
    for (b, w) in batch.iter().enumerate() {
        let offset = corpus.tr_boundaries[w.start].start;
        for t in w.clone() {
            let r = &corpus.tr_boundaries[t];
            segments.push(b * seq_len + r.start - offset..b * seq_len + r.end - offset);
        }
    }
    let current = g.segment_mean(reps, segments)?;
    if lag == 0 {
        return Ok(current);
    }
    let window = batch[0].len();
    let mut parts = vec![current];
    for j in 1..=lag {
        let rows: Vec<Option<usize>> = (0..batch.len() * window)
            .map(|i| (i % window >= j).then(|| i - j))
            .collect();
        parts.push(g.gather_rows(current, rows)?);
    }
    g.concat_cols(&parts)
}

/// Held-out evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub heldout_run: usize,
    pub lm_losses: Vec<f64>,
    pub alignment: AlignmentReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub passed: bool,
    pub lm_p: f64,
    pub ba_p: f64,
    pub lm_test: TestResult,
    pub ba_test: TestResult,
    pub misaligned_mean_r: f64,
    pub preserving_mean_r: f64,
    pub heldout_run: usize,
}

/// Passes iff per-sample LM losses do not differ (Wilcoxon, `p >= alpha`) and
/// misaligned in-ROI alignment is significantly lower (Welch, `p < alpha`).
pub fn success_gate(misaligned: &EvalResult, preserving: &EvalResult, alpha: f64) -> Result<GateReport> {
    if misaligned.heldout_run != preserving.heldout_run
        || misaligned.alignment.heldout_run != preserving.alignment.heldout_run
        || misaligned.heldout_run != misaligned.alignment.heldout_run
    {
        return Err(Error::contract("gate compares evaluations on different held-out runs"));
    }
    if misaligned.lm_losses.len() != preserving.lm_losses.len() {
        return Err(Error::contract("LM loss samples are not paired"));
    }
    let diffs: Vec<f64> = misaligned
        .lm_losses
        .iter()
        .zip(&preserving.lm_losses)
        .map(|(a, b)| a - b)
        .collect();
    let lm_test = wilcoxon_signed_rank(&diffs)?;
    let ba_test = welch_t_test(&misaligned.alignment.r, &preserving.alignment.r)?;
    let mis = mean(&misaligned.alignment.r);
    let pres = mean(&preserving.alignment.r);
    let passed = lm_test.p_value >= alpha && ba_test.p_value < alpha && mis < pres;
    Ok(GateReport {
        passed,
        lm_p: lm_test.p_value,
        ba_p: ba_test.p_value,
        lm_test,
        ba_test,
        misaligned_mean_r: mis,
        preserving_mean_r: pres,
        heldout_run: misaligned.heldout_run,
    })
}
