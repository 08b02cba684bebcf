//! Stage orchestration over an output directory.
//!
//! Stages: pretrain, simulate, train, eval, probe, compare, report. Each
//! stage reads the previous stages' artifacts, writes its own atomically and
//! records them in a manifest.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{AlphaLevels, CompareSet, ExperimentConfig, ProbeSpec, SCHEMA_VERSION};
pub use manifest::{orphaned_files, ParticipantGate, RunManifest, MANIFEST_SUFFIX};

use crate::align::{success_gate, train_condition, Condition, EvalResult, GateReport};
use crate::encoding::{build_lagged_features, estimate_noise_ceiling, evaluate_lm, nested_cv_alignment};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read, read_json, write_json};
use crate::model::{load_checkpoint, save_checkpoint, sidecar_path, DualHeadModel};
use crate::neural::{generate_cohort, generate_corpus, load_recording, save_recording, NeuralRecording, StimulusCorpus};
use crate::pretrain::pretrain;
use crate::probe::{
    aggregate_win_scores, builtin_tasks, compare_models, parse_results_csv, results_csv, run_suite, save_tasks,
    ProbeResult, RunWins, WinScores,
};
use crate::seeds::derive_seed;
use crate::stats::{mean, standard_error, wilcoxon_signed_rank, TestResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    Simulate,
    Train,
    Eval,
    Probe,
    Compare,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Pretrain,
        Stage::Simulate,
        Stage::Train,
        Stage::Eval,
        Stage::Probe,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Probe => "probe",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Command-line selections layered over the config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub participants: Option<Vec<String>>,
    pub condition: Option<Condition>,
    pub heldout_run: Option<usize>,
    pub jobs: usize,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub manifests: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Gates were evaluated and none passed.
    pub gate_failure_only: bool,
}

impl StageOutcome {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            manifests: Vec::new(),
            warnings: Vec::new(),
            gate_failure_only: false,
        }
    }
}

/// Pairs compared on the probe suite, better-expected model first.
pub const COMPARISON_PAIRS: [(Condition, Condition); 3] = [
    (Condition::Preserving, Condition::Misaligned),
    (Condition::Tuned, Condition::Preserving),
    (Condition::Tuned, Condition::Misaligned),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSignificance {
    pub model_a: Condition,
    pub model_b: Condition,
    pub n_participants: usize,
    pub win_rate_a: f64,
    pub win_rate_b: f64,
    /// Wilcoxon over (participant, task) win-score differences, `a - b`.
    pub test: Option<TestResult>,
    pub significant: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub model_a: Condition,
    pub model_b: Condition,
    pub participants: Vec<String>,
    pub runs: Vec<RunWins>,
    pub scores: Option<WinScores>,
    pub significance: PairSignificance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub alpha: f64,
    pub participant_set: CompareSet,
    pub pairs: Vec<PairComparison>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub participant: String,
    pub heldout_run: usize,
    pub passed: bool,
    pub lm_p: f64,
    pub ba_p: f64,
    pub misaligned_mean_r: f64,
    pub preserving_mean_r: f64,
    /// Preserving minus misaligned mean in-ROI alignment.
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub n_participants: usize,
    pub n_gate_passed: usize,
    pub gates: Vec<GateRow>,
    pub significance: Vec<PairSignificance>,
    pub warnings: Vec<String>,
}

pub struct Pipeline {
    config: ExperimentConfig,
    opts: RunOptions,
    root: PathBuf,
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out.into_bytes()
}

fn parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(jobs) {
        let results: Vec<Result<R>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|item| s.spawn(|| f(item))).collect();
            handles.into_iter().map(|h| h.join().expect("pipeline worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn participant_id(index: usize) -> String {
    format!("p{:02}", index + 1)
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, opts: RunOptions) -> Result<Self> {
        config.validate()?;
        if let Some(h) = opts.heldout_run {
            if !config.heldout_runs.contains(&h) {
                return Err(Error::config(format!(
                    "--heldout-run {h} is not among the configured heldout_runs {:?}",
                    config.heldout_runs
                )));
            }
        }
        if let Some(c) = opts.condition {
            if !config.conditions.contains(&c) {
                return Err(Error::config(format!("--condition {c} is not among the configured conditions")));
            }
        }
        let all: Vec<String> = (0..config.cohort.n_participants).map(participant_id).collect();
        if let Some(ps) = &opts.participants {
            if let Some(bad) = ps.iter().find(|p| !all.contains(p)) {
                return Err(Error::config(format!("--participants: unknown participant `{bad}` (have {})", all.join(", "))));
            }
        }
        let root = config.output_dir.clone();
        std::fs::create_dir_all(&root).map_err(|e| Error::config(format!("output directory {}: {e}", root.display())))?;
        let probe = root.join(".write-test");
        std::fs::write(&probe, b"").map_err(|e| Error::config(format!("output directory {} is not writable: {e}", root.display())))?;
        let _ = std::fs::remove_file(&probe);
        Ok(Self { config, opts, root })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn participants(&self) -> Vec<String> {
        let all: Vec<String> = (0..self.config.cohort.n_participants).map(participant_id).collect();
        match &self.opts.participants {
            Some(sel) => all.into_iter().filter(|p| sel.contains(p)).collect(),
            None => all,
        }
    }

    fn heldout_runs(&self) -> Vec<usize> {
        match self.opts.heldout_run {
            Some(h) => vec![h],
            None => self.config.heldout_runs.clone(),
        }
    }

    fn conditions(&self) -> Vec<Condition> {
        match self.opts.condition {
            Some(c) => vec![c],
            None => self.config.conditions.clone(),
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn require(&self, path: &Path, stage: Stage) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::MissingPrerequisite {
                stage: stage.name().into(),
                path: path.to_path_buf(),
            })
        }
    }

    fn base_path(&self) -> PathBuf {
        self.root.join("pretrain/base.ckpt")
    }

    fn corpus_path(&self) -> PathBuf {
        self.root.join("simulate/corpus.json")
    }

    fn recording_path(&self, pid: &str) -> PathBuf {
        self.root.join(format!("simulate/{pid}.rec"))
    }

    fn run_dir(&self, stage: Stage, pid: &str, h: usize) -> PathBuf {
        self.root.join(format!("{stage}/{pid}/run{h}"))
    }

    fn checkpoint_path(&self, pid: &str, h: usize, c: Condition) -> PathBuf {
        self.run_dir(Stage::Train, pid, h).join(format!("{c}.ckpt"))
    }

    fn load_base(&self) -> Result<DualHeadModel> {
        let p = self.base_path();
        self.require(&p, Stage::Pretrain)?;
        load_checkpoint(&p)
    }

    fn load_corpus(&self) -> Result<StimulusCorpus> {
        let p = self.corpus_path();
        self.require(&p, Stage::Simulate)?;
        StimulusCorpus::load(&p)
    }

    fn load_recording(&self, pid: &str) -> Result<NeuralRecording> {
        let p = self.recording_path(pid);
        self.require(&p, Stage::Simulate)?;
        load_recording(&p)
    }

    fn manifest(&self, stage: Stage, artifacts: Vec<PathBuf>, started: Instant) -> RunManifest {
        let mut m = RunManifest::new(stage.name(), &self.config);
        m.artifacts = artifacts.iter().map(|p| self.rel(p)).collect();
        m.wall_clock_secs = started.elapsed().as_secs_f64();
        m
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        match stage {
            Stage::Pretrain => self.stage_pretrain(),
            Stage::Simulate => self.stage_simulate(),
            Stage::Train => self.stage_train(),
            Stage::Eval => self.stage_eval(),
            Stage::Probe => self.stage_probe(),
            Stage::Compare => self.stage_compare(),
            Stage::Report => self.stage_report(),
        }
    }

    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.iter().map(|&s| self.run_stage(s)).collect()
    }

    fn stage_pretrain(&self) -> Result<StageOutcome> {
        let started = Instant::now();
        let seed = derive_seed(self.config.seed, "pretrain");
        let trained = pretrain(self.config.model.clone(), &self.config.pretrain, seed)?;
        let ckpt = self.base_path();
        save_checkpoint(
            &trained.model,
            &ckpt,
            serde_json::json!({ "stage": "pretrain", "seed": seed, "steps": self.config.pretrain.steps }),
        )?;
        let losses = self.root.join("pretrain/loss.csv");
        atomic_write(
            &losses,
            &csv("step,loss", trained.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}"))),
        )?;
        let mut out = StageOutcome::new(Stage::Pretrain);
        let m = self.manifest(Stage::Pretrain, vec![sidecar_path(&ckpt), ckpt, losses], started);
        out.manifests.push(m.write(&self.root, "pretrain/manifest.json")?);
        Ok(out)
    }

    fn stage_simulate(&self) -> Result<StageOutcome> {
        let started = Instant::now();
        let base = self.load_base()?;
        let corpus = generate_corpus(&self.config.corpus, derive_seed(self.config.seed, "corpus"))?;
        let spec = crate::neural::CohortSpec {
            seed: derive_seed(self.config.seed, "cohort"),
            ..self.config.cohort.clone()
        };
        let mut cohort = generate_cohort(&corpus, &base, &spec)?;
        let ceilings = estimate_noise_ceiling(&cohort, &corpus.run_boundaries, &self.config.lambda_grid, self.opts.jobs)?;
        let mut artifacts = vec![self.corpus_path()];
        corpus.save(&self.corpus_path())?;
        let mut rows = Vec::new();
        let mut out = StageOutcome::new(Stage::Simulate);
        for (rec, nc) in cohort.iter_mut().zip(ceilings) {
            for (v, c) in nc.iter().enumerate() {
                rows.push(format!("{},{v},{},{c}", rec.participant_id, rec.roi_mask[v] as u8));
            }
            rec.noise_ceiling = Some(nc);
            if rec.selected_voxels(self.config.alpha.ceiling_threshold).is_empty() {
                out.warnings.push(format!("{}: no voxel passes the noise-ceiling threshold", rec.participant_id));
            }
            let p = self.recording_path(&rec.participant_id);
            save_recording(rec, &p)?;
            artifacts.push(p);
        }
        let nc_path = self.root.join("simulate/noise_ceiling.csv");
        atomic_write(&nc_path, &csv("participant,voxel,roi,ceiling", rows))?;
        artifacts.push(nc_path);
        let mut m = self.manifest(Stage::Simulate, artifacts, started);
        m.warnings = out.warnings.clone();
        out.manifests.push(m.write(&self.root, "simulate/manifest.json")?);
        Ok(out)
    }

    /// Training seed for a participant and held-out run, shared by every
    /// condition so the conditions differ only in their objective.
    pub fn training_seed(&self, pid: &str, h: usize) -> u64 {
        derive_seed(self.config.seed, &format!("train-{pid}-run{h}"))
    }

    fn stage_train(&self) -> Result<StageOutcome> {
        let base = self.load_base()?;
        let corpus = self.load_corpus()?;
        let mut jobs = Vec::new();
        for pid in self.participants() {
            for h in self.heldout_runs() {
                for c in self.conditions() {
                    jobs.push((pid.clone(), h, c));
                }
            }
        }
        let manifests = parallel(&jobs, self.opts.jobs, |(pid, h, c)| {
            let started = Instant::now();
            let rec = self.load_recording(pid)?;
            let voxels = rec.selected_voxels(self.config.alpha.ceiling_threshold);
            if voxels.is_empty() {
                return Err(Error::contract(format!("{pid}: no voxel passes the noise-ceiling threshold")));
            }
            let targets = rec.responses.select_cols(&voxels);
            let recipe = crate::align::TrainRecipe {
                heldout_run: *h,
                ..self.config.train.clone()
            };
            let seed = self.training_seed(pid, *h);
            let run = train_condition(&base, &corpus, &targets, *c, &recipe, seed)?;
            let ckpt = self.checkpoint_path(pid, *h, *c);
            save_checkpoint(
                &run.model,
                &ckpt,
                serde_json::json!({ "stage": "train", "participant": pid, "condition": c, "heldout_run": h, "seed": seed }),
            )?;
            let curves = self.run_dir(Stage::Train, pid, *h).join(format!("{c}_curves.csv"));
            atomic_write(
                &curves,
                &csv(
                    "step,epoch,loss_lm,loss_ba,total",
                    run.curves
                        .iter()
                        .map(|p| format!("{},{},{},{},{}", p.step, p.epoch, p.loss_lm, p.loss_ba, p.total)),
                ),
            )?;
            let mut m = self.manifest(Stage::Train, vec![sidecar_path(&ckpt), ckpt, curves], started);
            if run.degenerate_correlations > 0 {
                m.warnings.push(format!("{} degenerate voxel correlations during training", run.degenerate_correlations));
            }
            m.write(&self.root, &format!("train/{pid}/run{h}/{c}.{MANIFEST_SUFFIX}"))
        })?;
        let mut out = StageOutcome::new(Stage::Train);
        out.manifests = manifests;
        Ok(out)
    }

    fn eval_path(&self, pid: &str, h: usize, c: Condition) -> PathBuf {
        self.run_dir(Stage::Eval, pid, h).join(format!("{c}.json"))
    }

    fn gate_path(&self, pid: &str, h: usize) -> PathBuf {
        self.run_dir(Stage::Eval, pid, h).join("gate.json")
    }

    fn stage_eval(&self) -> Result<StageOutcome> {
        let corpus = self.load_corpus()?;
        let jobs: Vec<(String, usize)> = self
            .participants()
            .into_iter()
            .flat_map(|p| self.heldout_runs().into_iter().map(move |h| (p.clone(), h)))
            .collect();
        let results = parallel(&jobs, self.opts.jobs, |(pid, h)| {
            let started = Instant::now();
            let rec = self.load_recording(pid)?;
            let voxels = rec.selected_voxels(self.config.alpha.ceiling_threshold);
            let dir = self.run_dir(Stage::Eval, pid, *h);
            for c in self.conditions() {
                let ckpt = self.checkpoint_path(pid, *h, c);
                self.require(&ckpt, Stage::Train)?;
                let model = load_checkpoint(&ckpt)?;
                let id = format!("{pid}/run{h}/{c}");
                let features = build_lagged_features(&model, &corpus, self.config.lag, &id, "stimulus")?;
                let mut reports =
                    nested_cv_alignment(&features.matrix, &rec, &voxels, &corpus.run_boundaries, &[*h], &self.config.lambda_grid)?;
                let lm_seed = derive_seed(self.config.seed, &format!("lm-eval-{pid}-run{h}"));
                let lm_losses = evaluate_lm(&model, &corpus, *h, self.config.train.tr_window, lm_seed)?;
                let result = EvalResult {
                    heldout_run: *h,
                    lm_losses,
                    alignment: reports.remove(0),
                };
                write_json(&self.eval_path(pid, *h, c), &result)?;
                let a = &result.alignment;
                atomic_write(
                    &dir.join(format!("{c}_alignment.csv")),
                    &csv(
                        "voxel,r,lambda,ceiling",
                        a.voxels.iter().enumerate().map(|(i, v)| {
                            let nc = a.noise_ceiling.as_ref().map_or(String::new(), |n| n[i].to_string());
                            format!("{v},{},{},{nc}", a.r[i], a.lambda[i])
                        }),
                    ),
                )?;
                atomic_write(
                    &dir.join(format!("{c}_lm.csv")),
                    &csv("window,loss", result.lm_losses.iter().enumerate().map(|(i, l)| format!("{i},{l}"))),
                )?;
            }
            let mut artifacts = Vec::new();
            for c in &self.config.conditions {
                for name in [format!("{c}.json"), format!("{c}_alignment.csv"), format!("{c}_lm.csv")] {
                    let p = dir.join(name);
                    if p.is_file() {
                        artifacts.push(p);
                    }
                }
            }
            let (mis, pres) = (self.eval_path(pid, *h, Condition::Misaligned), self.eval_path(pid, *h, Condition::Preserving));
            let mut gate = None;
            if mis.is_file() && pres.is_file() {
                let report = success_gate(&read_json(&mis)?, &read_json(&pres)?, self.config.alpha.gate)?;
                write_json(&self.gate_path(pid, *h), &report)?;
                artifacts.push(self.gate_path(pid, *h));
                gate = Some(report);
            }
            let mut m = self.manifest(Stage::Eval, artifacts, started);
            if let Some(report) = &gate {
                m.gate_reports.push(ParticipantGate {
                    participant: pid.clone(),
                    report: report.clone(),
                });
            }
            Ok((m.write(&self.root, &format!("eval/{pid}/run{h}/{MANIFEST_SUFFIX}"))?, gate))
        })?;
        let mut out = StageOutcome::new(Stage::Eval);
        let gates: Vec<&GateReport> = results.iter().filter_map(|(_, g)| g.as_ref()).collect();
        out.gate_failure_only = !gates.is_empty() && gates.iter().all(|g| !g.passed);
        if out.gate_failure_only {
            out.warnings.push("no evaluated participant passed the success gate".into());
        }
        out.manifests = results.into_iter().map(|(m, _)| m).collect();
        Ok(out)
    }

    /// Probe seeds shared by every model.
    pub fn probe_seeds(&self) -> Vec<u64> {
        (0..self.config.probe.seeds)
            .map(|i| derive_seed(self.config.seed, &format!("probe-seed-{i}")))
            .collect()
    }

    fn probe_path(&self, pid: &str, h: usize, c: Condition) -> PathBuf {
        self.run_dir(Stage::Probe, pid, h).join(format!("{c}.csv"))
    }

    fn stage_probe(&self) -> Result<StageOutcome> {
        let started = Instant::now();
        let tasks = builtin_tasks(derive_seed(self.config.seed, "probe-tasks"));
        let seeds = self.probe_seeds();
        let base = self.load_base()?;
        let tasks_path = self.root.join("probe/tasks.jsonl");
        save_tasks(&tasks, &tasks_path)?;
        let base_path = self.root.join("probe/base.csv");
        atomic_write(&base_path, results_csv(&run_suite(&base, "base", &tasks, &seeds)?).as_bytes())?;
        let mut out = StageOutcome::new(Stage::Probe);
        out.manifests.push(
            self.manifest(Stage::Probe, vec![tasks_path, base_path], started)
                .write(&self.root, "probe/manifest.json")?,
        );

        let jobs: Vec<(String, usize)> = self
            .participants()
            .into_iter()
            .flat_map(|p| self.heldout_runs().into_iter().map(move |h| (p.clone(), h)))
            .collect();
        let manifests = parallel(&jobs, self.opts.jobs, |(pid, h)| {
            let started = Instant::now();
            for c in self.conditions() {
                let ckpt = self.checkpoint_path(pid, *h, c);
                self.require(&ckpt, Stage::Train)?;
                let model = load_checkpoint(&ckpt)?;
                let results = run_suite(&model, &format!("{pid}/run{h}/{c}"), &tasks, &seeds)?;
                atomic_write(&self.probe_path(pid, *h, c), results_csv(&results).as_bytes())?;
            }
            let artifacts: Vec<PathBuf> = self
                .config
                .conditions
                .iter()
                .map(|&c| self.probe_path(pid, *h, c))
                .filter(|p| p.is_file())
                .collect();
            self.manifest(Stage::Probe, artifacts, started)
                .write(&self.root, &format!("probe/{pid}/run{h}/{MANIFEST_SUFFIX}"))
        })?;
        out.manifests.extend(manifests);
        Ok(out)
    }

    fn load_gate(&self, pid: &str, h: usize) -> Result<GateReport> {
        let p = self.gate_path(pid, h);
        self.require(&p, Stage::Eval)?;
        read_json(&p)
    }

    fn load_probe(&self, pid: &str, h: usize, c: Condition) -> Result<Vec<ProbeResult>> {
        let p = self.probe_path(pid, h, c);
        self.require(&p, Stage::Probe)?;
        let text = String::from_utf8(read(&p)?).map_err(|_| Error::format(p.display().to_string(), 0, "not UTF-8"))?;
        let mut rs = parse_results_csv(&text)?;
        for r in &mut rs {
            r.model = c.name().into();
        }
        Ok(rs)
    }

    fn stage_compare(&self) -> Result<StageOutcome> {
        let started = Instant::now();
        let alpha = self.config.alpha.probe;
        let runs = self.heldout_runs();
        let mut included = Vec::new();
        for pid in self.participants() {
            let mut keep = true;
            if self.config.probe.participants == CompareSet::Passing {
                for &h in &runs {
                    keep &= self.load_gate(&pid, h)?.passed;
                }
            }
            if keep {
                included.push(pid);
            }
        }
        let mut warnings = Vec::new();
        if included.is_empty() {
            warnings.push("no participant passed the success gate; the comparison is empty".to_string());
        }

        let dir = self.root.join("compare");
        let mut artifacts = Vec::new();
        let mut pairs = Vec::new();
        for (a, b) in COMPARISON_PAIRS {
            if !self.config.conditions.contains(&a) || !self.config.conditions.contains(&b) {
                continue;
            }
            let mut run_wins = Vec::new();
            for pid in &included {
                for &h in &runs {
                    let matrix = compare_models(&self.load_probe(pid, h, a)?, &self.load_probe(pid, h, b)?, alpha)?;
                    run_wins.push(RunWins {
                        participant: pid.clone(),
                        heldout_run: h,
                        matrix,
                    });
                }
            }
            let scores = if run_wins.is_empty() { None } else { Some(aggregate_win_scores(&run_wins)?) };
            let significance = pair_significance(a, b, included.len(), scores.as_ref(), alpha);

            let pair_dir = dir.join(format!("{a}_vs_{b}"));
            let mut matrix_rows = Vec::new();
            for rw in &run_wins {
                for t in &rw.matrix.tasks {
                    matrix_rows.push(format!(
                        "{},{},{},{},{},{},{},{},{},{}",
                        rw.participant, rw.heldout_run, t.task, t.subfield, t.phenomenon, t.mean_a, t.mean_b, t.p_value, t.win_a, t.win_b
                    ));
                }
            }
            let files = [
                (
                    "win_matrix.csv",
                    csv("participant,heldout_run,task,subfield,phenomenon,mean_a,mean_b,p_value,win_a,win_b", matrix_rows),
                ),
                (
                    "task_scores.csv",
                    csv(
                        "participant,model,task,subfield,phenomenon,score",
                        scores.iter().flat_map(|s| &s.tasks).map(|t| {
                            format!("{},{},{},{},{},{}", t.participant, t.model, t.task, t.subfield, t.phenomenon, t.score)
                        }),
                    ),
                ),
                (
                    "subfield_scores.csv",
                    csv(
                        "participant,model,subfield,score",
                        scores
                            .iter()
                            .flat_map(|s| &s.subfields)
                            .map(|g| format!("{},{},{},{}", g.participant, g.model, g.group, g.score)),
                    ),
                ),
                (
                    "phenomenon_scores.csv",
                    csv(
                        "participant,model,phenomenon,score",
                        scores
                            .iter()
                            .flat_map(|s| &s.phenomena)
                            .map(|g| format!("{},{},{},{}", g.participant, g.model, g.group, g.score)),
                    ),
                ),
            ];
            for (name, bytes) in files {
                let p = pair_dir.join(name);
                atomic_write(&p, &bytes)?;
                artifacts.push(p);
            }
            pairs.push(PairComparison {
                model_a: a,
                model_b: b,
                participants: included.clone(),
                runs: run_wins,
                scores,
                significance,
            });
        }

        let sig_path = dir.join("significance.csv");
        atomic_write(
            &sig_path,
            &csv(
                "model_a,model_b,n_participants,win_rate_a,win_rate_b,statistic,p_value,method,significant,note",
                pairs.iter().map(|p| {
                    let s = &p.significance;
                    let (stat, pv, method) = match &s.test {
                        Some(t) => (t.statistic.to_string(), t.p_value.to_string(), format!("{:?}", t.method)),
                        None => (String::new(), String::new(), String::new()),
                    };
                    format!(
                        "{},{},{},{},{},{stat},{pv},{method},{},{}",
                        s.model_a, s.model_b, s.n_participants, s.win_rate_a, s.win_rate_b, s.significant, s.note.replace(',', ";")
                    )
                }),
            ),
        )?;
        artifacts.push(sig_path);
        let summary_path = dir.join("summary.json");
        write_json(
            &summary_path,
            &CompareSummary {
                alpha,
                participant_set: self.config.probe.participants,
                pairs,
                warnings: warnings.clone(),
            },
        )?;
        artifacts.push(summary_path);

        let mut m = self.manifest(Stage::Compare, artifacts, started);
        m.warnings = warnings.clone();
        let mut out = StageOutcome::new(Stage::Compare);
        out.warnings = warnings;
        out.manifests.push(m.write(&self.root, "compare/manifest.json")?);
        Ok(out)
    }

    fn stage_report(&self) -> Result<StageOutcome> {
        let started = Instant::now();
        let summary_path = self.root.join("compare/summary.json");
        self.require(&summary_path, Stage::Compare)?;
        let summary: CompareSummary = read_json(&summary_path)?;
        let mut gates = Vec::new();
        for pid in self.participants() {
            for h in self.heldout_runs() {
                let g = self.load_gate(&pid, h)?;
                gates.push(GateRow {
                    participant: pid.clone(),
                    heldout_run: h,
                    passed: g.passed,
                    lm_p: g.lm_p,
                    ba_p: g.ba_p,
                    misaligned_mean_r: g.misaligned_mean_r,
                    preserving_mean_r: g.preserving_mean_r,
                    contrast: g.preserving_mean_r - g.misaligned_mean_r,
                });
            }
        }
        let participants = self.participants();
        let n_passed = participants
            .iter()
            .filter(|p| gates.iter().filter(|g| &g.participant == *p).all(|g| g.passed))
            .count();
        let mut warnings = summary.warnings.clone();
        if n_passed == 0 {
            warnings.push("no participant passed the success gate".into());
        }

        let dir = self.root.join("report");
        let gates_path = dir.join("gates.csv");
        atomic_write(
            &gates_path,
            &csv(
                "participant,heldout_run,passed,lm_p,ba_p,misaligned_mean_r,preserving_mean_r,contrast",
                gates.iter().map(|g| {
                    format!(
                        "{},{},{},{},{},{},{},{}",
                        g.participant, g.heldout_run, g.passed, g.lm_p, g.ba_p, g.misaligned_mean_r, g.preserving_mean_r, g.contrast
                    )
                }),
            ),
        )?;
        let mut artifacts = vec![gates_path];
        for (name, pick) in [("subfield_plot.csv", 0usize), ("phenomenon_plot.csv", 1)] {
            let mut rows = Vec::new();
            for pair in &summary.pairs {
                let Some(scores) = &pair.scores else { continue };
                let groups = if pick == 0 { &scores.subfields } else { &scores.phenomena };
                let mut by: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
                for g in groups {
                    by.entry((g.model.clone(), g.group.clone())).or_default().push(g.score);
                }
                for ((model, group), xs) in by {
                    let se = if xs.len() > 1 { standard_error(&xs) } else { 0.0 };
                    rows.push(format!(
                        "{},{},{model},{group},{},{se},{}",
                        pair.model_a,
                        pair.model_b,
                        mean(&xs),
                        xs.len()
                    ));
                }
            }
            let p = dir.join(name);
            atomic_write(&p, &csv("model_a,model_b,model,group,win_rate,standard_error,n_participants", rows))?;
            artifacts.push(p);
        }
        let report = Report {
            seed: self.config.seed,
            n_participants: participants.len(),
            n_gate_passed: n_passed,
            gates,
            significance: summary.pairs.iter().map(|p| p.significance.clone()).collect(),
            warnings: warnings.clone(),
        };
        let report_path = dir.join("report.json");
        write_json(&report_path, &report)?;
        artifacts.push(report_path);
        let mut m = self.manifest(Stage::Report, artifacts, started);
        m.warnings = warnings.clone();
        let mut out = StageOutcome::new(Stage::Report);
        out.warnings = warnings;
        out.manifests.push(m.write(&self.root, "report/manifest.json")?);
        Ok(out)
    }
}

fn pair_significance(a: Condition, b: Condition, n: usize, scores: Option<&WinScores>, alpha: f64) -> PairSignificance {
    let mut s = PairSignificance {
        model_a: a,
        model_b: b,
        n_participants: n,
        win_rate_a: 0.0,
        win_rate_b: 0.0,
        test: None,
        significant: false,
        note: String::new(),
    };
    let Some(scores) = scores else {
        s.note = "no participants".into();
        return s;
    };
    let (ma, mb) = (scores.task_map(a.name()), scores.task_map(b.name()));
    let xa: Vec<f64> = ma.values().copied().collect();
    let xb: Vec<f64> = mb.values().copied().collect();
    s.win_rate_a = mean(&xa);
    s.win_rate_b = mean(&xb);
    let diffs: Vec<f64> = ma.iter().map(|(k, v)| v - mb[k]).collect();
    match wilcoxon_signed_rank(&diffs) {
        Ok(t) => {
            s.significant = t.p_value < alpha && s.win_rate_a > s.win_rate_b;
            s.test = Some(t);
        }
        Err(e) => s.note = format!("not tested: {e}"),
    }
    s
}

#[cfg(test)]
mod tests;
