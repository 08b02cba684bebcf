use super::*;

/// A configuration small enough to run every stage in seconds.
pub(crate) fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output_dir: out.to_path_buf(),
        lambda_grid: vec![0.1, 10.0, 1000.0],
        ..ExperimentConfig::default()
    };
    c.corpus.n_trs = 80;
    c.cohort.n_participants = 3;
    c.cohort.n_voxels = 40;
    c.cohort.roi_fraction = 0.5;
    c.model.d_model = 16;
    c.model.n_layers = 1;
    c.model.n_heads = 2;
    c.model.max_seq_len = 32;
    c.pretrain.steps = 20;
    c.pretrain.n_tokens = 2000;
    c.train.epochs = 1;
    c.probe.seeds = 2;
    c.probe.participants = CompareSet::All;
    c
}

fn csv_outputs(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                files.push(p);
            }
        }
    }
    files
        .into_iter()
        .map(|p| (p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn full_pipeline_is_deterministic_and_fully_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let p = Pipeline::new(tiny_config(&dir.path().join(sub)), RunOptions::default()).unwrap();
        p.run_all().unwrap();
        p.root().to_path_buf()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(orphaned_files(&a).unwrap(), Vec::<String>::new());
    let (ca, cb) = (csv_outputs(&a), csv_outputs(&b));
    assert!(ca.len() > 20);
    assert_eq!(ca, cb);

    let report: Report = read_json(&a.join("report/report.json")).unwrap();
    assert_eq!(report.gates.len(), 3);
    let summary: CompareSummary = read_json(&a.join("compare/summary.json")).unwrap();
    assert_eq!(summary.pairs.len(), 3);
    assert_eq!(summary.pairs[0].participants.len(), 3);
}

#[test]
fn stages_name_their_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_config(dir.path()), RunOptions::default()).unwrap();
    for (stage, needs) in [
        (Stage::Simulate, "pretrain"),
        (Stage::Train, "pretrain"),
        (Stage::Eval, "simulate"),
        (Stage::Probe, "pretrain"),
        (Stage::Report, "compare"),
    ] {
        match p.run_stage(stage) {
            Err(Error::MissingPrerequisite { stage: s, .. }) => assert_eq!(s, needs, "{stage}"),
            other => panic!("{stage}: {other:?}"),
        }
    }
}

#[test]
fn zero_passers_give_an_empty_comparison_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.alpha.gate = 1e-300;
    config.probe.participants = CompareSet::Passing;
    config.conditions = vec![Condition::Misaligned, Condition::Preserving];
    let p = Pipeline::new(config, RunOptions::default()).unwrap();
    let outcomes = p.run_all().unwrap();
    let eval = outcomes.iter().find(|o| o.stage == Stage::Eval).unwrap();
    assert!(eval.gate_failure_only);
    let report = outcomes.last().unwrap();
    assert!(report.warnings.iter().any(|w| w.contains("no participant passed")));
    let summary: CompareSummary = read_json(&p.root().join("compare/summary.json")).unwrap();
    assert!(summary.pairs[0].runs.is_empty() && summary.pairs[0].scores.is_none());
    let matrix = std::fs::read_to_string(p.root().join("compare/preserving_vs_misaligned/win_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 1);
    assert_eq!(orphaned_files(p.root()).unwrap(), Vec::<String>::new());
}

#[test]
fn selections_must_exist_in_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let bad = [
        RunOptions { heldout_run: Some(2), ..Default::default() },
        RunOptions { participants: Some(vec!["p09".into()]), ..Default::default() },
    ];
    for opts in bad {
        assert!(matches!(Pipeline::new(tiny_config(dir.path()), opts), Err(Error::Config(_))));
    }
}

#[test]
fn orphan_detection_flags_unlisted_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("x")).unwrap();
    std::fs::write(dir.path().join("x/a.csv"), "a\n").unwrap();
    let mut m = RunManifest::new("test", &ExperimentConfig::default());
    m.artifacts = vec!["x/a.csv".into()];
    m.write(dir.path(), "x/manifest.json").unwrap();
    assert!(orphaned_files(dir.path()).unwrap().is_empty());
    std::fs::write(dir.path().join("x/b.csv"), "b\n").unwrap();
    assert_eq!(orphaned_files(dir.path()).unwrap(), vec!["x/b.csv".to_string()]);
    m.artifacts.push("x/missing.csv".into());
    assert!(m.write(dir.path(), "y/manifest.json").is_err());
}

#[test]
fn training_seed_is_shared_across_conditions_only() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_config(dir.path()), RunOptions::default()).unwrap();
    assert_ne!(p.training_seed("p01", 0), p.training_seed("p02", 0));
    assert_ne!(p.training_seed("p01", 0), p.training_seed("p01", 1));
}
