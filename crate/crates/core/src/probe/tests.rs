use super::*;
use proptest::prelude::*;
use rand::Rng;

fn result(task: &str, model: &str, seed: u64, metric: f64) -> ProbeResult {
    ProbeResult {
        task: task.into(),
        subfield: Subfield::Syntax,
        phenomenon: "p".into(),
        model: model.into(),
        seed,
        metric,
    }
}

fn results(model: &str, per_task: &[(&str, &[f64])]) -> Vec<ProbeResult> {
    per_task
        .iter()
        .flat_map(|(task, ms)| ms.iter().enumerate().map(move |(i, &m)| result(task, model, i as u64, m)))
        .collect()
}

fn feature_task(n: usize, d: usize, seed: u64, label_of: impl Fn(&[f64]) -> usize) -> (ProbeTask, ProbeFeatures) {
    let mut rng = rng_for(seed, "feature-task");
    let mut make = |n: usize| {
        let m = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let ex: Vec<Example> = (0..n).map(|i| Example { tokens: vec![1], label: label_of(m.row(i)) }).collect();
        (m, ex)
    };
    let (xtr, train) = make(n);
    let (xte, test) = make(n);
    let task = ProbeTask {
        name: "linear".into(),
        subfield: Subfield::Semantics,
        phenomenon: "p".into(),
        n_classes: 2,
        train,
        test,
    };
    (task, ProbeFeatures { train: xtr, test: xte })
}

#[test]
fn builtin_tasks_cover_every_subfield_and_validate() {
    let tasks = builtin_tasks(3);
    assert!(tasks.len() >= 12);
    for s in Subfield::ALL {
        assert!(tasks.iter().any(|t| t.subfield == s), "{s}");
    }
    for t in &tasks {
        t.validate().unwrap();
        assert!(t.train.iter().chain(&t.test).all(|e| e.tokens.len() <= 64));
    }
    assert_eq!(tasks, builtin_tasks(3));
    assert_ne!(tasks, builtin_tasks(4));
}

#[test]
fn agreement_and_shift_examples_have_the_stated_contrast() {
    let lex = Lexicon::new();
    let tasks = builtin_tasks(0);
    let shift = tasks.iter().find(|t| t.name == "bigram_shift").unwrap();
    let shifted = shift.train.iter().find(|e| e.label == 1).unwrap();
    assert!(!lex.decode(&shifted.tokens).is_empty());
    let agree = tasks.iter().find(|t| t.name == "subject_verb_agreement").unwrap();
    for ex in agree.train.iter().filter(|e| e.label == 0) {
        let text = lex.decode(&ex.tokens);
        assert!(!text.contains("they runs") && !text.contains("it run "), "{text}");
    }
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tasks.jsonl");
    let tasks = builtin_tasks(1);
    save_tasks(&tasks, &path).unwrap();
    assert_eq!(load_tasks(&path).unwrap(), tasks);
}

#[test]
fn corrupt_task_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tasks.jsonl");
    std::fs::write(&path, "{\"task\": 3}\n").unwrap();
    assert!(matches!(load_tasks(&path), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn separable_task_is_learned() {
    let (task, feats) = feature_task(200, 8, 1, |x| (x[0] + 0.5 * x[3] > 0.0) as usize);
    assert!(fit_probe(&feats, &task, 0).unwrap() >= 0.95);
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let mut rng = rng_for(9, "labels");
    let (task, feats) = feature_task(200, 8, 2, |_| 0);
    let mut task = task;
    for ex in task.train.iter_mut().chain(task.test.iter_mut()) {
        ex.label = rng.random_range(0..2);
    }
    let acc = fit_probe(&feats, &task, 0).unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "{acc}");
}

#[test]
fn non_finite_features_are_rejected() {
    let (task, mut feats) = feature_task(70, 4, 3, |x| (x[0] > 0.0) as usize);
    feats.train.set(0, 0, f64::NAN);
    assert!(matches!(fit_probe(&feats, &task, 0), Err(Error::Contract(_))));
}

#[test]
fn run_probe_is_deterministic_on_a_model() {
    let config = crate::model::ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ..Default::default()
    };
    let model = DualHeadModel::new(config, &mut rng_for(0, "m")).unwrap();
    let task = &builtin_tasks(0)[0];
    let a = run_probe(&model, "m", task, 5).unwrap();
    assert_eq!(a, run_probe(&model, "m", task, 5).unwrap());
    assert!((0.0..=1.0).contains(&a.metric));
}

#[test]
fn identical_results_give_no_wins() {
    let a = results("a", &[("t", &[0.6, 0.7, 0.65, 0.62, 0.71, 0.69])]);
    let b = results("b", &[("t", &[0.6, 0.7, 0.65, 0.62, 0.71, 0.69])]);
    let m = compare_models(&a, &b, 0.05).unwrap();
    assert_eq!((m.tasks[0].win_a, m.tasks[0].win_b), (0, 0));
}

#[test]
fn separated_results_give_a_win() {
    let a = results("a", &[("t", &[0.9, 0.901, 0.899, 0.9, 0.902, 0.898])]);
    let b = results("b", &[("t", &[0.5, 0.501, 0.499, 0.5, 0.502, 0.498])]);
    let m = compare_models(&a, &b, 0.05).unwrap();
    assert_eq!((m.tasks[0].win_a, m.tasks[0].win_b), (1, 0));
}

fn t_upper_tail_by_quadrature(t: f64, df: f64) -> f64 {
    let ln_c = libm_lgamma((df + 1.0) / 2.0) - libm_lgamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let (hi, n) = (t.abs() + 400.0, 400_000);
    let h = (hi - t.abs()) / n as f64;
    let mut sum = density(t.abs()) + density(hi);
    for i in 1..n {
        sum += density(t.abs() + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

fn libm_lgamma(x: f64) -> f64 {
    // Lanczos, g = 7.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let t = x + 7.5;
    let s = C[1..].iter().enumerate().fold(C[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

#[test]
fn overlapping_results_are_not_a_win() {
    let xa = [0.70, 0.62, 0.75, 0.66, 0.71, 0.64];
    let xb = [0.66, 0.60, 0.72, 0.63, 0.69, 0.61];
    let (ma, mb) = (mean(&xa), mean(&xb));
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0;
    let (sa, sb) = (var(&xa, ma) / 6.0, var(&xb, mb) / 6.0);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / 5.0 + sb * sb / 5.0);
    let oracle_p = 2.0 * t_upper_tail_by_quadrature(t, df);
    assert!(ma > mb && oracle_p > 0.05, "{oracle_p}");
    let m = compare_models(&results("a", &[("t", &xa)]), &results("b", &[("t", &xb)]), 0.05).unwrap();
    assert!((m.tasks[0].p_value - oracle_p).abs() < 1e-6, "{} vs {oracle_p}", m.tasks[0].p_value);
    assert_eq!(m.tasks[0].win_a, 0);
}

#[test]
fn unequal_seed_counts_are_a_contract_error() {
    let a = results("a", &[("t", &[0.5; 6])]);
    let b = results("b", &[("t", &[0.5; 5])]);
    assert!(matches!(compare_models(&a, &b, 0.05), Err(Error::Contract(_))));
}

#[test]
fn aggregation_examples() {
    let matrix = |wins: &[(u8, u8)]| WinMatrix {
        model_a: "a".into(),
        model_b: "b".into(),
        alpha: 0.05,
        tasks: wins
            .iter()
            .enumerate()
            .map(|(i, &(wa, wb))| TaskComparison {
                task: format!("t{i}"),
                subfield: Subfield::Syntax,
                phenomenon: if i < 2 { "x".into() } else { "y".into() },
                mean_a: 0.0,
                mean_b: 0.0,
                p_value: 0.5,
                win_a: wa,
                win_b: wb,
            })
            .collect(),
    };
    let run = |m: WinMatrix, r: usize| RunWins { participant: "p".into(), heldout_run: r, matrix: m };

    let single = aggregate_win_scores(&[run(matrix(&[(1, 0), (0, 0), (1, 0)]), 0)]).unwrap();
    let a = single.task_map("a");
    assert_eq!(a.values().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
    let syntax = single.subfields.iter().find(|g| g.model == "a").unwrap();
    assert!((syntax.score - 2.0 / 3.0).abs() < 1e-15);
    let x = single.phenomena.iter().find(|g| g.model == "a" && g.group == "x").unwrap();
    assert_eq!(x.score, 0.5);

    let two = aggregate_win_scores(&[run(matrix(&[(1, 0)]), 0), run(matrix(&[(0, 0)]), 1)]).unwrap();
    assert_eq!(two.task_map("a")[&("p".to_string(), "t0".to_string())], 0.5);

    assert!(matches!(aggregate_win_scores(&[]), Err(Error::Contract(_))));
    let mismatched = [run(matrix(&[(1, 0)]), 0), run(matrix(&[(1, 0), (0, 1)]), 1)];
    assert!(aggregate_win_scores(&mismatched).is_err());
}

#[test]
fn csv_round_trip() {
    let rs = vec![result("t", "m", 3, 0.8125), result("u", "m", 4, 0.5)];
    assert_eq!(parse_results_csv(&results_csv(&rs)).unwrap(), rs);
    assert!(parse_results_csv("bad\n").is_err());
}

proptest! {
    #[test]
    fn comparison_is_antisymmetric_and_exclusive(
        xs in prop::collection::vec(0.0f64..1.0, 6),
        ys in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let a = results("a", &[("t", &xs)]);
        let b = results("b", &[("t", &ys)]);
        let ab = compare_models(&a, &b, 0.05).unwrap();
        let ba = compare_models(&b, &a, 0.05).unwrap();
        prop_assert_eq!(ab.swapped(), ba);
        prop_assert!(ab.tasks[0].win_a + ab.tasks[0].win_b <= 1);
    }

    #[test]
    fn scores_are_means_in_unit_interval(wins in prop::collection::vec((0u8..2, 0u8..2), 1..8), runs in 1usize..4) {
        let ms: Vec<RunWins> = (0..runs)
            .map(|r| RunWins {
                participant: "p".into(),
                heldout_run: r,
                matrix: WinMatrix {
                    model_a: "a".into(),
                    model_b: "b".into(),
                    alpha: 0.05,
                    tasks: wins
                        .iter()
                        .enumerate()
                        .map(|(i, &(wa, wb))| TaskComparison {
                            task: format!("t{i}"),
                            subfield: Subfield::ALL[i % 5],
                            phenomenon: "x".into(),
                            mean_a: 0.0,
                            mean_b: 0.0,
                            p_value: 0.0,
                            win_a: wa * (1 - wb),
                            win_b: wb,
                        })
                        .collect(),
                },
            })
            .collect();
        let s = aggregate_win_scores(&ms).unwrap();
        for t in &s.tasks {
            prop_assert!((0.0..=1.0).contains(&t.score));
        }
        for g in &s.subfields {
            let members: Vec<f64> = s
                .tasks
                .iter()
                .filter(|t| t.model == g.model && t.subfield.name() == g.group)
                .map(|t| t.score)
                .collect();
            prop_assert_eq!(g.score, mean(&members));
        }
    }
}
