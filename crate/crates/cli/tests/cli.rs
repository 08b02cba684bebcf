use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn neuroalign(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroalign"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_run_in_order_and_report_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();

    let early = neuroalign(&["train", "--config", cfg], &out);
    assert_eq!(code(&early), 3, "{}", stderr(&early));
    assert!(stderr(&early).contains("run `pretrain` first"));

    for stage in ["pretrain", "simulate"] {
        let o = neuroalign(&[stage, "--config", cfg], &out);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let one = neuroalign(&["train", "--config", cfg, "--participants", "p02", "--condition", "tuned", "--heldout-run", "0"], &out);
    assert_eq!(code(&one), 0, "{}", stderr(&one));
    assert!(out.join("train/p02/run0/tuned.ckpt").is_file());
    assert!(!out.join("train/p01").exists());

    let eval_early = neuroalign(&["eval", "--config", cfg], &out);
    assert_eq!(code(&eval_early), 3);

    for stage in ["train", "eval", "probe", "compare", "report"] {
        let o = neuroalign(&[stage, "--config", cfg, "--jobs", "2"], &out);
        assert!(matches!(code(&o), 0 | 4), "{stage}: {}", stderr(&o));
    }
    assert!(out.join("report/report.json").is_file());
    assert!(out.join("report/subfield_plot.csv").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[cohort]\nn_voxel = 3\n").unwrap();
    let o = neuroalign(&["simulate", "--config", bad.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_voxel") && stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = neuroalign(&["train", "--condition", "sideways"], &dir.path().join("out"));
    assert_eq!(code(&o), 2);
    let o = neuroalign(&["train", "--heldout-run", "7"], &dir.path().join("out"));
    assert_eq!(code(&o), 2);
}

#[test]
fn gate_failure_only_eval_exits_with_four_and_report_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("strict.toml");
    let text = std::fs::read_to_string(smoke_config()).unwrap();
    let text = text.replace(
        "[corpus]",
        "conditions = [\"misaligned\", \"preserving\"]\n\n[alpha]\ngate = 1e-300\n\n[corpus]",
    );
    let text = text.replace("participants = \"all\"", "participants = \"passing\"");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    let cfg = cfg.to_str().unwrap();
    for stage in ["pretrain", "simulate", "train"] {
        assert_eq!(code(&neuroalign(&[stage, "--config", cfg], &out)), 0);
    }
    let eval = neuroalign(&["eval", "--config", cfg], &out);
    assert_eq!(code(&eval), 4, "{}", stderr(&eval));
    for stage in ["probe", "compare"] {
        assert_eq!(code(&neuroalign(&[stage, "--config", cfg], &out)), 0);
    }
    let report = neuroalign(&["report", "--config", cfg], &out);
    assert_eq!(code(&report), 0);
    assert!(stderr(&report).contains("warning: no participant passed"), "{}", stderr(&report));
}

#[test]
fn config_subcommand_prints_a_loadable_document() {
    let dir = tempfile::tempdir().unwrap();
    let o = neuroalign(&["config", "--seed", "42"], &dir.path().join("x"));
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 42"));
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &text).unwrap();
    let again = neuroalign(&["config", "--config", path.to_str().unwrap()], &dir.path().join("x"));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}
