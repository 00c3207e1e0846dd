mod common;

use std::path::Path;
use std::process::Command;

use xferbench::runner::{
    self, emit_comparison, ExperimentConfig, Regime, RunManifest, RunStatus, RunnerError,
};

fn small(cfg: &mut ExperimentConfig) {
    cfg.d_model = 8;
    cfg.num_beams = 1;
    cfg.max_output_tokens = 16;
    cfg.lr = 0.01;
}

fn config(dir: &Path, regime: Regime, seq: &[&str]) -> ExperimentConfig {
    let data = common::write_toy_corpora(dir, 0);
    let mut cfg = ExperimentConfig::new(regime, seq, data);
    small(&mut cfg);
    cfg
}

fn strip_volatile(mut m: RunManifest) -> RunManifest {
    m.run_name.clear();
    m.wall_clock_secs = 0.0;
    m
}

#[test]
fn sft_single_stage_run_writes_complete_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), Regime::Sft, &["figlang"]);
    let out = tmp.path().join("out");
    let m = runner::run_experiment(&cfg, &out).unwrap();

    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.history.len(), 10);
    assert_eq!(m.dataset_sizes["figlang"], (29, 3));
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.setting, "SFT FigLang");
    let run_dir = out.join(&m.run_name);
    assert!(m.run_name.starts_with("sft_figlang_standard_0_"));
    let on_disk = RunManifest::load(run_dir.join("manifest.json")).unwrap();
    assert_eq!(on_disk, m);
    for rel in [
        "history.jsonl",
        "steps.jsonl",
        "report.json",
        "report.csv",
        "per_type.csv",
        "predictions.jsonl",
        "data/figlang_dev.jsonl",
        "checkpoints/final/manifest.json",
    ] {
        assert!(run_dir.join(rel).is_file(), "missing {rel}");
    }
    let history = std::fs::read_to_string(run_dir.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 10);
    let preds = std::fs::read_to_string(run_dir.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 3);

    let (report, _) = runner::evaluate_checkpoint(
        &run_dir.join("checkpoints/final"),
        &run_dir.join("data/figlang_dev.jsonl"),
    )
    .unwrap();
    assert_eq!(Some(report), m.report);
}

#[test]
fn hifeat_sequence_trains_in_order_and_truncates_earlier_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), Regime::HifeatMtl, &["esnli", "figlang"]);
    for id in ["esnli", "figlang"] {
        cfg.stage_overrides.insert(
            id.into(),
            runner::StageOverride {
                epochs: None,
                selection_metric: None,
                phases: Some(xferbench::training::Phase::default_plan(true, 2)),
            },
        );
    }
    let m = runner::run_experiment(&cfg, tmp.path()).unwrap();
    let segs: Vec<&str> = m.segments.iter().map(|s| s.segment.as_str()).collect();
    assert_eq!(segs, ["esnli/phase1", "esnli/phase2", "figlang/phase1", "figlang/phase2"]);
    assert_eq!(m.history.len(), 8);
    assert!(m.history[..4].iter().all(|r| r.dataset_id == "esnli"));
    assert_eq!(m.dataset_sizes["esnli"], m.dataset_sizes["figlang"]);
    assert_eq!(m.label_source, Some(xferbench::training::LabelSource::Gold));
    assert_eq!(m.eval.as_ref().unwrap().dataset_id, "figlang");
    assert_eq!(m.stages.iter().map(|s| s.epochs).collect::<Vec<_>>(), [4, 4]);
}

#[test]
fn reruns_are_identical_and_never_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), Regime::Sft, &["impli", "figlang"]);
    let a = runner::run_experiment(&cfg, tmp.path()).unwrap();
    let b = runner::run_experiment(&cfg, tmp.path()).unwrap();
    assert_eq!(b.run_name, format!("{}-2", a.run_name));
    assert_eq!(a.history.len(), 3 + 10);
    assert_eq!(strip_volatile(a.clone()), strip_volatile(b.clone()));
    let read = |m: &RunManifest, f: &str| std::fs::read(tmp.path().join(&m.run_name).join(f)).unwrap();
    for f in ["history.jsonl", "steps.jsonl", "predictions.jsonl", "checkpoints/final/params.bin"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn failures_are_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), Regime::Sft, &["figlang"]);
    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    cfg.data.get_mut("figlang").unwrap().train = bad;
    let out = tmp.path().join("out");
    let err = runner::run_experiment(&cfg, &out).unwrap_err();
    let RunnerError::RunFailed { run_dir, message } = err else {
        panic!("expected RunFailed, got {err}");
    };
    let m = RunManifest::load(run_dir.join("manifest.json")).unwrap();
    assert_eq!(m.status, RunStatus::Failed { error: message });
    assert!(m.report.is_none());
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), Regime::Sft, &["figlang"]);
    cfg.sequence = vec!["figlang".into(), "impli".into()];
    let out = tmp.path().join("out");
    assert!(matches!(runner::run_experiment(&cfg, &out), Err(RunnerError::Config(_))));
    assert!(!out.exists());
    assert!(ExperimentConfig::from_json(r#"{"regime":"sft","sequence":["figlang"],"data":{},"bogus":1}"#).is_err());
}

#[test]
fn comparisons_check_splits_and_format_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), Regime::Sft, &["figlang"]);
    let a = runner::run_experiment(&cfg, tmp.path()).unwrap();
    let b = runner::run_experiment(&cfg, tmp.path()).unwrap();
    let t = emit_comparison(&[a.clone(), b]).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.rows[0].1, t.rows[1].1);
    assert!(t.type_deltas.iter().all(|d| d.delta.starts_with("+0.00 (")));
    assert!(t.to_csv().unwrap().starts_with("setting,Acc@0,Acc@50,Acc@60\n"));

    let mut other = cfg.clone();
    other.split_seed = 9;
    let c = runner::run_experiment(&other, tmp.path()).unwrap();
    assert!(matches!(emit_comparison(&[a.clone(), c]), Err(RunnerError::MismatchedEvalSplit(_))));
    assert!(matches!(emit_comparison(std::slice::from_ref(&a)), Err(RunnerError::TooFewManifests(1))));
    let mut running = a.clone();
    running.status = RunStatus::Running;
    assert!(matches!(emit_comparison(&[a, running]), Err(RunnerError::IncompleteRun(_))));
}

#[test]
fn ablation_writes_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), Regime::Sft, &["figlang"]);
    cfg.stage_overrides.insert(
        "figlang".into(),
        runner::StageOverride {
            epochs: Some(2),
            ..Default::default()
        },
    );
    let res = runner::run_bias_ablation(&cfg, tmp.path()).unwrap();
    let lines: Vec<&str> = res.csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "setting,Acc@0,Acc@50,Acc@60");
    for (line, name) in lines[1..].iter().zip(["Regular", "Hyp-Only", "Prem-Only"]) {
        assert!(line.starts_with(&format!("{name},")));
    }
    assert_eq!(std::fs::read_to_string(res.dir.join("ablation.csv")).unwrap(), res.csv);
    let modes: Vec<_> = res.manifests.iter().map(|m| m.config.source_mode).collect();
    assert_eq!(modes, runner::ABLATION_SETTINGS.map(|(m, _)| m));
    let digests: Vec<_> = res.manifests.iter().map(|m| m.eval.as_ref().unwrap().split_digest.clone()).collect();
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn cli_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_xferbench");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), Regime::Sft, &["figlang"]);
    cfg.stage_overrides.insert(
        "figlang".into(),
        runner::StageOverride {
            epochs: Some(2),
            ..Default::default()
        },
    );
    let cfg_path = tmp.path().join("exp.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = tmp.path().join("runs");

    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).env("XFERBENCH_OUT", &out).output().unwrap();
        (o.status.success(), String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let cfg_arg = cfg_path.to_str().unwrap();
    let (ok, stdout, stderr) = run(&["run", "--config", cfg_arg]);
    assert!(ok, "{stderr}");
    let first_dir = stdout.lines().next().unwrap().to_string();
    assert!(Path::new(&first_dir).starts_with(&out));
    assert!(stdout.contains("setting,Acc@0,Acc@50,Acc@60"));
    let (ok, stdout, _) = run(&["run", "--config", cfg_arg, "--seed", "3"]);
    assert!(ok);
    let second_dir = stdout.lines().next().unwrap().to_string();
    assert!(second_dir.contains("_3_"));

    let m1 = format!("{first_dir}/manifest.json");
    let m2 = format!("{second_dir}/manifest.json");
    let (ok, stdout, stderr) = run(&["compare", &m1, &m2]);
    assert!(ok, "{stderr}");
    assert!(stdout.starts_with("setting,Acc@0,Acc@50,Acc@60\n"));

    let (ok, stdout, stderr) = run(&[
        "evaluate",
        "--checkpoint",
        &format!("{first_dir}/checkpoints/final"),
        "--data",
        &format!("{first_dir}/data/figlang_dev.jsonl"),
    ]);
    assert!(ok, "{stderr}");
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["n_examples"], 3);

    let (ok, stdout, _) = run(&["schema"]);
    assert!(ok);
    serde_json::from_str::<serde_json::Value>(&stdout).unwrap();

    let (ok, _, stderr) = run(&["compare", &m1]);
    assert!(!ok);
    assert!(!stderr.is_empty());
    let (ok, _, stderr) = run(&["run", "--config", "/nonexistent.json"]);
    assert!(!ok);
    assert!(stderr.starts_with("error:"));
}
