use std::path::Path;
use std::process::{Command, Output};

fn autohr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autohr"))
        .args(args)
        .env_remove("AUTOHR_SEED")
        .output()
        .expect("spawn autohr")
}

fn ok(args: &[&str]) -> String {
    let out = autohr(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "autohr {args:?} failed: {stderr}");
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set", "initial_channels=4",
    "--set", "clip_len=64",
    "--set", "batch_size=2",
    "--set", "folds=2",
    "--set", "sequential=true",
    "--set", "lr=0.003",
];

#[test]
fn synth_train_eval_baseline_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth", "--n", "8", "--out", s(&data), "--frames", "160", "--fps", "16", "--size", "8", "--subjects", "4"]);
    assert!(data.join("manifest.csv").exists());

    let mut train = vec!["train", "--dataset", s(&data), "--out", s(&run), "--epochs", "2"];
    train.extend(TINY);
    let stdout = ok(&train);
    assert!(stdout.contains("L_overall"));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(run.join("checkpoints/epoch_002/params.bin").exists());

    let ckpt = run.join("final");
    let eval_dir = run.join("eval");
    let mut eval = vec!["eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval_dir)];
    eval.extend(TINY);
    let stdout = ok(&eval);
    assert!(stdout.contains("mae="), "{stdout}");
    let results = eval_dir.join("results.csv");
    assert!(std::fs::read_to_string(&results).unwrap().starts_with("id,gt_hr,pred_hr,error"));
    assert!(std::fs::read_to_string(eval_dir.join("results_metrics.csv")).unwrap().starts_with("split,sd,mae,rmse,r"));

    let base = run.join("base");
    ok(&["baseline", "--dataset", s(&data), "--method", "pos", "--out", s(&base), "--all-videos"]);
    assert!(base.join("pos/pos.csv").exists());

    let plots = run.join("plots");
    let stdout = ok(&["plot", "--from", s(&results), "--out", s(&plots)]);
    assert!(plots.join("scatter.svg").exists());
    assert!(stdout.contains("psd_"), "{stdout}");
}

#[test]
fn search_then_derive() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("search");
    ok(&["synth", "--n", "4", "--out", s(&data), "--frames", "64", "--fps", "16", "--size", "8", "--subjects", "2"]);
    let stdout = ok(&[
        "search", "--dataset", s(&data), "--out", s(&out), "--all-videos",
        "--set", "search_channels=4", "--set", "search_epochs=2", "--set", "warmup_epochs=1",
        "--set", "search_clip_len=32", "--set", "sequential=true",
    ]);
    assert!(stdout.contains("node 1 <-"), "{stdout}");
    let derived = tmp.path().join("derived.txt");
    ok(&["derive", "--supernet", s(&out.join("supernet")), "--out", s(&derived)]);
    assert_eq!(
        std::fs::read_to_string(&derived).unwrap(),
        std::fs::read_to_string(out.join("genotype.txt")).unwrap()
    );
}

#[test]
fn missing_checkpoint_is_named() {
    let out = autohr(&["eval", "--checkpoint", "/nonexistent/ckpt_dir"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/ckpt_dir"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unknown_subcommand_and_bad_override_fail() {
    let out = autohr(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = autohr(&["plot", "--from", "x.csv", "--set", "nonsense_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense_key"));
}
