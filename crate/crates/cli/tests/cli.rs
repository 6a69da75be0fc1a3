use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn diffgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffgate"))
        .args(args)
        .env_remove("DIFFGATE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn train_report_export_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = config("blobs_train.toml");
    let cfg = cfg.to_str().unwrap();
    let o = diffgate(&["train", "--config", cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.toml",
        "epochs.jsonl",
        "summary.json",
        "timing.json",
        "model.dgc",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let lines = std::fs::read_to_string(run.join("epochs.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);

    let r = diffgate(&["report", "--run", run.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(stdout(&r), stdout(&o));

    let ckpt = run.join("model.dgc");
    let pruned = dir.path().join("pruned.dgc");
    let e = diffgate(&[
        "export",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        pruned.to_str().unwrap(),
    ]);
    assert!(e.status.success(), "{}", stderr(&e));
    let stats = json(&e);
    assert!(
        stats["parameters_after"].as_u64().unwrap() <= stats["parameters_before"].as_u64().unwrap()
    );

    let eval = |path: &Path| {
        let o = diffgate(&[
            "eval",
            "--checkpoint",
            path.to_str().unwrap(),
            "--config",
            cfg,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        json(&o)
    };
    let (full, small) = (eval(&ckpt), eval(&pruned));
    assert_eq!(full["test_error_pct"], small["test_error_pct"]);
    let (a, b) = (
        full["test_loss"].as_f64().unwrap(),
        small["test_loss"].as_f64().unwrap(),
    );
    assert!((a - b).abs() < 1e-9);
    assert_eq!(full["examples"], 150);
}

#[test]
fn check_grad_passes_on_the_blobs_config() {
    let o = diffgate(&[
        "check-grad",
        "--config",
        config("blobs_check.toml").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("check-grad: PASS"));
    assert_eq!(json(&o)["passed"], true);
}

#[test]
fn check_grad_refuses_large_models() {
    let o = diffgate(&[
        "check-grad",
        "--config",
        config("mlp_desk.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn mc_validate_prints_one_line_per_claim() {
    let o = diffgate(&[
        "mc-validate",
        "--mu",
        "-0.5,0.3,1.2",
        "--sigma",
        "0.8",
        "--beta",
        "0.4",
        "--samples",
        "20000",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    // 3 marginals, 3 pairs, support, unit mean.
    assert_eq!(out.lines().count(), 8);
    assert!(out.lines().all(|l| l.starts_with("PASS")));

    let o = diffgate(&[
        "mc-validate",
        "--mu",
        "0.1,0.2",
        "--sigma",
        "1",
        "--beta",
        "0.3",
        "--utility",
        "softmax",
        "--samples",
        "20000",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("conditional[1]"));
}

#[test]
fn invalid_input_maps_to_exit_codes() {
    let bad_beta = diffgate(&[
        "mc-validate",
        "--mu",
        "0,1",
        "--sigma",
        "1",
        "--beta",
        "1.5",
    ]);
    assert_eq!(bad_beta.status.code(), Some(3));

    let missing = diffgate(&["train", "--config", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(5));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let text = std::fs::read_to_string(config("mlp_desk.toml"))
        .unwrap()
        .replace("../data/mnist", "no-such-dir");
    std::fs::write(&cfg, text).unwrap();
    let no_data = diffgate(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(no_data.status.code(), Some(4), "{}", stderr(&no_data));

    std::fs::write(&cfg, "format = \"diffgate-config/1\"\nbogus = 1\n").unwrap();
    let unknown = diffgate(&["check-grad", "--config", cfg.to_str().unwrap()]);
    assert_eq!(unknown.status.code(), Some(3));

    let junk = dir.path().join("junk.dgc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = diffgate(&[
        "export",
        "--checkpoint",
        junk.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(6));

    let o = diffgate(&["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}
