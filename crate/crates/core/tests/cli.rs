use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn emt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emt")).args(args).output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap_or_else(|e| {
        panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_rerun_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let out = emt(&[
        "train",
        "--preset",
        "tiny",
        "--set",
        "train.max_epochs=1",
        "--set",
        "seeds=[0, 1, 2]",
        "-o",
        path(&first),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["command"], "train");
    for seed in 0..3 {
        for file in ["checkpoint.json", "history.json", "report.json"] {
            assert!(first.join(format!("seed{seed}")).join(file).exists());
        }
    }
    let second = dir.path().join("b");
    let resolved = first.join("resolved_config.json");
    let out = emt(&["train", "--config", path(&resolved), "-o", path(&second)]);
    assert!(out.status.success());
    assert_eq!(
        fs::read(first.join("aggregate.json")).unwrap(),
        fs::read(second.join("aggregate.json")).unwrap()
    );
    let history: serde_json::Value =
        serde_json::from_slice(&fs::read(first.join("seed0/history.json")).unwrap()).unwrap();
    assert!(history["epochs"][0]["reconstruction"].is_number());
}

#[test]
fn sweep_and_dump_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = emt(&["train", "--preset", "tiny", "--set", "train.max_epochs=1", "-o", path(&run)]);
    assert!(out.status.success());
    let ck = run.join("seed0/checkpoint.json");

    let sweep = dir.path().join("sweep");
    let out = emt(&["sweep", "--preset", "tiny", "--checkpoint", path(&ck), "-o", path(&sweep)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(sweep.join("curve.csv")).unwrap();
    assert!(csv.starts_with("seed,rate,protect_summary,metric,value"));
    assert!(csv.contains(",1,false,mae,"));

    let complete = dir.path().join("dump0");
    let masked = dir.path().join("dump5");
    for (target, rate) in [(&complete, "0"), (&masked, "0.5")] {
        let out = emt(&[
            "dump-attn",
            "--preset",
            "tiny",
            "--checkpoint",
            path(&ck),
            "--sample",
            "2",
            "--rate",
            rate,
            "-o",
            path(target),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let name = "attn_l0_text-context_n_to_m_cross.csv";
    let a = fs::read_to_string(complete.join(name)).unwrap();
    let b = fs::read_to_string(masked.join(name)).unwrap();
    assert_ne!(a, b);
    // rows are distributions
    let mut sums = std::collections::BTreeMap::new();
    for line in a.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry((f[0].to_string(), f[1].to_string())).or_insert(0.0) += f[3].parse::<f64>().unwrap();
    }
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-6));
}

#[test]
fn ooll_dump_holds_six_directed_cross_matrices_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let strategy = "model.fusion.strategy=\"ooll\"";
    let out = emt(&["train", "--preset", "tiny", "--set", "train.max_epochs=1", "--set", strategy, "-o", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = dir.path().join("dump");
    let ck = run.join("seed0/checkpoint.json");
    let out = emt(&["dump-attn", "--preset", "tiny", "--set", strategy, "--checkpoint", path(&ck), "-o", path(&dump)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let index: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(dump.join("attention_index.json")).unwrap()).unwrap();
    let cross_l0 = index.iter().filter(|m| m["layer"] == 0 && m["block"] == "cross").count();
    assert_eq!(cross_l0, 6);
}

#[test]
fn failures_exit_nonzero_with_json() {
    let out = emt(&["train", "--preset", "tiny", "--set", "train.batch_size=0"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("train.batch_size"));

    let out = emt(&["bench", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "io");

    let out = emt(&["dump-attn", "--preset", "tiny"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("dump.checkpoint"));
}

#[test]
fn gradcheck_command_passes_on_the_tiny_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = emt(&[
        "gradcheck",
        "--preset",
        "tiny",
        "--set",
        "gradcheck.samples_per_tensor=2",
        "-o",
        path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s["passed"], true);
}
