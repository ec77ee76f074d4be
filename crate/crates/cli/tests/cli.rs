use std::path::Path;
use std::process::{Command, Output};

fn planet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planet")).args(args).output().expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path) -> String {
    let out = dir.join("g");
    let o = planet(&["synth", "--kind", "sbm", "--seed", "4", "--out", out.to_str().unwrap(), "--set", "block_sizes=[20,20]"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("graph.mag").to_str().unwrap().to_string()
}

#[test]
fn synergy_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("syn");
    let o = planet(&[
        "synergy",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "num_nodes=120",
        "--set",
        "epochs=1",
        "--set",
        "steps_per_epoch=3",
        "--set",
        "probe_epochs=5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("report.json"));
    for key in ["acc_vanilla", "acc_edg"] {
        let a = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a), "{key} = {a}");
    }
    assert!(r["pass"].is_boolean());
    assert_eq!(r["seed"], 1);
    assert!(r["config_text"].as_str().unwrap().contains("--set num_nodes=120"));
}

#[test]
fn pretrain_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = planet(&[
            "pretrain",
            "--graph",
            &graph,
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "epochs=1",
            "--set",
            "steps_per_epoch=3",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("checkpoint.plnt")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = planet(&["probe", "--checkpoint", "missing.plnt", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "data");
    assert!(err["message"].as_str().unwrap().contains("missing.plnt"));
}

#[test]
fn bad_invocations_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cases: [&[&str]; 4] = [
        &["synth", "--kind", "sbm", "--bogus"],
        &["synth", "--kind", "sbm", "--out", out, "--set", "bogus=1"],
        &["synth", "--kind", "sbm", "--out", out, "--set", "seed=3"],
        &["frobnicate"],
    ];
    for args in cases {
        let o = planet(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
        assert_eq!(err["error"], "config", "{args:?}");
    }
}

#[test]
fn config_file_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sbm.toml");
    std::fs::write(&cfg, "block_sizes = [10, 10]\np_in = 0.4\n").unwrap();
    let out = dir.path().join("g");
    let o = planet(&["synth", "--kind", "sbm", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["nodes"], 20);
    assert!(m["config_text"].as_str().unwrap().starts_with("block_sizes = [10, 10]\np_in = 0.4\n"));
}

#[test]
fn gradcheck_passes_on_a_small_graph() {
    let dir = tempfile::tempdir().unwrap();
    let o = planet(&["gradcheck", "--seed", "2", "--out", dir.path().to_str().unwrap(), "--set", "nodes=6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("gradcheck.json"));
    assert_eq!(r["mismatches"], 0);
    assert!(r["entries"].as_u64().unwrap() > 1000);
}
