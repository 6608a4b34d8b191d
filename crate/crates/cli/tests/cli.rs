use std::path::Path;
use std::process::{Command, Output};

fn urtf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urtf"))
        .args(args)
        .current_dir(dir)
        .env_remove("URTF_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn generated_corpus_round_trips_and_lints() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&urtf(&["synth", "gen", "--n", "200", "--out", "c.jsonl"], dir.path())), 0);
    for cmd in ["roundtrip", "lint"] {
        let out = urtf(&["sel", cmd, "c.jsonl"], dir.path());
        assert_eq!(code(&out), 0);
        assert_eq!(json(&out)["failures"], 0);
    }
}

#[test]
fn bad_sel_fails_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.sel"), "((PER: a))\n((PER a))\n").unwrap();
    let out = urtf(&["sel", "parse", "x.sel"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    std::fs::write(dir.path().join("y.sel"), "((PER: a))\n").unwrap();
    assert_eq!(code(&urtf(&["sel", "lint", "y.sel", "--spots", "LOC"], dir.path())), 1);
    assert_eq!(code(&urtf(&["sel", "lint", "y.sel", "--spots", "PER"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&urtf(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&urtf(&["synth", "gen", "--n", "3", "--out", "a", "--bogus"], dir.path())), 2);
    assert_eq!(code(&urtf(&["score", "--gold", "g", "--pred", "p", "--task", "xyz"], dir.path())), 2);
    assert_eq!(code(&urtf(&["ssi", "build"], dir.path())), 2);
    std::fs::write(dir.path().join("cfg"), "nonsense = 1\n").unwrap();
    assert_eq!(code(&urtf(&["--config", "cfg", "gradcheck"], dir.path())), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_urtf"))
        .args(["ssi", "build", "--spots", "A"])
        .env("URTF_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn seed_environment_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let spots = "a,b,c,d,e,f,g,h";
    let run = |seed: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_urtf"));
        cmd.args(["--seed", seed, "ssi", "build", "--shuffle", "--spots", spots]).current_dir(dir.path());
        match env {
            Some(v) => cmd.env("URTF_SEED", v),
            None => cmd.env_remove("URTF_SEED"),
        };
        json(&cmd.output().unwrap())["prompt"].as_str().unwrap().to_string()
    };
    assert_eq!(run("1", None), run("1", None));
    assert_ne!(run("1", None), run("2", None));
    assert_eq!(run("1", Some("2")), run("2", None));
}

#[test]
fn synth_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        assert_eq!(code(&urtf(&["--seed", "5", "synth", "gen", "--n", "50", "--out", name], dir.path())), 0);
    }
    urtf(&["--seed", "6", "synth", "gen", "--n", "50", "--out", "c.jsonl"], dir.path());
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn score_identical_predictions_prints_perfect_f1() {
    let dir = tempfile::tempdir().unwrap();
    urtf(&["synth", "gen", "--n", "100", "--out", "g.jsonl"], dir.path());
    for kind in ["ner", "rte", "evt-trg", "evt-arg", "senti"] {
        let out = urtf(&["score", "--gold", "g.jsonl", "--pred", "g.jsonl", "--task", kind], dir.path());
        assert_eq!(code(&out), 0);
        if kind == "ner" || kind == "rte" {
            assert!(String::from_utf8_lossy(&out.stderr).contains("f1 = 1.0000"), "{kind}");
            assert!(String::from_utf8_lossy(&out.stdout).contains("\"f1\": 1.0000"));
        }
    }
    let out = urtf(
        &["score", "--gold", "g.jsonl", "--pred", "g.jsonl", "--task", "ner", "--group-by-entities"],
        dir.path(),
    );
    assert!(json(&out)["buckets"].is_object());
}

#[test]
fn pair_reads_twice_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    urtf(&["synth", "gen", "--n", "300", "--out", "c.jsonl"], dir.path());
    let out = urtf(&["pair", "--in", "c.jsonl", "--out", "t.jsonl", "--report", "r.json"], dir.path());
    assert_eq!(code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["read_passes"], 2);
    assert_eq!(report, json(&out));
    let tasks = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let n = report["pairs"].as_u64().unwrap() + report["self_pairs"].as_u64().unwrap();
    assert_eq!(tasks.lines().count() as u64, n);
}

#[test]
fn bench_reports_both_durations() {
    let dir = tempfile::tempdir().unwrap();
    let out = urtf(&["bench", "pair", "--n", "500"], dir.path());
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert!(v["pairing_ms"].is_u64() && v["episodic_ms"].is_u64());
    assert_eq!(v["pairing"]["read_passes"], 2);
}

#[test]
fn meta_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    urtf(&["synth", "gen", "--n", "60", "--out", "c.jsonl"], d);
    urtf(&["synth", "gen", "--n", "20", "--out", "h.jsonl", "--heldout"], d);
    urtf(&["pair", "--in", "c.jsonl", "--out", "t.jsonl"], d);
    urtf(&["pair", "--in", "h.jsonl", "--out", "ht.jsonl"], d);
    std::fs::write(d.join("cfg"), "alpha = 0.3\nbeta = 0.05\nmax_steps = 4\ndim = 8\nreserved_tokens = 40\n").unwrap();
    let train = |mode: &str, out: &str| urtf(&["--config", "cfg", "meta", "train", "--tasks", "t.jsonl", "--mode", mode, "--out", out], d);
    let out = train("second_order", "ckpt");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["steps"], 4);
    assert_eq!(std::fs::read_to_string(d.join("ckpt.log.jsonl")).unwrap().lines().count(), 4);
    train("second_order", "again");
    assert_eq!(std::fs::read(d.join("ckpt")).unwrap(), std::fs::read(d.join("again")).unwrap());
    assert!(std::fs::read(d.join("ckpt")).unwrap().starts_with(b"URTF1"));

    let out = urtf(&["--config", "cfg", "meta", "eval", "--ckpt", "ckpt", "--tasks", "ht.jsonl", "--steps", "2"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["mean"].as_array().unwrap().len(), 3);

    assert_eq!(code(&train("sideways", "x")), 2);
    std::fs::write(d.join("zero"), "alpha = 0\n").unwrap();
    let out = urtf(&["--config", "zero", "meta", "train", "--tasks", "t.jsonl", "--out", "x"], d);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = urtf(&["gradcheck"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(json(&out)["failed"].as_array().unwrap().is_empty());
    assert_eq!(code(&urtf(&["gradcheck", "--eps", "0"], dir.path())), 2);
}
