//! Exit codes, messages and file outputs of the command-line surface.

use std::path::Path;

use ssnn_cli::run_cli;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["ssnn"];
    argv.extend_from_slice(args);
    run_cli(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pendulum_generation_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        assert_eq!(run(&["gen-data", "--kind", "pendulum", "--seed", "7", "--out", s(out), "--set", "data.count=3"]), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let states = std::fs::read_to_string(dir.path().join("a.states.csv")).unwrap();
    assert!(states.starts_with("seq_id,t,phi,omega\n"));
    assert_eq!(states.lines().count(), 1 + 3 * 100);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    assert_eq!(run(&["gen-data", "--kind", "ssnn", "--out", s(&out), "--set", "ssnn.bogus=1"]), 1);
    assert_eq!(run(&["gen-data", "--kind", "ssnn", "--out", s(&out), "--set", "ssnn.states=three"]), 1);
    assert_eq!(run(&["gen-data", "--kind", "nope", "--out", s(&out)]), 1);
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["gradcheck", "--T", "0"]), 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.iterations = 3\nnot a setting\n").unwrap();
    assert_eq!(run(&["gen-data", "--kind", "ssnn", "--out", s(&out), "--config", s(&cfg)]), 1);
    assert!(!out.exists());
}

#[test]
fn config_file_and_overrides_are_layered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small set\ndata.count = 2\nssnn.steps = 30 # short\n").unwrap();
    let out = dir.path().join("d.csv");
    let args = ["gen-data", "--kind", "ssnn", "--out", s(&out), "--config", s(&cfg), "--set", "data.count=3"];
    assert_eq!(run(&args), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 30);
}

#[test]
fn gradcheck_passes_on_the_tiny_instance() {
    assert_eq!(run(&["gradcheck", "--T", "4", "--K", "2", "--M", "2"]), 0);
}

#[test]
fn train_eval_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert_eq!(
        run(&["gen-data", "--kind", "ssnn", "--seed", "1", "--out", s(&p("d.bin")), "--set", "data.count=3", "--set", "ssnn.steps=30"]),
        0
    );
    assert!(p("d.truth.csv").exists());
    let (data, run_dir) = (p("d.bin"), p("run"));
    let train = [
        "train", "--data", s(&data), "--out", s(&run_dir), "--set", "train.iterations=4", "--set", "train.encoder=3",
    ];
    assert_eq!(run(&train), 0);
    let ckpt = p("run").join("model.ckpt");
    assert_eq!(std::fs::read_to_string(p("run").join("history.jsonl")).unwrap().lines().count(), 4);

    let report = p("report.json");
    assert_eq!(
        run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&p("d.bin")), "--out", s(&report), "--require-truth", "--set", "eval.elbo_samples=3"]),
        0
    );
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["report_version"], 1);
    assert_eq!(json["sequences"].as_array().unwrap().len(), 3);
    let err = json["aggregate"]["error_rate_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&err));

    // wrong observation width
    assert_eq!(
        run(&["gen-data", "--kind", "ssnn", "--out", s(&p("wide.csv")), "--set", "ssnn.obs_dim=3", "--set", "data.count=2", "--set", "ssnn.steps=10"]),
        0
    );
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&p("wide.csv"))]), 2);

    // sampled data carries truth; pendulum data does not
    assert_eq!(run(&["sample", "--checkpoint", s(&ckpt), "--out", s(&p("sampled.csv")), "--steps", "5", "--set", "data.count=1"]), 0);
    assert!(p("sampled.truth.csv").exists());
    assert_eq!(
        run(&["gen-data", "--kind", "pendulum", "--out", s(&p("pen.csv")), "--set", "data.count=1", "--set", "pendulum.duration=2"]),
        0
    );
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&p("pen.csv")), "--require-truth"]), 2);

    assert_eq!(run(&["oracle", "--checkpoint", s(&ckpt), "--data", s(&p("d.bin")), "--out", s(&p("o.jsonl"))]), 0);
    let lines = std::fs::read_to_string(p("o.jsonl")).unwrap();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["map_log_prob"].as_f64().unwrap() <= v["log_likelihood"].as_f64().unwrap());
    }
    assert_eq!(run(&["eval", "--checkpoint", s(&p("missing.ckpt")), "--data", s(&p("d.bin"))]), 2);
}
