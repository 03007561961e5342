use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "train.steps = 20\ntrain.eval_interval = 10\ntrain.batch = 16\n\
denoiser.hidden = 16\ndenoiser.depth = 1\ndenoiser.heads = 2\neval.samples = 16\neval.sampler_steps = 4\n";

fn raelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raelab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn train_dit_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    for out in ["a", "b"] {
        ok(&raelab(d, &["--config", "tiny.cfg", "--seed", "3", "--out", out, "train-dit"]));
    }
    assert_eq!(read(d, "a/metrics.jsonl"), read(d, "b/metrics.jsonl"));
    assert_eq!(read(d, "a/generator.raet"), read(d, "b/generator.raet"));
    let lock = String::from_utf8(read(d, "a/config.lock")).unwrap();
    assert!(lock.contains("seed = 3\n"));
    assert!(lock.contains("train.steps = 20\n"));
    assert!(String::from_utf8(read(d, "a/summary.txt")).unwrap().contains("config hash:"));
    assert!(!d.join("a/.lock").exists());
}

#[test]
fn pipeline_from_data_to_selection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(&raelab(d, &["--config", "tiny.cfg", "--out", "data", "gen-data", "--per-condition", "4"]));
    ok(&raelab(d, &["--config", "tiny.cfg", "--out", "dit", "train-dit", "--data", "data/data.raet"]));
    // sample, eval and tts pick up dit/config.lock on their own.
    ok(&raelab(d, &["--out", "s", "sample", "--checkpoint", "dit/generator.raet", "--per-condition", "2"]));
    assert!(d.join("s/samples.raet").exists());
    ok(&raelab(d, &["--out", "e", "eval", "--checkpoint", "dit/generator.raet", "--metrics", "sliced_wasserstein"]));
    let metrics = String::from_utf8(read(d, "e/metrics.jsonl")).unwrap();
    assert!(metrics.contains("\"name\":\"sliced_wasserstein\""));
    let tts = raelab(
        d,
        &["--out", "t", "tts", "--checkpoint", "dit/generator.raet", "--verifier", "oracle", "--trials", "3", "--n", "2,4", "--k", "1"],
    );
    ok(&tts);
    assert!(String::from_utf8(read(d, "t/summary.txt")).unwrap().contains("decode calls during selection: 0"));
}

#[test]
fn errors_name_their_cause() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "optim.lr = 1e-3\noptim.momentum = 0.9\n").unwrap();
    let out = raelab(d, &["--config", "bad.cfg", "--out", "x", "train-dit"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optim.momentum"));

    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(&raelab(d, &["--config", "tiny.cfg", "--out", "dit", "train-dit"]));
    let out = raelab(d, &["--out", "e", "eval", "--checkpoint", "dit/generator.raet", "--metrics", "fid"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown metric `fid`"));

    let out = raelab(d, &["--out", "x", "experiment", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("busy")).unwrap();
    std::fs::write(d.join("busy/.lock"), "").unwrap();
    let out = raelab(d, &["--out", "busy", "gradcheck", "--scope", "ops"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}

#[test]
fn gradcheck_ops_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = raelab(dir.path(), &["--out", "g", "gradcheck", "--scope", "ops"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ops: 37 checks"));
}
