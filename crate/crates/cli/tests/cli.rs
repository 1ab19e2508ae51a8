use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tubestream::checkpoint::Checkpoint;
use tubestream::engine::read_tube_jsonl;
use tubestream::metrics::EvalReport;
use tubestream::world::generate_dataset;
use tubestream::{dataset, Model, RunConfig};

const TINY: &str = r#"
seed = 3

[model]
width = 8
heads = 2
encoder_blocks = 1
decoder_blocks = 2
grid_h = 4
grid_w = 4
appearance_dim = 4
motion_dim = 4
text_dim = 6
text_len = 4
n_s = 3

[world]
frames = 10
grid_h = 4
grid_w = 4
channels = 4
text_len = 4
events = 2
min_event_len = 2
max_event_len = 4
min_box = 0.3
max_box = 0.5

[train]
lr = 0.001
steps = 2
episodes = 3

[eval]
episodes = 4

[ablate]
variants = ["full", "parallel"]
n_s_values = [1, 2]
seeds = [1]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tubestream"));
    c.env_remove("TUBESTREAM_DATA_DIR").env("TUBESTREAM_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn sha(path: impl AsRef<Path>) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn gen_is_reproducible_and_round_trips() {
    let (dir, cfg) = setup();
    let (a, b) = (p(dir.path(), "a.artg"), p(dir.path(), "sub/b.artg"));
    ok(&["gen", "--config", &cfg, "--out", &a, "--count", "5"]);
    ok(&["gen", "--config", &cfg, "--out", &b, "--count", "5"]);
    assert_eq!(sha(&a), sha(&b));
    assert_eq!(sha(format!("{a}.manifest")), sha(format!("{b}.manifest")));

    let loaded = dataset::load(Path::new(&a)).unwrap();
    assert_eq!(loaded.len(), 5);
    let world = RunConfig::from_toml(TINY).unwrap().world;
    assert_eq!(loaded, generate_dataset(&world, 3, 5).unwrap());

    let c = p(dir.path(), "c.artg");
    ok(&["gen", "--config", &cfg, "--out", &c, "--seed", "4"]);
    assert_ne!(sha(&a), sha(&c));
    assert_eq!(dataset::load(Path::new(&c)).unwrap().len(), 3);
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let (dir, cfg) = setup();
    let out = p(dir.path(), "run");
    ok(&["train", "--config", &cfg, "--out", &out, "--steps", "0"]);
    let ck = Checkpoint::load(&dir.path().join("run/model.ckpt")).unwrap();
    let init = Model::new(RunConfig::from_toml(TINY).unwrap().model).unwrap();
    assert_eq!(ck.to_model().unwrap().params, init.params);
    assert_eq!(ck.step, 0);
    let log = fs::read_to_string(dir.path().join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn training_is_reproducible() {
    let (dir, cfg) = setup();
    let (a, b) = (p(dir.path(), "a"), p(dir.path(), "b"));
    ok(&["train", "--config", &cfg, "--out", &a]);
    ok(&["train", "--config", &cfg, "--out", &b]);
    for f in ["model.ckpt", "train_log.csv", "config.toml"] {
        assert_eq!(sha(Path::new(&a).join(f)), sha(Path::new(&b).join(f)), "{f}");
    }
    let log = fs::read_to_string(Path::new(&a).join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("step,loss"));
}

#[test]
fn resumed_training_matches_one_run() {
    let (dir, cfg) = setup();
    let (full, half) = (p(dir.path(), "full"), p(dir.path(), "half"));
    ok(&["train", "--config", &cfg, "--out", &full, "--steps", "4"]);
    ok(&["train", "--config", &cfg, "--out", &half, "--steps", "2"]);
    let ck = p(dir.path(), "half/model.ckpt");
    let rest = p(dir.path(), "rest");
    ok(&["train", "--config", &cfg, "--out", &rest, "--steps", "2", "--resume", &ck]);
    assert_eq!(sha(Path::new(&full).join("model.ckpt")), sha(Path::new(&rest).join("model.ckpt")));
}

#[test]
fn oracle_evaluation_scores_one() {
    let (dir, cfg) = setup();
    let report = p(dir.path(), "oracle.json");
    let out = ok(&["eval", "--config", &cfg, "--oracle", "--out", &report]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("100.0"));
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for m in [r.m_tiou, r.m_viou, r.viou_at_03, r.viou_at_05] {
        assert!((m - 1.0).abs() < 1e-12, "{m}");
    }
    assert_eq!(r.samples.len(), 4);
}

#[test]
fn eval_and_ground_are_reproducible() {
    let (dir, cfg) = setup();
    let run_dir = p(dir.path(), "run");
    ok(&["train", "--config", &cfg, "--out", &run_dir]);
    let ck = p(dir.path(), "run/model.ckpt");
    for name in ["r1.json", "r2.json"] {
        ok(&["eval", "--config", &cfg, "--checkpoint", &ck, "--out", &p(dir.path(), name)]);
    }
    assert_eq!(sha(dir.path().join("r1.json")), sha(dir.path().join("r2.json")));
    for name in ["t1.jsonl", "t2.jsonl"] {
        ok(&["ground", "--config", &cfg, "--checkpoint", &ck, "--index", "2", "--out", &p(dir.path(), name)]);
    }
    assert_eq!(sha(dir.path().join("t1.jsonl")), sha(dir.path().join("t2.jsonl")));
    let tube = read_tube_jsonl(&fs::read_to_string(dir.path().join("t1.jsonl")).unwrap()).unwrap();
    assert_eq!(tube.len(), 10);
}

#[test]
fn grounding_a_single_frame_gives_zero_segment() {
    let (dir, cfg) = setup();
    let run_dir = p(dir.path(), "run");
    ok(&["train", "--config", &cfg, "--out", &run_dir, "--steps", "0"]);
    let out = ok(&["ground", "--config", &cfg, "--checkpoint", &p(dir.path(), "run/model.ckpt"), "--frames", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().last().unwrap(), r#"{"segment":[0,0]}"#);
}

#[test]
fn data_dir_resolves_relative_inputs() {
    let (dir, cfg) = setup();
    let data = p(dir.path(), "eps.artg");
    ok(&["gen", "--config", &cfg, "--out", &data, "--count", "2"]);
    let report = p(dir.path(), "r.json");
    let out = bin()
        .env("TUBESTREAM_DATA_DIR", dir.path())
        .args(["eval", "--config", &cfg, "--oracle", "--data", "eps.artg", "--out", &report])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.samples.len(), 2);
}

#[test]
fn ablation_writes_tables_and_is_reproducible() {
    let (dir, cfg) = setup();
    let (a, b) = (p(dir.path(), "a"), p(dir.path(), "b"));
    let out = ok(&["ablate", "--config", &cfg, "--out", &a]);
    ok(&["ablate", "--config", &cfg, "--out", &b]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("full (seed 1)") && stdout.contains("parallel (seed 1)"));
    assert!(stdout.contains("ns-2 (mean)"));
    for f in ["ablation.txt", "ablation.json", "ns_sweep.txt", "ns_sweep.json"] {
        assert_eq!(sha(Path::new(&a).join(f)), sha(Path::new(&b).join(f)), "{f}");
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn config_problems_exit_with_two() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidth = 8\nbogus = 1\n").unwrap();
    let out = run(&["eval", "--oracle", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("line 3"), "{err}");

    fs::write(&bad, "[model\n").unwrap();
    assert_eq!(code(&run(&["gen", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["gen", "--config", &p(dir.path(), "missing.toml")])), 2);
    assert_eq!(code(&run(&["eval", "--oracle", "--set", "model.width"])), 2);
    assert_eq!(code(&run(&["eval", "--oracle", "--set", "model.heads=5"])), 2);
    assert_eq!(code(&run(&["ablate", "--variants", "nope", "--seeds", "1"])), 2);
    assert_eq!(code(&run(&["eval"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn runtime_problems_exit_with_three() {
    let (dir, cfg) = setup();
    let missing = p(dir.path(), "nope.ckpt");
    assert_eq!(code(&run(&["eval", "--config", &cfg, "--checkpoint", &missing])), 3);
    assert_eq!(code(&run(&["ground", "--config", &cfg, "--checkpoint", &missing])), 3);
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["eval", "--config", &cfg, "--checkpoint", garbage.to_str().unwrap()])), 3);
    assert_eq!(code(&run(&["eval", "--config", &cfg, "--oracle", "--data", &missing])), 3);
    // A file where a directory is needed.
    let blocker = PathBuf::from(p(dir.path(), "file"));
    fs::write(&blocker, b"x").unwrap();
    let under = blocker.join("ds.artg");
    assert_eq!(code(&run(&["gen", "--config", &cfg, "--out", under.to_str().unwrap()])), 3);
}
