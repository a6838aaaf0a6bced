use std::path::Path;
use std::process::{Command, Output};

use hralign::trainer::RunConfig;

const BIN: &str = env!("CARGO_BIN_EXE_hralign");
const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.cfg");
const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.cfg");

fn hralign(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_exits_zero() {
    let o = hralign(&["adapt", "--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--resume"));
}

#[test]
fn missing_config_names_the_path() {
    let o = hralign(&["adapt", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.cfg"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&hralign(&["frobnicate"])), 1);
    assert_eq!(code(&hralign(&["adapt", "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&hralign(&["adapt", "--set", "steps=many"])), 1);
}

#[test]
fn reference_config_file_is_the_default() {
    let file = RunConfig::load(Path::new(REFERENCE)).unwrap();
    let mut defaults = RunConfig::default();
    defaults.train.out_dir = file.train.out_dir.clone();
    assert_eq!(file.to_text(), defaults.to_text());
}

fn artifacts(dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("artifacts.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap().to_string()).collect()
}

#[test]
fn smoke_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut a = args.to_vec();
        a.extend(["--config", SMOKE, "--out", out_s]);
        let o = hralign(&a);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };

    // commands that need earlier outputs fail at runtime, not as usage errors
    let early = hralign(&["eval", "--config", SMOKE, "--out", out_s]);
    assert_eq!(code(&early), 2);

    run(&["generate"]);
    run(&["pretrain"]);
    run(&["adapt"]);
    run(&["baseline", "pret"]);
    run(&["baseline", "cls"]);
    run(&["eval"]);
    run(&["dump"]);
    run(&["ablate"]);

    let expect: &[(&str, &[&str])] = &[
        ("data", &["train/manifest.json", "heldout/manifest.json"]),
        ("pretrain", &["backbone.ckpt", "pretrain_loss.csv", "report.json"]),
        ("adapt", &["checkpoint.ckpt", "metrics.csv", "summary.json"]),
        ("baseline_pret", &["checkpoint.ckpt", "metrics.csv", "summary.json"]),
        ("baseline_cls", &["checkpoint.ckpt", "metrics.csv", "summary.json"]),
        ("eval", &["report.txt", "report.json"]),
        ("dump", &["embeddings_adapted.csv", "embeddings_frozen.csv"]),
        ("ablation", &["table.csv", "table.json"]),
    ];
    for (dir, files) in expect {
        let d = out.join(dir);
        let listed = artifacts(&d);
        for f in files.iter().chain(&["config.resolved", "artifacts.json"]) {
            assert!(d.join(f).is_file(), "{dir}/{f} missing");
            assert!(listed.iter().any(|l| l == f), "{dir}/{f} not listed");
        }
        for l in &listed {
            assert!(d.join(l).is_file(), "{dir}/{l} listed but absent");
        }
    }

    let metrics = std::fs::read_to_string(out.join("adapt/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss,pos_sim,hard_neg_sim,wall_ms"));
    assert_eq!(metrics.lines().count(), 4);
    let table = std::fs::read_to_string(out.join("ablation/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    // 2 tasks x 3 held-out pairs, two clips each
    let dump = std::fs::read_to_string(out.join("dump/embeddings_adapted.csv")).unwrap();
    assert_eq!(dump.lines().count(), 1 + 12);

    // a finished run extends to a later step from its checkpoint, and lands
    // on the same bytes as a straight run to that step
    let ck = out.join("adapt/checkpoint.ckpt");
    let o = hralign(&["adapt", "--config", SMOKE, "--out", out_s, "--resume", ck.to_str().unwrap(), "--set", "steps=5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = std::fs::read(&ck).unwrap();
    let o = hralign(&["adapt", "--config", SMOKE, "--out", out_s, "--set", "steps=5"]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read(&ck).unwrap() == resumed);

    let o = hralign(&["adapt", "--config", SMOKE, "--out", out_s, "--resume", ck.to_str().unwrap(), "--set", "lr=0.5"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
}
