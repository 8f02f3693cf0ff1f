use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn tap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tap"))
        .args(args)
        .env_remove("TAP_CACHE_DIR")
        .env_remove("TAP_LLM_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tap(args);
    assert!(out.status.success(), "tap {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr has an error record");
    serde_json::from_str(last).expect("error record is JSON")
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Small synthetic world with a briefly pretrained backbone.
fn small_world() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("world");
        ok(&[
            "synth-data", "--output", s(&out), "--classes", "4", "--train-per-class", "4", "--test-per-class", "2",
            "--pretrain-pairs", "64", "--pretrain-epochs", "1",
        ]);
        dir
    })
    .path()
}

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let w = small_world().join("world");
    let (data, toa, backbone) = (w.join("data"), w.join("toa.json"), w.join("backbone"));
    let mut args = vec![
        "train", "--preset", "synthetic", "--shots", "2", "--epochs", "3", "--seed", "1,2", "--batch-size", "4",
        "--dataset", "synthetic", "--data-root", s(&data), "--toa", s(&toa), "--backbone", s(&backbone),
        "--output", s(out),
    ];
    args.extend_from_slice(extra);
    tap(&args)
}

#[test]
fn gen_toa_fixture_reproduces_golden_tree() {
    let fx = core_fixtures().join("generation/flowers102");
    let out = TempDir::new().unwrap();
    ok(&[
        "gen-toa", "--dataset", "Flowers102", "--classes", s(&fx.join("classes.txt")),
        "--description-file", s(&fx.join("description.txt")), "--backend", "gpt-3.5-turbo",
        "--fixture", s(&fx.join("transcript.json")), "--output", s(out.path()),
    ]);
    let tree = std::fs::read(out.path().join("toa.json")).unwrap();
    assert_eq!(tree, std::fs::read(fx.join("expected.toa.json")).unwrap());
    let doc: Value = serde_json::from_slice(&tree).unwrap();
    assert_eq!(doc["attributes"], serde_json::json!(["Color", "Petal", "Center structure", "Stem characteristics"]));

    let again = TempDir::new().unwrap();
    ok(&["gen-toa", "--config", s(&out.path().join("config.json")), "--output", s(again.path())]);
    assert_eq!(std::fs::read(again.path().join("toa.json")).unwrap(), tree);
}

#[test]
fn gen_toa_missing_classes_file_is_bad_args() {
    let out = TempDir::new().unwrap();
    let res = tap(&[
        "gen-toa", "--dataset", "X", "--classes", "/no/such/classes.txt", "--backend", "m", "--output", s(out.path()),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_record(&res)["error"], "bad-args");
}

#[test]
fn gen_toa_unreachable_backend_exits_3() {
    let fx = core_fixtures().join("generation/flowers102");
    let out = TempDir::new().unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_tap"))
        .args(["gen-toa", "--dataset", "Flowers102", "--classes", s(&fx.join("classes.txt"))])
        .args(["--backend", "gpt-3.5-turbo", "--output", s(out.path())])
        .env_remove("TAP_CACHE_DIR")
        .env("TAP_LLM_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(error_record(&res)["error"], "backend");
}

#[test]
fn unknown_flag_is_bad_args() {
    let res = tap(&["train", "--bogus"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_record(&res)["error"], "bad-args");
}

#[test]
fn no_reg_logs_class_loss_only() {
    let out = TempDir::new().unwrap();
    let res = train_small(out.path(), &["--no-reg"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for seed in [1, 2] {
        let steps = std::fs::read_to_string(out.path().join(format!("seed-{seed}/steps.jsonl"))).unwrap();
        let mut n = 0;
        for line in steps.lines() {
            let rec: Value = serde_json::from_str(line).unwrap();
            let loss = &rec["loss"];
            assert_eq!(loss["l_total"].as_f64().unwrap().to_bits(), loss["l_class"].as_f64().unwrap().to_bits());
            n += 1;
        }
        assert!(n > 0);
    }
}

#[test]
fn eval_alpha_changes_only_fusion_outputs() {
    let out = TempDir::new().unwrap();
    let res = train_small(&out.path().join("run"), &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let run = out.path().join("run");
    let (e1, e4) = (out.path().join("a1"), out.path().join("a4"));
    ok(&["eval", "--checkpoint", s(&run), "--alpha", "1.0", "--output", s(&e1)]);
    ok(&["eval", "--checkpoint", s(&run), "--alpha", "0.4", "--output", s(&e4)]);
    let (mut a, mut b) = (read_json(&e1.join("metrics.json")), read_json(&e4.join("metrics.json")));
    assert_eq!(a["config"]["inference"]["alpha"], 1.0);
    assert_eq!(b["config"]["inference"]["alpha"], 0.4);
    // The trained α is 0.4, so re-evaluation at 0.4 reproduces training.
    assert_eq!(b, read_json(&run.join("metrics.json")));
    for doc in [&mut a, &mut b] {
        doc["config"]["inference"]["alpha"] = Value::Null;
        for key in ["per_seed", "mean", "std"] {
            doc[key] = Value::Null;
        }
    }
    assert_eq!(a, b);
}

#[test]
fn train_replays_from_config_echo() {
    let out = TempDir::new().unwrap();
    let first = out.path().join("first");
    let res = train_small(&first, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let second = out.path().join("second");
    ok(&["train", "--config", s(&first.join("config.json")), "--output", s(&second)]);
    for f in [
        "metrics.json",
        "seed-1/steps.jsonl",
        "seed-2/epochs.jsonl",
        "seed-1/splits.txt",
        "seed-1/checkpoint/prompts_gpa.bin",
        "seed-2/checkpoint/prompts_last.bin",
    ] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn attrs_fixed_beyond_tree_is_rejected_before_training() {
    let out = TempDir::new().unwrap();
    let res = train_small(out.path(), &["--attrs-fixed", "9"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.path().join("config.json").exists());
}

#[test]
fn export_attn_rejects_cls_only_runs() {
    let out = TempDir::new().unwrap();
    let run = out.path().join("run");
    let res = train_small(&run, &["--alignment", "cls_only"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let w = small_world().join("world");
    let res = tap(&[
        "export-attn", "--checkpoint", s(&run), "--toa", s(&w.join("toa.json")),
        "--image", s(&w.join("data/synthetic/images/00000.png")), "--class", "aster", "--output", s(&out.path().join("x")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_record(&res)["error"], "bad-args");
}

#[test]
fn synth_data_replays_from_config_echo() {
    let out = TempDir::new().unwrap();
    let (a, b) = (out.path().join("a"), out.path().join("b"));
    ok(&["synth-data", "--output", s(&a), "--classes", "4", "--train-per-class", "2", "--test-per-class", "1", "--no-backbone"]);
    ok(&["synth-data", "--config", s(&a.join("config.json")), "--output", s(&b)]);
    assert_eq!(read_json(&a.join("world.json")), read_json(&b.join("world.json")));
    assert!(!b.join("backbone").exists());
}

#[test]
fn export_attn_ranks_the_depicted_shape_first() {
    let out = TempDir::new().unwrap();
    let world = out.path().join("world");
    let tree = core_fixtures().join("dumplings.toa.json");
    ok(&[
        "synth-data", "--from-toa", s(&tree), "--depict", "1", "--train-per-class", "8", "--test-per-class", "4",
        "--pretrain-pairs", "1024", "--pretrain-epochs", "8", "--output", s(&world),
    ]);
    let run = out.path().join("run");
    ok(&[
        "train", "--preset", "synthetic", "--task", "fewshot", "--shots", "8", "--epochs", "6", "--seed", "1",
        "--dataset", "Food101", "--data-root", s(&world.join("data")), "--toa", s(&world.join("toa.json")),
        "--backbone", s(&world.join("backbone")), "--output", s(&run),
    ]);
    let index = std::fs::read_to_string(world.join("data/Food101/index.txt")).unwrap();
    let images: Vec<&str> =
        index.lines().filter(|l| l.ends_with(" 0 test")).map(|l| l.split(' ').next().unwrap()).collect();
    assert!(!images.is_empty());
    for img in images {
        let x = out.path().join("x");
        ok(&[
            "export-attn", "--checkpoint", s(&run), "--toa", s(&world.join("toa.json")),
            "--image", s(&world.join("data/Food101").join(img)), "--class", "dumplings", "--output", s(&x),
        ]);
        let doc = read_json(&x.join("attention.json"));
        let shape = doc["attributes"].as_array().unwrap().iter().find(|a| a["attribute"] == "Shape").unwrap();
        let weight = |needle: &str| {
            shape["descriptions"].as_array().unwrap().iter().find(|d| d["text"].as_str().unwrap().contains(needle)).unwrap()
                ["weight"]
                .as_f64()
                .unwrap()
        };
        let (round, crescent) = (weight("round with a pleated edge"), weight("crescent-shaped"));
        assert!(round > crescent, "{img}: round {round} vs crescent {crescent}");
    }
}
