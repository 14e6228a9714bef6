//! End-to-end runs of the `facaid` binary.

use std::path::Path;
use std::process::Command;

use facaid_core::generator::{read_dataset, record_at};
use facaid_core::tokenizer::Vocabulary;
use facaid_core::transformer::checkpoint::save_checkpoint;
use facaid_core::transformer::{ModelConfig, SeqModel};
use facaid_core::{default_sizing, execute, validate_tree, DerivationTree, RectLayout};

fn facaid(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_facaid"))
        .args(args)
        .env_remove("FACAID_MODEL")
        .output()
        .unwrap();
    out
}

fn ok(args: &[&str]) {
    let out = facaid(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_is_seeded_and_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["generate", "--count", "40", "--seed", "5", "--out", p(&a), "--workers", "1"]);
    ok(&["generate", "--count", "40", "--seed", "5", "--style-policy", "default", "--out", p(&b), "--workers", "3"]);
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let (header, records) = read_dataset(ta.as_slice()).unwrap();
    assert_eq!((header.count, header.master_seed, records.len()), (40, 5, 40));
    assert_eq!(records[7], record_at(5, 7));

    let out = facaid(&["generate", "--count", "1", "--style-policy", "baroque", "--out", p(&a)]);
    assert!(!out.status.success());
}

#[test]
fn render_and_optimize_files() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record_at(8, 2);
    let tree_path = dir.path().join("tree.json");
    let target_path = dir.path().join("target.json");
    let start = default_sizing(&rec.tree.structure_only()).unwrap();
    std::fs::write(&tree_path, serde_json::to_string(&start).unwrap()).unwrap();
    // A whole dataset record is accepted wherever a layout is expected.
    std::fs::write(&target_path, serde_json::to_string(&rec).unwrap()).unwrap();

    let fitted = dir.path().join("fitted.json");
    let trace = dir.path().join("trace.csv");
    ok(&["optimize", "--tree", p(&tree_path), "--target", p(&target_path), "--out", p(&fitted), "--trace", p(&trace)]);
    let tree: DerivationTree = serde_json::from_str(&std::fs::read_to_string(&fitted).unwrap()).unwrap();
    assert!(tree.same_structure(&rec.tree));
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("iteration,loss\n"));
    assert!(csv.lines().count() > 2);

    let svg_tree = dir.path().join("t.svg");
    let svg_layout = dir.path().join("l.svg");
    let layout_path = dir.path().join("layout.json");
    std::fs::write(&layout_path, serde_json::to_string(&execute(&tree).unwrap()).unwrap()).unwrap();
    ok(&["render", "--tree", p(&fitted), "--out", p(&svg_tree)]);
    ok(&["render", "--layout", p(&layout_path), "--out", p(&svg_layout)]);
    assert_eq!(std::fs::read(&svg_tree).unwrap(), std::fs::read(&svg_layout).unwrap());
}

#[test]
fn infer_train_and_eval_with_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::standard(100).unwrap();
    let model = SeqModel::new(ModelConfig::tiny(&vocab, 16, 1, 2), 1).unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    save_checkpoint(&model, &vocab, &ckpt).unwrap();

    let rec = record_at(12, 0);
    let layout_path = dir.path().join("layout.json");
    std::fs::write(&layout_path, serde_json::to_string(&rec.layout).unwrap()).unwrap();
    let out = dir.path().join("tree.json");
    let status = Command::new(env!("CARGO_BIN_EXE_facaid"))
        .args(["infer", "--layout", p(&layout_path), "--out", p(&out), "--temperature", "1.0", "--seed", "3"])
        .env("FACAID_MODEL", &ckpt)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let tree: DerivationTree = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(validate_tree(&tree).is_empty());
    let _: RectLayout = execute(&tree).unwrap();

    // Resume from a prefix given as token strings.
    let prefix = dir.path().join("prefix.json");
    std::fs::write(&prefix, r#"["<bos>"]"#).unwrap();
    let resumed = dir.path().join("resumed.json");
    ok(&["infer", "--model", p(&ckpt), "--layout", p(&layout_path), "--out", p(&resumed), "--resume-prefix", p(&prefix)]);

    // Two-epoch training run on a generated set, configured through TOML.
    let config = dir.path().join("facaid.toml");
    std::fs::write(
        &config,
        "[model]\nembed_dim = 16\nenc_layers = 1\ndec_layers = 1\nheads = 2\n[train]\nbatch_size = 4\nlearning_rate = 0.001\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&config), "--generate", "12", "--out-dir", p(&run), "--epochs", "2", "--seed", "4"]);
    for f in ["model.ckpt", "last.ckpt", "best.ckpt", "train_report.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);

    let testset = dir.path().join("test.jsonl");
    ok(&["generate", "--count", "3", "--seed", "99", "--out", p(&testset)]);
    let report_path = dir.path().join("report.json");
    ok(&[
        "eval", "--model", p(&run.join("model.ckpt")), "--testset", p(&testset), "--report", p(&report_path),
        "--no-noise", "--no-optimize",
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(r["samples"], 3);
    assert!(r["nll_masked"].as_f64().unwrap() <= r["nll"].as_f64().unwrap());
    for key in ["frequency", "ted_histogram", "pixel_error_histogram", "noise_curve"] {
        assert!(r.get(key).is_some(), "{key} missing");
    }
}

#[test]
fn missing_model_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let layout = dir.path().join("l.json");
    std::fs::write(&layout, serde_json::to_string(&record_at(1, 1).layout).unwrap()).unwrap();
    let out = facaid(&["infer", "--layout", p(&layout), "--out", p(&dir.path().join("t.json"))]);
    assert!(!out.status.success());
    let out = facaid(&["infer", "--model", "/nonexistent.ckpt", "--layout", p(&layout), "--out", "x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
