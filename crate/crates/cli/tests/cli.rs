use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use stylefit_cli::service::{run_generate, GenerateBody, ServiceState, TemplateInput};

const SMALL: &str = r#"
[gen]
n_outfits = 500
[train]
model = { d_s = 16 }
stage1 = { epochs = 2 }
stage2 = { epochs = 2 }
[eval]
replications = 1
max_anchors = 20
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylefit"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_and_generate_matches_service() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["gen-data", "--out", "data", "--styles", "4", "--outfits", "500", "--seed", "7"]);
    for f in ["items.jsonl", "outfits.jsonl", "planted_structure.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    ok(d, &["train-senet", "--data", "data", "--out", "s1.ckpt", "--config", "small.toml", "--seed", "3"]);
    let csv = std::fs::read_to_string(d.join("s1.ckpt.stage1.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,classif,kl,valid_accuracy"));
    assert_eq!(csv.lines().count(), 3);
    ok(d, &["train-scanet", "--data", "data", "--checkpoint", "s1.ckpt", "--out", "model.ckpt", "--config", "small.toml"]);
    ok(
        d,
        &["train-scanet", "--data", "data", "--checkpoint", "s1.ckpt", "--out", "abl.ckpt", "--rep", "independent", "--config", "small.toml"],
    );
    let table = ok(
        d,
        &[
            "eval", "--checkpoint", "model.ckpt", "--ablation", "abl.ckpt", "--data", "data", "--negatives", "hard", "--plots", "plots",
            "--config", "small.toml",
        ],
    );
    assert!(table.contains("FITB (hard)"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for key in ["fitb", "auroc", "style_rank", "entropy", "parent_child", "discriminative", "ablation"] {
        assert!(!report[key].is_null(), "report lacks {key}");
    }
    assert_eq!(report["options"]["negatives"], "hard");
    assert!(d.join("plots/entropy.svg").exists());

    let styles: Vec<String> = stylefit::checkpoint::load::<f32>(d.join("model.ckpt")).unwrap().styles;
    let weights = format!("{}=0.7,{}=0.3", styles[0], styles[1]);
    let stdout = ok(
        d,
        &["generate", "--parent", "i00002", "--template", "topwear,bottomwear,footwear", "--style", &weights, "--top", "5"],
    );
    let cli: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(cli["outfits"].as_array().unwrap().len(), 5);

    let state = ServiceState::load(&d.join("model.ckpt"), &d.join("data")).unwrap();
    let body = GenerateBody {
        parent_id: "i00002".into(),
        template: TemplateInput::Text("topwear,bottomwear,footwear".into()),
        style_weights: [(styles[0].clone(), 0.7), (styles[1].clone(), 0.3)].into(),
        top_k: 5,
        beam: 10,
        sample_seed: None,
        normalize: false,
    };
    let direct = serde_json::to_string(&run_generate(&state, &body).unwrap()).unwrap();
    assert_eq!(serde_json::from_str::<Value>(&direct).unwrap(), cli);

    let sweep = ok(
        d,
        &[
            "sweep", "--parent", "i00002", "--template", "topwear,bottomwear", "--from", &styles[0], "--to", &styles[1], "--steps", "3",
            "--svg", "sweep.svg",
        ],
    );
    let steps: Value = serde_json::from_str(&sweep).unwrap();
    assert_eq!(steps.as_array().unwrap().len(), 3);
    assert!(d.join("sweep.svg").exists());
}

#[test]
fn same_seed_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["gen-data", "--out", "data", "--config", "small.toml"]);
    ok(d, &["train-senet", "--data", "data", "--out", "a.ckpt", "--config", "small.toml"]);
    ok(d, &["train-senet", "--data", "data", "--out", "b.ckpt", "--config", "small.toml"]);
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
}

#[test]
fn json_config_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.json"), r#"{"gen": {"n_outfits": 120, "m_styles": 3}}"#).unwrap();
    let out = ok(d, &["gen-data", "--out", "data", "--config", "c.json"]);
    assert!(out.contains("120 outfits, 3 styles"), "{out}");
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = bin(d, &["gen-data", "--out", "x", "--bogus"]);
    assert!(!out.status.success());
    let out = bin(d, &["train-senet", "--data", "missing", "--out", "m.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    let out = bin(d, &["nonsense"]);
    assert!(!out.status.success());
    std::fs::write(d.join("bad.toml"), "[train]\nunknown_key = 1\n").unwrap();
    let out = bin(d, &["gen-data", "--out", "x", "--config", "bad.toml"]);
    assert!(!out.status.success());
}
