use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn textwipe(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_textwipe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "textwipe {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn first_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn config_prints_every_key() {
    let out = textwipe(&["config"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let obj = v.as_object().unwrap();
    for key in ["base_channels", "lgcm_stages", "lambda_s", "rtv_lambda", "use_hcg", "mask_mode", "seed"] {
        assert!(obj.contains_key(key), "{key}");
    }
    assert_eq!(v["lgcm_stages"], 8);
}

#[test]
fn gen_data_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    textwipe(&["gen-data", "--out", p(&data), "--n", "3", "--size", "32", "--seed", "4"]);
    for sub in ["input", "gt", "ann"] {
        assert_eq!(std::fs::read_dir(data.join(sub)).unwrap().count(), 3, "{sub}");
    }
    let gt = data.join("gt");
    let same = first_json(&textwipe(&["eval", "--pred", p(&gt), "--gt", p(&gt)]));
    assert_eq!(same["mse"], 0.0);
    assert_eq!(same["n_images"], 3);
    assert!(same["fdist"].as_f64().unwrap() < 1e-6);

    let input = data.join("input");
    let diff = first_json(&textwipe(&["eval", "--pred", p(&input), "--gt", p(&gt), "--no-fdist", "--ssim", "single"]));
    assert!(diff["mse"].as_f64().unwrap() > 0.0);
    assert!(diff["fdist"].is_null());
}

#[test]
fn structure_writes_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    textwipe(&["gen-data", "--out", p(&data), "--n", "1", "--size", "32"]);
    let img = std::fs::read_dir(data.join("input")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("s.png");
    textwipe(&["structure", "--image", p(&img), "--out", p(&out)]);
    assert!(out.exists());
}

#[test]
fn train_resume_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    textwipe(&["gen-data", "--out", p(&data), "--n", "2", "--size", "32"]);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"base_channels": 8, "lgcm_stages": 1, "transformer_layers": 1, "transformer_heads": 2,
            "model_dim": 16, "ffn_dim": 16, "context_dim": 8, "max_token_side": 2,
            "image_size": 32, "max_steps": 2, "checkpoint_every": 1, "log_every": 1, "rtv_iterations": 1}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = textwipe(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let line = first_json(&out);
    assert_eq!(line["step"], 1);
    for f in ["config.json", "train_log.jsonl", "ckpt_000001.safetensors", "ckpt_000002.safetensors", "final.safetensors"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // resuming a finished run adds no steps
    textwipe(&["train", "--data", p(&data), "--out", p(&run), "--resume", p(&run.join("final.safetensors"))]);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let img = std::fs::read_dir(data.join("input")).unwrap().next().unwrap().unwrap().path();
    let pred = dir.path().join("pred");
    textwipe(&["infer", "--ckpt", p(&run.join("final.safetensors")), "--image", p(&img), "--out", p(&pred)]);
    for f in ["i_out.png", "i_com.png", "s_in.png", "s_out.png", "mask.png"] {
        assert!(pred.join(f).exists(), "{f}");
    }
    // no polygons: the composite is the input
    let a = textwipe_core::Image::load(pred.join("i_com.png")).unwrap();
    let b = textwipe_core::Image::load(&img).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"no_such_key": 1}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_textwipe"))
        .args(["structure", "--image", "x.png", "--out", "y.png", "--config", p(&cfg)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
