use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"phantom": {"grid_size": 16}, "split": [0.5, 0.25, 0.25]},
  "model": {"net": {"gen_channels": [4, 4, 4, 4], "disc_channels": [4, 4, 4, 4, 4],
                    "blocks_per_level": 1, "norm_groups": 2, "temb_sin_dim": 8,
                    "temb_dim": 8, "text_concat_channels": 2},
            "text_dim": 6, "rec_hidden": 8},
  "omta": {"d_k": 4, "max_iters": 8, "eps": 0.1},
  "training": {"batch_size": 3, "epochs": 2, "checkpoint_every": 1},
  "eval": {"val_every": 1}
}"#;

fn mcad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcad"))
        .current_dir(dir)
        .env_remove("MCAD_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mcad(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(
        dir.path(),
        &["--config", "tiny.json", "gen-data", "--out", "data", "--subjects", "8", "--seed", "5"],
    );
    dir
}

#[test]
fn print_config_merges_defaults() {
    let dir = setup();
    let text = ok(dir.path(), &["--config", "tiny.json", "--print-config"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["data"]["phantom"]["grid_size"], 16);
    assert_eq!(v["schedule"]["steps"], 5);
    assert_eq!(v["training"]["lambda_img"], 100.0);
}

#[test]
fn exit_codes_by_error_class() {
    let dir = setup();
    let p = dir.path();
    fs::write(p.join("bad.json"), r#"{"training": {"batch_size": 0}}"#).unwrap();
    fs::write(p.join("unknown.json"), r#"{"training": {"bogus": 1}}"#).unwrap();
    assert_eq!(mcad(p, &["--config", "bad.json", "--print-config"]).status.code(), Some(2));
    assert_eq!(mcad(p, &["--config", "unknown.json", "--print-config"]).status.code(), Some(2));
    assert_eq!(mcad(p, &["--threads", "0", "--print-config"]).status.code(), Some(2));
    assert_eq!(mcad(p, &["--config", "missing.json", "--print-config"]).status.code(), Some(3));
    // Default config expects 32x32 images; the dataset is 16x16.
    let out = mcad(p, &["train", "--data", "data", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let manifest = |d: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(p.join(d).join("manifest.json")).unwrap()).unwrap()
    };
    ok(p, &["gen-data", "--out", "a", "--subjects", "3"]);
    assert_eq!(manifest("a")["master_seed"], 0);
    let out = Command::new(env!("CARGO_BIN_EXE_mcad"))
        .current_dir(p)
        .env("MCAD_SEED", "11")
        .args(["gen-data", "--out", "b", "--subjects", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(manifest("b")["master_seed"], 11);
    let out = Command::new(env!("CARGO_BIN_EXE_mcad"))
        .current_dir(p)
        .env("MCAD_SEED", "11")
        .args(["gen-data", "--out", "c", "--subjects", "3", "--seed", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(manifest("c")["master_seed"], 4);
    ok(p, &["gen-data", "--out", "empty", "--subjects", "0"]);
    assert!(p.join("empty/tabular.csv").exists());
}

#[test]
fn train_sample_eval_resume() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "tiny.json", "train", "--data", "data", "--out", "run"]);
    for f in ["config.json", "manifest.json", "final.mckp", "ckpt_epoch001.mckp", "ckpt_epoch002.mckp"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(p.join("run/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert_eq!(fs::read_to_string(p.join("run/val.jsonl")).unwrap().lines().count(), 2);

    // Resuming from epoch 1 reproduces the uninterrupted run exactly.
    fs::copy(p.join("run/log.jsonl"), p.join("full_log.jsonl")).unwrap();
    fs::create_dir(p.join("run2")).unwrap();
    let head: Vec<&str> = log.lines().take(2).collect();
    fs::write(p.join("run2/log.jsonl"), head.join("\n") + "\n").unwrap();
    ok(
        p,
        &["--config", "tiny.json", "train", "--data", "data", "--out", "run2", "--resume", "run/ckpt_epoch001.mckp"],
    );
    assert_eq!(fs::read(p.join("run/final.mckp")).unwrap(), fs::read(p.join("run2/final.mckp")).unwrap());
    assert_eq!(fs::read_to_string(p.join("run2/log.jsonl")).unwrap(), log);

    // A resume with a different config is refused.
    let mut other: serde_json::Value = serde_json::from_str(TINY).unwrap();
    other["training"]["lr_g"] = serde_json::json!(1e-3);
    fs::write(p.join("other.json"), other.to_string()).unwrap();
    let out = mcad(
        p,
        &["--config", "other.json", "train", "--data", "data", "--out", "run3", "--resume", "run/final.mckp"],
    );
    assert_eq!(out.status.code(), Some(2));

    ok(p, &["sample", "--ckpt", "run/final.mckp", "--data", "data", "--out", "est", "--trace"]);
    let ests: Vec<_> = fs::read_dir(p.join("est"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "mcpt"))
        .collect();
    assert_eq!(ests.len(), 2);
    let pgm = fs::read_to_string(p.join("est/preview/sub0006.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n16 16\n255\n"));
    assert_eq!(fs::read_dir(p.join("est/trace/sub0006")).unwrap().count(), 15);

    // Sampling is deterministic.
    ok(p, &["sample", "--ckpt", "run/final.mckp", "--data", "data", "--out", "est2"]);
    assert_eq!(
        fs::read(p.join("est/sub0007.mcpt")).unwrap(),
        fs::read(p.join("est2/sub0007.mcpt")).unwrap()
    );

    ok(p, &["eval", "--ref", "data", "--est", "est", "--out", "rep/report.json"]);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(rep["per_subject"].as_array().unwrap().len(), 2);
    assert!(rep["mean"]["psnr"].as_f64().unwrap().is_finite());

    // Missing estimates are listed by id.
    let out = mcad(p, &["eval", "--ref", "data", "--est", "est", "--out", "r.json", "--split", "all"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sub0000"));

    // Self-comparison of flat directories: identical images.
    let out = ok(p, &["eval", "--ref", "est", "--est", "est2", "--out", "self.json"]);
    assert!(out.contains("SSIM 1.0000"), "{out}");
}

#[test]
fn zero_epochs_still_writes_checkpoint() {
    let dir = setup();
    let p = dir.path();
    let mut c: serde_json::Value = serde_json::from_str(TINY).unwrap();
    c["training"]["epochs"] = serde_json::json!(0);
    fs::write(p.join("zero.json"), c.to_string()).unwrap();
    ok(p, &["--config", "zero.json", "train", "--data", "data", "--out", "run"]);
    assert!(p.join("run/final.mckp").exists());
    assert_eq!(fs::read_to_string(p.join("run/log.jsonl")).unwrap(), "");
}

#[test]
fn ablate_writes_table() {
    let dir = setup();
    let p = dir.path();
    ok(
        p,
        &["--config", "tiny.json", "ablate", "--data", "data", "--out", "abl", "--variants", "baseline,adv"],
    );
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("abl/table.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["variant"], "baseline");
    assert!(rows[0]["note"].is_string());
    assert_eq!(rows[1]["adv"], true);
    for f in ["config.json", "log.jsonl", "final.mckp", "report.json"] {
        assert!(p.join("abl/adv").join(f).exists(), "{f}");
    }
    let out = mcad(p, &["--config", "tiny.json", "ablate", "--data", "data", "--out", "x", "--variants", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-data", "--out", "a", "--subjects", "240", "--seed", "0"]);
    ok(p, &["gen-data", "--out", "b", "--subjects", "240", "--seed", "0"]);
    assert_eq!(read_tree(&p.join("a")), read_tree(&p.join("b")));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("a/manifest.json")).unwrap()).unwrap();
    let len = |k: &str| m["split"][k].as_array().unwrap().len();
    assert_eq!((len("train"), len("val"), len("test")), (200, 20, 20));
    assert_eq!(m["config"]["schedule"]["steps"], 5);
}

#[test]
fn shipped_configs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for name in ["paper.json", "desk.json"] {
        let text = ok(p, &["--config", root.join(name).to_str().unwrap(), "--print-config"]);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schedule"]["steps"], 5, "{name}");
        assert_eq!(v["training"]["lambda_img"], 100.0);
        assert_eq!(v["training"]["lambda_text"], 10.0);
        assert_eq!(v["training"]["lr_g"], 2e-4);
        assert_eq!(v["training"]["lr_d"], 1.5e-4);
    }
    let mut c: serde_json::Value = serde_json::from_str(TINY).unwrap();
    c["training"]["toggles"] = serde_json::json!({"ca": true, "omta": true});
    fs::write(p.join("both.json"), c.to_string()).unwrap();
    let out = mcad(p, &["--config", "both.json", "--print-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mutually exclusive"));
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["eval", "--ref", "data", "--est", "data", "--out", "self.json", "--split", "all"]);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("self.json")).unwrap()).unwrap();
    let subjects = rep["per_subject"].as_array().unwrap();
    assert_eq!(subjects.len(), 8);
    for s in subjects {
        assert_eq!(s["nmse"], 0.0);
        assert_eq!(s["ssim"], 1.0);
    }
    // The aggregate is the mean of the per-subject entries.
    ok(p, &["--config", "tiny.json", "train", "--data", "data", "--out", "run"]);
    ok(p, &["sample", "--ckpt", "run/final.mckp", "--data", "data", "--out", "est", "--split", "all"]);
    ok(p, &["eval", "--ref", "data", "--est", "est", "--out", "r.json", "--split", "all"]);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    let per = rep["per_subject"].as_array().unwrap();
    for k in ["psnr", "ssim", "nmse"] {
        let mean = per.iter().map(|s| s[k].as_f64().unwrap()).sum::<f64>() / per.len() as f64;
        assert!((mean - rep["mean"][k].as_f64().unwrap()).abs() <= 1e-12, "{k}");
    }
}
