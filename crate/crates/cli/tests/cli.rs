use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_RESIDUAL: &str = r#"
[model]
kind = "residual"
blocks = 2
iterations = 3
width = 6

[train]
steps = 30
batch_size = 4
log_every = 10
seed = 3

[eval]
examples = 40
"#;

const SMALL_GRID: &str = r#"
[model]
kind = "grid"
blocks = 2
iterations = 2
channels = 2
size = 8

[train]
steps = 5
batch_size = 2
log_every = 1
variance_window = 3

[eval]
examples = 8
"#;

fn pact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pact"))
        .args(args)
        .env_remove("PACT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn train_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_RESIDUAL);
    let out = tmp.path().join("run");
    let res = pact(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    for name in ["checkpoint.pact", "metrics.csv", "resolved.toml", "eval.csv"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let header = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,loss,loglik,penalty,mean_n_block1,mean_n_block2,flops,accuracy,grad_logvar,wall_ms\n"));
    // logged at steps 1, 10, 20, 30
    assert_eq!(data_rows(&out.join("metrics.csv")).len(), 4);
    assert_eq!(data_rows(&out.join("eval.csv")).len(), 4);
    let resolved = fs::read_to_string(out.join("resolved.toml")).unwrap();
    assert!(resolved.contains("optimizer = \"sgd-momentum\""), "{resolved}");
    assert!(resolved.contains("learning_rate"), "{resolved}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nsteps = 10\nbatchsize = 4\n");
    let res = pact(&["train", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("batchsize"), "{}", stderr(&res));
}

#[test]
fn malformed_flags_are_usage_errors() {
    let res = pact(&["sweep-tau", "--tau", "0.1,abc"]);
    assert_eq!(res.status.code(), Some(2));
    let res = pact(&["train", "--mode", "sideways"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn thresholded_training_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_RESIDUAL);
    let res = pact(&["train", "--config", &cfg, "--mode", "thresholded", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL_RESIDUAL.replace("seed = 3", "seed = 3\nlearning_rate = 1e300");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("run");
    let res = pact(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1), "{}", stderr(&res));
    let rows = data_rows(&out.join("metrics.csv"));
    assert!(rows.last().unwrap().contains("NaN"), "{rows:?}");
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_RESIDUAL);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let res = pact(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
        files.push((fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("eval.csv")).unwrap()));
    }
    assert_eq!(files[0], files[1]);

    let out = tmp.path().join("c");
    let res = pact(&["train", "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    assert_ne!(fs::read(out.join("metrics.csv")).unwrap(), files[0].0);
}

#[test]
fn eval_accepts_every_mode_and_flags_cross_family() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_RESIDUAL);
    let train_out = tmp.path().join("train");
    assert_eq!(pact(&["train", "--config", &cfg, "--out", train_out.to_str().unwrap()]).status.code(), Some(0));
    let ckpt = train_out.join("checkpoint.pact");

    let eval_out = tmp.path().join("eval");
    let args = ["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_out.to_str().unwrap()];
    let res = pact(&[&args[..], &["--mode", "thresholded"]].concat());
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let rows = data_rows(&eval_out.join("eval.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("thresholded,relaxed,false,"), "{rows:?}");

    let res = pact(&[&args[..], &["--mode", "act"]].concat());
    assert_eq!(res.status.code(), Some(0));
    assert!(stderr(&res).contains("crosses halting families"));
    assert!(data_rows(&eval_out.join("eval.csv"))[0].starts_with("act,relaxed,true,"));

    let res = pact(&args);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(data_rows(&eval_out.join("eval.csv")).len(), 4);
}

#[test]
fn missing_or_corrupt_checkpoint_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    let missing = tmp.path().join("nope.pact");
    let res = pact(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(2));
    let corrupt = tmp.path().join("bad.pact");
    fs::write(&corrupt, "not a checkpoint\n").unwrap();
    let res = pact(&["eval", "--checkpoint", corrupt.to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_tau() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_RESIDUAL);
    let out = tmp.path().join("sweep");
    let res = pact(&["sweep-tau", "--config", &cfg, "--tau", "0.001,0.01,0.1", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let text = fs::read_to_string(out.join("sweep_tau.csv")).unwrap();
    assert!(text.starts_with("tau,accuracy,flops,mean_n\n"));
    assert_eq!(data_rows(&out.join("sweep_tau.csv")).len(), 3);
    assert_eq!(String::from_utf8(res.stdout).unwrap(), text);
}

#[test]
fn variance_covers_both_estimators_and_records_optimizers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_GRID);
    let out = tmp.path().join("var");
    let res = pact(&["variance", "--config", &cfg, "--groupings", "1,2", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let rows = data_rows(&out.join("variance.csv"));
    let blocks: std::collections::BTreeSet<(String, String)> = rows
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[1].to_string(), f[2].to_string())
        })
        .collect();
    assert_eq!(blocks.len(), 4, "{blocks:?}");
    let resolved = fs::read_to_string(out.join("resolved.toml")).unwrap();
    let table: toml::Table = resolved.parse().unwrap();
    let variance = table["variance"].as_table().unwrap();
    assert_eq!(variance["reinforce"]["optimizer"].as_str(), Some("adam"));
    assert_eq!(variance["concrete"]["optimizer"].as_str(), Some("sgd-momentum"));

    let res = pact(&["variance", "--config", &cfg, "--groupings", "1,1", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn ponder_demo_default_and_custom_tail() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ponder");
    let res = pact(&["ponder-demo", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let text = fs::read_to_string(out.join("ponder_demo.csv")).unwrap();
    assert!(text.starts_with("h1,rho\n"));
    assert_eq!(data_rows(&out.join("ponder_demo.csv")).len(), 200);

    let res = pact(&["ponder-demo", "--tail", "0.5,0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(data_rows(&out.join("ponder_demo.csv")).len(), 200);

    let res = pact(&["ponder-demo", "--tail", "0.5,1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let target = tmp.path().join("from-env");
    let res = Command::new(env!("CARGO_BIN_EXE_pact"))
        .args(["ponder-demo", "--points", "5"])
        .env("PACT_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(data_rows(&target.join("ponder_demo.csv")).len(), 5);

    let cfg_dir = tmp.path().join("from-config");
    let text = format!("{SMALL_RESIDUAL}\n[output]\ndir = {:?}\n", cfg_dir.to_str().unwrap());
    let cfg = write_config(tmp.path(), &text.replace("steps = 30", "steps = 2"));
    let res = Command::new(env!("CARGO_BIN_EXE_pact"))
        .args(["train", "--config", &cfg])
        .env("PACT_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    assert!(cfg_dir.join("metrics.csv").is_file());
}
