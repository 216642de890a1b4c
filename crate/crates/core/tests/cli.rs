use std::path::Path;
use std::process::Command;

use wholebody::train::RunConfig;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::toy();
    cfg.optim.batch_size = 2;
    cfg.optim.epochs = 2;
    cfg.optim.decay_epoch = Some(1);
    cfg.optim.eval_every = 2;
    cfg.data.train_size = 4;
    cfg.data.test_size = 2;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn wholebody(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_wholebody")).args(args).output().unwrap()
}

#[test]
fn train_and_eval_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let r = wholebody(&["--config", cfg, "--out-dir", out, "train"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["checkpoint.json", "loss_curve.json", "report.json"] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }
    let ck = Path::new(out).join("checkpoint.json");
    let r = wholebody(&["--out-dir", out, "eval", "--checkpoint", ck.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("PA-MPVPE"));

    let data = dir.path().join("data");
    let r = wholebody(&["--config", cfg, "--out-dir", data.to_str().unwrap(), "gen-data"]);
    assert!(r.status.success());
    let test_file = data.join("test.wbd");
    let r = wholebody(&["--out-dir", out, "eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", test_file.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let r = wholebody(&["--config", missing.to_str().unwrap(), "train"]);
    assert_eq!(r.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
    v["optim"]["lr"] = serde_json::json!(-1.0);
    std::fs::write(&bad, v.to_string()).unwrap();
    let r = wholebody(&["--config", bad.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap(), "train"]);
    assert_eq!(r.status.code(), Some(2));

    let r = wholebody(&["--out-dir", dir.path().to_str().unwrap(), "ablate", "--studies", "nonsense"]);
    assert_eq!(r.status.code(), Some(2));
}
