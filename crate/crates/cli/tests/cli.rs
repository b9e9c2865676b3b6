use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tdmr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdmr")).args(args).output().expect("tdmr runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, criterion: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{name}.toml"));
    let text = format!(
        r#"name = "{name}"
output_dir = "{out}"
data_dir = "{data}"

[channel]
n_bits = 3000
train_sectors = 2
test_sectors = 1
calibration_sectors = 1
seed = 5

[equalizer]
layer_sizes = [22, 4, 1]
decision_delay = 0

[training]
criterion = "{criterion}"
epochs = 1
"#,
        out = dir.join("runs").display(),
        data = dir.join("data").display(),
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_train_eval_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mse = write_config(dir.path(), "small_mse", "mse");
    let ce = write_config(dir.path(), "small_ce", "ce");

    let o = tdmr(&["train", mse.to_str().unwrap()]);
    assert!(!o.status.success(), "training without data must fail");
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing data"));

    let o = tdmr(&["gen", mse.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("data/manifest.json").exists());

    for cfg in [&mse, &ce] {
        let o = tdmr(&["train", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("22-4-1"));
    }
    let runs = dir.path().join("runs");
    for file in ["small_mse_curves.csv", "small_mse_summary.json", "small_mse_checkpoint.json", "small_ce_summary.json"] {
        assert!(runs.join(file).exists(), "{file} missing");
    }
    let curves = fs::read_to_string(runs.join("small_mse_curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,sector,mse,ce,ber\n"));
    assert_eq!(curves.lines().count(), 3);

    let o = tdmr(&[
        "eval",
        runs.join("small_mse_checkpoint.json").to_str().unwrap(),
        "--data",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"ber\""));

    let a = runs.join("small_mse_summary.json");
    let b = runs.join("small_ce_summary.json");
    let o = tdmr(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("reduction"));

    let o = tdmr(&["compare", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert!(stdout(&o).contains("reduction 0.00%"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[training]\nlearning_rte = 0.01\n").unwrap();
    let o = tdmr(&["train", path.to_str().unwrap(), "--gen"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rte"));
}

#[test]
fn chansim_writes_archive() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sectors");
    let o = Command::new(env!("CARGO_BIN_EXE_chansim"))
        .args(["gen", "--sectors", "1", "--bits", "2000", "--awgn", "0.1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("train_000.bin").exists());
    assert!(out.join("test_000.bin").exists());
    assert!(out.join("manifest.json").exists());
}
