use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.conf")
}

fn ssda(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssda"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_key_is_a_config_error_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssda(&["gradcheck", "--set", "lrr=0.1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));
}

#[test]
fn bad_config_file_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "lookback = 16\nhorizon = four\n").unwrap();
    let o = ssda(&["render", "--config", conf.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));
}

#[test]
fn missing_checkpoint_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf();
    let o = ssda(
        &["forecast", "--config", conf.to_str().unwrap(), "--checkpoint", "/nonexistent/model.ntf"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two_and_help_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ssda(&["frobnicate"], dir.path()).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_ssda")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn gradcheck_fault_injection_fails_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf();
    let conf = conf.to_str().unwrap();
    let ok = ssda(&["gradcheck", "--config", conf, "--groups", "lora,beta"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let bad = ssda(&["gradcheck", "--config", conf, "--groups", "lora,beta", "--fault", "1.1"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let report = json(&dir.path().join("gradcheck.json"));
    assert_eq!(report["gradcheck"]["passed"], false);
    assert_eq!(report["gradcheck"]["fault"], 1.1);
}

#[test]
fn pss_and_synth_image_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf();
    let conf = conf.to_str().unwrap();
    let o = ssda(&["synth-image", "--config", conf, "--alpha", "2", "--size", "64"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = dir.path().join("note.txt");
    std::fs::write(&text, "The quick brown fox jumps over the lazy dog.\n".repeat(20)).unwrap();
    let img = dir.path().join("synth.pgm");
    let o = ssda(
        &[
            "pss",
            "--config",
            conf,
            "--image",
            img.to_str().unwrap(),
            "--text",
            text.to_str().unwrap(),
            "--size",
            "64",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pss = json(&dir.path().join("pss.json"));
    assert!(pss["mean_alpha"].as_f64().unwrap().is_finite());
    assert!(pss["config"].is_object());
    assert_eq!(pss["images"]["files"].as_array().unwrap().len(), 1);
    assert!(pss["images"]["std_alpha"].is_null());
    assert!(pss["text"]["alpha"].as_f64().unwrap().is_finite());
    let synth = json(&dir.path().join("synth.json"));
    assert!(synth["config"].is_object());
}

#[test]
fn train_then_eval_and_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf();
    let conf = conf.to_str().unwrap();
    let o = ssda(&["train", "--config", conf], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("model.ntf");
    let snap = dir.path().join("config.txt");
    assert!(ckpt.is_file() && snap.is_file());
    let report = json(&dir.path().join("report.json"));
    let test_mse = report["report"]["test"]["mse"].as_f64().unwrap();

    // the snapshot alone reproduces the run's configuration
    let o = ssda(&["eval", "--config", snap.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = json(&dir.path().join("eval.json"));
    assert_eq!(eval["config"], report["config"]);
    let eval_mse = eval.pointer("/test/mse").and_then(|v| v.as_f64());
    assert_eq!(eval_mse, Some(test_mse), "{eval}");

    let o = ssda(&["forecast", "--config", conf, "--checkpoint", ckpt.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("forecast.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,variable,prediction,truth"));
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    let o = ssda(
        &["forecast", "--config", conf, "--checkpoint", ckpt.to_str().unwrap(), "--set", "d_model=32"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}
