use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lmjf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmjf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = "\
latent_dim = 3
vae_hidden = [16]
vae_epochs = 8
clusters = 2
dyn_epochs = 10
particles = 10
seed = 5
";

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), SMALL).unwrap();

    let out = ok(&lmjf(&["gen", "--preset", "train", "--seed", "1", "--out", "train.lmjf"], d));
    assert!(out.contains("600 frames"));
    ok(&lmjf(
        &["gen", "--preset", "stop", "--seed", "2", "--out", "stop.lmjf", "--labels", "stop.csv"],
        d,
    ));

    let out = ok(&lmjf(
        &["train", "--config", "cfg.toml", "--dataset", "train.lmjf", "--bundle", "model"],
        d,
    ));
    assert!(out.contains("threshold"));
    assert!(d.join("model/calibration.toml").is_file());

    let out = ok(&lmjf(
        &["score", "--bundle", "model", "--dataset", "stop.lmjf", "--report", "stop_report.csv"],
        d,
    ));
    assert!(out.contains("scored 339 frames"));
    let report = fs::read_to_string(d.join("stop_report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("frame,y,thresh,raw_flag,final_flag,winning_cluster"));
    assert_eq!(lines.count(), 339);
    let svg = fs::read_to_string(d.join("stop_report.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let out = ok(&lmjf(&["eval", "--report", "stop_report.csv", "--labels", "stop.csv"], d));
    for key in ["precision", "recall", "auc", "normal_flagged"] {
        assert!(out.lines().any(|l| l.starts_with(key)), "{out}");
    }

    ok(&lmjf(&["encode", "--bundle", "model", "--dataset", "stop.lmjf", "--out", "stop_latents.csv"], d));
    ok(&lmjf(
        &["score", "--bundle", "model", "--dataset", "stop_latents.csv", "--report", "from_latents.csv"],
        d,
    ));
    assert_eq!(fs::read(d.join("from_latents.csv")).unwrap(), report.as_bytes());
}

#[test]
fn gen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        ok(&lmjf(
            &["gen", "--preset", "uturn", "--seed", "4", "--out", &format!("{name}.lmjf"), "--labels", &format!("{name}.csv")],
            d,
        ));
    }
    assert_eq!(fs::read(d.join("a.lmjf")).unwrap(), fs::read(d.join("b.lmjf")).unwrap());
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
}

#[test]
fn failures_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = lmjf(&["gen", "--preset", "sideways", "--out", "x.lmjf"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sideways"));

    let out = lmjf(&["score", "--bundle", "missing", "--dataset", "x.lmjf", "--report", "r.csv"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    fs::write(d.join("tiny.toml"), "clusters = 5000\nvae_epochs = 1\nlatent_dim = 2\nvae_hidden = [4]\n").unwrap();
    ok(&lmjf(&["gen", "--preset", "train", "--out", "t.lmjf"], d));
    let out = lmjf(&["train", "--config", "tiny.toml", "--dataset", "t.lmjf", "--bundle", "b"], d);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage failed"), "{err}");

    let out = lmjf(&["train", "--dataset", "t.lmjf"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bundle"));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&lmjf(&["config"], dir.path()));
    assert!(text.contains("clusters = 6"));
    assert!(text.contains("window = 3"));
    fs::write(dir.path().join("c.toml"), &text).unwrap();
    let parsed: lmjf_core::PipelineConfig = lmjf_core::PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(parsed, lmjf_core::PipelineConfig::default());
}
