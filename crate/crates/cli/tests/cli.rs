use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lastlayer::harness::{read_report_csv, selfcheck::GradientFn};
use lastlayer::linalg::{Matrix, Vector};
use lastlayer::mlp::{backprop_mse, Checkpoint, Layer, LossAndGradients, Mlp};
use lastlayer_cli::{cmd_verify_with, EXIT_NUMERICAL};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lastlayer"));
    c.env_remove("LASTLAYER_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("schema_version = 1\n{body}")).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "case = \"case1\"\nepochs = 20\n");
    let out = dir.path().join("run");
    let o = run(&["train", "-c", &cfg, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(out.join("checkpoint.json")).unwrap();
    let log = fs::read_to_string(out.join("training_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,sigma_product\n"));
    assert_eq!(log.lines().count(), 21);
    let data = fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert!(data.starts_with("t,z,theta,z_dot\n"));
    assert_eq!(data.lines().count(), 3001);

    let o = run(&["train", "-c", &cfg, "--out", s(&out)]);
    assert_eq!(code(&o), 2, "overwrite without --force must be refused");

    let o = run(&["train", "-c", &cfg, "--out", s(&out), "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("checkpoint.json")).unwrap(), first);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["train", "-c", "/nonexistent/cfg.toml", "--out", s(&out)])), 2);
    let bad = write_config(dir.path(), "bad.toml", "case = \"case1\"\nnot_a_key = 3\n");
    assert_eq!(code(&run(&["train", "-c", &bad, "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "case = \"case2b\"\nepochs = 5\nlearning_rate = 1e300\n");
    let o = run(&["train", "-c", &cfg, "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_report_rows_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "case = \"case2a\"\nepochs = 20\n");
    let train_out = dir.path().join("train");
    assert_eq!(code(&run(&["train", "-c", &cfg, "--out", s(&train_out)])), 0);
    let ck = train_out.join("checkpoint.json");
    let sim_out = dir.path().join("sim");
    let o = run(&["simulate", "-c", &cfg, "--checkpoint", s(&ck), "--out", s(&sim_out), "--chart"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(sim_out.join("report.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "t,y_true,y_hat,e1,gamma,gamma_hat,p1_norm,p1_bound,z2_hat"
    );
    let rows = read_report_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 3001);
    assert_eq!(rows[0].t, 0.0);
    assert!(rows.iter().all(|r| r.e1 == r.y_hat - r.y_true));
    let svg = fs::read_to_string(sim_out.join("prediction.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<path"));
    assert!(sim_out.join("summary.txt").exists());
}

#[test]
fn simulate_shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let small = write_config(dir.path(), "small.toml", "case = \"case1\"\nepochs = 1\nnet_shape = [2, 4, 1]\n");
    let preset = write_config(dir.path(), "preset.toml", "case = \"case1\"\n");
    let train_out = dir.path().join("train");
    assert_eq!(code(&run(&["train", "-c", &small, "--out", s(&train_out)])), 0);
    let o = run(&[
        "simulate",
        "-c",
        &preset,
        "--checkpoint",
        s(&train_out.join("checkpoint.json")),
        "--out",
        s(&dir.path().join("sim")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_simulation_keeps_artifacts_and_exits_3() {
    // ŷ = 1000 − 100z feeds back through ẋ₁ = ŷ and runs away
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "case = \"case2b\"\nnet_shape = [2, 1, 1]\nt_online = 2.0\ntrailing_window = 1.0\n");
    let net = Mlp::new(vec![
        Layer::new(Matrix::from_vec(1, 2, vec![-10.0, 0.0]).unwrap(), Vector::from([100.0])).unwrap(),
        Layer::new(Matrix::from_vec(1, 1, vec![10.0]).unwrap(), Vector::from([0.0])).unwrap(),
    ])
    .unwrap();
    let ck = dir.path().join("ck.json");
    fs::write(&ck, Checkpoint::new(&net, None, 0, 0).to_json().unwrap()).unwrap();
    let out = dir.path().join("sim");
    let o = run(&["simulate", "-c", &cfg, "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    let rows = read_report_csv(fs::File::open(out.join("report.csv")).unwrap()).unwrap();
    assert!(!rows.is_empty() && rows.len() < 201);
    assert!(fs::read_to_string(out.join("summary.txt")).unwrap().contains("run stopped"));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "case = \"case1\"\nepochs = 1\n");
    let target = dir.path().join("from_env");
    let o = bin().args(["train", "-c", &cfg]).env("LASTLAYER_OUT", &target).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("checkpoint.json").exists());
}

#[test]
fn verify_passes_and_echoes_tolerances() {
    let o = run(&["verify"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.contains("tolerances:"));
    assert!(stdout.contains("rel 1e-5 / abs 1e-8"));
    assert!(!stdout.contains("FAIL"));
}

fn off_by_one_bias(net: &Mlp, xs: &[Vector], ys: &[Vector]) -> lastlayer::Result<LossAndGradients> {
    let mut lg = backprop_mse(net, xs, ys)?;
    let last = lg.gradients.layers.len() - 1;
    lg.gradients.layers[last].bias[0] += 1.0;
    Ok(lg)
}

#[test]
fn verify_names_the_broken_parameter() {
    let broken: GradientFn = off_by_one_bias;
    let mut out = Vec::new();
    let err = cmd_verify_with(broken, &mut out).unwrap_err();
    assert_eq!(err.code, EXIT_NUMERICAL);
    let text = String::from_utf8(out).unwrap();
    // bias of the output layer sits at the end of the flat vector
    assert!(text.contains("#312 b4[0]"), "{text}");
    assert!(text.contains("FAIL backprop"));
}

#[test]
fn quick_reproduce_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rep");
    let o = run(&["reproduce", "--epochs", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for case in ["case1", "case2a", "case2b"] {
        for f in ["config.toml", "checkpoint.json", "training_log.csv", "report.csv"] {
            assert!(out.join(case).join(f).exists(), "{case}/{f}");
        }
        let rows = read_report_csv(fs::File::open(out.join(case).join("report.csv")).unwrap()).unwrap();
        assert_eq!(rows.len(), 3001);
    }
    for f in ["outputs.svg", "errors.svg", "perturbation.svg", "bound_series.csv", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("Case II.a"));
    assert_eq!(code(&run(&["reproduce", "--epochs", "3", "--out", s(&out)])), 2);
}
