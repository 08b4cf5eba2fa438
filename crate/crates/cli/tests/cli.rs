use std::path::Path;
use std::process::{Command, Output};

fn amogp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amogp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"
version = "amogp-v1"

[data]
dataset = "dataset.csv"

[output]
dir = "run"

[model]
kind = "shallow_gp"
inducing_middle = 6

[train]
max_steps = 3
seed = 0
"#;

#[test]
fn generate_writes_complete_deterministic_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amogp(&["generate", "--seed", "1", "--out", "a"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dataset = read(&tmp.path().join("a/dataset.csv"));
    let truth = read(&tmp.path().join("a/truth.csv"));
    assert!(dataset.starts_with("# amogp-v1\noutput_index,x,y,split\n"));
    assert!(truth.starts_with("# amogp-v1\noutput_index,x,aligned,latent,clean\n"));
    // 500 rows per output plus version and header lines
    assert_eq!(dataset.lines().count(), 2 + 1000);
    assert_eq!(dataset.matches(",train\n").count(), 800);
    assert_eq!(dataset.matches(",test\n").count(), 200);

    let out = amogp(&["generate", "--seed", "1", "--out", "b"], tmp.path());
    assert!(out.status.success());
    assert_eq!(dataset, read(&tmp.path().join("b/dataset.csv")));
    assert_eq!(truth, read(&tmp.path().join("b/truth.csv")));
}

#[test]
fn invalid_gap_flag_exits_2_and_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amogp(&["generate", "--gap2", "0.9:0.2"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--gap2"), "stderr: {stderr}");
    assert!(!tmp.path().join("dataset.csv").exists());
}

#[test]
fn train_writes_model_trace_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let status = amogp(
        &["generate", "--n-points", "40", "--noise-sd", "0.02"],
        tmp.path(),
    );
    assert!(status.status.success());
    let config = write_config(tmp.path(), SMALL_CONFIG);
    let out = amogp(&["train", "--config", config.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let model = read(&tmp.path().join("run/model.toml"));
    assert!(model.contains("version = \"amogp-v1\""));
    let trace = read(&tmp.path().join("run/trace.csv"));
    assert!(trace.starts_with("# amogp-v1\nstep,elbo,param_norm,grad_norm,clip_events"));
    assert_eq!(trace.lines().count(), 2 + 3);
    let metrics = read(&tmp.path().join("run/metrics.toml"));
    assert!(metrics.contains("[test_log_likelihood]"));
    assert!(metrics.contains("output_0 ="));
    assert!(metrics.contains("output_1 ="));
    assert!(metrics.contains("overall ="));
}

#[test]
fn train_with_zero_steps_saves_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(amogp(&["generate", "--n-points", "40"], tmp.path()).status.success());
    let config = write_config(tmp.path(), SMALL_CONFIG);
    let out = amogp(
        &["train", "--config", config.to_str().unwrap(), "--max-steps", "0"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // the saved document must match a freshly built model exactly
    let loaded = amogp_cli::io::read_dataset(&tmp.path().join("dataset.csv")).unwrap();
    let train = loaded.train().unwrap();
    let mut spec = amogp::baseline_spec(amogp::BaselineKind::ShallowGp, 2);
    spec.inducing_middle = 6;
    let init = amogp::AmoGpModel::build(&spec, &train).unwrap();
    assert_eq!(
        read(&tmp.path().join("run/model.toml")),
        amogp::model_to_toml(&init).unwrap()
    );
    assert!(tmp.path().join("run/metrics.toml").exists());
}

#[test]
fn train_with_missing_data_file_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_CONFIG);
    let out = amogp(&["train", "--config", config.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn predict_is_deterministic_with_nonnegative_variances() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(amogp(&["generate", "--n-points", "40"], tmp.path()).status.success());
    let config = write_config(tmp.path(), SMALL_CONFIG);
    assert!(amogp(
        &["train", "--config", config.to_str().unwrap(), "--max-steps", "0"],
        tmp.path()
    )
    .status
    .success());

    let base = [
        "predict", "--model", "run/model.toml", "--output", "1", "--grid", "0:1:11",
        "--samples", "2", "--seed", "7",
    ];
    let mut a = base.to_vec();
    a.extend(["--out", "p1.csv"]);
    let mut b = base.to_vec();
    b.extend(["--out", "p2.csv"]);
    assert!(amogp(&a, tmp.path()).status.success());
    assert!(amogp(&b, tmp.path()).status.success());
    let p1 = read(&tmp.path().join("p1.csv"));
    assert_eq!(p1, read(&tmp.path().join("p2.csv")));

    let mut lines = p1.lines();
    assert_eq!(lines.next(), Some("# amogp-v1"));
    assert_eq!(lines.next(), Some("x,mean,variance,sample_0,sample_1"));
    let mut rows = 0;
    for line in lines {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 5);
        assert!(fields[2] >= 0.0);
        rows += 1;
    }
    assert_eq!(rows, 11);
}

#[test]
fn decompose_reports_identity_for_frozen_alignment() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(amogp(&["generate", "--n-points", "40"], tmp.path()).status.success());
    // amo layout: output 0 keeps the identity alignment
    let config = write_config(
        tmp.path(),
        &SMALL_CONFIG.replace("kind = \"shallow_gp\"", "kind = \"amo\""),
    );
    assert!(amogp(
        &["train", "--config", config.to_str().unwrap(), "--max-steps", "0"],
        tmp.path()
    )
    .status
    .success());
    assert!(amogp(
        &[
            "predict", "--model", "run/model.toml", "--output", "0", "--grid", "0:1:5",
            "--decompose", "--out", "d.csv",
        ],
        tmp.path()
    )
    .status
    .success());
    let text = read(&tmp.path().join("d.csv"));
    let mut saw = 0;
    for line in text.lines().skip(2) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        if fields[1] == "alignment" {
            let x: f64 = fields[0].parse().unwrap();
            let mean: f64 = fields[2].parse().unwrap();
            let var: f64 = fields[3].parse().unwrap();
            assert_eq!(mean, x);
            assert_eq!(var, 0.0);
            saw += 1;
        }
    }
    assert_eq!(saw, 5);
}
