use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fpimpute"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn data_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 6] = [
        ("mask", &["--input", "--rate", "--strategy", "--seed", "--out", "--schema"]),
        ("fit", &["--input", "--mask", "--config", "--method", "--seed", "--out", "--schema"]),
        ("impute", &["--model", "--input", "--mask", "--out", "--inference-iters", "--schema"]),
        ("eval", &["--pred", "--truth", "--mask", "--mode", "--schema"]),
        ("bench", &["--spec", "--jobs", "--out"]),
        ("init-study", &["--spec", "--jobs", "--out"]),
    ];
    for (sub, flags) in cases {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        let text = stdout(&o);
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help lacks {flag}");
        }
    }
}

#[test]
fn out_of_range_rate_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = run(&["mask", "--input", p(&data_file("sinusoidal.csv")), "--rate", "1.5", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("between 0 and 1"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_flag_is_rejected() {
    let o = run(&["eval", "--pred", "a.csv", "--truth", "b.csv", "--mask", "m.csv", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mask", "--input", "/nonexistent/x.csv", "--rate", "0.5", "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/x.csv"));
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let truth = data_file("linear-gaussian.csv");
    let mask = dir.path().join("m.csv");
    assert!(run(&["mask", "--input", p(&truth), "--rate", "0.25", "--seed", "3", "--out", p(&mask)]).status.success());
    for mode in ["all", "missing"] {
        let o = run(&["eval", "--pred", p(&truth), "--truth", p(&truth), "--mask", p(&mask), "--mode", mode]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).trim(), "rmse_sum 0.000000");
    }
}

#[test]
fn mask_is_deterministic_and_reports_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = data_file("rank-one.csv");
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = dir.path().join(name);
        let o = run(&["mask", "--input", p(&input), "--rate", "0.5", "--strategy", "mnar-uniform", "--seed", "9", "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("seed: 9"));
        outputs.push(fs::read(&out).unwrap());
        assert!(Path::new(&format!("{}.meta.toml", out.display())).exists());
    }
    assert_eq!(outputs[0], outputs[1]);
}

/// mask → fit → impute → eval on a bundled dataset, returning the score.
fn pipeline(dir: &Path, input: &Path, method: &str, extra_fit: &[&str]) -> f64 {
    let mask = dir.join("mask.csv");
    let model = dir.join(format!("{method}.model"));
    let filled = dir.join(format!("{method}.csv"));
    let steps: Vec<Vec<&str>> = vec![
        vec!["mask", "--input", p(input), "--rate", "0.5", "--strategy", "mnar-random", "--seed", "7", "--out", p(&mask)],
        [
            vec!["fit", "--input", p(input), "--mask", p(&mask), "--method", method, "--seed", "1", "--out", p(&model)],
            extra_fit.to_vec(),
        ]
        .concat(),
        vec!["impute", "--model", p(&model), "--input", p(input), "--mask", p(&mask), "--out", p(&filled)],
    ];
    for step in steps {
        let o = run(&step);
        assert!(o.status.success(), "{:?}: {}", step[0], stderr(&o));
    }
    let o = run(&["eval", "--pred", p(&filled), "--truth", p(input), "--mask", p(&mask)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    text.trim().strip_prefix("rmse_sum ").expect("summary line").parse().unwrap()
}

#[test]
fn generative_pipeline_beats_zero_fill() {
    let dir = tempfile::tempdir().unwrap();
    let input = data_file("sinusoidal.csv");
    let generative = pipeline(dir.path(), &input, "generative", &[]);
    let zero = pipeline(dir.path(), &input, "zero", &[]);
    assert!(generative.is_finite());
    assert!(generative < zero, "generative {generative} vs zero {zero}");
}

#[test]
fn imputed_file_keeps_observed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let input = data_file("mixed-binary.csv");
    let schema = data_file("mixed-binary.schema.toml");
    pipeline(dir.path(), &input, "knn", &["--schema", p(&schema)]);
    let original = fs::read_to_string(&input).unwrap();
    let filled = fs::read_to_string(dir.path().join("knn.csv")).unwrap();
    let mask = fs::read_to_string(dir.path().join("mask.csv")).unwrap();
    for ((o, f), m) in original.lines().zip(filled.lines()).zip(mask.lines()).skip(1) {
        for ((ov, fv), mv) in o.split(',').zip(f.split(',')).zip(m.split(',')) {
            if mv == "0" {
                assert_eq!(ov.parse::<f64>().unwrap().to_bits(), fv.parse::<f64>().unwrap().to_bits());
            } else {
                assert!(fv.parse::<f64>().unwrap().is_finite());
            }
        }
    }
}

#[test]
fn bench_writes_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        r#"
seeds = [1, 2]
rates = [0.25]
strategies = ["mnar-random"]
methods = ["generative", "mean", "knn"]
imputations = 2

[[datasets]]
synthetic = "linear-gaussian"
rows = 300

[baselines.generative.fit]
epochs = 3
"#,
    )
    .unwrap();
    let mut reports = Vec::new();
    for run_dir in ["one", "two"] {
        let out = dir.path().join(run_dir);
        let o = run(&["bench", "--spec", p(&spec), "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("seeds: [1, 2]"));
        for f in ["report.csv", "report.md", "manifest.json", "timings.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
        reports.push(fs::read(out.join("report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(String::from_utf8_lossy(&reports[0]).lines().count(), 1 + 2 * 3);
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        "seeds = [1]\nrates = [0.25]\nstrategies = [\"mnar-uniform\"]\nmethods = [\"zero\"]\n[[datasets]]\nsynthetic = \"rank-one\"\nrows = 200\n",
    )
    .unwrap();
    let target = dir.path().join("from-env");
    let o = bin()
        .args(["bench", "--spec", p(&spec)])
        .env("FPIMPUTE_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("report.csv").exists());
}

#[test]
fn bad_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "methods = [\"forest\"]\n[[datasets]]\nsynthetic = \"rank-one\"\n").unwrap();
    let o = run(&["bench", "--spec", p(&spec)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("forest"));
}
