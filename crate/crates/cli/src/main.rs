//! `fpimpute` command-line front end.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use fpimpute::baselines::{build_imputer, GenerativeConfig, METHOD_NAMES};
use fpimpute::data::{self, Dataset, MinMax, SchemaSpec};
use fpimpute::evaluation::{rmse_sum, RmseMode};
use fpimpute::generative::{GenerativeImputer, HeadKind, Inference};
use fpimpute::harness::{self, ExperimentSpec};
use fpimpute::missingness::{generate_mask, mask_to_csv, meta_to_toml, parse_mask_csv, IncompleteMatrix, MissingMask, Strategy};
use fpimpute::{ErrorKind, ImputeError};

#[derive(Parser, Debug)]
#[command(name = "fpimpute", version, about = "Missing-value imputation for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw an MNAR missingness mask for a fully observed CSV.
    Mask(MaskArgs),
    /// Train an imputer on a CSV (cells marked NA or by --mask are missing).
    Fit(FitArgs),
    /// Fill the missing cells of a CSV with a trained model.
    Impute(ImputeArgs),
    /// Score an imputed CSV against the ground truth.
    Eval(EvalArgs),
    /// Run a benchmark grid described by a spec file.
    Bench(BenchArgs),
    /// Compare initial fills of the generative method on a spec's datasets.
    InitStudy(BenchArgs),
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Fully observed input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Target fraction of missing cells, strictly between 0 and 1.
    #[arg(long, value_parser = parse_rate)]
    rate: f64,
    /// mnar-random (partial rows) or mnar-uniform (whole rows).
    #[arg(long, default_value = "mnar-random")]
    strategy: Strategy,
    /// Seed of all random draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output 0/1 mask CSV; generation metadata goes to `<out>.meta.toml`.
    #[arg(long)]
    out: PathBuf,
    /// Schema sidecar declaring binary, ordinal or categorical columns.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Training CSV; `NA` or empty fields are missing.
    #[arg(long)]
    input: PathBuf,
    /// Mask CSV (0/1, or a data file whose NA cells are missing) hiding more cells.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// TOML parameters: a `[baselines.<method>]` table, or the method's table at top level.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Imputation method.
    #[arg(long, default_value = "generative", value_parser = METHOD_NAMES)]
    method: String,
    /// Seed of initialization and training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Schema sidecar declaring binary, ordinal or categorical columns.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// CSV to complete; `NA` or empty fields are missing.
    #[arg(long)]
    input: PathBuf,
    /// Mask CSV hiding more cells.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output CSV, on the input's scale.
    #[arg(long)]
    out: PathBuf,
    /// Fixed-point iterations of the generative model; 0 iterates to convergence.
    /// Defaults to the training inference count.
    #[arg(long)]
    inference_iters: Option<usize>,
    /// Schema sidecar declaring binary, ordinal or categorical columns.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    /// Divide each feature's squared error by the row count.
    All,
    /// Divide by the feature's number of masked cells.
    Missing,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Imputed CSV.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth CSV with the same header.
    #[arg(long)]
    truth: PathBuf,
    /// Mask CSV naming the scored cells.
    #[arg(long)]
    mask: PathBuf,
    /// RMSE_Sum denominator.
    #[arg(long, value_enum, default_value = "all")]
    mode: ModeArg,
    /// Schema sidecar declaring binary, ordinal or categorical columns.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Worker threads; overrides the spec. 0 uses all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides the spec and FPIMPUTE_OUTPUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if r > 0.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(format!("rate must lie strictly between 0 and 1, got {r}"))
    }
}

type CliResult<T> = Result<T, ImputeError>;

fn load_schema(path: &Option<PathBuf>) -> CliResult<SchemaSpec> {
    path.as_deref().map_or(Ok(SchemaSpec::default()), SchemaSpec::load)
}

/// Data with NA cells plus an optional mask file, as one incomplete matrix.
fn load_incomplete(input: &Path, mask: Option<&Path>, schema: &SchemaSpec) -> CliResult<(Dataset, IncompleteMatrix)> {
    let ds = data::load_csv(input, schema)?;
    let mut missing = MissingMask::from_nan(&ds.values);
    if let Some(path) = mask {
        let extra = read_mask(path, &ds)?;
        for i in 0..ds.n_rows() {
            for j in 0..ds.n_features() {
                if extra.is_missing(i, j) {
                    missing.set(i, j, true);
                }
            }
        }
    }
    let values = DMatrix::from_fn(ds.n_rows(), ds.n_features(), |i, j| {
        if missing.is_missing(i, j) {
            f64::NAN
        } else {
            ds.values[(i, j)]
        }
    });
    Ok((ds, IncompleteMatrix::from_nan(values)))
}

fn read_mask(path: &Path, like: &Dataset) -> CliResult<MissingMask> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let (header, mask) = parse_mask_csv(&text)?;
    if header != like.names() {
        return Err(ImputeError::Structure(format!(
            "{}: header does not match the data columns",
            path.display()
        )));
    }
    if mask.shape() != (like.n_rows(), like.n_features()) {
        return Err(ImputeError::Structure(format!(
            "{}: {} rows, data has {}",
            path.display(),
            mask.n_rows(),
            like.n_rows()
        )));
    }
    Ok(mask)
}

fn io_error(path: &Path, e: std::io::Error) -> ImputeError {
    ImputeError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Method parameters from a config file: `baselines.<method>` if present,
/// otherwise the whole file.
fn method_params(config: &Option<PathBuf>, method: &str) -> CliResult<Option<toml::Value>> {
    let Some(path) = config else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| ImputeError::Config(format!("{}: {e}", path.display())))?;
    Ok(match value.get("baselines") {
        Some(toml::Value::Table(b)) => b.get(method).cloned(),
        _ => Some(toml::Value::Table(value)),
    })
}

const BASELINE_MAGIC: &str = "fpimpute-baseline 1";

/// Baselines have no persistent form of their own; the model file stores the
/// recipe and the normalized training data, and `impute` refits from them.
#[derive(Debug, Serialize, Deserialize)]
struct BaselineModel {
    method: String,
    params: Option<toml::Value>,
    seed: u64,
    normalization: MinMax,
    feature_names: Vec<String>,
    heads: Vec<HeadKind>,
    /// Row-major normalized training values; `None` is missing.
    train: Vec<Vec<Option<f64>>>,
}

fn cmd_mask(a: MaskArgs) -> CliResult<String> {
    eprintln!("seed: {}", a.seed);
    let ds = data::load_csv(&a.input, &load_schema(&a.schema)?)?;
    let generated = generate_mask(&ds.values, a.rate, a.strategy, a.seed)?;
    write_file(&a.out, &mask_to_csv(&ds.names(), &generated.missing))?;
    let meta_path = PathBuf::from(format!("{}.meta.toml", a.out.display()));
    write_file(&meta_path, &meta_to_toml(&generated.meta))?;
    Ok(format!(
        "mask: {} rate {:.4} (target {}) -> {}",
        a.strategy,
        generated.meta.achieved_rate,
        a.rate,
        a.out.display()
    ))
}

fn cmd_fit(a: FitArgs) -> CliResult<String> {
    eprintln!("seed: {}", a.seed);
    let schema = load_schema(&a.schema)?;
    let (ds, incomplete) = load_incomplete(&a.input, a.mask.as_deref(), &schema)?;
    let norm = MinMax::fit(incomplete.values(), &ds.names())?;
    let train = IncompleteMatrix::from_nan(norm.apply(incomplete.values())?);
    let heads = HeadKind::for_schema(&ds.schema);
    let params = method_params(&a.config, &a.method)?;

    if a.method == "generative" {
        let mut cfg: GenerativeConfig = match &params {
            Some(v) => v.clone().try_into().map_err(|e| ImputeError::Config(format!("generative config: {e}")))?,
            None => GenerativeConfig::default(),
        };
        cfg.fit.seed = a.seed;
        let mut model = GenerativeImputer::new(heads, cfg.model.clone(), a.seed)?;
        let outcome = model.fit(&train, &cfg.fit)?;
        let manifest = model.manifest(Some(cfg.fit.clone()), Some(norm), ds.names());
        write_file(&a.out, &model.save(&manifest))?;
        let last = outcome.epoch_objective.last().copied().unwrap_or(f64::NAN);
        return Ok(format!(
            "fit generative: {} rows, {} features, {} epochs, final objective {last:.4} -> {}",
            ds.n_rows(),
            ds.n_features(),
            cfg.fit.epochs,
            a.out.display()
        ));
    }

    // Fit once so bad parameters or data fail here rather than at impute time.
    build_imputer(&a.method, params.as_ref(), &heads, a.seed)?.fit(&train)?;
    let model = BaselineModel {
        method: a.method.clone(),
        params,
        seed: a.seed,
        normalization: norm,
        feature_names: ds.names(),
        heads,
        train: (0..train.n_rows())
            .map(|i| {
                (0..train.n_cols())
                    .map(|j| (!train.mask().is_missing(i, j)).then(|| train.values()[(i, j)]))
                    .collect()
            })
            .collect(),
    };
    let json = serde_json::to_string(&model).map_err(|e| ImputeError::Checkpoint(e.to_string()))?;
    write_file(&a.out, &format!("{BASELINE_MAGIC}\n{json}\n"))?;
    Ok(format!(
        "fit {}: {} rows, {} features -> {}",
        a.method,
        ds.n_rows(),
        ds.n_features(),
        a.out.display()
    ))
}

fn cmd_impute(a: ImputeArgs) -> CliResult<String> {
    let text = fs::read_to_string(&a.model).map_err(|e| io_error(&a.model, e))?;
    let schema = load_schema(&a.schema)?;
    let (ds, incomplete) = load_incomplete(&a.input, a.mask.as_deref(), &schema)?;
    let check_names = |names: &[String]| {
        if names != ds.names().as_slice() {
            Err(ImputeError::Structure(format!(
                "{}: columns differ from those the model was trained on",
                a.input.display()
            )))
        } else {
            Ok(())
        }
    };

    let (method, norm, filled) = if text.starts_with(BASELINE_MAGIC) {
        let json = text.lines().nth(1).unwrap_or_default();
        let model: BaselineModel =
            serde_json::from_str(json).map_err(|e| ImputeError::Checkpoint(format!("{}: {e}", a.model.display())))?;
        eprintln!("seed: {}", model.seed);
        check_names(&model.feature_names)?;
        let k = model.feature_names.len();
        let train = IncompleteMatrix::from_nan(DMatrix::from_fn(model.train.len(), k, |i, j| {
            model.train[i][j].unwrap_or(f64::NAN)
        }));
        let rows = IncompleteMatrix::from_nan(model.normalization.apply(incomplete.values())?);
        let mut imputer = build_imputer(&model.method, model.params.as_ref(), &model.heads, model.seed)?;
        imputer.fit(&train)?;
        (model.method.clone(), model.normalization, imputer.transform(&rows)?)
    } else {
        let (model, manifest) = GenerativeImputer::load(&text)?;
        if let Some(fit) = &manifest.fit {
            eprintln!("seed: {}", fit.seed);
        }
        check_names(&manifest.feature_names)?;
        let norm = manifest
            .normalization
            .clone()
            .ok_or_else(|| ImputeError::Checkpoint("model file has no normalization".into()))?;
        let iters = a
            .inference_iters
            .unwrap_or_else(|| manifest.fit.as_ref().map_or(2, |f| f.inference_count));
        let inference = if iters == 0 { Inference::converge() } else { Inference::Fixed(iters) };
        let rows = IncompleteMatrix::from_nan(norm.apply(incomplete.values())?);
        ("generative".to_string(), norm, model.transform(&rows, inference)?)
    };
    let restored = incomplete.merge_observed(&norm.invert(&filled)?);
    data::write_csv(&a.out, &ds.names(), &restored)?;
    Ok(format!(
        "impute {method}: {} cells filled -> {}",
        incomplete.mask().missing_count(),
        a.out.display()
    ))
}

fn cmd_eval(a: EvalArgs) -> CliResult<String> {
    let schema = load_schema(&a.schema)?;
    let truth = data::load_csv(&a.truth, &schema)?;
    let pred = data::load_csv(&a.pred, &schema)?;
    if pred.names() != truth.names() {
        return Err(ImputeError::Structure("pred and truth headers differ".into()));
    }
    let mask = read_mask(&a.mask, &truth)?;
    // Scores are computed on the truth's min-max scale.
    let norm = MinMax::fit(&truth.values, &truth.names())?;
    let mode = match a.mode {
        ModeArg::All => RmseMode::All,
        ModeArg::Missing => RmseMode::MissingOnly,
    };
    let v = rmse_sum(&norm.apply(&pred.values)?, &norm.apply(&truth.values)?, &mask, mode)?;
    Ok(format!("rmse_sum {v:.6}"))
}

fn load_bench_spec(a: &BenchArgs) -> CliResult<(ExperimentSpec, PathBuf)> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(j) = a.jobs {
        spec.jobs = j;
    }
    if let Some(o) = &a.out {
        spec.output_dir = Some(o.clone());
    }
    let dir = spec.resolved_output_dir();
    spec.output_dir = Some(dir.clone());
    eprintln!("seeds: {:?}", spec.seeds);
    Ok((spec, dir))
}

fn report_failures(out: &harness::RunOutput) {
    for f in &out.failures {
        eprintln!(
            "cell failed ({} {} {} {} seed {}): {}",
            f.key.dataset, f.key.strategy, f.key.rate, f.key.method, f.key.seed, f.error
        );
    }
}

fn cmd_bench(a: BenchArgs) -> CliResult<String> {
    let (spec, dir) = load_bench_spec(&a)?;
    let out = harness::run(&spec)?;
    report_failures(&out);
    harness::write_outputs(&spec, &out, &dir)?;
    Ok(format!(
        "bench: {} cells ok, {} failed -> {}",
        out.results.len(),
        out.failures.len(),
        dir.display()
    ))
}

fn cmd_init_study(a: BenchArgs) -> CliResult<String> {
    let (spec, dir) = load_bench_spec(&a)?;
    let (out, summary) = harness::init_study(&spec)?;
    report_failures(&out);
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    write_file(&dir.join("init_study.csv"), &harness::report_csv(&out))?;
    write_file(&dir.join("init_study.md"), &harness::init_study_markdown(&summary))?;
    let parts: Vec<String> = summary.iter().map(|s| format!("{} {:.4}", s.policy, s.median_rmse)).collect();
    Ok(format!("init-study: {} -> {}", parts.join(", "), dir.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::InitStudy(a) => cmd_init_study(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
