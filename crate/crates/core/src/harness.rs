//! Benchmark grid: datasets × strategies × rates × methods × init policies × seeds.
//!
//! Every cell splits the data, masks train and test separately with the same
//! generator settings, min-max normalizes with statistics from observed
//! training cells, fits on the masked train part, imputes the masked test part
//! and scores it. Cells are independent and may run on a bounded worker pool;
//! results are assembled in grid order so every output byte depends only on
//! the spec.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_imputer, GenerativeConfig, GenerativeMethod, Imputer, METHOD_NAMES};
use crate::data::{self, Dataset, MinMax, SchemaSpec};
use crate::error::{ImputeError, Result};
use crate::evaluation::{downstream_eval, rmse_sum, DownstreamConfig, RmseMode, Task};
use crate::generative::HeadKind;
use crate::missingness::{generate_mask, IncompleteMatrix, InitPolicy, Strategy};
use crate::synthetic::{self, SyntheticKind};
use crate::derive_seed;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "FPIMPUTE_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "bench-out";

const SALT_SPLIT: u64 = 0x7370_6c69;
const SALT_MASK_TRAIN: u64 = 0x6d74_726e;
const SALT_MASK_TEST: u64 = 0x6d74_7374;
const SALT_MODEL: u64 = 0x6d6f_646c;
const SALT_DOWNSTREAM: u64 = 0x646f_776e;

/// One dataset of the grid: either a bundled synthetic generator or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Report label; defaults to the synthetic kind or the file stem.
    pub name: Option<String>,
    pub synthetic: Option<SyntheticKind>,
    /// Rows drawn from a synthetic generator.
    #[serde(default = "default_rows")]
    pub rows: usize,
    /// Seed of the synthetic draw; the data stay fixed across grid seeds.
    #[serde(default)]
    pub data_seed: u64,
    pub path: Option<PathBuf>,
    /// Schema sidecar for `path`.
    pub schema: Option<PathBuf>,
    /// Column removed from the features and used as the downstream target.
    pub label: Option<String>,
    pub task: Option<Task>,
}

fn default_rows() -> usize {
    1000
}

impl DatasetSpec {
    pub fn synthetic(kind: SyntheticKind, rows: usize) -> Self {
        DatasetSpec {
            name: None,
            synthetic: Some(kind),
            rows,
            data_seed: 0,
            path: None,
            schema: None,
            label: None,
            task: None,
        }
    }

    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match (&self.synthetic, &self.path) {
            (Some(k), _) => k.name().to_string(),
            (None, Some(p)) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            _ => "unnamed".into(),
        }
    }
}

/// Grid definition, read from TOML.
///
/// ```toml
/// seeds = [1, 2, 3]
/// methods = ["generative", "mean", "zero", "knn"]
/// rates = [0.5]
/// strategies = ["mnar-random"]
///
/// [[datasets]]
/// synthetic = "sinusoidal"
///
/// [[datasets]]
/// path = "data/wine.csv"
/// label = "quality"
/// task = "classification"
///
/// [baselines.knn]
/// k = 1
///
/// [baselines.generative.fit]
/// epochs = 100
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub datasets: Vec<DatasetSpec>,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Initial fills of the generative method; other methods ignore this axis.
    #[serde(default = "default_init_policies")]
    pub init_policies: Vec<InitPolicy>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Independently seeded fits averaged per cell (multiple imputation);
    /// deterministic methods are fitted once.
    #[serde(default = "default_imputations")]
    pub imputations: usize,
    /// Also train and score the downstream model on every cell.
    #[serde(default)]
    pub downstream: bool,
    #[serde(default)]
    pub downstream_config: DownstreamConfig,
    /// Write each cell's imputed test matrix under `imputed/`.
    #[serde(default)]
    pub save_imputed: bool,
    /// Worker threads; 0 uses all cores.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub output_dir: Option<PathBuf>,
    /// Per-method parameter tables, `baselines.<name>`.
    #[serde(default)]
    pub baselines: BTreeMap<String, toml::Value>,
}

fn default_rates() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}
fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::MnarRandom, Strategy::MnarUniform]
}
fn default_methods() -> Vec<String> {
    METHOD_NAMES.iter().map(|s| s.to_string()).collect()
}
fn default_init_policies() -> Vec<InitPolicy> {
    vec![InitPolicy::Mean]
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_test_fraction() -> f64 {
    0.18
}
fn default_imputations() -> usize {
    5
}
fn default_jobs() -> usize {
    1
}

/// Methods whose output depends on a seed; only these are refitted for
/// multiple imputation.
pub fn is_stochastic(method: &str) -> bool {
    matches!(method, "generative" | "ae" | "dae" | "rae")
}

impl ExperimentSpec {
    /// Spec with every default and the given datasets.
    pub fn new(datasets: Vec<DatasetSpec>) -> Self {
        ExperimentSpec {
            datasets,
            rates: default_rates(),
            strategies: default_strategies(),
            methods: default_methods(),
            init_policies: default_init_policies(),
            seeds: default_seeds(),
            test_fraction: default_test_fraction(),
            imputations: default_imputations(),
            downstream: false,
            downstream_config: DownstreamConfig::default(),
            save_imputed: false,
            jobs: default_jobs(),
            output_dir: None,
            baselines: BTreeMap::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| ImputeError::Config(format!("spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ImputeError::io(path, e))?;
        let mut spec = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut spec.datasets {
            for p in [&mut d.path, &mut d.schema].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ImputeError::Config(m));
        if self.datasets.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return fail("spec needs at least one dataset, method and seed".into());
        }
        if self.rates.is_empty() || self.strategies.is_empty() || self.init_policies.is_empty() {
            return fail("spec needs at least one rate, strategy and init policy".into());
        }
        if let Some(r) = self.rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return fail(format!("rate {r} outside (0, 1)"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return fail("seeds must be distinct".into());
        }
        if let Some(m) = self.methods.iter().find(|m| !METHOD_NAMES.contains(&m.as_str())) {
            return fail(format!("unknown method '{m}'; expected one of {}", METHOD_NAMES.join(", ")));
        }
        if let Some(name) = self.baselines.keys().find(|m| !METHOD_NAMES.contains(&m.as_str())) {
            return fail(format!("[baselines.{name}] names no known method"));
        }
        if self.imputations == 0 {
            return fail("imputations must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        for d in &self.datasets {
            match (&d.synthetic, &d.path) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => return fail(format!("dataset '{}' needs exactly one of synthetic or path", d.display_name())),
            }
        }
        Ok(())
    }

    /// `output_dir` from the spec, else the environment variable, else `bench-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

/// Loaded features with an optional downstream target.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub data: Dataset,
    pub labels: Option<(Vec<f64>, Task)>,
}

pub fn prepare_dataset(spec: &DatasetSpec) -> Result<PreparedDataset> {
    let name = spec.display_name();
    if let Some(kind) = spec.synthetic {
        let s = synthetic::generate(kind, spec.rows, spec.data_seed);
        return Ok(PreparedDataset {
            name,
            data: s.data,
            labels: Some((s.labels, spec.task.unwrap_or(kind.task()))),
        });
    }
    let path = spec.path.as_ref().ok_or_else(|| ImputeError::Config(format!("dataset '{name}' has no path")))?;
    let schema = match &spec.schema {
        Some(p) => SchemaSpec::load(p)?,
        None => SchemaSpec::default(),
    };
    let full = data::load_csv(path, &schema)?;
    if full.has_missing() {
        return Err(ImputeError::Structure(format!(
            "{}: benchmark datasets must be fully observed so masked cells can be scored",
            path.display()
        )));
    }
    Ok(match &spec.label {
        Some(label) => {
            let (data, y) = full.take_column(label)?;
            let task = spec.task.ok_or_else(|| ImputeError::Config(format!("dataset '{name}': label given without task")))?;
            PreparedDataset {
                name,
                data,
                labels: Some((y, task)),
            }
        }
        None => PreparedDataset {
            name,
            data: full,
            labels: None,
        },
    })
}

/// Coordinates of one grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellKey {
    pub dataset: String,
    pub strategy: Strategy,
    pub rate_index: usize,
    pub rate: String,
    pub method: String,
    /// Initial fill of the generative method; `None` for other methods.
    pub init: Option<InitPolicy>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    /// Achieved missing rate of the test mask.
    pub test_rate: f64,
    pub rmse_all: f64,
    pub rmse_missing: f64,
    pub downstream: Option<(String, f64)>,
    pub notes: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub key: CellKey,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub results: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

/// Split, masked and normalized data shared by all methods of one
/// (dataset, strategy, rate, seed) combination.
struct Trial {
    train: IncompleteMatrix,
    test: IncompleteMatrix,
    test_truth: DMatrix<f64>,
    test_rate: f64,
    labels: Option<(Vec<f64>, Vec<f64>, Task)>,
}

fn build_trial(ds: &PreparedDataset, strategy: Strategy, rate: f64, seed: u64, test_fraction: f64) -> Result<Trial> {
    let (train, test) = data::split(&ds.data, test_fraction, derive_seed(seed, SALT_SPLIT))?;
    let train_mask = generate_mask(&train.values, rate, strategy, derive_seed(seed, SALT_MASK_TRAIN))?;
    let test_mask = generate_mask(&test.values, rate, strategy, derive_seed(seed, SALT_MASK_TEST))?;
    let train_masked = IncompleteMatrix::hide(&train.values, &train_mask.missing)?;
    // Normalization statistics come from observed training cells only.
    let norm = MinMax::fit(train_masked.values(), &ds.data.names())?;
    let train_truth = norm.apply(&train.values)?;
    let test_truth = norm.apply(&test.values)?;
    let labels = ds.labels.as_ref().map(|(y, task)| {
        let (ytr, yte) = split_labels(y, &ds.data, test_fraction, seed);
        (ytr, yte, *task)
    });
    Ok(Trial {
        train: IncompleteMatrix::hide(&train_truth, &train_mask.missing)?,
        test: IncompleteMatrix::hide(&test_truth, &test_mask.missing)?,
        test_truth,
        test_rate: test_mask.meta.achieved_rate,
        labels,
    })
}

/// Splits a label vector exactly as [`data::split`] splits the rows.
fn split_labels(y: &[f64], like: &Dataset, test_fraction: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let idx = Dataset::from_matrix(DMatrix::from_fn(like.n_rows(), 1, |i, _| i as f64));
    let (tr, te) = data::split(&idx, test_fraction, derive_seed(seed, SALT_SPLIT)).expect("split already succeeded");
    let pick = |d: &Dataset| d.values.iter().map(|&i| y[i as usize]).collect();
    (pick(&tr), pick(&te))
}

fn method_salt(method: &str) -> u64 {
    method.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn make_imputer(spec: &ExperimentSpec, key: &CellKey, heads: &[HeadKind], seed: u64) -> Result<Box<dyn Imputer>> {
    let params = spec.baselines.get(&key.method);
    if key.method == "generative" {
        let mut cfg: GenerativeConfig = match params {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| ImputeError::Config(format!("baselines.generative: {e}")))?,
            None => GenerativeConfig::default(),
        };
        cfg.fit.seed = seed;
        if let Some(init) = key.init {
            cfg.fit.init_policy = init;
        }
        return Ok(Box::new(GenerativeMethod::new(cfg, heads.to_vec())?));
    }
    build_imputer(&key.method, params, heads, seed)
}

fn run_cell(spec: &ExperimentSpec, ds: &PreparedDataset, trial: &Trial, key: &CellKey) -> Result<CellResult> {
    let start = Instant::now();
    let heads = HeadKind::for_schema(&ds.data.schema);
    let members = if is_stochastic(&key.method) { spec.imputations } else { 1 };
    let mut train_sum = DMatrix::zeros(trial.train.n_rows(), trial.train.n_cols());
    let mut test_sum = DMatrix::zeros(trial.test.n_rows(), trial.test.n_cols());
    let mut notes = Vec::new();
    for m in 0..members {
        let seed = derive_seed(derive_seed(key.seed, SALT_MODEL ^ method_salt(&key.method)), m as u64);
        let mut imputer = make_imputer(spec, key, &heads, seed)?;
        train_sum += imputer.fit(&trial.train)?;
        test_sum += imputer.transform(&trial.test)?;
        notes.extend(imputer.notes());
    }
    let scale = 1.0 / members as f64;
    // Averaging leaves observed cells unchanged only up to rounding; restore them exactly.
    let train_imputed = trial.train.merge_observed(&(train_sum * scale));
    let test_imputed = trial.test.merge_observed(&(test_sum * scale));
    if test_imputed.iter().any(|v| !v.is_finite()) {
        return Err(ImputeError::numeric(format!("{} imputation", key.method)));
    }
    let rmse_all = rmse_sum(&test_imputed, &trial.test_truth, trial.test.mask(), RmseMode::All)?;
    let rmse_missing = rmse_sum(&test_imputed, &trial.test_truth, trial.test.mask(), RmseMode::MissingOnly)?;
    let downstream = match (&trial.labels, spec.downstream) {
        (Some((ytr, yte, task)), true) => {
            let m = downstream_eval(
                &train_imputed,
                ytr,
                &test_imputed,
                yte,
                *task,
                &spec.downstream_config,
                derive_seed(key.seed, SALT_DOWNSTREAM),
            )?;
            Some((m.name().to_string(), m.value()))
        }
        _ => None,
    };
    if spec.save_imputed {
        let dir = spec.resolved_output_dir().join("imputed");
        fs::create_dir_all(&dir).map_err(|e| ImputeError::io(&dir, e))?;
        data::write_csv(&dir.join(format!("{}.csv", cell_slug(key))), &ds.data.names(), &test_imputed)?;
    }
    Ok(CellResult {
        key: key.clone(),
        test_rate: trial.test_rate,
        rmse_all,
        rmse_missing,
        downstream,
        notes,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn cell_slug(key: &CellKey) -> String {
    format!(
        "{}_{}_{}_{}_{}_{}",
        key.dataset,
        key.strategy,
        key.rate,
        key.method,
        key.init.map_or("-".to_string(), |p| p.to_string()),
        key.seed
    )
}

fn format_rate(r: f64) -> String {
    format!("{r}")
}

/// Runs the full grid. Cell failures are collected, not propagated; only an
/// invalid spec or an unloadable dataset is an error.
pub fn run(spec: &ExperimentSpec) -> Result<RunOutput> {
    spec.validate()?;
    let datasets: Vec<PreparedDataset> = spec.datasets.iter().map(prepare_dataset).collect::<Result<_>>()?;

    let mut trial_keys = Vec::new();
    for (d, _) in datasets.iter().enumerate() {
        for &strategy in &spec.strategies {
            for (ri, &rate) in spec.rates.iter().enumerate() {
                for &seed in &spec.seeds {
                    trial_keys.push((d, strategy, ri, rate, seed));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| ImputeError::Config(format!("worker pool: {e}")))?;

    pool.install(|| {
        let trials: Vec<Result<Trial>> = trial_keys
            .par_iter()
            .map(|&(d, strategy, _, rate, seed)| build_trial(&datasets[d], strategy, rate, seed, spec.test_fraction))
            .collect();

        let mut cells = Vec::new();
        for (t, &(d, strategy, ri, rate, seed)) in trial_keys.iter().enumerate() {
            for method in &spec.methods {
                let inits: Vec<Option<InitPolicy>> = if method == "generative" {
                    spec.init_policies.iter().map(|p| Some(*p)).collect()
                } else {
                    vec![None]
                };
                for init in inits {
                    cells.push((
                        t,
                        CellKey {
                            dataset: datasets[d].name.clone(),
                            strategy,
                            rate_index: ri,
                            rate: format_rate(rate),
                            method: method.clone(),
                            init,
                            seed,
                        },
                    ));
                }
            }
        }
        // Grid order: dataset, strategy, rate, method, init, seed.
        cells.sort_by(|a, b| {
            let (ka, kb) = (&a.1, &b.1);
            let da = trial_keys[a.0].0;
            let db = trial_keys[b.0].0;
            let ma = spec.methods.iter().position(|m| *m == ka.method);
            let mb = spec.methods.iter().position(|m| *m == kb.method);
            let ia = ka.init.and_then(|p| spec.init_policies.iter().position(|q| *q == p));
            let ib = kb.init.and_then(|p| spec.init_policies.iter().position(|q| *q == p));
            let sa = spec.seeds.iter().position(|s| *s == ka.seed);
            let sb = spec.seeds.iter().position(|s| *s == kb.seed);
            let stra = spec.strategies.iter().position(|s| *s == ka.strategy);
            let strb = spec.strategies.iter().position(|s| *s == kb.strategy);
            (da, stra, ka.rate_index, ma, ia, sa).cmp(&(db, strb, kb.rate_index, mb, ib, sb))
        });

        let outcomes: Vec<std::result::Result<CellResult, CellFailure>> = cells
            .par_iter()
            .map(|(t, key)| {
                let d = trial_keys[*t].0;
                let outcome = match &trials[*t] {
                    Ok(trial) => run_cell(spec, &datasets[d], trial, key),
                    Err(e) => Err(ImputeError::Imputation(format!("trial setup: {e}"))),
                };
                outcome.map_err(|e| CellFailure {
                    key: key.clone(),
                    error: e.to_string(),
                })
            })
            .collect();

        let mut out = RunOutput::default();
        for o in outcomes {
            match o {
                Ok(r) => out.results.push(r),
                Err(f) => out.failures.push(f),
            }
        }
        Ok(out)
    })
}

fn init_label(init: Option<InitPolicy>) -> String {
    init.map_or(String::new(), |p| p.to_string())
}

/// One line per successful cell; timings are kept out so the file is reproducible.
pub fn report_csv(output: &RunOutput) -> String {
    let mut s = String::from(
        "dataset,strategy,rate,method,init,seed,test_missing_rate,rmse_sum_all,rmse_sum_missing,downstream_metric,downstream_value\n",
    );
    for r in &output.results {
        let k = &r.key;
        let (dm, dv) = match &r.downstream {
            Some((name, v)) => (name.clone(), format!("{v:.10}")),
            None => (String::new(), String::new()),
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.10},{:.10},{},{}",
            k.dataset,
            k.strategy,
            k.rate,
            k.method,
            init_label(k.init),
            k.seed,
            r.test_rate,
            r.rmse_all,
            r.rmse_missing,
            dm,
            dv
        )
        .unwrap();
    }
    s
}

pub fn timings_csv(output: &RunOutput) -> String {
    let mut s = String::from("dataset,strategy,rate,method,init,seed,wall_time_s\n");
    for r in &output.results {
        let k = &r.key;
        writeln!(
            s,
            "{},{},{},{},{},{},{:.3}",
            k.dataset,
            k.strategy,
            k.rate,
            k.method,
            init_label(k.init),
            k.seed,
            r.wall_time_s
        )
        .unwrap();
    }
    s
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn column_label(method: &str, init: Option<InitPolicy>, multiple_inits: bool) -> String {
    match init {
        Some(p) if multiple_inits => format!("{method} ({p})"),
        _ => method.to_string(),
    }
}

/// Mean RMSE_Sum over seeds per (dataset, method column), for each
/// (strategy, rate) block, in grid order.
pub fn summarize(spec: &ExperimentSpec, output: &RunOutput, mode: RmseMode) -> Vec<SummaryBlock> {
    let multiple_inits = spec.init_policies.len() > 1;
    let mut blocks = Vec::new();
    for &strategy in &spec.strategies {
        for rate in spec.rates.iter().map(|r| format_rate(*r)) {
            let rows_in = |r: &&CellResult| r.key.strategy == strategy && r.key.rate == rate;
            let mut columns: Vec<String> = Vec::new();
            let mut datasets: Vec<String> = Vec::new();
            let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
            for r in output.results.iter().filter(rows_in) {
                let col = column_label(&r.key.method, r.key.init, multiple_inits);
                if !columns.contains(&col) {
                    columns.push(col.clone());
                }
                if !datasets.contains(&r.key.dataset) {
                    datasets.push(r.key.dataset.clone());
                }
                let v = match mode {
                    RmseMode::All => r.rmse_all,
                    RmseMode::MissingOnly => r.rmse_missing,
                };
                cells.entry((r.key.dataset.clone(), col)).or_default().push(v);
            }
            blocks.push(SummaryBlock {
                strategy,
                rate: rate.clone(),
                columns,
                rows: datasets
                    .into_iter()
                    .map(|d| {
                        let vals = cells_for(&cells, &d);
                        (d, vals)
                    })
                    .collect(),
            });
            fn cells_for(cells: &BTreeMap<(String, String), Vec<f64>>, d: &str) -> BTreeMap<String, (f64, f64, usize)> {
                cells
                    .iter()
                    .filter(|((ds, _), _)| ds == d)
                    .map(|((_, c), v)| {
                        let (m, s) = mean_std(v);
                        (c.clone(), (m, s, v.len()))
                    })
                    .collect()
            }
        }
    }
    blocks
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryBlock {
    pub strategy: Strategy,
    pub rate: String,
    pub columns: Vec<String>,
    /// Dataset → column → (mean, std, seeds).
    pub rows: Vec<(String, BTreeMap<String, (f64, f64, usize)>)>,
}

/// Markdown tables with datasets as rows and methods as columns; the best
/// mean in each row is bold.
pub fn report_markdown(spec: &ExperimentSpec, output: &RunOutput) -> String {
    let mut s = String::from("# Imputation benchmark\n\n");
    writeln!(
        s,
        "Test-split RMSE_Sum on min-max normalized data, mean ± std over seeds {:?}.\n",
        spec.seeds
    )
    .unwrap();
    for (mode, title) in [(RmseMode::All, "all cells"), (RmseMode::MissingOnly, "masked cells only")] {
        for block in summarize(spec, output, mode) {
            if block.rows.is_empty() {
                continue;
            }
            writeln!(s, "## {} at rate {} ({title})\n", block.strategy, block.rate).unwrap();
            writeln!(s, "| dataset | {} |", block.columns.join(" | ")).unwrap();
            writeln!(s, "|---|{}", "---|".repeat(block.columns.len())).unwrap();
            for (dataset, cells) in &block.rows {
                let best = cells.values().map(|c| c.0).fold(f64::INFINITY, f64::min);
                let entries: Vec<String> = block
                    .columns
                    .iter()
                    .map(|c| match cells.get(c) {
                        Some(&(m, sd, _)) if m == best => format!("**{m:.3}** ± {sd:.3}"),
                        Some(&(m, sd, _)) => format!("{m:.3} ± {sd:.3}"),
                        None => "failed".into(),
                    })
                    .collect();
                writeln!(s, "| {dataset} | {} |", entries.join(" | ")).unwrap();
            }
            s.push('\n');
        }
    }
    if !output.failures.is_empty() {
        writeln!(s, "## Failed cells\n").unwrap();
        for f in &output.failures {
            writeln!(s, "- {}: {}", cell_slug(&f.key), f.error).unwrap();
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    spec: &'a ExperimentSpec,
    cells_ok: usize,
    cells_failed: usize,
    failures: Vec<BTreeMap<&'static str, String>>,
}

/// Writes `report.csv`, `report.md`, `manifest.json` and `timings.csv`.
pub fn write_outputs(spec: &ExperimentSpec, output: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ImputeError::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| ImputeError::io(&p, e))
    };
    write("report.csv", report_csv(output))?;
    write("report.md", report_markdown(spec, output))?;
    write("timings.csv", timings_csv(output))?;
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        spec,
        cells_ok: output.results.len(),
        cells_failed: output.failures.len(),
        failures: output
            .failures
            .iter()
            .map(|f| BTreeMap::from([("cell", cell_slug(&f.key)), ("error", f.error.clone())]))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ImputeError::Config(format!("manifest: {e}")))?;
    write("manifest.json", json + "\n")
}

/// Per-policy summary of an init study.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSummary {
    pub policy: InitPolicy,
    /// Median over datasets of the per-dataset mean RMSE_Sum.
    pub median_rmse: f64,
}

/// Runs the generative method once per init policy and seed. Policies
/// missing from the spec are added so all four are always compared.
pub fn init_study(spec: &ExperimentSpec) -> Result<(RunOutput, Vec<InitSummary>)> {
    let mut spec = spec.clone();
    spec.methods = vec!["generative".into()];
    for p in [InitPolicy::Mean, InitPolicy::Zero, InitPolicy::Median, InitPolicy::Random] {
        if !spec.init_policies.contains(&p) {
            spec.init_policies.push(p);
        }
    }
    let output = run(&spec)?;
    let summary = summarize_inits(&spec.init_policies, &output);
    Ok((output, summary))
}

pub fn summarize_inits(policies: &[InitPolicy], output: &RunOutput) -> Vec<InitSummary> {
    policies
        .iter()
        .map(|&policy| {
            let mut per_dataset: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for r in output.results.iter().filter(|r| r.key.init == Some(policy)) {
                per_dataset.entry(&r.key.dataset).or_default().push(r.rmse_all);
            }
            let means: Vec<f64> = per_dataset.values().map(|v| mean_std(v).0).collect();
            InitSummary {
                policy,
                median_rmse: median(&means),
            }
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn init_study_markdown(summary: &[InitSummary]) -> String {
    let mut s = String::from("# Initialization study\n\n| init | median RMSE_Sum |\n|---|---|\n");
    for e in summary {
        writeln!(s, "| {} | {:.4} |", e.policy, e.median_rmse).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(vec![DatasetSpec::synthetic(SyntheticKind::LinearGaussian, 300)]);
        spec.rates = vec![0.5];
        spec.strategies = vec![Strategy::MnarRandom];
        spec.methods = vec!["mean".into(), "zero".into()];
        spec.seeds = vec![1];
        spec
    }

    #[test]
    fn two_methods_one_seed_give_two_rows() {
        let out = run(&tiny_spec()).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.results.len(), 2);
        assert!(out.failures.is_empty());
        assert_eq!(report_csv(&out).lines().count(), 3);
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec();
        s.seeds = vec![1, 1];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.methods = vec!["forest".into()];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.rates = vec![1.0];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.datasets.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_spec_round_trip() {
        let text = r#"
seeds = [3]
methods = ["knn"]
rates = [0.25]
strategies = ["mnar-uniform"]

[[datasets]]
synthetic = "rank-one"
rows = 200

[baselines.knn]
k = 2
"#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        assert_eq!(spec.datasets[0].synthetic, Some(SyntheticKind::RankOne));
        assert_eq!(spec.test_fraction, 0.18);
        assert!(ExperimentSpec::from_toml("datasets = []\nbogus = 1").is_err());
    }

    #[test]
    fn unreachable_rate_is_a_logged_failure() {
        let mut spec = tiny_spec();
        spec.rates = vec![0.99];
        let out = run(&spec).unwrap();
        assert!(out.results.is_empty());
        assert_eq!(out.failures.len(), 2);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
