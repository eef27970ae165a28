//! MNAR missingness simulation and initial fills for masked cells.
//!
//! Rows become eligible for masking when a per-row uniform draw `v_i` falls
//! below a threshold `t` and at least one of two randomly chosen anchor
//! features lies below its mean. The threshold is tuned until the achieved
//! missing rate is within [`RATE_TOLERANCE`] of the target.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::read_records;
use crate::error::{ImputeError, Result};
use crate::seeded_rng;

pub const RATE_TOLERANCE: f64 = 0.005;
pub const MAX_ADJUSTMENTS: usize = 200;

/// Boolean `n × K` matrix, `true` = missing. Row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MissingMask {
    n_rows: usize,
    n_cols: usize,
    cells: Vec<bool>,
}

impl MissingMask {
    pub fn none(n_rows: usize, n_cols: usize) -> Self {
        MissingMask {
            n_rows,
            n_cols,
            cells: vec![false; n_rows * n_cols],
        }
    }

    pub fn from_fn(n_rows: usize, n_cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(n_rows * n_cols);
        for i in 0..n_rows {
            for j in 0..n_cols {
                cells.push(f(i, j));
            }
        }
        MissingMask { n_rows, n_cols, cells }
    }

    /// Marks every `NaN` cell as missing.
    pub fn from_nan(values: &DMatrix<f64>) -> Self {
        Self::from_fn(values.nrows(), values.ncols(), |i, j| values[(i, j)].is_nan())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    #[inline]
    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n_cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, missing: bool) {
        self.cells[i * self.n_cols + j] = missing;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.cells[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn missing_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn column_missing_count(&self, j: usize) -> usize {
        (0..self.n_rows).filter(|&i| self.is_missing(i, j)).count()
    }

    pub fn rate(&self) -> f64 {
        if self.cells.is_empty() {
            0.0
        } else {
            self.missing_count() as f64 / self.cells.len() as f64
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> MissingMask {
        let mut cells = Vec::with_capacity(rows.len() * self.n_cols);
        for &i in rows {
            cells.extend_from_slice(self.row(i));
        }
        MissingMask {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            cells,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &MissingMask) -> Result<MissingMask> {
        if self.n_cols != other.n_cols {
            return Err(ImputeError::shape("mask stacking", self.n_cols, other.n_cols));
        }
        let mut cells = self.cells.clone();
        cells.extend_from_slice(&other.cells);
        Ok(MissingMask {
            n_rows: self.n_rows + other.n_rows,
            n_cols: self.n_cols,
            cells,
        })
    }

    /// `1.0` where observed, `0.0` where missing; same layout as the data.
    pub fn observed_weights(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_rows, self.n_cols, |i, j| {
            if self.is_missing(i, j) {
                0.0
            } else {
                1.0
            }
        })
    }

    pub(crate) fn check_shape(&self, values: &DMatrix<f64>, context: &'static str) -> Result<()> {
        if values.shape() != self.shape() {
            return Err(ImputeError::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", values.shape()),
            ));
        }
        Ok(())
    }
}

/// Data as imputers see it: masked cells are `NaN` and their true values are gone.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteMatrix {
    values: DMatrix<f64>,
    mask: MissingMask,
}

impl IncompleteMatrix {
    /// Copies `truth` and erases every masked cell.
    pub fn hide(truth: &DMatrix<f64>, mask: &MissingMask) -> Result<Self> {
        mask.check_shape(truth, "hide")?;
        let mut values = truth.clone();
        for i in 0..mask.n_rows() {
            for j in 0..mask.n_cols() {
                if mask.is_missing(i, j) {
                    values[(i, j)] = f64::NAN;
                }
            }
        }
        Ok(IncompleteMatrix {
            values,
            mask: mask.clone(),
        })
    }

    /// Builds from a matrix where `NaN` already marks missing cells.
    pub fn from_nan(values: DMatrix<f64>) -> Self {
        let mask = MissingMask::from_nan(&values);
        IncompleteMatrix { values, mask }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &MissingMask {
        &self.mask
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn observed_in_column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.column(j).iter().copied().filter(|v| !v.is_nan()).collect::<Vec<_>>().into_iter()
    }

    pub fn select_rows(&self, rows: &[usize]) -> IncompleteMatrix {
        IncompleteMatrix {
            values: self.values.select_rows(rows),
            mask: self.mask.select_rows(rows),
        }
    }

    pub fn vstack(&self, other: &IncompleteMatrix) -> Result<IncompleteMatrix> {
        let mask = self.mask.vstack(&other.mask)?;
        let mut values = DMatrix::zeros(self.n_rows() + other.n_rows(), self.n_cols());
        values.rows_mut(0, self.n_rows()).copy_from(&self.values);
        values
            .rows_mut(self.n_rows(), other.n_rows())
            .copy_from(&other.values);
        Ok(IncompleteMatrix { values, mask })
    }

    /// Copies `imputed` but restores every observed cell bit-exactly.
    pub fn merge_observed(&self, imputed: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = imputed.clone();
        for i in 0..self.n_rows() {
            for j in 0..self.n_cols() {
                if !self.mask.is_missing(i, j) {
                    out[(i, j)] = self.values[(i, j)];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "mnar-uniform")]
    MnarUniform,
    #[serde(rename = "mnar-random")]
    MnarRandom,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::MnarUniform => "mnar-uniform",
            Strategy::MnarRandom => "mnar-random",
        })
    }
}

impl FromStr for Strategy {
    type Err = ImputeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnar-uniform" | "uniform" => Ok(Strategy::MnarUniform),
            "mnar-random" | "random" => Ok(Strategy::MnarRandom),
            other => Err(ImputeError::Config(format!(
                "unknown strategy '{other}' (expected mnar-uniform or mnar-random)"
            ))),
        }
    }
}

/// Generation metadata stored next to a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub strategy: Strategy,
    pub target_rate: f64,
    pub achieved_rate: f64,
    pub threshold: f64,
    pub anchor_features: (usize, usize),
    pub seed: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMask {
    pub missing: MissingMask,
    pub meta: MaskMeta,
}

/// Draws an MNAR mask over fully observed `data` at missing rate `target`.
pub fn generate_mask(
    data: &DMatrix<f64>,
    target: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<GeneratedMask> {
    if !(target > 0.0 && target < 1.0) {
        return Err(ImputeError::MaskParams(format!(
            "target rate must lie in (0, 1), got {target}"
        )));
    }
    let (n, k) = data.shape();
    if k < 3 {
        return Err(ImputeError::MaskParams(format!(
            "need at least 3 features (two anchors plus one more), got {k}"
        )));
    }
    if n == 0 {
        return Err(ImputeError::MaskParams("dataset has no rows".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ImputeError::MaskParams(
            "mask generation needs fully observed, finite data".into(),
        ));
    }

    let mut rng = seeded_rng(seed);
    let a1 = rng.gen_range(0..k);
    let mut a2 = rng.gen_range(0..k - 1);
    if a2 >= a1 {
        a2 += 1;
    }
    let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let cell_draws: Vec<f64> = match strategy {
        Strategy::MnarRandom => (0..n * k).map(|_| rng.gen::<f64>()).collect(),
        Strategy::MnarUniform => Vec::new(),
    };

    let mean1 = data.column(a1).mean();
    let mean2 = data.column(a2).mean();
    let eligible: Vec<bool> = (0..n)
        .map(|i| data[(i, a1)] < mean1 || data[(i, a2)] < mean2)
        .collect();

    let build = |t: f64| {
        MissingMask::from_fn(n, k, |i, j| {
            eligible[i]
                && v[i] < t
                && match strategy {
                    Strategy::MnarUniform => true,
                    Strategy::MnarRandom => cell_draws[i * k + j] < t,
                }
        })
    };

    let max_rate = build(1.0).rate();
    let finish = |missing: MissingMask, t: f64, iterations: usize| GeneratedMask {
        meta: MaskMeta {
            strategy,
            target_rate: target,
            achieved_rate: missing.rate(),
            threshold: t,
            anchor_features: (a1, a2),
            seed,
            iterations,
        },
        missing,
    };
    if max_rate < target - RATE_TOLERANCE {
        return Err(ImputeError::Unreachable {
            message: format!("target rate {target} exceeds the eligible population"),
            max_rate,
        });
    }

    // Multiplicative update t <- t * T / p, kept inside the bracket of
    // thresholds already known to under- and overshoot.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut t = target;
    for iteration in 1..=MAX_ADJUSTMENTS {
        let mask = build(t);
        let p = mask.rate();
        if (p - target).abs() <= RATE_TOLERANCE {
            return Ok(finish(mask, t, iteration));
        }
        if p < target {
            lo = t;
        } else {
            hi = t;
        }
        let proposal = if p > 0.0 { t * target / p } else { 2.0 * t };
        t = if proposal > lo && proposal < hi {
            proposal
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < f64::EPSILON {
            break;
        }
    }
    if (max_rate - target).abs() <= RATE_TOLERANCE {
        return Ok(finish(build(1.0), 1.0, MAX_ADJUSTMENTS));
    }
    Err(ImputeError::Unreachable {
        message: format!(
            "no threshold reaches rate {target} within ±{RATE_TOLERANCE} (rate jumps are too coarse for {n} rows)"
        ),
        max_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitPolicy {
    Mean,
    Median,
    Zero,
    /// Independent draws from N(0, 1).
    Random,
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitPolicy::Mean => "mean",
            InitPolicy::Median => "median",
            InitPolicy::Zero => "zero",
            InitPolicy::Random => "random",
        })
    }
}

impl FromStr for InitPolicy {
    type Err = ImputeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(InitPolicy::Mean),
            "median" => Ok(InitPolicy::Median),
            "zero" => Ok(InitPolicy::Zero),
            "random" => Ok(InitPolicy::Random),
            other => Err(ImputeError::Config(format!(
                "unknown init policy '{other}' (expected mean, median, zero or random)"
            ))),
        }
    }
}

pub fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Median with the midpoint convention for even counts.
pub fn median_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

/// Per-feature fill values fitted on the observed cells of a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFill {
    pub policy: InitPolicy,
    /// Empty for the random policy.
    pub values: Vec<f64>,
}

impl FeatureFill {
    pub fn fit(policy: InitPolicy, train: &IncompleteMatrix) -> Result<Self> {
        let values = match policy {
            InitPolicy::Zero => vec![0.0; train.n_cols()],
            InitPolicy::Random => Vec::new(),
            InitPolicy::Mean | InitPolicy::Median => (0..train.n_cols())
                .map(|j| {
                    let obs = train.observed_in_column(j);
                    let stat = if policy == InitPolicy::Mean {
                        mean_of(obs)
                    } else {
                        median_of(obs)
                    };
                    stat.ok_or_else(|| {
                        ImputeError::Imputation(format!(
                            "feature {j} has no observed training values for {policy} fill"
                        ))
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(FeatureFill { policy, values })
    }

    /// Fills every masked cell; observed cells are copied unchanged.
    /// `seed` only matters for the random policy.
    pub fn apply(&self, data: &IncompleteMatrix, seed: u64) -> Result<DMatrix<f64>> {
        if self.policy != InitPolicy::Random && self.values.len() != data.n_cols() {
            return Err(ImputeError::shape("fill", self.values.len(), data.n_cols()));
        }
        let mut out = data.values().clone();
        let mut rng = seeded_rng(seed);
        let mask = data.mask();
        for i in 0..data.n_rows() {
            for j in 0..data.n_cols() {
                if mask.is_missing(i, j) {
                    out[(i, j)] = match self.policy {
                        InitPolicy::Random => rng.sample(StandardNormal),
                        _ => self.values[j],
                    };
                }
            }
        }
        Ok(out)
    }
}

/// Hides the masked cells of `data` and fills them per `policy`, with
/// statistics from the remaining observed cells.
pub fn apply_mask(
    data: &DMatrix<f64>,
    mask: &MissingMask,
    policy: InitPolicy,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let hidden = IncompleteMatrix::hide(data, mask)?;
    FeatureFill::fit(policy, &hidden)?.apply(&hidden, seed)
}

/// 0/1 CSV with the dataset header; `1` = missing.
pub fn mask_to_csv(header: &[String], mask: &MissingMask) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..mask.n_rows() {
        let row: Vec<&str> = mask.row(i).iter().map(|&m| if m { "1" } else { "0" }).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a mask file. A file whose fields are all `0`/`1` is a 0/1 mask;
/// anything else is read as a data file in which `NA` cells are missing.
pub fn parse_mask_csv(text: &str) -> Result<(Vec<String>, MissingMask)> {
    let (header, rows) = read_records(text)?;
    let binary = rows
        .iter()
        .flatten()
        .all(|f| matches!(f.trim(), "0" | "1"));
    let mask = MissingMask::from_fn(rows.len(), header.len(), |i, j| {
        let f = rows[i][j].trim();
        if binary {
            f == "1"
        } else {
            f.is_empty() || f == crate::data::NA_TOKEN
        }
    });
    Ok((header, mask))
}

pub fn meta_to_toml(meta: &MaskMeta) -> String {
    toml::to_string(meta).expect("mask metadata always serializes")
}

pub fn meta_from_toml(text: &str) -> Result<MaskMeta> {
    toml::from_str(text).map_err(|e| ImputeError::Config(format!("mask metadata: {e}")))
}
