//! Reference imputers: constant fills, 1-NN, iterative PCA, SoftImpute,
//! linear chained equations and the autoencoder family, plus an [`Imputer`]
//! wrapper for the generative model so the harness can treat all of them alike.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ImputeError, Result};
use crate::generative::{FitConfig, GenerativeImputer, HeadKind, Inference, ModelConfig};
use crate::missingness::{FeatureFill, IncompleteMatrix, InitPolicy};
use crate::nn::{adam_step, masked_squared_error, AdamState, Gradients, Mlp};
use crate::{derive_seed, seeded_rng};

/// Common interface of every imputation method.
///
/// Both methods return a fully populated matrix whose observed cells are the
/// input's observed cells, bit for bit.
pub trait Imputer: Send {
    fn name(&self) -> &str;
    /// Learns from `train` and returns its imputation.
    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>>;
    /// Imputes rows not seen during `fit`.
    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>>;
    /// Free-form remarks for the report, e.g. fallbacks taken.
    fn notes(&self) -> Vec<String> {
        Vec::new()
    }
}

fn not_fitted(name: &str) -> ImputeError {
    ImputeError::Imputation(format!("{name}: transform called before fit"))
}

fn check_width(name: &str, expected: usize, rows: &IncompleteMatrix) -> Result<()> {
    if rows.n_cols() != expected {
        return Err(ImputeError::shape("transform columns", format!("{expected} ({name})"), rows.n_cols()));
    }
    Ok(())
}

// ---------------------------------------------------------------- constant

/// Mean, median or zero fill, with statistics from observed training cells.
#[derive(Debug, Clone)]
pub struct ConstantImputer {
    policy: InitPolicy,
    fill: Option<FeatureFill>,
}

impl ConstantImputer {
    pub fn new(policy: InitPolicy) -> Result<Self> {
        if policy == InitPolicy::Random {
            return Err(ImputeError::Config("constant imputer takes mean, median or zero".into()));
        }
        Ok(ConstantImputer { policy, fill: None })
    }
}

impl Imputer for ConstantImputer {
    fn name(&self) -> &str {
        match self.policy {
            InitPolicy::Mean => "mean",
            InitPolicy::Median => "median",
            _ => "zero",
        }
    }

    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let fill = FeatureFill::fit(self.policy, train)?;
        let out = fill.apply(train, 0)?;
        self.fill = Some(fill);
        Ok(out)
    }

    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        self.fill.as_ref().ok_or_else(|| not_fitted(self.name()))?.apply(rows, 0)
    }
}

// --------------------------------------------------------------------- knn

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 1 }
    }
}

/// Nearest-neighbour fill over the observed training cells.
#[derive(Debug)]
pub struct KnnImputer {
    config: KnnConfig,
    train: Option<IncompleteMatrix>,
    means: Vec<f64>,
    fallbacks: AtomicUsize,
}

/// Euclidean distance over the features observed in both rows, divided by the
/// number of such features before the square root. `None` if nothing is shared.
pub fn shared_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut shared = 0usize;
    for (x, y) in a.iter().zip(b) {
        if !x.is_nan() && !y.is_nan() {
            sum += (x - y) * (x - y);
            shared += 1;
        }
    }
    (shared > 0).then(|| (sum / shared as f64).sqrt())
}

impl KnnImputer {
    pub fn new(config: KnnConfig) -> Result<Self> {
        if config.k == 0 {
            return Err(ImputeError::Config("knn: k must be at least 1".into()));
        }
        Ok(KnnImputer {
            config,
            train: None,
            means: Vec::new(),
            fallbacks: AtomicUsize::new(0),
        })
    }

    /// Number of cells filled with the feature mean because no neighbour observed them.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn impute_rows(&self, train: &IncompleteMatrix, rows: &IncompleteMatrix, exclude_self: bool) -> DMatrix<f64> {
        let tv = train.values();
        let mut out = rows.values().clone();
        let train_rows: Vec<Vec<f64>> = (0..train.n_rows()).map(|r| tv.row(r).iter().copied().collect()).collect();
        for i in 0..rows.n_rows() {
            let mask = rows.mask().row(i);
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let query: Vec<f64> = rows.values().row(i).iter().copied().collect();
            let mut ranked: Vec<(f64, usize)> = train_rows
                .iter()
                .enumerate()
                .filter(|&(r, _)| !(exclude_self && r == i))
                .filter_map(|(r, row)| shared_distance(&query, row).map(|d| (d, r)))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (j, &missing) in mask.iter().enumerate() {
                if !missing {
                    continue;
                }
                let donors: Vec<f64> = ranked
                    .iter()
                    .filter(|&&(_, r)| !train.mask().is_missing(r, j))
                    .take(self.config.k)
                    .map(|&(_, r)| tv[(r, j)])
                    .collect();
                out[(i, j)] = if donors.is_empty() {
                    self.fallbacks.fetch_add(1, Ordering::Relaxed);
                    self.means[j]
                } else {
                    donors.iter().sum::<f64>() / donors.len() as f64
                };
            }
        }
        out
    }
}

impl Imputer for KnnImputer {
    fn name(&self) -> &str {
        "knn"
    }

    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        self.means = FeatureFill::fit(InitPolicy::Mean, train)?.values;
        self.fallbacks.store(0, Ordering::Relaxed);
        let out = self.impute_rows(train, train, true);
        self.train = Some(train.clone());
        Ok(out)
    }

    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let train = self.train.as_ref().ok_or_else(|| not_fitted("knn"))?;
        check_width("knn", train.n_cols(), rows)?;
        Ok(self.impute_rows(train, rows, false))
    }

    fn notes(&self) -> Vec<String> {
        match self.fallback_count() {
            0 => Vec::new(),
            n => vec![format!("knn: {n} cells fell back to the feature mean")],
        }
    }
}

// ------------------------------------------------------------- svd helpers

/// Thin SVD with singular values in decreasing order.
struct SortedSvd {
    u: DMatrix<f64>,
    s: DVector<f64>,
    v_t: DMatrix<f64>,
}

fn svd_sorted(m: &DMatrix<f64>, context: &str) -> Result<SortedSvd> {
    let svd = m
        .clone()
        .try_svd(true, true, 1e-14, 10_000)
        .ok_or_else(|| ImputeError::numeric(format!("{context}: SVD did not converge")))?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(ImputeError::numeric(format!("{context}: SVD factors missing"))),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Ok(SortedSvd {
        u: u.select_columns(&order),
        s: DVector::from_iterator(order.len(), order.iter().map(|&i| svd.singular_values[i])),
        v_t: v_t.select_rows(&order),
    })
}

/// `max(s_i - lambda, 0)` for every singular value.
pub fn soft_threshold(singular_values: &[f64], lambda: f64) -> Vec<f64> {
    singular_values.iter().map(|s| (s - lambda).max(0.0)).collect()
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn max_masked_change(a: &DMatrix<f64>, b: &DMatrix<f64>, rows: &IncompleteMatrix) -> f64 {
    let mut change = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if rows.mask().is_missing(i, j) {
                change = change.max((a[(i, j)] - b[(i, j)]).abs());
            }
        }
    }
    change
}

// --------------------------------------------------------------------- pca

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    /// `None` picks the smallest rank explaining 90% of the variance of the
    /// mean-filled training data.
    pub rank: Option<usize>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            rank: None,
            max_iters: 500,
            tol: 1e-9,
        }
    }
}

/// Iterative low-rank reconstruction: fill, center, truncate the SVD,
/// overwrite the masked cells, repeat.
#[derive(Debug, Clone)]
pub struct PcaImputer {
    config: PcaConfig,
    center: DVector<f64>,
    /// `K × r` principal directions.
    components: DMatrix<f64>,
    trace: Vec<f64>,
}

/// Smallest rank whose leading squared singular values reach `fraction` of the total.
pub fn rank_for_variance(singular_values: &[f64], fraction: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= fraction * total {
            return i + 1;
        }
    }
    singular_values.len()
}

impl PcaImputer {
    pub fn new(config: PcaConfig) -> Result<Self> {
        if config.rank == Some(0) {
            return Err(ImputeError::Config("pca: rank must be at least 1".into()));
        }
        Ok(PcaImputer {
            config,
            center: DVector::zeros(0),
            components: DMatrix::zeros(0, 0),
            trace: Vec::new(),
        })
    }

    /// Largest masked-cell change per fit iteration.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn rank(&self) -> usize {
        self.components.ncols()
    }
}

impl Imputer for PcaImputer {
    fn name(&self) -> &str {
        "pca"
    }

    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let (n, k) = (train.n_rows(), train.n_cols());
        let mut x = FeatureFill::fit(InitPolicy::Mean, train)?.apply(train, 0)?;
        let rank = match self.config.rank {
            Some(r) if r > n.min(k) => {
                return Err(ImputeError::Config(format!("pca: rank {r} exceeds min(n, K) = {}", n.min(k))))
            }
            Some(r) => r,
            None => {
                let mu = column_means(&x);
                let centered = DMatrix::from_fn(n, k, |i, j| x[(i, j)] - mu[j]);
                let svd = svd_sorted(&centered, "pca")?;
                rank_for_variance(svd.s.as_slice(), 0.9)
            }
        };
        self.trace.clear();
        for _ in 0..self.config.max_iters.max(1) {
            let mu = column_means(&x);
            let centered = DMatrix::from_fn(n, k, |i, j| x[(i, j)] - mu[j]);
            let svd = svd_sorted(&centered, "pca")?;
            let u = svd.u.columns(0, rank);
            let s = DMatrix::from_diagonal(&svd.s.rows(0, rank).into_owned());
            let v_t = svd.v_t.rows(0, rank);
            let recon = u * s * v_t;
            let mut next = x.clone();
            for i in 0..n {
                for j in 0..k {
                    if train.mask().is_missing(i, j) {
                        next[(i, j)] = recon[(i, j)] + mu[j];
                    }
                }
            }
            let change = max_masked_change(&next, &x, train);
            self.trace.push(change);
            x = next;
            self.center = mu;
            self.components = v_t.transpose();
            if change < self.config.tol {
                break;
            }
        }
        Ok(train.merge_observed(&x))
    }

    /// Least-squares projection of each row's observed cells onto the fitted
    /// subspace; rows with nothing observed get the fitted center.
    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        if self.components.ncols() == 0 {
            return Err(not_fitted("pca"));
        }
        check_width("pca", self.center.len(), rows)?;
        let mut out = rows.values().clone();
        for i in 0..rows.n_rows() {
            let mask = rows.mask().row(i);
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let observed: Vec<usize> = (0..mask.len()).filter(|&j| !mask[j]).collect();
            let coef = if observed.is_empty() {
                DVector::zeros(self.rank())
            } else {
                let basis = self.components.select_rows(&observed);
                let target = DVector::from_iterator(
                    observed.len(),
                    observed.iter().map(|&j| out[(i, j)] - self.center[j]),
                );
                basis
                    .svd(true, true)
                    .solve(&target, 1e-12)
                    .map_err(|e| ImputeError::numeric(format!("pca projection: {e}")))?
            };
            let recon = &self.components * coef;
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    out[(i, j)] = recon[j] + self.center[j];
                }
            }
        }
        Ok(out)
    }
}

// -------------------------------------------------------------- softimpute

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftImputeConfig {
    /// Non-increasing positive shrinkage values; `None` uses a geometric
    /// schedule from `s_max / 2` down to `s_max / 50` over five steps.
    pub lambdas: Option<Vec<f64>>,
    /// Inner iterations per `lambda`.
    pub max_iters: usize,
    /// Relative change `‖Z_new − Z‖²_F / ‖Z‖²_F` that ends an inner loop.
    pub tol: f64,
}

impl Default for SoftImputeConfig {
    fn default() -> Self {
        SoftImputeConfig {
            lambdas: None,
            max_iters: 100,
            tol: 1e-5,
        }
    }
}

/// One record per inner iteration of [`SoftImputer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftImputeStep {
    pub lambda: f64,
    /// `½‖P_Ω(X − Z)‖²_F + λ‖Z‖_*` at the new iterate.
    pub objective: f64,
}

/// Soft-thresholded SVD matrix completion with warm starts along a
/// decreasing `lambda` path.
#[derive(Debug, Clone)]
pub struct SoftImputer {
    config: SoftImputeConfig,
    train: Option<IncompleteMatrix>,
    trace: Vec<SoftImputeStep>,
}

impl SoftImputer {
    pub fn new(config: SoftImputeConfig) -> Result<Self> {
        if let Some(l) = &config.lambdas {
            if l.is_empty() || l.iter().any(|v| !(*v > 0.0 && v.is_finite())) || l.windows(2).any(|w| w[1] > w[0]) {
                return Err(ImputeError::Config(
                    "softimpute: lambdas must be positive and non-increasing".into(),
                ));
            }
        }
        Ok(SoftImputer {
            config,
            train: None,
            trace: Vec::new(),
        })
    }

    pub fn trace(&self) -> &[SoftImputeStep] {
        &self.trace
    }

    fn complete(&self, data: &IncompleteMatrix) -> Result<(DMatrix<f64>, Vec<SoftImputeStep>)> {
        let (n, k) = (data.n_rows(), data.n_cols());
        let mask = data.mask();
        let observed = DMatrix::from_fn(n, k, |i, j| if mask.is_missing(i, j) { 0.0 } else { data.values()[(i, j)] });
        let lambdas = match &self.config.lambdas {
            Some(l) => l.clone(),
            None => {
                let s_max = svd_sorted(&observed, "softimpute")?.s.get(0).copied().unwrap_or(0.0);
                let (hi, lo) = (s_max / 2.0, s_max / 50.0);
                (0..5).map(|i| hi * (lo / hi).powf(i as f64 / 4.0)).collect()
            }
        };
        let mut z = DMatrix::zeros(n, k);
        let mut trace = Vec::new();
        for &lambda in &lambdas {
            for _ in 0..self.config.max_iters.max(1) {
                let filled = DMatrix::from_fn(n, k, |i, j| if mask.is_missing(i, j) { z[(i, j)] } else { observed[(i, j)] });
                let svd = svd_sorted(&filled, "softimpute")?;
                let shrunk = soft_threshold(svd.s.as_slice(), lambda);
                let s = DMatrix::from_diagonal(&DVector::from_vec(shrunk.clone()));
                let next = &svd.u * s * &svd.v_t;
                let denom = z.norm_squared();
                let delta = (&next - &z).norm_squared();
                z = next;
                let fit: f64 = (0..n)
                    .flat_map(|i| (0..k).map(move |j| (i, j)))
                    .filter(|&(i, j)| !mask.is_missing(i, j))
                    .map(|(i, j)| (observed[(i, j)] - z[(i, j)]).powi(2))
                    .sum();
                trace.push(SoftImputeStep {
                    lambda,
                    objective: 0.5 * fit + lambda * shrunk.iter().sum::<f64>(),
                });
                if denom > 0.0 && delta / denom < self.config.tol {
                    break;
                }
            }
        }
        Ok((data.merge_observed(&z), trace))
    }
}

impl Imputer for SoftImputer {
    fn name(&self) -> &str {
        "softimpute"
    }

    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let (out, trace) = self.complete(train)?;
        self.trace = trace;
        self.train = Some(train.clone());
        Ok(out)
    }

    /// Completes the training rows stacked on top of `rows` and returns the
    /// bottom block; the method has no out-of-sample form.
    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let train = self.train.as_ref().ok_or_else(|| not_fitted("softimpute"))?;
        check_width("softimpute", train.n_cols(), rows)?;
        let (full, _) = self.complete(&train.vstack(rows)?)?;
        Ok(rows.merge_observed(&full.rows(train.n_rows(), rows.n_rows()).into_owned()))
    }
}

// -------------------------------------------------------------------- mice

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiceConfig {
    pub rounds: usize,
    /// L2 penalty on the slopes; the intercept is never penalized.
    pub ridge: f64,
}

impl Default for MiceConfig {
    fn default() -> Self {
        MiceConfig { rounds: 10, ridge: 1e-3 }
    }
}

/// Chained linear regressions: each feature is regressed on all others.
#[derive(Debug, Clone)]
pub struct MiceImputer {
    config: MiceConfig,
    means: Vec<f64>,
    /// Per feature: intercept followed by one slope per other feature.
    models: Vec<DVector<f64>>,
}

/// Ridge regression with an unpenalized intercept; returns `[b0, b_1..]`.
pub fn ridge_regression(design: &DMatrix<f64>, target: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    let n = design.nrows();
    let mut x = DMatrix::from_element(n, design.ncols() + 1, 1.0);
    x.columns_mut(1, design.ncols()).copy_from(design);
    let mut gram = x.transpose() * &x;
    for d in 1..gram.nrows() {
        gram[(d, d)] += ridge;
    }
    let rhs = x.transpose() * target;
    if ridge > 0.0 {
        gram.cholesky().map(|c| c.solve(&rhs))
    } else {
        let lu = gram.lu();
        // Treat a numerically singular Gram matrix as singular.
        let scale = lu.u().diagonal().amax().max(f64::MIN_POSITIVE);
        if lu.u().diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
            return None;
        }
        lu.solve(&rhs)
    }
}

impl MiceImputer {
    pub fn new(config: MiceConfig) -> Result<Self> {
        if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
            return Err(ImputeError::Config("mice: ridge must be non-negative".into()));
        }
        Ok(MiceImputer {
            config,
            means: Vec::new(),
            models: Vec::new(),
        })
    }

    fn predict(model: &DVector<f64>, x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        let mut acc = model[0];
        let mut c = 1;
        for other in 0..x.ncols() {
            if other != j {
                acc += model[c] * x[(i, other)];
                c += 1;
            }
        }
        acc
    }

    fn sweep(models: &[DVector<f64>], x: &mut DMatrix<f64>, rows: &IncompleteMatrix) {
        for (j, model) in models.iter().enumerate() {
            for i in 0..x.nrows() {
                if rows.mask().is_missing(i, j) {
                    x[(i, j)] = Self::predict(model, x, i, j);
                }
            }
        }
    }
}

impl Imputer for MiceImputer {
    fn name(&self) -> &str {
        "mice"
    }

    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let k = train.n_cols();
        self.means = FeatureFill::fit(InitPolicy::Mean, train)?.values;
        let mut x = FeatureFill {
            policy: InitPolicy::Mean,
            values: self.means.clone(),
        }
        .apply(train, 0)?;
        let others = |j: usize| (0..k).filter(move |&o| o != j).collect::<Vec<_>>();
        self.models = (0..k)
            .map(|j| {
                let mut m = DVector::zeros(k);
                m[0] = self.means[j];
                m
            })
            .collect();
        for _ in 0..self.config.rounds.max(1) {
            for j in 0..k {
                let rows: Vec<usize> = (0..train.n_rows()).filter(|&i| !train.mask().is_missing(i, j)).collect();
                let design = x.select_rows(&rows).select_columns(&others(j));
                let target = DVector::from_iterator(rows.len(), rows.iter().map(|&i| x[(i, j)]));
                let model = ridge_regression(&design, &target, self.config.ridge).ok_or_else(|| {
                    ImputeError::numeric(format!(
                        "mice: singular normal equations for feature {j}; use ridge > 0"
                    ))
                })?;
                for i in 0..train.n_rows() {
                    if train.mask().is_missing(i, j) {
                        x[(i, j)] = Self::predict(&model, &x, i, j);
                    }
                }
                self.models[j] = model;
            }
        }
        Ok(train.merge_observed(&x))
    }

    /// Mean fill, then the fitted regressions applied for the same number of rounds.
    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        if self.models.is_empty() {
            return Err(not_fitted("mice"));
        }
        check_width("mice", self.models.len(), rows)?;
        let mut x = FeatureFill {
            policy: InitPolicy::Mean,
            values: self.means.clone(),
        }
        .apply(rows, 0)?;
        for _ in 0..self.config.rounds.max(1) {
            Self::sweep(&self.models, &mut x, rows);
        }
        Ok(rows.merge_observed(&x))
    }
}

// ------------------------------------------------------------ autoencoders

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoencoderKind {
    /// Clean input, clean target.
    Ae,
    /// Noised observed inputs, clean target.
    Dae,
    /// Noised observed inputs, target `clean − noised`; imputation is input plus output.
    Rae,
}

impl AutoencoderKind {
    pub fn name(self) -> &'static str {
        match self {
            AutoencoderKind::Ae => "ae",
            AutoencoderKind::Dae => "dae",
            AutoencoderKind::Rae => "rae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// Hidden widths between input and output; the default mirrors the
    /// generative model's encoder, latent and decoder.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Std of the Gaussian corruption of observed inputs (DAE, RAE).
    pub noise_std: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            hidden: vec![128, 64, 100, 64, 128],
            epochs: 100,
            batch_size: 50,
            learning_rate: 1e-3,
            noise_std: 0.1,
        }
    }
}

/// AE / DAE / RAE trained on mean-filled data with a squared-error loss on
/// observed cells only.
#[derive(Debug, Clone)]
pub struct AutoencoderImputer {
    kind: AutoencoderKind,
    config: AutoencoderConfig,
    seed: u64,
    net: Option<Mlp>,
    fill: Option<FeatureFill>,
    loss_trace: Vec<f64>,
}

impl AutoencoderImputer {
    pub fn new(kind: AutoencoderKind, config: AutoencoderConfig, seed: u64) -> Result<Self> {
        if config.epochs == 0 || config.batch_size == 0 {
            return Err(ImputeError::Config(format!("{}: epochs and batch_size must be positive", kind.name())));
        }
        if !(config.noise_std >= 0.0 && config.learning_rate > 0.0) {
            return Err(ImputeError::Config(format!(
                "{}: noise_std must be non-negative and learning_rate positive",
                kind.name()
            )));
        }
        Ok(AutoencoderImputer {
            kind,
            config,
            seed,
            net: None,
            fill: None,
            loss_trace: Vec::new(),
        })
    }

    pub fn network(&self) -> Option<&Mlp> {
        self.net.as_ref()
    }

    /// Mean observed-cell loss per epoch.
    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    /// Training target for a column-major batch: the clean input, or for RAE
    /// the residual `clean − input`.
    pub fn target(&self, clean: &DMatrix<f64>, input: &DMatrix<f64>) -> DMatrix<f64> {
        match self.kind {
            AutoencoderKind::Rae => clean - input,
            _ => clean.clone(),
        }
    }

    /// Loss `½ Σ w (net(input) − target)²` and its parameter gradients.
    pub fn loss_grad(
        net: &Mlp,
        input: &DMatrix<f64>,
        target: &DMatrix<f64>,
        weights: &DMatrix<f64>,
    ) -> Result<(f64, Gradients)> {
        let trace = net.forward_trace(input)?;
        let (loss, grad) = masked_squared_error(trace.output(), target, weights);
        let (grads, _) = net.backward_batch(&trace, &grad)?;
        Ok((loss, grads))
    }

    fn reconstruct(&self, net: &Mlp, filled: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = filled.transpose();
        let out = net.forward_batch(&x)?;
        let recon = match self.kind {
            AutoencoderKind::Rae => &x + out,
            _ => out,
        };
        if recon.iter().any(|v| !v.is_finite()) {
            return Err(ImputeError::numeric(format!("{} reconstruction", self.kind.name())));
        }
        Ok(recon.transpose())
    }
}

impl Imputer for AutoencoderImputer {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let (n, k) = (train.n_rows(), train.n_cols());
        let fill = FeatureFill::fit(InitPolicy::Mean, train)?;
        let filled = fill.apply(train, 0)?;
        let mut sizes = vec![k];
        sizes.extend_from_slice(&self.config.hidden);
        sizes.push(k);
        let mut rng = seeded_rng(derive_seed(self.seed, 0x6165));
        let mut net = Mlp::new(&sizes, &mut rng)?;
        let mut adam = AdamState::new(&net, self.config.learning_rate);
        let clean = filled.transpose();
        let weights = train.mask().observed_weights().transpose();
        let mut order: Vec<usize> = (0..n).collect();
        self.loss_trace.clear();
        let noisy = self.kind != AutoencoderKind::Ae && self.config.noise_std > 0.0;
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let xb = clean.select_columns(chunk);
                let wb = weights.select_columns(chunk);
                let mut input = xb.clone();
                if noisy {
                    for c in 0..input.ncols() {
                        for r in 0..input.nrows() {
                            if wb[(r, c)] > 0.0 {
                                input[(r, c)] += self.config.noise_std * rng.sample::<f64, _>(StandardNormal);
                            }
                        }
                    }
                }
                let target = self.target(&xb, &input);
                let (loss, mut grads) = Self::loss_grad(&net, &input, &target, &wb)?;
                grads.scale(1.0 / chunk.len() as f64);
                adam_step(&mut net, &grads, &mut adam).map_err(|e| ImputeError::Diverged {
                    epoch,
                    step: 0,
                    detail: e.to_string(),
                })?;
                total += loss;
            }
            self.loss_trace.push(total / n as f64);
        }
        let out = train.merge_observed(&self.reconstruct(&net, &filled)?);
        self.net = Some(net);
        self.fill = Some(fill);
        Ok(out)
    }

    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let (net, fill) = match (&self.net, &self.fill) {
            (Some(n), Some(f)) => (n, f),
            _ => return Err(not_fitted(self.name())),
        };
        check_width(self.name(), net.input_dim(), rows)?;
        let filled = fill.apply(rows, 0)?;
        Ok(rows.merge_observed(&self.reconstruct(net, &filled)?))
    }
}

// -------------------------------------------------------------- generative

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerativeConfig {
    pub model: ModelConfig,
    pub fit: FitConfig,
    /// Fixed-point iterations at transform time; `None` iterates to convergence.
    pub inference_iters: Option<usize>,
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        GenerativeConfig {
            model: ModelConfig::default(),
            fit: FitConfig::default(),
            inference_iters: Some(FitConfig::default().inference_count),
        }
    }
}

impl GenerativeConfig {
    pub fn inference(&self) -> Inference {
        match self.inference_iters {
            Some(n) => Inference::Fixed(n),
            None => Inference::converge(),
        }
    }
}

/// [`GenerativeImputer`] behind the [`Imputer`] interface.
#[derive(Debug, Clone)]
pub struct GenerativeMethod {
    config: GenerativeConfig,
    heads: Vec<HeadKind>,
    model: Option<GenerativeImputer>,
}

impl GenerativeMethod {
    /// `config.fit.seed` seeds both weight initialization and training.
    pub fn new(config: GenerativeConfig, heads: Vec<HeadKind>) -> Result<Self> {
        config.fit.validate()?;
        Ok(GenerativeMethod {
            config,
            heads,
            model: None,
        })
    }

    pub fn model(&self) -> Option<&GenerativeImputer> {
        self.model.as_ref()
    }
}

impl Imputer for GenerativeMethod {
    fn name(&self) -> &str {
        "generative"
    }

    fn fit(&mut self, train: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        let mut model = GenerativeImputer::new(self.heads.clone(), self.config.model.clone(), self.config.fit.seed)?;
        let outcome = model.fit(train, &self.config.fit)?;
        self.model = Some(model);
        Ok(outcome.imputed)
    }

    fn transform(&self, rows: &IncompleteMatrix) -> Result<DMatrix<f64>> {
        self.model
            .as_ref()
            .ok_or_else(|| not_fitted("generative"))?
            .transform(rows, self.config.inference())
    }
}

// ---------------------------------------------------------------- registry

pub const METHOD_NAMES: [&str; 11] = [
    "generative", "mean", "median", "zero", "knn", "pca", "softimpute", "mice", "ae", "dae", "rae",
];

fn parse_params<T: DeserializeOwned + Default>(name: &str, params: Option<&toml::Value>) -> Result<T> {
    match params {
        None => Ok(T::default()),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| ImputeError::Config(format!("baselines.{name}: {e}"))),
    }
}

/// Builds an imputer by name. `params` is the `baselines.<name>` table, if
/// any; `seed` drives every stochastic choice the method makes.
pub fn build_imputer(
    name: &str,
    params: Option<&toml::Value>,
    heads: &[HeadKind],
    seed: u64,
) -> Result<Box<dyn Imputer>> {
    let constant_params = |p: Option<&toml::Value>| match p {
        Some(toml::Value::Table(t)) if !t.is_empty() => Err(ImputeError::Config(format!(
            "baselines.{name} takes no parameters"
        ))),
        _ => Ok(()),
    };
    Ok(match name {
        "mean" | "median" | "zero" => {
            constant_params(params)?;
            Box::new(ConstantImputer::new(name.parse()?)?)
        }
        "knn" => Box::new(KnnImputer::new(parse_params(name, params)?)?),
        "pca" => Box::new(PcaImputer::new(parse_params(name, params)?)?),
        "softimpute" => Box::new(SoftImputer::new(parse_params(name, params)?)?),
        "mice" => Box::new(MiceImputer::new(parse_params(name, params)?)?),
        "ae" | "dae" | "rae" => {
            let kind = match name {
                "ae" => AutoencoderKind::Ae,
                "dae" => AutoencoderKind::Dae,
                _ => AutoencoderKind::Rae,
            };
            Box::new(AutoencoderImputer::new(kind, parse_params(name, params)?, seed)?)
        }
        "generative" => {
            let mut cfg: GenerativeConfig = parse_params(name, params)?;
            cfg.fit.seed = seed;
            Box::new(GenerativeMethod::new(cfg, heads.to_vec())?)
        }
        other => {
            return Err(ImputeError::Config(format!(
                "unknown method '{other}'; expected one of {}",
                METHOD_NAMES.join(", ")
            )))
        }
    })
}
