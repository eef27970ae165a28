//! Imputation error (RMSE_Sum) and downstream model quality.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ImputeError, Result};
use crate::missingness::MissingMask;
use crate::nn::{adam_step, AdamState, Activation, Mlp};
use crate::{derive_seed, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseMode {
    /// Every feature's squared error is averaged over all `n` rows.
    All,
    /// Averaged over the masked cells of each feature only.
    MissingOnly,
}

impl FromStr for RmseMode {
    type Err = ImputeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(RmseMode::All),
            "missing" | "missing_only" | "missing-only" => Ok(RmseMode::MissingOnly),
            other => Err(ImputeError::Config(format!(
                "unknown RMSE mode '{other}' (expected all or missing)"
            ))),
        }
    }
}

/// `Σ_j sqrt(Σ_i (pred_ij - truth_ij)² / denom_j)`.
///
/// In `All` mode the sum runs over every row and `denom_j = n`. In
/// `MissingOnly` mode it runs over the masked cells of feature `j` and
/// `denom_j` is their count; features without masked cells contribute 0.
pub fn rmse_sum(pred: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &MissingMask, mode: RmseMode) -> Result<f64> {
    if pred.shape() != truth.shape() || mask.shape() != truth.shape() {
        return Err(ImputeError::Metric(format!(
            "shape mismatch: pred {:?}, truth {:?}, mask {:?}",
            pred.shape(),
            truth.shape(),
            mask.shape()
        )));
    }
    let n = truth.nrows();
    if n == 0 {
        return Err(ImputeError::Metric("no rows to evaluate".into()));
    }
    let mut total = 0.0;
    for j in 0..truth.ncols() {
        let mut sq = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if mode == RmseMode::All || mask.is_missing(i, j) {
                let d = pred[(i, j)] - truth[(i, j)];
                sq += d * d;
                count += 1;
            }
        }
        let denom = match mode {
            RmseMode::All => n,
            RmseMode::MissingOnly => count,
        };
        if denom > 0 {
            total += (sq / denom as f64).sqrt();
        }
    }
    if !total.is_finite() {
        return Err(ImputeError::Metric("non-finite RMSE_Sum (prediction contains NaN or inf)".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        })
    }
}

impl FromStr for Task {
    type Err = ImputeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            other => Err(ImputeError::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            hidden: vec![64, 32],
            epochs: 200,
            batch_size: 50,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DownstreamMetric {
    Accuracy(f64),
    Rmse(f64),
}

impl DownstreamMetric {
    pub fn name(&self) -> &'static str {
        match self {
            DownstreamMetric::Accuracy(_) => "accuracy",
            DownstreamMetric::Rmse(_) => "rmse",
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            DownstreamMetric::Accuracy(v) | DownstreamMetric::Rmse(v) => *v,
        }
    }
}

/// Trains a tanh MLP on imputed training rows and scores it on imputed test
/// rows: test accuracy (cross-entropy training) or test RMSE (squared error).
pub fn downstream_eval(
    train_x: &DMatrix<f64>,
    train_y: &[f64],
    test_x: &DMatrix<f64>,
    test_y: &[f64],
    task: Task,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<DownstreamMetric> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(ImputeError::Evaluation("feature and label row counts differ".into()));
    }
    if train_x.ncols() != test_x.ncols() {
        return Err(ImputeError::Evaluation("train and test feature counts differ".into()));
    }
    if train_x.nrows() == 0 || test_x.nrows() == 0 {
        return Err(ImputeError::Evaluation("empty train or test split".into()));
    }
    let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    if !finite(train_x) || !finite(test_x) || !train_y.iter().chain(test_y).all(|v| v.is_finite()) {
        return Err(ImputeError::Evaluation(
            "downstream inputs must be fully imputed and finite".into(),
        ));
    }

    let classes: Vec<f64> = match task {
        Task::Classification => {
            let train_set: BTreeSet<u64> = train_y.iter().map(|v| v.to_bits()).collect();
            if let Some(bad) = test_y.iter().find(|v| !train_set.contains(&v.to_bits())) {
                return Err(ImputeError::Evaluation(format!(
                    "test label {bad} never appears in the training labels"
                )));
            }
            let mut c: Vec<f64> = train_set.into_iter().map(f64::from_bits).collect();
            c.sort_by(f64::total_cmp);
            c
        }
        Task::Regression => Vec::new(),
    };
    let class_of = |y: f64| classes.iter().position(|&c| c == y).expect("label validated");
    let out_dim = if task == Task::Classification { classes.len() } else { 1 };

    let mut sizes = vec![train_x.ncols()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(out_dim);
    let mut rng = seeded_rng(derive_seed(seed, 0x646f776e));
    let mut net = Mlp::with_output_activation(&sizes, Activation::Identity, &mut rng)?;
    let mut adam = AdamState::new(&net, cfg.learning_rate);

    let xt = train_x.transpose();
    let mut order: Vec<usize> = (0..train_x.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = xt.select_columns(chunk);
            let trace = net.forward_trace(&xb)?;
            let out = trace.output();
            let b = chunk.len() as f64;
            let grad = match task {
                Task::Classification => {
                    let mut g = softmax_columns(out);
                    for (c, &row) in chunk.iter().enumerate() {
                        g[(class_of(train_y[row]), c)] -= 1.0;
                    }
                    g / b
                }
                Task::Regression => {
                    DMatrix::from_fn(1, chunk.len(), |_, c| (out[(0, c)] - train_y[chunk[c]]) / b)
                }
            };
            let (grads, _) = net.backward_batch(&trace, &grad)?;
            adam_step(&mut net, &grads, &mut adam)?;
        }
    }

    let pred = net.forward_batch(&test_x.transpose())?;
    Ok(match task {
        Task::Classification => {
            let correct = (0..test_x.nrows())
                .filter(|&c| {
                    let col = pred.column(c);
                    let best = (0..col.len())
                        .max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a)))
                        .unwrap();
                    best == class_of(test_y[c])
                })
                .count();
            DownstreamMetric::Accuracy(correct as f64 / test_x.nrows() as f64)
        }
        Task::Regression => {
            let mse = (0..test_x.nrows())
                .map(|c| (pred[(0, c)] - test_y[c]).powi(2))
                .sum::<f64>()
                / test_x.nrows() as f64;
            DownstreamMetric::Rmse(mse.sqrt())
        }
    })
}

fn softmax_columns(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut col in out.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Straight transcription of the formula, one cell at a time.
    fn brute_force(pred: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &MissingMask, all: bool) -> f64 {
        let mut total = 0.0;
        for j in 0..truth.ncols() {
            let mut cells = Vec::new();
            for i in 0..truth.nrows() {
                if all || mask.is_missing(i, j) {
                    cells.push((pred[(i, j)] - truth[(i, j)]).powi(2));
                }
            }
            if !cells.is_empty() {
                total += (cells.iter().sum::<f64>() / cells.len() as f64).sqrt();
            }
        }
        total
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let t = DMatrix::from_fn(5, 3, |i, j| (i * j) as f64 * 0.1);
        let m = MissingMask::from_fn(5, 3, |i, _| i % 2 == 0);
        assert_eq!(rmse_sum(&t, &t, &m, RmseMode::All).unwrap(), 0.0);
        assert_eq!(rmse_sum(&t, &t, &m, RmseMode::MissingOnly).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let truth = DMatrix::zeros(2, 2);
        let pred = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let m = MissingMask::from_fn(2, 2, |i, j| i == 0 && j == 0);
        let v = rmse_sum(&pred, &truth, &m, RmseMode::All).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse_sum(&pred, &truth, &m, RmseMode::MissingOnly).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_metric_error() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(3, 2);
        let m = MissingMask::none(2, 2);
        assert!(matches!(rmse_sum(&a, &b, &m, RmseMode::All), Err(ImputeError::Metric(_))));
    }

    #[test]
    fn zero_imputer_closed_form() {
        let mut rng = seeded_rng(3);
        let truth = DMatrix::from_fn(20, 4, |_, _| rng.gen::<f64>());
        let mask = MissingMask::from_fn(20, 4, |i, j| (i + j) % 3 == 0);
        let pred = DMatrix::from_fn(20, 4, |i, j| if mask.is_missing(i, j) { 0.0 } else { truth[(i, j)] });
        let expected: f64 = (0..4)
            .map(|j| {
                let sq: Vec<f64> = (0..20)
                    .filter(|&i| mask.is_missing(i, j))
                    .map(|i| truth[(i, j)].powi(2))
                    .collect();
                (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
            })
            .sum();
        let got = rmse_sum(&pred, &truth, &mask, RmseMode::MissingOnly).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_scaling(seed in any::<u64>(), n in 1usize..30, k in 1usize..6) {
            let mut rng = seeded_rng(seed);
            let truth = DMatrix::from_fn(n, k, |_, _| rng.gen::<f64>());
            let mask = MissingMask::from_fn(n, k, |_, _| rng.gen_bool(0.4));
            let pred = DMatrix::from_fn(n, k, |i, j| {
                if mask.is_missing(i, j) { rng.gen::<f64>() } else { truth[(i, j)] }
            });
            let all = rmse_sum(&pred, &truth, &mask, RmseMode::All).unwrap();
            let miss = rmse_sum(&pred, &truth, &mask, RmseMode::MissingOnly).unwrap();
            prop_assert!((all - brute_force(&pred, &truth, &mask, true)).abs() <= 1e-12);
            prop_assert!((miss - brute_force(&pred, &truth, &mask, false)).abs() <= 1e-12);
            prop_assert!(all <= miss + 1e-12);
            // Per feature, all-mode RMSE = missing-only RMSE * sqrt(miss_j / n).
            let rescaled: f64 = (0..k).map(|j| {
                let mj = mask.column_missing_count(j);
                if mj == 0 { return 0.0; }
                let col_mask = MissingMask::from_fn(n, k, |i, c| c == j && mask.is_missing(i, c));
                rmse_sum(&pred, &truth, &col_mask, RmseMode::MissingOnly).unwrap() * (mj as f64 / n as f64).sqrt()
            }).sum();
            prop_assert!((all - rescaled).abs() <= 1e-12);
        }

        #[test]
        fn row_permutation_invariant(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = seeded_rng(seed);
            let truth = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
            let pred = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
            let mask = MissingMask::from_fn(n, 3, |_, _| rng.gen_bool(0.5));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for mode in [RmseMode::All, RmseMode::MissingOnly] {
                let a = rmse_sum(&pred, &truth, &mask, mode).unwrap();
                let b = rmse_sum(&pred.select_rows(&perm), &truth.select_rows(&perm), &mask.select_rows(&perm), mode).unwrap();
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn equal_squared_errors_give_equal_metrics() {
        let truth = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 0.5, 0.5]);
        let mask = MissingMask::from_fn(3, 2, |i, _| i < 2);
        let a = DMatrix::from_row_slice(3, 2, &[0.3, -0.2, 1.0, 1.1, 0.5, 0.5]);
        let b = DMatrix::from_row_slice(3, 2, &[-0.3, 0.2, 1.0, 0.9, 0.5, 0.5]);
        for mode in [RmseMode::All, RmseMode::MissingOnly] {
            let (ra, rb) = (rmse_sum(&a, &truth, &mask, mode).unwrap(), rmse_sum(&b, &truth, &mask, mode).unwrap());
            assert!((ra - rb).abs() < 1e-15, "{ra} vs {rb}");
        }
    }

    fn fast_cfg() -> DownstreamConfig {
        DownstreamConfig {
            epochs: 200,
            ..DownstreamConfig::default()
        }
    }

    #[test]
    fn separable_classes() {
        let mut rng = seeded_rng(1);
        let make = |rng: &mut crate::SeededRng, n: usize| {
            let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
            let y: Vec<f64> = (0..n).map(|i| if x[(i, 0)] + x[(i, 1)] > 0.0 { 1.0 } else { 0.0 }).collect();
            (x, y)
        };
        let (tx, ty) = make(&mut rng, 200);
        let (vx, vy) = make(&mut rng, 100);
        let m = downstream_eval(&tx, &ty, &vx, &vy, Task::Classification, &fast_cfg(), 3).unwrap();
        assert_eq!(m.name(), "accuracy");
        assert!(m.value() >= 0.95, "{m:?}");
        let again = downstream_eval(&tx, &ty, &vx, &vy, Task::Classification, &fast_cfg(), 3).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn identity_regression() {
        let mut rng = seeded_rng(2);
        let tx = DMatrix::from_fn(200, 1, |_, _| rng.gen::<f64>());
        let ty: Vec<f64> = tx.iter().copied().collect();
        let vx = DMatrix::from_fn(50, 1, |_, _| rng.gen::<f64>());
        let vy: Vec<f64> = vx.iter().copied().collect();
        let m = downstream_eval(&tx, &ty, &vx, &vy, Task::Regression, &fast_cfg(), 4).unwrap();
        assert!(m.value() < 0.05, "{m:?}");
    }

    #[test]
    fn unseen_test_class_rejected() {
        let x = DMatrix::zeros(2, 1);
        let err = downstream_eval(&x, &[0.0, 0.0], &x, &[0.0, 1.0], Task::Classification, &fast_cfg(), 0);
        assert!(matches!(err, Err(ImputeError::Evaluation(_))));
    }
}
