use fpimpute::evaluation::{downstream_eval, rmse_sum, DownstreamConfig, RmseMode, Task};
use fpimpute::missingness::MissingMask;
use fpimpute::seeded_rng;
use nalgebra::DMatrix;
use rand::Rng;

/// Direct transcription of the metric with explicit loops.
fn brute_force(pred: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &MissingMask, missing_only: bool) -> f64 {
    let (n, k) = truth.shape();
    let mut total = 0.0;
    for j in 0..k {
        let mut sq = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            sq += (pred[(i, j)] - truth[(i, j)]).powi(2);
            if mask.is_missing(i, j) {
                count += 1;
            }
        }
        let denom = if missing_only { count } else { n };
        if denom > 0 {
            total += (sq / denom as f64).sqrt();
        }
    }
    total
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = seeded_rng(5);
    for _ in 0..100 {
        let (n, k) = (rng.gen_range(1..40), rng.gen_range(1..8));
        let truth = DMatrix::from_fn(n, k, |_, _| rng.gen_range(0.0..1.0));
        let mask = MissingMask::from_fn(n, k, |_, _| rng.gen_bool(0.3));
        // observed cells preserved, masked cells perturbed
        let pred = DMatrix::from_fn(n, k, |i, j| {
            if mask.is_missing(i, j) {
                rng.gen_range(-1.0..2.0)
            } else {
                truth[(i, j)]
            }
        });
        for (mode, missing_only) in [(RmseMode::All, false), (RmseMode::MissingOnly, true)] {
            let got = rmse_sum(&pred, &truth, &mask, mode).unwrap();
            let want = brute_force(&pred, &truth, &mask, missing_only);
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
        let all = rmse_sum(&pred, &truth, &mask, RmseMode::All).unwrap();
        let missing = rmse_sum(&pred, &truth, &mask, RmseMode::MissingOnly).unwrap();
        assert!(all <= missing + 1e-12);
    }
}

#[test]
fn downstream_is_deterministic() {
    let mut rng = seeded_rng(8);
    let x = DMatrix::from_fn(60, 3, |_, _| rng.gen_range(-1.0..1.0));
    let y: Vec<f64> = (0..60).map(|i| if x[(i, 0)] > 0.0 { 1.0 } else { 0.0 }).collect();
    let cfg = DownstreamConfig {
        epochs: 20,
        ..DownstreamConfig::default()
    };
    let (tr, te) = (x.rows(0, 40).into_owned(), x.rows(40, 20).into_owned());
    let a = downstream_eval(&tr, &y[..40], &te, &y[40..], Task::Classification, &cfg, 3).unwrap();
    let b = downstream_eval(&tr, &y[..40], &te, &y[40..], Task::Classification, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.value()));
}

#[test]
fn downstream_rejects_unfilled_inputs() {
    let mut x = DMatrix::from_element(4, 2, 0.5);
    x[(1, 1)] = f64::NAN;
    let y = [0.0, 1.0, 0.0, 1.0];
    let cfg = DownstreamConfig::default();
    assert!(downstream_eval(&x, &y, &x, &y, Task::Regression, &cfg, 0).is_err());
}
