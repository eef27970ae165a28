use fpimpute::baselines::{
    build_imputer, shared_distance, soft_threshold, AutoencoderConfig, AutoencoderImputer, AutoencoderKind, Imputer,
    KnnConfig, KnnImputer, MiceConfig, MiceImputer, PcaConfig, PcaImputer, SoftImputeConfig, SoftImputer,
    METHOD_NAMES,
};
use fpimpute::generative::HeadKind;
use fpimpute::missingness::{IncompleteMatrix, MissingMask};
use fpimpute::seeded_rng;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn rank_one(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed);
    let u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
    DMatrix::from_fn(n, k, |i, j| u[i] * v[j])
}

/// MCAR mask that never hides a whole row or column.
fn mcar(n: usize, k: usize, rate: f64, seed: u64) -> MissingMask {
    let mut rng = seeded_rng(seed);
    let mut mask = MissingMask::from_fn(n, k, |_, _| rng.gen_bool(rate));
    for i in 0..n {
        if mask.row(i).iter().all(|&m| m) {
            mask.set(i, i % k, false);
        }
    }
    for j in 0..k {
        if mask.column_missing_count(j) == n {
            mask.set(j % n, j, false);
        }
    }
    mask
}

fn masked_rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &MissingMask) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..truth.nrows() {
        for j in 0..truth.ncols() {
            if mask.is_missing(i, j) {
                sum += (pred[(i, j)] - truth[(i, j)]).powi(2);
                count += 1;
            }
        }
    }
    (sum / count as f64).sqrt()
}

#[test]
fn pca_recovers_rank_one_exactly() {
    let truth = rank_one(40, 8, 1);
    let mask = mcar(40, 8, 0.2, 2);
    let data = IncompleteMatrix::hide(&truth, &mask).unwrap();
    let mut pca = PcaImputer::new(PcaConfig {
        rank: Some(1),
        max_iters: 5000,
        tol: 1e-12,
    })
    .unwrap();
    let out = pca.fit(&data).unwrap();
    let err = (0..40)
        .flat_map(|i| (0..8).map(move |j| (i, j)))
        .map(|(i, j)| (out[(i, j)] - truth[(i, j)]).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "max abs error {err}");
    let trace = pca.trace();
    assert!(trace.iter().skip(2).zip(trace.iter().skip(3)).all(|(a, b)| b <= &(a * (1.0 + 1e-9))));
}

#[test]
fn pca_transform_projects_new_rows() {
    let truth = rank_one(60, 6, 3);
    let mask = mcar(60, 6, 0.2, 4);
    let data = IncompleteMatrix::hide(&truth, &mask).unwrap();
    let (train, test) = (data.select_rows(&(0..50).collect::<Vec<_>>()), data.select_rows(&(50..60).collect::<Vec<_>>()));
    let mut pca = PcaImputer::new(PcaConfig {
        rank: Some(1),
        max_iters: 5000,
        tol: 1e-12,
    })
    .unwrap();
    pca.fit(&train).unwrap();
    let out = pca.transform(&test).unwrap();
    let truth_test = truth.rows(50, 10).into_owned();
    assert!(masked_rmse(&out, &truth_test, test.mask()) < 1e-6);
}

#[test]
fn softimpute_recovers_rank_one() {
    let truth = rank_one(40, 8, 5);
    let mask = mcar(40, 8, 0.3, 6);
    let data = IncompleteMatrix::hide(&truth, &mask).unwrap();
    let lambdas: Vec<f64> = (0..9).map(|i| 10f64.powi(-(i as i32 - 4))).collect();
    let mut soft = SoftImputer::new(SoftImputeConfig {
        lambdas: Some(lambdas.clone()),
        max_iters: 1000,
        tol: 1e-12,
    })
    .unwrap();
    let out = soft.fit(&data).unwrap();
    let rmse = masked_rmse(&out, &truth, &mask);
    assert!(rmse < 1e-2, "rmse {rmse}");

    // objective never increases within a fixed lambda
    for lambda in lambdas {
        let objs: Vec<f64> = soft.trace().iter().filter(|s| s.lambda == lambda).map(|s| s.objective).collect();
        for w in objs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "lambda {lambda}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn soft_threshold_matches_definition_on_random_spectra() {
    let mut rng = seeded_rng(7);
    for _ in 0..200 {
        let len = rng.gen_range(1..20);
        let s: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..10.0)).collect();
        let lambda = rng.gen_range(0.0..10.0);
        let got = soft_threshold(&s, lambda);
        for (g, v) in got.iter().zip(&s) {
            let expected = if v > &lambda { v - lambda } else { 0.0 };
            assert_eq!(*g, expected);
        }
    }
}

/// Exhaustive nearest-donor search written independently of the imputer.
fn brute_force_1nn(train: &DMatrix<f64>, query: &[f64], j: usize) -> Option<f64> {
    let mut best: Option<(f64, usize)> = None;
    for r in 0..train.nrows() {
        if train[(r, j)].is_nan() {
            continue;
        }
        let mut sq = 0.0;
        let mut shared = 0;
        for c in 0..query.len() {
            if !query[c].is_nan() && !train[(r, c)].is_nan() {
                sq += (query[c] - train[(r, c)]).powi(2);
                shared += 1;
            }
        }
        if shared == 0 {
            continue;
        }
        let d = (sq / shared as f64).sqrt();
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, r));
        }
    }
    best.map(|(_, r)| train[(r, j)])
}

#[test]
fn knn_matches_exhaustive_search() {
    let mut rng = seeded_rng(11);
    for instance in 0..30 {
        let n = rng.gen_range(2..=200);
        let k = rng.gen_range(2..6);
        // coarse grid values so distance ties actually occur
        let truth = DMatrix::from_fn(n, k, |_, _| rng.gen_range(0..4) as f64);
        let mask = mcar(n, k, 0.3, instance);
        let data = IncompleteMatrix::hide(&truth, &mask).unwrap();
        let split = n / 2;
        let train = data.select_rows(&(0..split.max(1)).collect::<Vec<_>>());
        let test = data.select_rows(&(split.max(1)..n).collect::<Vec<_>>());
        let mut knn = KnnImputer::new(KnnConfig::default()).unwrap();
        if knn.fit(&train).is_err() {
            continue; // a feature unobserved in the training half
        }
        let out = knn.transform(&test).unwrap();
        for i in 0..test.n_rows() {
            let q: Vec<f64> = test.values().row(i).iter().copied().collect();
            for j in 0..k {
                if test.mask().is_missing(i, j) {
                    if let Some(expected) = brute_force_1nn(train.values(), &q, j) {
                        assert_eq!(out[(i, j)], expected, "instance {instance} row {i} col {j}");
                    }
                }
            }
        }
    }
}

#[test]
fn knn_distance_ignores_unshared_features() {
    let nan = f64::NAN;
    assert_eq!(shared_distance(&[1.0, nan, 3.0], &[1.0, 100.0, 3.0]), Some(0.0));
}

#[test]
fn knn_k_averages_donors() {
    let train = IncompleteMatrix::from_nan(DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]));
    let mut knn = KnnImputer::new(KnnConfig { k: 2 }).unwrap();
    knn.fit(&train).unwrap();
    let out = knn
        .transform(&IncompleteMatrix::from_nan(DMatrix::from_row_slice(1, 2, &[0.9, f64::NAN])))
        .unwrap();
    assert!((out[(0, 1)] - 0.5).abs() < 1e-15);
}

#[test]
fn mice_recovers_exact_linear_relation() {
    let mut rng = seeded_rng(13);
    let n = 50;
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let truth = DMatrix::from_fn(n, 2, |i, j| if j == 0 { xs[i] } else { 2.0 * xs[i] });
    let mask = MissingMask::from_fn(n, 2, |i, j| j == 1 && i % 5 == 0);
    let data = IncompleteMatrix::hide(&truth, &mask).unwrap();
    let mut mice = MiceImputer::new(MiceConfig { rounds: 10, ridge: 1e-8 }).unwrap();
    let out = mice.fit(&data).unwrap();
    let err = (0..n).filter(|i| i % 5 == 0).map(|i| (out[(i, 1)] - truth[(i, 1)]).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");

    let new = IncompleteMatrix::from_nan(DMatrix::from_row_slice(1, 2, &[1.5, f64::NAN]));
    assert!((mice.transform(&new).unwrap()[(0, 1)] - 3.0).abs() < 1e-6);
}

#[test]
fn autoencoder_overfits_small_data() {
    let mut rng = seeded_rng(17);
    let truth = DMatrix::from_fn(10, 4, |_, _| rng.gen_range(0.0..1.0));
    let data = IncompleteMatrix::from_nan(truth.clone());
    let mut ae = AutoencoderImputer::new(
        AutoencoderKind::Ae,
        AutoencoderConfig {
            epochs: 200,
            batch_size: 10,
            learning_rate: 1e-2,
            ..AutoencoderConfig::default()
        },
        0,
    )
    .unwrap();
    ae.fit(&data).unwrap();
    let final_loss = *ae.loss_trace().last().unwrap();
    // loss is ½Σ per row; convert to a per-cell mean squared error
    let mse = 2.0 * final_loss / 4.0;
    assert!(mse < 1e-2, "mse {mse}");
}

#[test]
fn every_method_preserves_observed_cells() {
    let mut rng = seeded_rng(19);
    let heads = vec![HeadKind::Gaussian; 4];
    for name in METHOD_NAMES {
        let params: Option<toml::Value> = match name {
            "generative" => Some(toml::from_str("[fit]\nepochs = 2").unwrap()),
            "ae" | "dae" | "rae" => Some(toml::from_str("epochs = 2\nhidden = [8]").unwrap()),
            _ => None,
        };
        let truth = DMatrix::from_fn(30, 4, |_, _| rng.gen_range(0.0..1.0));
        let mask = mcar(30, 4, 0.4, 23);
        let data = IncompleteMatrix::hide(&truth, &mask).unwrap();
        let mut imp = build_imputer(name, params.as_ref(), &heads, 3).unwrap();
        let fitted = imp.fit(&data.select_rows(&(0..20).collect::<Vec<_>>())).unwrap();
        let test = data.select_rows(&(20..30).collect::<Vec<_>>());
        let out = imp.transform(&test).unwrap();
        for (m, input, offset) in [(&fitted, &data, 0), (&out, &data, 20)] {
            for i in 0..m.nrows() {
                for j in 0..4 {
                    let v = m[(i, j)];
                    assert!(v.is_finite(), "{name}");
                    if !input.mask().is_missing(i + offset, j) {
                        assert_eq!(v.to_bits(), truth[(i + offset, j)].to_bits(), "{name}");
                    }
                }
            }
        }
    }
}

#[test]
fn autoencoders_are_deterministic_per_seed() {
    let mut rng = seeded_rng(29);
    let truth = DMatrix::from_fn(20, 3, |_, _| rng.gen_range(0.0..1.0));
    let data = IncompleteMatrix::hide(&truth, &mcar(20, 3, 0.3, 31)).unwrap();
    let params: toml::Value = toml::from_str("epochs = 3\nhidden = [8]").unwrap();
    for name in ["ae", "dae", "rae"] {
        let a = build_imputer(name, Some(&params), &[], 5).unwrap().fit(&data).unwrap();
        let b = build_imputer(name, Some(&params), &[], 5).unwrap().fit(&data).unwrap();
        assert_eq!(a, b, "{name}");
    }
}
