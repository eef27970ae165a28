use fpimpute::generative::{FitConfig, GenerativeImputer, HeadKind, Inference, ModelConfig};
use fpimpute::missingness::{generate_mask, FeatureFill, IncompleteMatrix, InitPolicy, Strategy};
use fpimpute::synthetic::{generate, SyntheticKind};
use nalgebra::DMatrix;

fn small_model(seed: u64) -> GenerativeImputer {
    let config = ModelConfig {
        latent_dim: 4,
        encoder_hidden: vec![16],
        decoder_hidden: vec![16],
        ..ModelConfig::default()
    };
    GenerativeImputer::new(vec![HeadKind::Gaussian; 8], config, seed).unwrap()
}

fn masked_linear(n: usize) -> (DMatrix<f64>, IncompleteMatrix) {
    let s = generate(SyntheticKind::LinearGaussian, n, 0);
    let (norm, _) = s.data.minmax_fit_transform().unwrap();
    let mask = generate_mask(&norm.values, 0.5, Strategy::MnarRandom, 1).unwrap().missing;
    let hidden = IncompleteMatrix::hide(&norm.values, &mask).unwrap();
    (norm.values, hidden)
}

fn quick_fit(seed: u64, epochs: usize) -> FitConfig {
    FitConfig {
        epochs,
        seed,
        ..FitConfig::default()
    }
}

#[test]
fn fit_is_reproducible_for_a_seed() {
    let (_, data) = masked_linear(200);
    let mut a = small_model(3);
    let mut b = small_model(3);
    let ra = a.fit(&data, &quick_fit(3, 5)).unwrap();
    let rb = b.fit(&data, &quick_fit(3, 5)).unwrap();
    assert_eq!(ra.imputed, rb.imputed);
    assert_eq!(ra.epoch_objective, rb.epoch_objective);
}

#[test]
fn training_raises_the_objective() {
    let (_, data) = masked_linear(300);
    let mut model = small_model(1);
    let out = model.fit(&data, &quick_fit(1, 40)).unwrap();
    let head: f64 = out.epoch_objective[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = out.epoch_objective[35..].iter().sum::<f64>() / 5.0;
    assert!(tail > head, "{head} -> {tail}");
}

#[test]
fn outputs_keep_observed_cells_and_fill_the_rest() {
    let (_, data) = masked_linear(200);
    let mut model = small_model(2);
    let out = model.fit(&data, &quick_fit(2, 3)).unwrap();
    let test = model.transform(&data, Inference::converge()).unwrap();
    for m in [&out.imputed, &test] {
        for i in 0..200 {
            for j in 0..8 {
                assert!(m[(i, j)].is_finite());
                if !data.mask().is_missing(i, j) {
                    assert_eq!(m[(i, j)].to_bits(), data.values()[(i, j)].to_bits());
                }
            }
        }
    }
}

#[test]
fn fixed_point_trace_shrinks_on_a_trained_model() {
    let (_, data) = masked_linear(300);
    let mut model = small_model(4);
    model.fit(&data, &quick_fit(4, 30)).unwrap();
    let filled = FeatureFill::fit(InitPolicy::Mean, &data).unwrap().apply(&data, 0).unwrap();
    let mut converged = 0;
    let mut rows = 0;
    for i in 0..300 {
        let mask_row = data.mask().row(i);
        if !mask_row.iter().any(|&m| m) {
            continue;
        }
        rows += 1;
        let row: Vec<f64> = filled.row(i).iter().copied().collect();
        let trace = model.fixed_point_trace(&row, mask_row, 10).unwrap();
        if trace.iter().any(|&c| c < 1e-3) {
            converged += 1;
        }
    }
    assert!(converged as f64 >= 0.9 * rows as f64, "{converged}/{rows}");
}

#[test]
fn save_and_load_preserve_imputations() {
    let (_, data) = masked_linear(120);
    let mut model = small_model(5);
    model.fit(&data, &quick_fit(5, 2)).unwrap();
    let text = model.save(&model.manifest(None, None, vec![]));
    let (loaded, _) = GenerativeImputer::load(&text).unwrap();
    assert_eq!(
        model.transform(&data, Inference::Fixed(3)).unwrap(),
        loaded.transform(&data, Inference::Fixed(3)).unwrap()
    );
}
