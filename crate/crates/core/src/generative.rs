//! Deep generative imputer trained by EM with fixed-point inference.
//!
//! The model has four networks:
//!
//! - encoder mean `h` and encoder log-variance `l`: `K -> J`, parameterizing
//!   `q(z | x ⊕ E[y|x]) = N(h(·), exp(l(·)))`;
//! - decoder mean `f` and decoder log-variance `g`: `J -> K`, parameterizing a
//!   univariate Gaussian per continuous feature and a Bernoulli with logit
//!   `f_i` per binary feature.
//!
//! Imputation is the fixed-point iteration `z̄ = h(row)`, `row[masked] = E[x | z̄]`.
//! Training alternates an M-step (Adam ascent on the lower bound with the current
//! fills held fixed) and an E-step (fixed-point imputation with weights held fixed).
//!
//! Internally every batch is column-major: a `K × B` matrix whose columns are rows
//! of the dataset. The public API takes and returns `n × K` matrices.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureSchema, MinMax};
use crate::error::{ImputeError, Result};
use crate::missingness::{FeatureFill, IncompleteMatrix, InitPolicy, MissingMask};
use crate::nn::{adam_step, read_checkpoint_lines, write_checkpoint, AdamState, Gradients, Mlp};
use crate::{derive_seed, seeded_rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Gaussian,
    Bernoulli,
}

impl HeadKind {
    /// Binary features get a Bernoulli head, everything else a Gaussian one.
    pub fn for_schema(schema: &[FeatureSchema]) -> Vec<HeadKind> {
        schema
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Binary => HeadKind::Bernoulli,
                _ => HeadKind::Gaussian,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Standard deviation of the reparameterization noise.
    pub sample_noise_std: f64,
    pub latent_term: LatentTerm,
}

/// Estimator for `E_q[log p(z)] - E_q[log q(z)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentTerm {
    /// Closed-form `-KL(q || N(0, I))`; only the reconstruction term is sampled.
    #[default]
    AnalyticKl,
    /// `log p(z) - log q(z)` at the single reparameterized draw.
    SingleSample,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 100,
            encoder_hidden: vec![128, 64],
            decoder_hidden: vec![64, 128],
            sample_noise_std: 1.0,
            latent_term: LatentTerm::AnalyticKl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fixed-point iterations per E-step.
    pub inference_count: usize,
    /// M-step batches between E-steps.
    pub training_interval: usize,
    /// Epochs of pure M-steps before the first E-step.
    pub warmup_epochs: usize,
    /// Continue each E-step from the previous imputations instead of
    /// restarting from the initial fill.
    pub warm_start: bool,
    pub init_policy: InitPolicy,
    /// Monte-Carlo samples of `z` per row per objective evaluation.
    pub mc_samples: usize,
    /// Weight of the reconstruction term for currently imputed cells; observed
    /// cells always have weight 1.
    pub imputed_weight: f64,
    /// Probability of replacing an observed encoder input by its column mean
    /// during the M-step; the decoder is still scored on the true value.
    pub input_dropout: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            batch_size: 50,
            learning_rate: 1e-3,
            inference_count: 2,
            training_interval: 5,
            warmup_epochs: 0,
            warm_start: false,
            init_policy: InitPolicy::Mean,
            mc_samples: 1,
            imputed_weight: 0.0,
            input_dropout: 0.5,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("inference_count", self.inference_count),
            ("training_interval", self.training_interval),
            ("mc_samples", self.mc_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ImputeError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.imputed_weight) {
            return Err(ImputeError::Config(format!(
                "imputed_weight must lie in [0, 1], got {}",
                self.imputed_weight
            )));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(ImputeError::Config(format!(
                "input_dropout must lie in [0, 1), got {}",
                self.input_dropout
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ImputeError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// How many fixed-point iterations to run at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    Fixed(usize),
    /// Per row, stop once the largest masked-cell change drops below `tol`.
    UntilConverged { tol: f64, max_iters: usize },
}

impl Inference {
    pub fn converge() -> Self {
        Inference::UntilConverged {
            tol: 1e-5,
            max_iters: 50,
        }
    }
}

/// Returned by [`GenerativeImputer::fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// `n × K` training matrix after the final E-step.
    pub imputed: DMatrix<f64>,
    /// Mean batch objective per epoch.
    pub epoch_objective: Vec<f64>,
}

/// Value and parameter gradients of the mean batch objective.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub value: f64,
    pub encoder_mean: Gradients,
    pub encoder_logvar: Gradients,
    pub decoder_mean: Gradients,
    pub decoder_logvar: Gradients,
}

#[derive(Debug, Clone)]
struct Optimizers {
    encoder_mean: AdamState,
    encoder_logvar: AdamState,
    decoder_mean: AdamState,
    decoder_logvar: AdamState,
}

#[derive(Debug, Clone)]
pub struct GenerativeImputer {
    encoder_mean: Mlp,
    encoder_logvar: Mlp,
    decoder_mean: Mlp,
    decoder_logvar: Mlp,
    heads: Vec<HeadKind>,
    config: ModelConfig,
    fill: Option<FeatureFill>,
    optim: Option<Optimizers>,
}

impl GenerativeImputer {
    pub fn new(heads: Vec<HeadKind>, config: ModelConfig, seed: u64) -> Result<Self> {
        let k = heads.len();
        if k == 0 {
            return Err(ImputeError::Config("model needs at least one feature".into()));
        }
        if config.latent_dim == 0 {
            return Err(ImputeError::Config("latent_dim must be at least 1".into()));
        }
        let enc = sizes(k, &config.encoder_hidden, config.latent_dim);
        let dec = sizes(config.latent_dim, &config.decoder_hidden, k);
        let mut rng = seeded_rng(derive_seed(seed, 0x6d6f64656c));
        Ok(GenerativeImputer {
            encoder_mean: Mlp::new(&enc, &mut rng)?,
            encoder_logvar: Mlp::new(&enc, &mut rng)?,
            decoder_mean: Mlp::new(&dec, &mut rng)?,
            decoder_logvar: Mlp::new(&dec, &mut rng)?,
            heads,
            config,
            fill: None,
            optim: None,
        })
    }

    /// Assembles a model from explicit networks `(h, l, f, g)`.
    pub fn from_networks(
        encoder_mean: Mlp,
        encoder_logvar: Mlp,
        decoder_mean: Mlp,
        decoder_logvar: Mlp,
        heads: Vec<HeadKind>,
        sample_noise_std: f64,
    ) -> Result<Self> {
        let k = heads.len();
        let j = encoder_mean.output_dim();
        let dims_ok = encoder_mean.input_dim() == k
            && encoder_logvar.input_dim() == k
            && encoder_logvar.output_dim() == j
            && decoder_mean.input_dim() == j
            && decoder_logvar.input_dim() == j
            && decoder_mean.output_dim() == k
            && decoder_logvar.output_dim() == k;
        if !dims_ok {
            return Err(ImputeError::shape(
                "generative networks",
                format!("K={k}, J={j} consistently"),
                format!(
                    "h {:?}, l {:?}, f {:?}, g {:?}",
                    encoder_mean.layer_sizes(),
                    encoder_logvar.layer_sizes(),
                    decoder_mean.layer_sizes(),
                    decoder_logvar.layer_sizes()
                ),
            ));
        }
        let hidden = |net: &Mlp| {
            let s = net.layer_sizes();
            s[1..s.len() - 1].to_vec()
        };
        let config = ModelConfig {
            latent_dim: j,
            encoder_hidden: hidden(&encoder_mean),
            decoder_hidden: hidden(&decoder_mean),
            sample_noise_std,
            latent_term: LatentTerm::default(),
        };
        Ok(GenerativeImputer {
            encoder_mean,
            encoder_logvar,
            decoder_mean,
            decoder_logvar,
            heads,
            config,
            fill: None,
            optim: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.heads.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn heads(&self) -> &[HeadKind] {
        &self.heads
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fill values used to pre-fill masked cells, fitted during training.
    pub fn fill(&self) -> Option<&FeatureFill> {
        self.fill.as_ref()
    }

    pub fn networks(&self) -> [&Mlp; 4] {
        [
            &self.encoder_mean,
            &self.encoder_logvar,
            &self.decoder_mean,
            &self.decoder_logvar,
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut Mlp; 4] {
        [
            &mut self.encoder_mean,
            &mut self.encoder_logvar,
            &mut self.decoder_mean,
            &mut self.decoder_logvar,
        ]
    }

    /// Posterior mean and variance of `z` for one filled row.
    pub fn encode(&self, row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = DMatrix::from_column_slice(row.len(), 1, row);
        let (mu, var) = self.encode_batch(&x)?;
        Ok((mu.as_slice().to_vec(), var.as_slice().to_vec()))
    }

    /// Column-major batch version of [`Self::encode`].
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mu = self.encoder_mean.forward_batch(x)?;
        let var = self.encoder_logvar.forward_batch(x)?.map(f64::exp);
        ensure_finite(&mu, "encoder mean")?;
        ensure_finite(&var, "encoder variance")?;
        Ok((mu, var))
    }

    /// Decoder mean and variance for one latent vector.
    pub fn decode(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let zm = DMatrix::from_column_slice(z.len(), 1, z);
        let mu = self.decoder_mean.forward_batch(&zm)?;
        let var = self.decoder_logvar.forward_batch(&zm)?.map(f64::exp);
        ensure_finite(&mu, "decoder mean")?;
        ensure_finite(&var, "decoder variance")?;
        Ok((mu.as_slice().to_vec(), var.as_slice().to_vec()))
    }

    /// Expected feature values given the decoder mean output: `mu_i` for
    /// Gaussian heads, `logistic(mu_i)` for Bernoulli heads.
    pub fn expected_values(&self, decoder_mu: &[f64]) -> Vec<f64> {
        decoder_mu
            .iter()
            .zip(&self.heads)
            .map(|(&m, h)| match h {
                HeadKind::Gaussian => m,
                HeadKind::Bernoulli => logistic(m),
            })
            .collect()
    }

    /// Decoded expectation `E[x | z̄ = h(x)]` for a column-major batch.
    fn reconstruct_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = self.encoder_mean.forward_batch(x)?;
        let mut mu = self.decoder_mean.forward_batch(&z)?;
        for (i, head) in self.heads.iter().enumerate() {
            if *head == HeadKind::Bernoulli {
                mu.row_mut(i).apply(|v| *v = logistic(*v));
            }
        }
        ensure_finite(&mu, "decoded imputation")?;
        Ok(mu)
    }

    /// `n_iters` rounds of encode-decode-overwrite on the masked cells of one row.
    pub fn fixed_point_impute(&self, row: &[f64], mask_row: &[bool], n_iters: usize) -> Result<Vec<f64>> {
        if n_iters == 0 {
            return Err(ImputeError::Config("fixed-point inference needs at least one iteration".into()));
        }
        if row.len() != self.n_features() || mask_row.len() != self.n_features() {
            return Err(ImputeError::shape(
                "fixed-point row",
                self.n_features(),
                format!("row {} / mask {}", row.len(), mask_row.len()),
            ));
        }
        let mut x = DMatrix::from_column_slice(row.len(), 1, row);
        if !mask_row.iter().any(|&m| m) {
            return Ok(row.to_vec());
        }
        for _ in 0..n_iters {
            let y = self.reconstruct_batch(&x)?;
            for (i, &m) in mask_row.iter().enumerate() {
                if m {
                    x[(i, 0)] = y[(i, 0)];
                }
            }
        }
        Ok(x.as_slice().to_vec())
    }

    /// Largest masked-cell change after each of `max_iters` fixed-point rounds.
    pub fn fixed_point_trace(&self, row: &[f64], mask_row: &[bool], max_iters: usize) -> Result<Vec<f64>> {
        let mut x = row.to_vec();
        let mut changes = Vec::with_capacity(max_iters);
        for _ in 0..max_iters {
            let next = self.fixed_point_impute(&x, mask_row, 1)?;
            let delta = x
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            changes.push(delta);
            x = next;
        }
        Ok(changes)
    }

    /// Fixed-point inference over a column-major batch, overwriting only masked cells.
    fn infer_columns(&self, x: &mut DMatrix<f64>, mask: &MissingMask, inference: Inference) -> Result<()> {
        let rows_with_missing: Vec<usize> = (0..x.ncols())
            .filter(|&c| mask.row(c).iter().any(|&m| m))
            .collect();
        if rows_with_missing.is_empty() {
            return Ok(());
        }
        let (max_iters, tol) = match inference {
            Inference::Fixed(n) if n == 0 => {
                return Err(ImputeError::Config(
                    "fixed-point inference needs at least one iteration".into(),
                ))
            }
            Inference::Fixed(n) => (n, None),
            Inference::UntilConverged { tol, max_iters } => (max_iters.max(1), Some(tol)),
        };
        let mut active = rows_with_missing;
        for _ in 0..max_iters {
            if active.is_empty() {
                break;
            }
            let sub = x.select_columns(&active);
            let y = self.reconstruct_batch(&sub)?;
            let mut still_active = Vec::with_capacity(active.len());
            for (local, &c) in active.iter().enumerate() {
                let mut change = 0.0f64;
                for (i, &m) in mask.row(c).iter().enumerate() {
                    if m {
                        change = change.max((x[(i, c)] - y[(i, local)]).abs());
                        x[(i, c)] = y[(i, local)];
                    }
                }
                if tol.map_or(true, |t| change >= t) {
                    still_active.push(c);
                }
            }
            active = still_active;
        }
        Ok(())
    }

    /// Mean per-row lower bound over a column-major batch `x` (`K × B`) for the
    /// reparameterization draws `eps` (`J × B`, already scaled by the sample
    /// noise std), together with its parameter gradients.
    ///
    /// Per row: `log p(x | z)` at `z = mu_z + eps ⊙ sqrt(var_z)`, plus the
    /// latent term `E_q[log p(z)] - E_q[log q(z)]` (see [`LatentTerm`]).
    /// Observed and currently imputed cells are both scored by the decoder; the
    /// entropy of the fills does not depend on the weights and is left out.
    pub fn objective_grad(&self, x: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<ObjectiveGrad> {
        self.weighted_objective_grad(x, None, eps, None)
    }

    /// As [`objective_grad`](Self::objective_grad), with the encoder fed
    /// `input` instead of `x` when given, and each cell's reconstruction term
    /// scaled by `weights` (both `K × B`).
    pub fn weighted_objective_grad(
        &self,
        x: &DMatrix<f64>,
        input: Option<&DMatrix<f64>>,
        eps: &DMatrix<f64>,
        weights: Option<&DMatrix<f64>>,
    ) -> Result<ObjectiveGrad> {
        let (k, b) = x.shape();
        for (what, m) in [("objective input", input), ("objective weights", weights)] {
            if let Some(m) = m.filter(|m| m.shape() != (k, b)) {
                return Err(ImputeError::shape(what, format!("{k}×{b}"), format!("{:?}", m.shape())));
            }
        }
        let encoder_input = input.unwrap_or(x);
        let j = self.latent_dim();
        if k != self.n_features() || eps.shape() != (j, b) {
            return Err(ImputeError::shape(
                "objective batch",
                format!("x {}×B, eps {}×B", self.n_features(), j),
                format!("x {:?}, eps {:?}", x.shape(), eps.shape()),
            ));
        }
        let batch = b as f64;

        let h_trace = self.encoder_mean.forward_trace(encoder_input)?;
        let l_trace = self.encoder_logvar.forward_trace(encoder_input)?;
        let mu_z = h_trace.output();
        let lv_z = l_trace.output();
        let sd_z = lv_z.map(|v| (0.5 * v).exp());
        let z = mu_z + eps.component_mul(&sd_z);

        let f_trace = self.decoder_mean.forward_trace(&z)?;
        let g_trace = self.decoder_logvar.forward_trace(&z)?;
        let mu = f_trace.output();
        let lv = g_trace.output();

        let latent = self.config.latent_term;
        let row_values = row_objective(x, mu, lv, &z, mu_z, lv_z, &self.heads, latent, weights);
        if let Some(c) = row_values.iter().position(|v| !v.is_finite()) {
            return Err(ImputeError::numeric(format!("objective, batch row {c}")));
        }
        let value = row_values.iter().sum::<f64>() / batch;

        // d(value)/d(decoder outputs)
        let mut d_mu = DMatrix::zeros(k, b);
        let mut d_lv = DMatrix::zeros(k, b);
        for c in 0..b {
            for (i, head) in self.heads.iter().enumerate() {
                let (xv, m, l) = (x[(i, c)], mu[(i, c)], lv[(i, c)]);
                let w = weights.map_or(1.0, |w| w[(i, c)]) / batch;
                match head {
                    HeadKind::Gaussian => {
                        let r = xv - m;
                        let prec = (-l).exp();
                        d_mu[(i, c)] = w * r * prec;
                        d_lv[(i, c)] = w * (-0.5 + 0.5 * r * r * prec);
                    }
                    HeadKind::Bernoulli => {
                        d_mu[(i, c)] = w * (xv - logistic(m));
                    }
                }
            }
        }
        let (g_f, dz_f) = self.decoder_mean.backward_batch(&f_trace, &d_mu)?;
        let (g_g, dz_g) = self.decoder_logvar.backward_batch(&g_trace, &d_lv)?;

        let (d_mu_z, d_lv_z) = match latent {
            LatentTerm::AnalyticKl => {
                // -KL = 0.5 Σ (1 + lv - mu² - e^lv)
                let dz = dz_f + dz_g;
                let d_mu_z = &dz - mu_z / batch;
                let mut d_lv_z = dz.component_mul(&eps.component_mul(&sd_z)) * 0.5;
                d_lv_z += lv_z.map(|v| 0.5 * (1.0 - v.exp()) / batch);
                (d_mu_z, d_lv_z)
            }
            LatentTerm::SingleSample => {
                let diff = &z - mu_z;
                let prec_z = lv_z.map(|v| (-v).exp());
                let q_dz = diff.component_mul(&prec_z);
                let dz = (dz_f + dz_g - &z / batch) + &q_dz / batch;
                let d_mu_z = &dz - &q_dz / batch;
                let mut d_lv_z = dz.component_mul(&eps.component_mul(&sd_z)) * 0.5;
                d_lv_z += diff
                    .component_mul(&diff)
                    .component_mul(&prec_z)
                    .map(|v| (0.5 - 0.5 * v) / batch);
                (d_mu_z, d_lv_z)
            }
        };

        let (g_h, _) = self.encoder_mean.backward_batch(&h_trace, &d_mu_z)?;
        let (g_l, _) = self.encoder_logvar.backward_batch(&l_trace, &d_lv_z)?;
        Ok(ObjectiveGrad {
            value,
            encoder_mean: g_h,
            encoder_logvar: g_l,
            decoder_mean: g_f,
            decoder_logvar: g_g,
        })
    }

    /// Mean lower bound of `n × K` filled rows, one reparameterized draw per row
    /// from `seed`. `mask` only validates shape: observed and imputed cells are
    /// scored alike.
    pub fn objective(&self, rows: &DMatrix<f64>, mask: &MissingMask, seed: u64) -> Result<f64> {
        mask.check_shape(rows, "objective")?;
        let x = rows.transpose();
        let mut rng = seeded_rng(seed);
        let eps = self.draw_noise(rows.nrows(), &mut rng);
        Ok(self.objective_grad(&x, &eps)?.value)
    }

    fn draw_noise<R: Rng>(&self, cols: usize, rng: &mut R) -> DMatrix<f64> {
        let sd = self.config.sample_noise_std;
        DMatrix::from_fn(self.latent_dim(), cols, |_, _| {
            sd * rng.sample::<f64, _>(StandardNormal)
        })
    }

    /// Trains on `train` from scratch of the optimizer state, starting from the
    /// `cfg.init_policy` fill. Returns the training matrix after the final E-step.
    pub fn fit(&mut self, train: &IncompleteMatrix, cfg: &FitConfig) -> Result<FitOutcome> {
        cfg.validate()?;
        if train.n_cols() != self.n_features() {
            return Err(ImputeError::shape("fit", self.n_features(), train.n_cols()));
        }
        let fill = FeatureFill::fit(cfg.init_policy, train)?;
        let filled = fill.apply(train, derive_seed(cfg.seed, 0x66696c6c))?;
        self.fill = Some(fill);
        self.fit_filled(&filled, train.mask(), cfg)
    }

    /// EM training on a pre-filled `n × K` matrix. Observed cells are never written.
    pub fn fit_filled(&mut self, filled: &DMatrix<f64>, mask: &MissingMask, cfg: &FitConfig) -> Result<FitOutcome> {
        cfg.validate()?;
        mask.check_shape(filled, "fit")?;
        if filled.ncols() != self.n_features() {
            return Err(ImputeError::shape("fit", self.n_features(), filled.ncols()));
        }
        if filled.iter().any(|v| !v.is_finite()) {
            return Err(ImputeError::Imputation(
                "training matrix must be fully pre-filled with finite values".into(),
            ));
        }
        let n = filled.nrows();
        let initial = filled.transpose();
        let mut x = initial.clone();
        let mut rng = seeded_rng(derive_seed(cfg.seed, 0x747261696e));
        let lr = cfg.learning_rate;
        let mut optim = match self.optim.take() {
            Some(o) => o,
            None => Optimizers {
                encoder_mean: AdamState::new(&self.encoder_mean, lr),
                encoder_logvar: AdamState::new(&self.encoder_logvar, lr),
                decoder_mean: AdamState::new(&self.decoder_mean, lr),
                decoder_logvar: AdamState::new(&self.decoder_logvar, lr),
            },
        };
        for s in [
            &mut optim.encoder_mean,
            &mut optim.encoder_logvar,
            &mut optim.decoder_mean,
            &mut optim.decoder_logvar,
        ] {
            s.learning_rate = lr;
        }

        let column_means: Vec<f64> = (0..self.n_features())
            .map(|j| {
                let observed: Vec<f64> = (0..n).filter(|&i| !mask.is_missing(i, j)).map(|i| filled[(i, j)]).collect();
                if observed.is_empty() {
                    0.0
                } else {
                    observed.iter().sum::<f64>() / observed.len() as f64
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_objective = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;
        let mut since_e_step = 0usize;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let xb = x.select_columns(chunk);
                let wb = (cfg.imputed_weight != 1.0).then(|| {
                    DMatrix::from_fn(x.nrows(), chunk.len(), |i, c| {
                        if mask.is_missing(chunk[c], i) {
                            cfg.imputed_weight
                        } else {
                            1.0
                        }
                    })
                });
                let input = (cfg.input_dropout > 0.0).then(|| {
                    let mut input = xb.clone();
                    for c in 0..chunk.len() {
                        for i in 0..input.nrows() {
                            if !mask.is_missing(chunk[c], i) && rng.gen::<f64>() < cfg.input_dropout {
                                input[(i, c)] = column_means[i];
                            }
                        }
                    }
                    input
                });
                let grad = self.mc_gradient(&xb, input.as_ref(), wb.as_ref(), cfg.mc_samples, &mut rng).map_err(|e| {
                    ImputeError::Diverged {
                        epoch,
                        step,
                        detail: e.to_string(),
                    }
                })?;
                self.ascend(&grad, &mut optim).map_err(|e| ImputeError::Diverged {
                    epoch,
                    step,
                    detail: e.to_string(),
                })?;
                total += grad.value;
                batches += 1;
                step += 1;
                since_e_step += 1;
                if since_e_step >= cfg.training_interval && epoch >= cfg.warmup_epochs {
                    self.e_step(&mut x, &initial, mask, cfg)?;
                    since_e_step = 0;
                }
            }
            epoch_objective.push(total / batches as f64);
        }
        if since_e_step > 0 {
            self.e_step(&mut x, &initial, mask, cfg)?;
        }
        self.optim = Some(optim);

        let mut imputed = x.transpose();
        // Bit-exact observed cells regardless of any transpose round trip.
        for i in 0..n {
            for j in 0..self.n_features() {
                if !mask.is_missing(i, j) {
                    imputed[(i, j)] = filled[(i, j)];
                }
            }
        }
        Ok(FitOutcome {
            imputed,
            epoch_objective,
        })
    }

    fn e_step(&self, x: &mut DMatrix<f64>, initial: &DMatrix<f64>, mask: &MissingMask, cfg: &FitConfig) -> Result<()> {
        if !cfg.warm_start {
            x.copy_from(initial);
        }
        self.infer_columns(x, mask, Inference::Fixed(cfg.inference_count))
    }

    fn mc_gradient<R: Rng>(
        &self,
        xb: &DMatrix<f64>,
        input: Option<&DMatrix<f64>>,
        weights: Option<&DMatrix<f64>>,
        samples: usize,
        rng: &mut R,
    ) -> Result<ObjectiveGrad> {
        let eps = self.draw_noise(xb.ncols(), rng);
        let mut acc = self.weighted_objective_grad(xb, input, &eps, weights)?;
        if samples > 1 {
            for _ in 1..samples {
                let eps = self.draw_noise(xb.ncols(), rng);
                let g = self.weighted_objective_grad(xb, input, &eps, weights)?;
                acc.value += g.value;
                acc.encoder_mean.add_assign(&g.encoder_mean);
                acc.encoder_logvar.add_assign(&g.encoder_logvar);
                acc.decoder_mean.add_assign(&g.decoder_mean);
                acc.decoder_logvar.add_assign(&g.decoder_logvar);
            }
            let s = 1.0 / samples as f64;
            acc.value *= s;
            acc.encoder_mean.scale(s);
            acc.encoder_logvar.scale(s);
            acc.decoder_mean.scale(s);
            acc.decoder_logvar.scale(s);
        }
        Ok(acc)
    }

    /// Adam minimizes, so the ascent direction is fed in negated.
    fn ascend(&mut self, grad: &ObjectiveGrad, optim: &mut Optimizers) -> Result<()> {
        let neg = |g: &Gradients| {
            let mut g = g.clone();
            g.scale(-1.0);
            g
        };
        adam_step(&mut self.encoder_mean, &neg(&grad.encoder_mean), &mut optim.encoder_mean)?;
        adam_step(&mut self.encoder_logvar, &neg(&grad.encoder_logvar), &mut optim.encoder_logvar)?;
        adam_step(&mut self.decoder_mean, &neg(&grad.decoder_mean), &mut optim.decoder_mean)?;
        adam_step(&mut self.decoder_logvar, &neg(&grad.decoder_logvar), &mut optim.decoder_logvar)?;
        Ok(())
    }

    /// Imputes held-out rows: pre-fill with the training fill, then run
    /// fixed-point inference on the mean path. Rows without missing cells pass
    /// through unchanged.
    pub fn transform(&self, rows: &IncompleteMatrix, inference: Inference) -> Result<DMatrix<f64>> {
        let fill = self.fill.as_ref().ok_or_else(|| {
            ImputeError::Imputation("model has no fill statistics; fit it first".into())
        })?;
        // Random fills of held-out rows use a fixed stream so transform stays pure.
        let filled = fill.apply(rows, 0x7472616e73666f72)?;
        self.transform_filled(&filled, rows.mask(), inference)
    }

    pub fn transform_filled(
        &self,
        filled: &DMatrix<f64>,
        mask: &MissingMask,
        inference: Inference,
    ) -> Result<DMatrix<f64>> {
        mask.check_shape(filled, "transform")?;
        if filled.ncols() != self.n_features() {
            return Err(ImputeError::shape("transform", self.n_features(), filled.ncols()));
        }
        let mut x = filled.transpose();
        self.infer_columns(&mut x, mask, inference)?;
        let mut out = filled.clone();
        for i in 0..filled.nrows() {
            for j in 0..filled.ncols() {
                if mask.is_missing(i, j) {
                    out[(i, j)] = x[(j, i)];
                }
            }
        }
        Ok(out)
    }

    /// Serializes the networks plus a JSON manifest line.
    pub fn save(&self, manifest: &ModelManifest) -> String {
        let mut out = String::from("fpimpute-generative 1\n");
        out.push_str(&serde_json::to_string(manifest).expect("manifest serializes"));
        out.push('\n');
        for net in self.networks() {
            out.push_str(&write_checkpoint(net));
        }
        out
    }

    pub fn load(text: &str) -> Result<(Self, ModelManifest)> {
        let mut lines = text.lines();
        if lines.next() != Some("fpimpute-generative 1") {
            return Err(ImputeError::Checkpoint("not a generative model file".into()));
        }
        let manifest: ModelManifest = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| ImputeError::Checkpoint("missing manifest".into()))?,
        )
        .map_err(|e| ImputeError::Checkpoint(format!("manifest: {e}")))?;
        let h = read_checkpoint_lines(&mut lines)?;
        let l = read_checkpoint_lines(&mut lines)?;
        let f = read_checkpoint_lines(&mut lines)?;
        let g = read_checkpoint_lines(&mut lines)?;
        let mut model = Self::from_networks(h, l, f, g, manifest.heads.clone(), manifest.model.sample_noise_std)?;
        model.config = manifest.model.clone();
        model.fill = manifest.fill.clone();
        Ok((model, manifest))
    }

    pub fn manifest(&self, fit: Option<FitConfig>, normalization: Option<MinMax>, feature_names: Vec<String>) -> ModelManifest {
        ModelManifest {
            latent_dim: self.latent_dim(),
            heads: self.heads.clone(),
            model: self.config.clone(),
            fit,
            fill: self.fill.clone(),
            normalization,
            feature_names,
        }
    }
}

/// Everything besides network weights needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub latent_dim: usize,
    pub heads: Vec<HeadKind>,
    pub model: ModelConfig,
    pub fit: Option<FitConfig>,
    pub fill: Option<FeatureFill>,
    pub normalization: Option<MinMax>,
    pub feature_names: Vec<String>,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Log-density of `x` under `N(mu, exp(logvar))`.
pub fn gaussian_log_density(x: f64, mu: f64, logvar: f64) -> f64 {
    let r = x - mu;
    -0.5 * (LN_2PI + logvar + r * r * (-logvar).exp())
}

/// Log-mass of a (possibly fractional) target `x` under Bernoulli(logistic(logit)).
pub fn bernoulli_log_mass(x: f64, logit: f64) -> f64 {
    -x * softplus(-logit) - (1.0 - x) * softplus(logit)
}

/// Log-density of `z` under the standard normal prior.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * (2.0 * PI).ln() + z.iter().map(|v| v * v).sum::<f64>())
}

#[allow(clippy::too_many_arguments)]
fn row_objective(
    x: &DMatrix<f64>,
    mu: &DMatrix<f64>,
    lv: &DMatrix<f64>,
    z: &DMatrix<f64>,
    mu_z: &DMatrix<f64>,
    lv_z: &DMatrix<f64>,
    heads: &[HeadKind],
    latent: LatentTerm,
    weights: Option<&DMatrix<f64>>,
) -> Vec<f64> {
    (0..x.ncols())
        .map(|c| {
            let recon: f64 = heads
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let w = weights.map_or(1.0, |w| w[(i, c)]);
                    w * match h {
                        HeadKind::Gaussian => gaussian_log_density(x[(i, c)], mu[(i, c)], lv[(i, c)]),
                        HeadKind::Bernoulli => bernoulli_log_mass(x[(i, c)], mu[(i, c)]),
                    }
                })
                .sum();
            let latent_value = match latent {
                LatentTerm::AnalyticKl => {
                    let mu_c: Vec<f64> = mu_z.column(c).iter().copied().collect();
                    let lv_c: Vec<f64> = lv_z.column(c).iter().copied().collect();
                    -gaussian_kl_to_standard(&mu_c, &lv_c)
                }
                LatentTerm::SingleSample => {
                    let zc: Vec<f64> = z.column(c).iter().copied().collect();
                    let prior = standard_normal_log_density(&zc);
                    let posterior: f64 = (0..z.nrows())
                        .map(|r| gaussian_log_density(z[(r, c)], mu_z[(r, c)], lv_z[(r, c)]))
                        .sum();
                    prior - posterior
                }
            };
            recon + latent_value
        })
        .collect()
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn gaussian_kl_to_standard(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| m * m + l.exp() - 1.0 - l)
        .sum::<f64>()
}

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(idx) = m.iter().position(|v| !v.is_finite()) {
        return Err(ImputeError::numeric(format!(
            "{what} (sample {})",
            idx / m.nrows().max(1)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(k: usize, j: usize, heads: Vec<HeadKind>) -> GenerativeImputer {
        let z = |a, b| Mlp::zeros(&[a, 4, b]).unwrap();
        GenerativeImputer::from_networks(z(k, j), z(k, j), z(j, k), z(j, k), heads, 0.1).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 3,
            encoder_hidden: vec![5, 4],
            decoder_hidden: vec![4, 5],
            sample_noise_std: 0.1,
            latent_term: LatentTerm::AnalyticKl,
        }
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let m = zero_model(3, 2, vec![HeadKind::Gaussian; 3]);
        let (mu, var) = m.encode(&[0.3, 0.1, 0.9]).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(var, vec![1.0, 1.0]);
        let (mu, var) = m.decode(&[0.5, -0.5]).unwrap();
        assert_eq!(mu, vec![0.0; 3]);
        assert_eq!(var, vec![1.0; 3]);
    }

    #[test]
    fn bernoulli_expectations() {
        let m = zero_model(2, 2, vec![HeadKind::Bernoulli, HeadKind::Gaussian]);
        assert_eq!(m.expected_values(&[0.0, 0.0]), vec![0.5, 0.0]);
        let p = m.expected_values(&[3f64.ln(), 1.0])[0];
        assert!((p - 0.75).abs() < 1e-15);
        assert_eq!(m.expected_values(&[0.0, 1.0])[1], 1.0);
    }

    #[test]
    fn bernoulli_outputs_strictly_inside_unit_interval() {
        for v in [-30.0, -5.0, 0.0, 5.0, 30.0] {
            let p = logistic(v);
            assert!(p > 0.0 && p < 1.0, "{v} -> {p}");
        }
    }

    #[test]
    fn encoder_variance_positive_for_random_inputs() {
        let model = GenerativeImputer::new(vec![HeadKind::Gaussian; 4], small_config(), 3).unwrap();
        let mut rng = seeded_rng(5);
        for _ in 0..1000 {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (_, var) = model.encode(&row).unwrap();
            assert!(var.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn fully_observed_row_is_untouched() {
        let model = GenerativeImputer::new(vec![HeadKind::Gaussian; 3], small_config(), 1).unwrap();
        let row = [0.1, 0.2, 0.3];
        for n in 1..4 {
            assert_eq!(model.fixed_point_impute(&row, &[false; 3], n).unwrap(), row.to_vec());
        }
    }

    #[test]
    fn one_iteration_is_one_encode_decode() {
        let model = GenerativeImputer::new(
            vec![HeadKind::Gaussian, HeadKind::Bernoulli, HeadKind::Gaussian],
            small_config(),
            2,
        )
        .unwrap();
        let row = [0.4, 1.0, 0.7];
        let mask = [false, true, true];
        let (mu_z, _) = model.encode(&row).unwrap();
        let (mu, _) = model.decode(&mu_z).unwrap();
        let y = model.expected_values(&mu);
        let got = model.fixed_point_impute(&row, &mask, 1).unwrap();
        assert_eq!(got[0], row[0]);
        assert_eq!(got[1], y[1]);
        assert_eq!(got[2], y[2]);
        assert!(model.fixed_point_impute(&row, &mask, 0).is_err());
    }

    #[test]
    fn prior_log_density_at_origin() {
        let j = 7;
        let expected = -(j as f64 / 2.0) * (2.0 * PI).ln();
        assert!((standard_normal_log_density(&vec![0.0; j]) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_gaussian_term() {
        assert!((gaussian_log_density(0.7, 0.7, 0.0) + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_log_mass_matches_direct_formula() {
        for (x, logit) in [(1.0, 0.3), (0.0, -1.2), (0.25, 2.0)] {
            let p = logistic(logit);
            let direct = x * p.ln() + (1.0 - x) * (1.0 - p).ln();
            assert!((bernoulli_log_mass(x, logit) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_requires_fit() {
        let model = GenerativeImputer::new(vec![HeadKind::Gaussian; 3], small_config(), 1).unwrap();
        let rows = IncompleteMatrix::from_nan(DMatrix::from_row_slice(1, 3, &[0.1, f64::NAN, 0.2]));
        assert!(model.transform(&rows, Inference::Fixed(2)).is_err());
    }

    #[test]
    fn inconsistent_networks_rejected() {
        let z = |a, b| Mlp::zeros(&[a, b]).unwrap();
        assert!(GenerativeImputer::from_networks(
            z(3, 2),
            z(3, 2),
            z(2, 3),
            z(4, 3),
            vec![HeadKind::Gaussian; 3],
            0.1
        )
        .is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut model = GenerativeImputer::new(vec![HeadKind::Gaussian; 3], small_config(), 4).unwrap();
        let data = DMatrix::from_row_slice(4, 3, &[0.1, 0.2, 0.3, 0.4, f64::NAN, 0.6, 0.7, 0.8, 0.9, f64::NAN, 0.5, 0.5]);
        let cfg = FitConfig {
            epochs: 2,
            batch_size: 2,
            ..FitConfig::default()
        };
        model.fit(&IncompleteMatrix::from_nan(data.clone()), &cfg).unwrap();
        let manifest = model.manifest(Some(cfg), None, vec!["a".into(), "b".into(), "c".into()]);
        let text = model.save(&manifest);
        let (back, m2) = GenerativeImputer::load(&text).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back.networks(), model.networks());
        let rows = IncompleteMatrix::from_nan(data);
        assert_eq!(
            back.transform(&rows, Inference::Fixed(2)).unwrap(),
            model.transform(&rows, Inference::Fixed(2)).unwrap()
        );
    }
}
