//! Seeded synthetic datasets used by tests, benchmarks and the bundled suite.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSchema};
use crate::error::{ImputeError, Result};
use crate::evaluation::Task;
use crate::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Eight features, `x = A s + noise` with a 3-dimensional Gaussian `s`.
    LinearGaussian,
    /// Ten smooth nonlinear functions of one uniform latent `t`, starting
    /// `[t, sin(3t), t², cos(3t), ...]`.
    Sinusoidal,
    /// Six features, `u vᵀ` plus noise (std 0.3) with Gaussian `u` and
    /// loadings of alternating sign.
    RankOne,
    /// Four linear-Gaussian continuous features and three thresholded binary ones.
    MixedBinary,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::LinearGaussian,
        SyntheticKind::Sinusoidal,
        SyntheticKind::RankOne,
        SyntheticKind::MixedBinary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::LinearGaussian => "linear-gaussian",
            SyntheticKind::Sinusoidal => "sinusoidal",
            SyntheticKind::RankOne => "rank-one",
            SyntheticKind::MixedBinary => "mixed-binary",
        }
    }

    pub fn is_nonlinear(self) -> bool {
        matches!(self, SyntheticKind::Sinusoidal | SyntheticKind::MixedBinary)
    }

    pub fn task(self) -> Task {
        match self {
            SyntheticKind::MixedBinary => Task::Classification,
            _ => Task::Regression,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = ImputeError;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ImputeError::Config(format!("unknown synthetic dataset '{s}'")))
    }
}

/// Features plus a downstream target.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: Dataset,
    pub labels: Vec<f64>,
}

pub fn generate(kind: SyntheticKind, n: usize, seed: u64) -> SyntheticData {
    let mut rng = seeded_rng(seed);
    let normal = |rng: &mut crate::SeededRng| rng.sample::<f64, _>(StandardNormal);
    match kind {
        SyntheticKind::LinearGaussian => {
            let a = DMatrix::from_fn(8, 3, |_, _| normal(&mut rng));
            let mut labels = Vec::with_capacity(n);
            let mut values = DMatrix::zeros(n, 8);
            for i in 0..n {
                let s: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
                for j in 0..8 {
                    let signal: f64 = (0..3).map(|c| a[(j, c)] * s[c]).sum();
                    values[(i, j)] = signal + 0.1 * normal(&mut rng);
                }
                labels.push(s[0] - 0.5 * s[1] + 0.25 * s[2]);
            }
            continuous(values, labels)
        }
        SyntheticKind::Sinusoidal => {
            let mut values = DMatrix::zeros(n, 10);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let t: f64 = rng.gen_range(-1.0..1.0);
                let clean = [
                    t,
                    (3.0 * t).sin(),
                    t * t,
                    (3.0 * t).cos(),
                    (5.0 * t).sin(),
                    (2.0 * t).cos(),
                    t * t * t,
                    (PI * t).sin(),
                    (5.0 * t).cos(),
                    t.exp(),
                ];
                for (j, c) in clean.iter().enumerate() {
                    values[(i, j)] = c + 0.02 * normal(&mut rng);
                }
                labels.push((2.0 * t).sin());
            }
            continuous(values, labels)
        }
        SyntheticKind::RankOne => {
            // Alternating signs: half the features fall as the others rise.
            let v: Vec<f64> = (0..6)
                .map(|j| rng.gen_range(0.5..1.5) * if j % 2 == 1 { -1.0 } else { 1.0 })
                .collect();
            let mut values = DMatrix::zeros(n, 6);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let u = normal(&mut rng);
                for j in 0..6 {
                    values[(i, j)] = u * v[j] + 0.3 * normal(&mut rng);
                }
                labels.push(u);
            }
            continuous(values, labels)
        }
        SyntheticKind::MixedBinary => {
            let a = DMatrix::from_fn(4, 2, |_, _| normal(&mut rng));
            let w = DMatrix::from_fn(3, 2, |_, _| normal(&mut rng));
            let mut values = DMatrix::zeros(n, 7);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let s = [normal(&mut rng), normal(&mut rng)];
                for j in 0..4 {
                    values[(i, j)] = a[(j, 0)] * s[0] + a[(j, 1)] * s[1] + 0.1 * normal(&mut rng);
                }
                for b in 0..3 {
                    let score = w[(b, 0)] * s[0] + w[(b, 1)] * s[1] + 0.3 * normal(&mut rng);
                    values[(i, 4 + b)] = if score > 0.0 { 1.0 } else { 0.0 };
                }
                labels.push(if s[0] + s[1] > 0.0 { 1.0 } else { 0.0 });
            }
            let mut schema: Vec<FeatureSchema> =
                (0..4).map(|j| FeatureSchema::continuous(format!("c{j}"))).collect();
            schema.extend((0..3).map(|b| FeatureSchema::binary(format!("b{b}"))));
            SyntheticData {
                data: Dataset::new(values, schema).expect("schema matches"),
                labels,
            }
        }
    }
}

fn continuous(values: DMatrix<f64>, labels: Vec<f64>) -> SyntheticData {
    SyntheticData {
        data: Dataset::from_matrix(values),
        labels,
    }
}
