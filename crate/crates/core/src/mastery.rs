//! Concept mastery from a degree-2 factorization machine over one-hot
//! (learner, concept) fields, compressed with a seeded random projection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum MasteryError {
    #[error("no training triples")]
    Empty,
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("concept {0} outside catalog of {1} concepts")]
    UnknownConcept(u32, u32),
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("output dimension {d} exceeds input dimension {c}")]
    OutputTooLarge { d: usize, c: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

/// One observed attempt outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub learner: String,
    pub concept: u32,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmConfig {
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub seed: u64,
    /// Fraction of triples held out for the per-epoch report.
    pub holdout_fraction: f64,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            epochs: 20,
            lr: 0.05,
            reg: 1e-4,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FmReport {
    pub train_logloss: Vec<f64>,
    pub holdout_logloss: Vec<f64>,
    /// Log-loss of predicting the training mean everywhere, on the holdout.
    pub baseline_holdout_logloss: f64,
}

/// Degree-2 factorization machine. Index space is learners followed by
/// concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmModel {
    pub rank: usize,
    pub n_concepts: u32,
    pub learners: BTreeMap<String, u32>,
    pub w0: f64,
    pub w: Vec<f64>,
    /// Row-major `(n_learners + n_concepts) x rank`.
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmPrediction {
    pub p: f64,
    pub cold_start: bool,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logloss(p: f64, y: bool) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

impl FmModel {
    pub fn zeros(rank: usize, n_concepts: u32, learners: BTreeMap<String, u32>) -> Self {
        let n = learners.len() + n_concepts as usize;
        Self {
            rank,
            n_concepts,
            learners,
            w0: 0.0,
            w: vec![0.0; n],
            v: vec![0.0; n * rank],
        }
    }

    fn n_learners(&self) -> usize {
        self.learners.len()
    }

    #[cfg(test)]
    fn latent(&self, index: usize) -> &[f64] {
        &self.v[index * self.rank..(index + 1) * self.rank]
    }

    /// Raw FM score over sparse `(index, value)` inputs using the rank-k
    /// identity for the pairwise term.
    pub fn score(&self, active: &[(usize, f64)]) -> f64 {
        let mut s = self.w0;
        for &(i, x) in active {
            s += self.w[i] * x;
        }
        let mut pairwise = 0.0;
        for f in 0..self.rank {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for &(i, x) in active {
                let vx = self.v[i * self.rank + f] * x;
                sum += vx;
                sum_sq += vx * vx;
            }
            pairwise += sum * sum - sum_sq;
        }
        s + 0.5 * pairwise
    }

    fn active(&self, learner: Option<u32>, concept: Option<u32>) -> Vec<(usize, f64)> {
        let mut a = Vec::with_capacity(2);
        if let Some(l) = learner {
            a.push((l as usize, 1.0));
        }
        if let Some(c) = concept {
            a.push((self.n_learners() + c as usize, 1.0));
        }
        a
    }

    /// Probability of a correct answer. Unknown learners or concepts drop
    /// their field and are flagged as cold start.
    pub fn predict(&self, learner: &str, concept: u32) -> FmPrediction {
        let l = self.learners.get(learner).copied();
        let c = (concept < self.n_concepts).then_some(concept);
        FmPrediction {
            p: sigmoid(self.score(&self.active(l, c))),
            cold_start: l.is_none() || c.is_none(),
        }
    }

    /// Row of the mastery matrix: predicted P(correct) for every concept.
    pub fn mastery_vector(&self, learner: &str) -> Vec<f64> {
        (0..self.n_concepts).map(|c| self.predict(learner, c).p).collect()
    }
}

/// Plain SGD on log-loss with a seeded per-epoch shuffle.
pub fn fit_fm(
    triples: &[Triple],
    n_concepts: u32,
    config: &FmConfig,
) -> Result<(FmModel, FmReport), MasteryError> {
    if triples.is_empty() {
        return Err(MasteryError::Empty);
    }
    if config.rank == 0 {
        return Err(MasteryError::ZeroRank);
    }
    if let Some(t) = triples.iter().find(|t| t.concept >= n_concepts) {
        return Err(MasteryError::UnknownConcept(t.concept, n_concepts));
    }
    let mut learners = BTreeMap::new();
    for t in triples {
        let next = learners.len() as u32;
        learners.entry(t.learner.clone()).or_insert(next);
    }
    // Ids are assigned in sorted order so the index is independent of input order.
    for (i, v) in learners.values_mut().enumerate() {
        *v = i as u32;
    }
    let mut model = FmModel::zeros(config.rank, n_concepts, learners);
    let mut r = rng::stream(config.seed, "fm");
    let init = Normal::new(0.0, 0.01).unwrap();
    for v in model.v.iter_mut() {
        *v = init.sample(&mut r);
    }

    let encoded: Vec<(usize, usize, bool)> = triples
        .iter()
        .map(|t| {
            (
                model.learners[&t.learner] as usize,
                model.n_learners() + t.concept as usize,
                t.correct,
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut r);
    let n_hold = ((encoded.len() as f64) * config.holdout_fraction).floor() as usize;
    let n_hold = n_hold.min(encoded.len().saturating_sub(1));
    let (hold, train) = order.split_at(n_hold);
    let mut train: Vec<usize> = train.to_vec();
    let hold: Vec<usize> = hold.to_vec();

    let mean = train.iter().filter(|&&i| encoded[i].2).count() as f64 / train.len() as f64;
    let mut report = FmReport {
        baseline_holdout_logloss: mean_logloss(&hold, &encoded, |_, _| mean),
        ..FmReport::default()
    };
    model.w0 = {
        let m = mean.clamp(1e-6, 1.0 - 1e-6);
        (m / (1.0 - m)).ln()
    };

    let k = config.rank;
    let mut grad_l = vec![0.0; k];
    for _ in 0..config.epochs {
        train.shuffle(&mut r);
        for &idx in &train {
            let (li, ci, y) = encoded[idx];
            let p = sigmoid(model.score(&[(li, 1.0), (ci, 1.0)]));
            let g = p - if y { 1.0 } else { 0.0 };
            model.w0 -= config.lr * g;
            model.w[li] -= config.lr * (g + config.reg * model.w[li]);
            model.w[ci] -= config.lr * (g + config.reg * model.w[ci]);
            for f in 0..k {
                let vl = model.v[li * k + f];
                let vc = model.v[ci * k + f];
                grad_l[f] = g * vc + config.reg * vl;
                model.v[ci * k + f] -= config.lr * (g * vl + config.reg * vc);
            }
            for f in 0..k {
                model.v[li * k + f] -= config.lr * grad_l[f];
            }
        }
        let score = |l: usize, c: usize| sigmoid(model.score(&[(l, 1.0), (c, 1.0)]));
        report.train_logloss.push(mean_logloss(&train, &encoded, score));
        report.holdout_logloss.push(mean_logloss(&hold, &encoded, score));
    }
    Ok((model, report))
}

fn mean_logloss<F: Fn(usize, usize) -> f64>(
    rows: &[usize],
    encoded: &[(usize, usize, bool)],
    predict: F,
) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter()
        .map(|&i| {
            let (l, c, y) = encoded[i];
            logloss(predict(l, c), y)
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Export `learner_id,concept_id,p_correct` for every known learner.
pub fn write_mastery_csv(model: &FmModel, path: &Path) -> Result<(), MasteryError> {
    let io = |e: std::io::Error| MasteryError::Io(e.to_string());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "learner_id,concept_id,p_correct").map_err(io)?;
    for learner in model.learners.keys() {
        for (c, p) in model.mastery_vector(learner).iter().enumerate() {
            writeln!(f, "{learner},{c},{p}").map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScheme {
    /// Dense entries of ±1/√d.
    Sign,
    /// Entries √(3/d)·{+1, 0, −1} with probabilities {1/6, 2/3, 1/6}.
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub scheme: ProjectionScheme,
}

/// Projection matrix regenerated from its config.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjection {
    config: ProjectionConfig,
    /// Row-major `output_dim x input_dim` integer signs in {-1, 0, 1}.
    signs: Vec<i8>,
    scale: f64,
}

impl RandomProjection {
    pub fn new(config: ProjectionConfig) -> Result<Self, MasteryError> {
        let (c, d) = (config.input_dim, config.output_dim);
        if d > c || d == 0 {
            return Err(MasteryError::OutputTooLarge { d, c });
        }
        let mut r = rng::stream(
            config.seed,
            &format!("projection/{:?}/{c}/{d}", config.scheme),
        );
        let signs = (0..c * d)
            .map(|_| match config.scheme {
                ProjectionScheme::Sign => {
                    if r.random::<bool>() {
                        1
                    } else {
                        -1
                    }
                }
                ProjectionScheme::Sparse => match r.random_range(0..6u8) {
                    0 => 1,
                    1 => -1,
                    _ => 0,
                },
            })
            .collect();
        let scale = match config.scheme {
            ProjectionScheme::Sign => 1.0 / (d as f64).sqrt(),
            ProjectionScheme::Sparse => (3.0 / d as f64).sqrt(),
        };
        Ok(Self { config, signs, scale })
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    pub fn project(&self, vec: &[f64]) -> Result<Vec<f64>, MasteryError> {
        let c = self.config.input_dim;
        if vec.len() != c {
            return Err(MasteryError::DimensionMismatch {
                expected: c,
                got: vec.len(),
            });
        }
        Ok(self
            .signs
            .chunks_exact(c)
            .map(|row| {
                let acc: f64 = row
                    .iter()
                    .zip(vec)
                    .map(|(&s, &x)| match s {
                        1 => x,
                        -1 => -x,
                        _ => 0.0,
                    })
                    .sum();
                acc * self.scale
            })
            .collect())
    }
}
