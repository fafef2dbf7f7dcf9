//! Bayesian Knowledge Tracing.
//!
//! A two-state hidden Markov model per concept. The hidden state is
//! unlearned/learned, transitions only go unlearned -> learned, and the
//! observation is the correctness of an attempt with guess and slip
//! emission noise.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BktError {
    #[error("parameter {name} = {value} is not a probability")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("observation sequence is empty")]
    EmptySequence,
    #[error("no nonempty sequences to fit")]
    DegenerateInput,
    #[error("i/o error: {0}")]
    Io(String),
}

/// Per-concept BKT parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BktParams {
    pub p_init: f64,
    pub p_transit: f64,
    pub p_guess: f64,
    pub p_slip: f64,
}

impl Default for BktParams {
    fn default() -> Self {
        Self {
            p_init: 0.3,
            p_transit: 0.1,
            p_guess: 0.2,
            p_slip: 0.1,
        }
    }
}

impl BktParams {
    pub fn new(p_init: f64, p_transit: f64, p_guess: f64, p_slip: f64) -> Result<Self, BktError> {
        let params = Self {
            p_init,
            p_transit,
            p_guess,
            p_slip,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), BktError> {
        for (name, value) in [
            ("p_init", self.p_init),
            ("p_transit", self.p_transit),
            ("p_guess", self.p_guess),
            ("p_slip", self.p_slip),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(BktError::InvalidParam { name, value });
            }
        }
        Ok(())
    }

    /// Probability of a correct answer given the learned probability.
    pub fn p_correct(&self, p_learned: f64) -> f64 {
        p_learned * (1.0 - self.p_slip) + (1.0 - p_learned) * self.p_guess
    }

    fn emission(&self, learned: bool, correct: bool) -> f64 {
        match (learned, correct) {
            (true, true) => 1.0 - self.p_slip,
            (true, false) => self.p_slip,
            (false, true) => self.p_guess,
            (false, false) => 1.0 - self.p_guess,
        }
    }
}

/// Filtered mastery of one concept for one learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeState {
    pub concept_id: u32,
    /// Prior probability of being learned at the next opportunity.
    pub p_learned: f64,
    pub n_attempts: u32,
}

impl KnowledgeState {
    pub fn initial(concept_id: u32, params: &BktParams) -> Self {
        Self {
            concept_id,
            p_learned: params.p_init,
            n_attempts: 0,
        }
    }
}

/// Condition on one observation, then apply the learning transition.
pub fn forward_update(state: KnowledgeState, correct: bool, params: &BktParams) -> KnowledgeState {
    let l = state.p_learned;
    let (num, den) = if correct {
        let num = l * (1.0 - params.p_slip);
        (num, num + (1.0 - l) * params.p_guess)
    } else {
        let num = l * params.p_slip;
        (num, num + (1.0 - l) * (1.0 - params.p_guess))
    };
    // A zero-probability observation leaves the belief unchanged.
    let posterior = if den > 0.0 { num / den } else { l };
    let next = posterior + (1.0 - posterior) * params.p_transit;
    KnowledgeState {
        concept_id: state.concept_id,
        p_learned: next.clamp(0.0, 1.0),
        n_attempts: state.n_attempts + 1,
    }
}

/// Exact marginal log-likelihood of an observation sequence.
pub fn sequence_likelihood(obs: &[bool], params: &BktParams) -> Result<f64, BktError> {
    if obs.is_empty() {
        return Err(BktError::EmptySequence);
    }
    let mut ll = 0.0;
    let mut p_learned = params.p_init;
    for &correct in obs {
        let p_obs = if correct {
            params.p_correct(p_learned)
        } else {
            1.0 - params.p_correct(p_learned)
        };
        ll += p_obs.ln();
        if p_obs == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let posterior = p_learned * params.emission(true, correct) / p_obs;
        p_learned = posterior + (1.0 - posterior) * params.p_transit;
    }
    Ok(ll)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some parameter ended within `BOUNDARY_EPS` of 0 or 1.
    pub boundary_hit: bool,
    /// Guess or slip ended at or above 0.5 and was corrected.
    pub reflected: bool,
    pub n_sequences: usize,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

pub const BOUNDARY_EPS: f64 = 1e-2;
const IDENTIFIABLE_MAX: f64 = 0.5 - 1e-6;

#[derive(Default)]
struct Accumulator {
    init_learned: f64,
    n_seq: f64,
    transit_num: f64,
    transit_den: f64,
    guess_num: f64,
    guess_den: f64,
    slip_num: f64,
    slip_den: f64,
    loglik: f64,
}

/// Scaled forward-backward over one sequence, accumulating expected counts.
fn e_step(obs: &[bool], params: &BktParams, acc: &mut Accumulator) {
    let n = obs.len();
    // index 0 = unlearned, 1 = learned
    let mut alpha = vec![[0.0f64; 2]; n];
    let mut scale = vec![0.0f64; n];
    let t_prob = params.p_transit;

    let a0 = [
        (1.0 - params.p_init) * params.emission(false, obs[0]),
        params.p_init * params.emission(true, obs[0]),
    ];
    scale[0] = a0[0] + a0[1];
    alpha[0] = [a0[0] / scale[0], a0[1] / scale[0]];
    for t in 1..n {
        let prev = alpha[t - 1];
        let u = prev[0] * (1.0 - t_prob) * params.emission(false, obs[t]);
        let l = (prev[0] * t_prob + prev[1]) * params.emission(true, obs[t]);
        scale[t] = u + l;
        alpha[t] = [u / scale[t], l / scale[t]];
    }

    let mut beta = vec![[1.0f64; 2]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let eu = params.emission(false, obs[t + 1]) * beta[t + 1][0];
        let el = params.emission(true, obs[t + 1]) * beta[t + 1][1];
        beta[t] = [
            ((1.0 - t_prob) * eu + t_prob * el) / scale[t + 1],
            el / scale[t + 1],
        ];
    }

    for t in 0..n {
        let gu = alpha[t][0] * beta[t][0];
        let gl = alpha[t][1] * beta[t][1];
        let norm = gu + gl;
        let (gu, gl) = (gu / norm, gl / norm);
        if t == 0 {
            acc.init_learned += gl;
        }
        if obs[t] {
            acc.guess_num += gu;
        } else {
            acc.slip_num += gl;
        }
        acc.guess_den += gu;
        acc.slip_den += gl;
        if t + 1 < n {
            let xi = alpha[t][0] * t_prob * params.emission(true, obs[t + 1]) * beta[t + 1][1]
                / scale[t + 1];
            acc.transit_num += xi;
            acc.transit_den += gu;
        }
    }
    acc.n_seq += 1.0;
    acc.loglik += scale.iter().map(|c| c.ln()).sum::<f64>();
}

fn ratio_or(num: f64, den: f64, fallback: f64) -> f64 {
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        fallback
    }
}

/// Baum-Welch for one concept across learners.
pub fn fit_em(
    sequences: &[Vec<bool>],
    init: BktParams,
    config: EmConfig,
) -> Result<(BktParams, FitReport), BktError> {
    init.validate()?;
    let seqs: Vec<&Vec<bool>> = sequences.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(BktError::DegenerateInput);
    }
    let mut params = init;
    let mut report = FitReport {
        n_sequences: seqs.len(),
        ..FitReport::default()
    };
    let mut prev_ll = f64::NEG_INFINITY;
    for iter in 0..config.max_iter {
        let mut acc = Accumulator::default();
        for s in &seqs {
            e_step(s, &params, &mut acc);
        }
        report.loglik_trace.push(acc.loglik);
        report.iterations = iter + 1;
        if (acc.loglik - prev_ll).abs() < config.tol {
            report.converged = true;
            break;
        }
        prev_ll = acc.loglik;
        params = BktParams {
            p_init: ratio_or(acc.init_learned, acc.n_seq, params.p_init),
            p_transit: ratio_or(acc.transit_num, acc.transit_den, params.p_transit),
            p_guess: ratio_or(acc.guess_num, acc.guess_den, params.p_guess),
            p_slip: ratio_or(acc.slip_num, acc.slip_den, params.p_slip),
        };
    }
    if !report.converged {
        // The trace ends on the last evaluated params; evaluate the final update too.
        let mut acc = Accumulator::default();
        for s in &seqs {
            e_step(s, &params, &mut acc);
        }
        report.loglik_trace.push(acc.loglik);
    }

    let (params, reflected) = enforce_identifiable(params);
    report.reflected = reflected;
    report.boundary_hit = [params.p_init, params.p_transit, params.p_guess, params.p_slip]
        .iter()
        .any(|&p| p <= BOUNDARY_EPS || p >= 1.0 - BOUNDARY_EPS);
    Ok((params, report))
}

/// Map a fit with guess or slip at/above 0.5 back into the identifiable region.
///
/// When both are high the state labels are swapped; when only one is, it is
/// capped just under 0.5.
fn enforce_identifiable(p: BktParams) -> (BktParams, bool) {
    let high_guess = p.p_guess >= 0.5;
    let high_slip = p.p_slip >= 0.5;
    match (high_guess, high_slip) {
        (false, false) => (p, false),
        (true, true) => (
            BktParams {
                p_init: 1.0 - p.p_init,
                p_transit: p.p_transit,
                p_guess: (1.0 - p.p_slip).min(IDENTIFIABLE_MAX),
                p_slip: (1.0 - p.p_guess).min(IDENTIFIABLE_MAX),
            },
            true,
        ),
        _ => (
            BktParams {
                p_guess: p.p_guess.min(IDENTIFIABLE_MAX),
                p_slip: p.p_slip.min(IDENTIFIABLE_MAX),
                ..p
            },
            true,
        ),
    }
}

/// Per-learner scaling of the population `p_init` and `p_transit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerMultipliers {
    pub init: f64,
    pub transit: f64,
}

impl Default for LearnerMultipliers {
    fn default() -> Self {
        Self {
            init: 1.0,
            transit: 1.0,
        }
    }
}

impl LearnerMultipliers {
    pub fn apply(&self, p: &BktParams) -> BktParams {
        BktParams {
            p_init: (p.p_init * self.init).clamp(0.0, 1.0),
            p_transit: (p.p_transit * self.transit).clamp(0.0, 1.0),
            ..*p
        }
    }
}

const MULTIPLIER_RANGE: (f64, f64) = (0.25, 4.0);

/// One EM sweep over a single learner's sequences with emissions held at
/// the population values, re-estimating only that learner's `p_init` and
/// `p_transit` as multipliers of the population values.
pub fn individualize(
    population: &BTreeMap<u32, BktParams>,
    sequences: &[(u32, Vec<bool>)],
) -> LearnerMultipliers {
    let mut init_num = 0.0;
    let mut init_den = 0.0;
    let mut tr_num = 0.0;
    let mut tr_den = 0.0;
    for (concept, obs) in sequences {
        let Some(params) = population.get(concept) else {
            continue;
        };
        if obs.is_empty() {
            continue;
        }
        let mut acc = Accumulator::default();
        e_step(obs, params, &mut acc);
        init_num += acc.init_learned;
        init_den += params.p_init;
        tr_num += acc.transit_num;
        tr_den += acc.transit_den * params.p_transit;
    }
    let clamp = |v: f64| v.clamp(MULTIPLIER_RANGE.0, MULTIPLIER_RANGE.1);
    LearnerMultipliers {
        init: if init_den > 0.0 { clamp(init_num / init_den) } else { 1.0 },
        transit: if tr_den > 0.0 { clamp(tr_num / tr_den) } else { 1.0 },
    }
}

/// Summary of a learner's knowledge states.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BktFeatures {
    pub mean_learned: f64,
    pub min_learned: f64,
    pub mastered_fraction: f64,
    pub mean_guess: f64,
    pub mean_slip: f64,
    pub cold_start: bool,
}

pub const MASTERY_CUT: f64 = 0.95;

/// Summarize attempted-concept states. `params` resolves fitted parameters.
pub fn bkt_features<'a, F>(states: &[KnowledgeState], params: F) -> BktFeatures
where
    F: Fn(u32) -> Option<&'a BktParams>,
{
    let attempted: Vec<&KnowledgeState> = states.iter().filter(|s| s.n_attempts > 0).collect();
    if attempted.is_empty() {
        return BktFeatures {
            cold_start: true,
            ..BktFeatures::default()
        };
    }
    let n = attempted.len() as f64;
    let mean_learned = attempted.iter().map(|s| s.p_learned).sum::<f64>() / n;
    let min_learned = attempted
        .iter()
        .map(|s| s.p_learned)
        .fold(f64::INFINITY, f64::min);
    let mastered = attempted.iter().filter(|s| s.p_learned > MASTERY_CUT).count() as f64 / n;
    let fitted: Vec<&BktParams> = attempted.iter().filter_map(|s| params(s.concept_id)).collect();
    let (mean_guess, mean_slip) = if fitted.is_empty() {
        (0.0, 0.0)
    } else {
        let m = fitted.len() as f64;
        (
            fitted.iter().map(|p| p.p_guess).sum::<f64>() / m,
            fitted.iter().map(|p| p.p_slip).sum::<f64>() / m,
        )
    };
    BktFeatures {
        mean_learned,
        min_learned,
        mastered_fraction: mastered,
        mean_guess,
        mean_slip,
        cold_start: false,
    }
}

/// One diagnostic row per fitted concept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptFit {
    pub concept_id: u32,
    pub params: BktParams,
    pub loglik: f64,
    pub n_seq: usize,
}

pub fn write_diagnostics(path: &Path, fits: &[ConceptFit]) -> Result<(), BktError> {
    let io = |e: std::io::Error| BktError::Io(e.to_string());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "concept_id,p_init,p_transit,p_guess,p_slip,loglik,n_seq").map_err(io)?;
    for c in fits {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            c.concept_id,
            c.params.p_init,
            c.params.p_transit,
            c.params.p_guess,
            c.params.p_slip,
            c.loglik,
            c.n_seq
        )
        .map_err(io)?;
    }
    Ok(())
}
