//! Counterfactual nudges: the grid moves on mutable features that bring the
//! predicted score up by a desired gain, plus what-if evaluation and
//! learner-facing feedback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Direction, FeatureSpec};
use crate::forest::Forest;

#[derive(Debug, Error, PartialEq)]
pub enum NudgeError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature index {0} out of range")]
    UnknownFeature(usize),
    #[error("value {value} for feature {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub trait ScoreModel {
    fn n_features(&self) -> usize;
    fn score(&self, x: &[f64]) -> f64;
}

impl ScoreModel for Forest {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.predict_mean(x).unwrap_or(f64::NAN)
    }
}

/// Any closure over a fixed dimension.
pub struct FnModel<F> {
    pub p: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64> ScoreModel for FnModel<F> {
    fn n_features(&self) -> usize {
        self.p
    }

    fn score(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Which features may move, in which direction, within which box, and
/// how the search grid is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilitySpec {
    pub mutable: Vec<bool>,
    pub direction: Vec<Direction>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub step: f64,
    /// Largest single-round change of one feature.
    pub max_step: f64,
    pub max_rounds: usize,
}

impl FeasibilitySpec {
    pub fn from_spec(spec: &FeatureSpec) -> Self {
        let mut f = Self::all_mutable(spec.len());
        f.mutable = spec.features.iter().map(|d| d.mutable).collect();
        f.direction = spec.features.iter().map(|d| d.direction).collect();
        f
    }

    /// Every feature mutable in both directions on `[0, 1]`.
    pub fn all_mutable(p: usize) -> Self {
        Self {
            mutable: vec![true; p],
            direction: vec![Direction::Both; p],
            lower: vec![0.0; p],
            upper: vec![1.0; p],
            step: 0.05,
            max_step: 1.0,
            max_rounds: 200,
        }
    }

    pub fn len(&self) -> usize {
        self.mutable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mutable.is_empty()
    }

    /// Freeze every feature outside `allowed`.
    pub fn restrict_to(&mut self, allowed: &[usize]) {
        for (i, m) in self.mutable.iter_mut().enumerate() {
            *m = *m && allowed.contains(&i);
        }
    }

    fn allows(&self, i: usize, delta: f64) -> bool {
        self.mutable[i]
            && match self.direction[i] {
                Direction::Both => true,
                Direction::IncreaseOnly => delta > 0.0,
                Direction::DecreaseOnly => delta < 0.0,
            }
    }

    fn validate(&self, p: usize) -> Result<(), NudgeError> {
        let lens = [self.mutable.len(), self.direction.len(), self.lower.len(), self.upper.len()];
        if let Some(&got) = lens.iter().find(|&&n| n != p) {
            return Err(NudgeError::DimensionMismatch { expected: p, got });
        }
        if !(self.step > 0.0 && self.step.is_finite() && self.max_step > 0.0) {
            return Err(NudgeError::Invalid("step and max_step must be positive".into()));
        }
        let bad_bounds = self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(&lo, &hi)| !(0.0 <= lo && lo <= hi && hi <= 1.0));
        if bad_bounds {
            return Err(NudgeError::Invalid("bounds must satisfy 0 <= lower <= upper <= 1".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_TOL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NudgeRequest {
    pub x: Vec<f64>,
    /// Desired gain in score points.
    pub delta_y: f64,
    pub tol: f64,
}

impl NudgeRequest {
    pub fn new(x: Vec<f64>, delta_y: f64) -> Self {
        Self {
            x,
            delta_y,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NudgeStatus {
    Achieved,
    Partial,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureChange {
    pub index: usize,
    pub from: f64,
    pub to: f64,
    pub delta: f64,
    /// Score gained by the rounds that moved this feature.
    pub marginal_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NudgeResult {
    pub status: NudgeStatus,
    pub predicted_before: f64,
    pub predicted_after: f64,
    pub target: f64,
    pub x_new: Vec<f64>,
    pub changes: Vec<FeatureChange>,
    pub rounds: usize,
}

fn check_x(x: &[f64], p: usize) -> Result<(), NudgeError> {
    if x.len() != p {
        return Err(NudgeError::DimensionMismatch {
            expected: p,
            got: x.len(),
        });
    }
    if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(NudgeError::OutOfRange { index, value });
    }
    Ok(())
}

/// Greedy coordinate search on the step grid minimizing `(target - f)^2`
/// with `target = min(f(x) + delta_y, 100)`.
///
/// Each round scans every allowed feature over its whole grid within the
/// box and `max_step`, so a plateau one step wide does not stall the
/// search, and applies the single best move. Ties go to registry order,
/// then the smaller move.
pub fn solve_nudge<M: ScoreModel + ?Sized>(
    model: &M,
    request: &NudgeRequest,
    feasibility: &FeasibilitySpec,
) -> Result<NudgeResult, NudgeError> {
    let p = model.n_features();
    check_x(&request.x, p)?;
    feasibility.validate(p)?;
    if !request.delta_y.is_finite() || !(request.tol >= 0.0) {
        return Err(NudgeError::Invalid("delta_y must be finite and tol non-negative".into()));
    }
    let before = model.score(&request.x);
    let raw_target = before + request.delta_y;
    let target = raw_target.min(100.0);
    let mut x = request.x.clone();
    let mut gains = vec![0.0; p];
    let mut current = before;
    let mut rounds = 0;
    let loss = |v: f64| (target - v).powi(2);
    let done = |v: f64| request.delta_y <= 0.0 || (raw_target <= 100.0 && v >= raw_target - request.tol);
    while rounds < feasibility.max_rounds && !done(current) {
        let mut best: Option<(f64, usize, f64)> = None;
        for i in 0..p {
            let (lo, hi) = (feasibility.lower[i], feasibility.upper[i]);
            let mut open = [feasibility.allows(i, 1.0), feasibility.allows(i, -1.0)];
            let mut k = 1usize;
            while open.iter().any(|&o| o) {
                let size = k as f64 * feasibility.step;
                if size > feasibility.max_step + 1e-12 {
                    break;
                }
                for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                    if !open[s] {
                        continue;
                    }
                    let to = (x[i] + sign * size).clamp(lo, hi);
                    if to == lo || to == hi {
                        open[s] = false;
                    }
                    if to == x[i] {
                        continue;
                    }
                    let old = x[i];
                    x[i] = to;
                    let l = loss(model.score(&x));
                    x[i] = old;
                    if best.is_none_or(|(bl, _, _)| l < bl - 1e-12) {
                        best = Some((l, i, to));
                    }
                }
                k += 1;
            }
        }
        match best {
            Some((l, i, to)) if l < loss(current) - 1e-12 => {
                x[i] = to;
                let next = model.score(&x);
                gains[i] += next - current;
                current = next;
                rounds += 1;
            }
            _ => break,
        }
    }
    // Fresh forward pass for the reported score.
    let after = model.score(&x);
    let status = if done(after) {
        NudgeStatus::Achieved
    } else if loss(after) < loss(before) {
        NudgeStatus::Partial
    } else {
        NudgeStatus::Infeasible
    };
    let changes = x
        .iter()
        .zip(&request.x)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(index, (&to, &from))| FeatureChange {
            index,
            from,
            to,
            delta: to - from,
            marginal_gain: gains[index],
        })
        .collect();
    Ok(NudgeResult {
        status,
        predicted_before: before,
        predicted_after: after,
        target,
        x_new: x,
        changes,
        rounds,
    })
}

/// Copy of `x` with sparse overrides applied.
pub fn apply_overrides(x: &[f64], overrides: &[(usize, f64)]) -> Result<Vec<f64>, NudgeError> {
    let mut out = x.to_vec();
    for &(i, v) in overrides {
        if i >= x.len() {
            return Err(NudgeError::UnknownFeature(i));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(NudgeError::OutOfRange { index: i, value: v });
        }
        out[i] = v;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub predicted_before: f64,
    pub predicted_after: f64,
    pub delta: f64,
    pub x_new: Vec<f64>,
}

/// Pure re-evaluation after overriding selected features.
pub fn whatif<M: ScoreModel + ?Sized>(model: &M, x: &[f64], overrides: &[(usize, f64)]) -> Result<WhatIf, NudgeError> {
    check_x(x, model.n_features())?;
    let x_new = apply_overrides(x, overrides)?;
    let before = model.score(x);
    let after = model.score(&x_new);
    Ok(WhatIf {
        predicted_before: before,
        predicted_after: after,
        delta: after - before,
        x_new,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub message_id: String,
    pub name: String,
    pub direction: String,
    pub delta: f64,
    pub marginal_gain: f64,
    pub message: String,
}

/// One message per changed feature that has a template, largest marginal
/// gain first.
pub fn render_feedback(result: &NudgeResult, spec: &FeatureSpec) -> Vec<Feedback> {
    let mut changes: Vec<&FeatureChange> = result.changes.iter().collect();
    changes.sort_by(|a, b| b.marginal_gain.total_cmp(&a.marginal_gain).then(a.index.cmp(&b.index)));
    changes
        .into_iter()
        .filter_map(|c| {
            let f = spec.features.get(c.index)?;
            let message = f.message.clone()?;
            Some(Feedback {
                message_id: f.code.clone(),
                name: f.name.clone(),
                direction: if c.delta > 0.0 { "increase" } else { "decrease" }.to_string(),
                delta: c.delta,
                marginal_gain: c.marginal_gain,
                message,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{CARELESS_MESSAGE, CARELESS_RATIO};

    fn mean_model(p: usize) -> FnModel<impl Fn(&[f64]) -> f64> {
        FnModel {
            p,
            f: |x: &[f64]| 100.0 * x.iter().sum::<f64>() / x.len() as f64,
        }
    }

    #[test]
    fn linear_oracle_moves_half_a_unit() {
        let m = mean_model(5);
        let mut f = FeasibilitySpec::all_mutable(5);
        f.restrict_to(&[2]);
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.5; 5], 10.0), &f).unwrap();
        assert_eq!(r.status, NudgeStatus::Achieved);
        assert_eq!(r.changes.len(), 1);
        assert_eq!(r.changes[0].index, 2);
        assert!((r.changes[0].delta - 0.5).abs() < 1e-9);
        assert!((r.predicted_after - 60.0).abs() < 1e-9);

        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.2; 5], 10.0), &FeasibilitySpec::all_mutable(5)).unwrap();
        let total: f64 = r.changes.iter().map(|c| c.delta).sum();
        assert!((total - 0.5).abs() < 1e-9, "{total}");
    }

    #[test]
    fn trivial_and_clamped_targets() {
        let m = mean_model(3);
        let f = FeasibilitySpec::all_mutable(3);
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.5; 3], 0.0), &f).unwrap();
        assert_eq!(r.status, NudgeStatus::Achieved);
        assert!(r.changes.is_empty());
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.9; 3], 30.0), &f).unwrap();
        assert_eq!(r.target, 100.0);
        assert_eq!(r.status, NudgeStatus::Partial);
        assert_eq!(r.x_new, vec![1.0; 3]);
    }

    #[test]
    fn respects_direction_and_mutability() {
        let m = mean_model(3);
        let mut f = FeasibilitySpec::all_mutable(3);
        f.mutable[0] = false;
        f.direction[1] = Direction::DecreaseOnly;
        f.direction[2] = Direction::DecreaseOnly;
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.5; 3], 30.0), &f).unwrap();
        assert_eq!(r.status, NudgeStatus::Infeasible);
        assert!(r.changes.is_empty());

        f.direction[2] = Direction::IncreaseOnly;
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.5; 3], 30.0), &f).unwrap();
        assert_eq!(r.status, NudgeStatus::Partial);
        assert_eq!(r.x_new, vec![0.5, 0.5, 1.0]);

        let frozen = FeasibilitySpec {
            mutable: vec![false; 3],
            ..f
        };
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.5; 3], 10.0), &frozen).unwrap();
        assert_eq!(r.status, NudgeStatus::Infeasible);
    }

    #[test]
    fn max_step_limits_each_round() {
        let m = mean_model(1);
        let mut f = FeasibilitySpec::all_mutable(1);
        f.max_step = 0.1;
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.2], 30.0), &f).unwrap();
        assert_eq!(r.status, NudgeStatus::Achieved);
        assert_eq!(r.rounds, 3);
    }

    #[test]
    fn ties_prefer_registry_order_then_smaller_moves() {
        // Flat until the feature reaches 0.8, so every k below the jump ties.
        let m = FnModel {
            p: 2,
            f: |x: &[f64]| if x[0] >= 0.8 || x[1] >= 0.8 { 60.0 } else { 50.0 },
        };
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.5, 0.5], 10.0), &FeasibilitySpec::all_mutable(2)).unwrap();
        assert_eq!(r.changes.len(), 1);
        assert_eq!(r.changes[0].index, 0);
        assert!((r.changes[0].to - 0.8).abs() < 1e-9);
    }

    #[test]
    fn flat_model_is_infeasible() {
        let m = FnModel { p: 2, f: |_: &[f64]| 40.0 };
        let f = FeasibilitySpec::all_mutable(2);
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.2, 0.3], 30.0), &f).unwrap();
        assert_eq!(r.status, NudgeStatus::Infeasible);
        let r = solve_nudge(&m, &NudgeRequest::new(vec![0.2, 0.3], 0.3), &f).unwrap();
        assert_eq!(r.status, NudgeStatus::Achieved);
    }

    #[test]
    fn rejects_bad_input() {
        let m = mean_model(2);
        let f = FeasibilitySpec::all_mutable(2);
        assert!(matches!(
            solve_nudge(&m, &NudgeRequest::new(vec![0.5], 5.0), &f),
            Err(NudgeError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            solve_nudge(&m, &NudgeRequest::new(vec![0.5, 1.5], 5.0), &f),
            Err(NudgeError::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            solve_nudge(&m, &NudgeRequest::new(vec![0.5, 0.5], f64::NAN), &f),
            Err(NudgeError::Invalid(_))
        ));
        assert!(whatif(&m, &[0.5, 0.5], &[(2, 0.1)]).is_err());
        assert!(whatif(&m, &[0.5, 0.5], &[(0, 1.1)]).is_err());
    }

    #[test]
    fn whatif_is_pure() {
        let m = mean_model(5);
        let x = vec![0.5; 5];
        let w = whatif(&m, &x, &[(0, 0.6)]).unwrap();
        assert!((w.delta - 2.0).abs() < 1e-9);
        assert_eq!(x, vec![0.5; 5]);
        assert_eq!(whatif(&m, &x, &[]).unwrap().delta, 0.0);
        assert_eq!(whatif(&m, &x, &[(1, 0.5)]).unwrap().predicted_after, 50.0);
    }

    #[test]
    fn feedback_follows_marginal_gain() {
        let spec = FeatureSpec::standard(0);
        let change = |index, delta: f64, gain| FeatureChange {
            index,
            from: 0.5,
            to: 0.5 + delta,
            delta,
            marginal_gain: gain,
        };
        let result = NudgeResult {
            status: NudgeStatus::Achieved,
            predicted_before: 50.0,
            predicted_after: 60.0,
            target: 60.0,
            x_new: vec![],
            changes: vec![change(CARELESS_RATIO, -0.2, 3.0), change(27, 0.1, 7.0), change(0, 0.1, 1.0)],
            rounds: 3,
        };
        let fb = render_feedback(&result, &spec);
        assert_eq!(fb.len(), 2);
        assert_eq!(fb[0].message_id, "tq_27");
        assert_eq!(fb[1].message, CARELESS_MESSAGE);
        assert_eq!(fb[1].direction, "decrease");
        let empty = NudgeResult { changes: vec![], ..result };
        assert!(render_feedback(&empty, &spec).is_empty());
    }
}
