//! Feature registry, leakage-free featurization, score buckets, dataset
//! assembly and cohort trend tables.
//!
//! Every feature belongs to one of four families: academic (AQ), behavioral
//! (BQ), test-taking (TQ) and effort (EQ). Raw values are computed from
//! events strictly before `as_of` and then normalized to `[0, 1]`: ratios are
//! clamped, counts are min-max scaled with bounds frozen at training time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bkt::{self, BktParams, KnowledgeState};
use crate::mastery::{FmModel, RandomProjection};
use crate::simulator::{
    is_valid_test, Catalog, EventKind, Id, InteractionEvent, LearnerLog, TestKind, TestSession,
};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("as_of {as_of} is after the target test start {start}")]
    Leakage { as_of: i64, start: i64 },
    #[error("vector has {got} values, registry has {expected}")]
    Length { expected: usize, got: usize },
    #[error("duplicate feature code {0}")]
    DuplicateCode(String),
    #[error("mastery block needs both a factorization model and a projection")]
    MissingMastery,
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "AQ")]
    Aq,
    #[serde(rename = "BQ")]
    Bq,
    #[serde(rename = "TQ")]
    Tq,
    #[serde(rename = "EQ")]
    Eq,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Aq, Group::Bq, Group::Tq, Group::Eq];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Aq => "aq",
            Group::Bq => "bq",
            Group::Tq => "tq",
            Group::Eq => "eq",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Already a proportion; clamped to `[0, 1]`.
    Ratio,
    /// `(v - lo) / (hi - lo)` clamped; bounds fitted on training rows.
    MinMax { lo: f64, hi: f64 },
}

/// Which way a nudge may move a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Both,
    IncreaseOnly,
    DecreaseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub code: String,
    pub group: Group,
    pub name: String,
    pub normalization: Normalization,
    pub mutable: bool,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Attempts under this multiple of ideal time are "too fast".
    pub too_fast: f64,
    /// Attempts over this multiple of ideal time are "too slow" / overtime.
    pub too_slow: f64,
    /// BKT learned probability above which a concept counts as mastered.
    pub mastery_cut: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            too_fast: 0.25,
            too_slow: 2.0,
            mastery_cut: bkt::MASTERY_CUT,
        }
    }
}

/// Ordered feature registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub features: Vec<FeatureDef>,
    pub thresholds: Thresholds,
    pub mastery_dim: usize,
}

/// Number of features before the projected mastery block.
pub const BASE_FEATURES: usize = 54;
pub const MEAN_SCORE_LAST3: usize = 16;
pub const TEST_KIND: usize = 17;
pub const CARELESS_RATIO: usize = 18;
pub const TEST_SESSIONS: usize = 20;

pub const CARELESS_MESSAGE: &str =
    "You seem to be making careless mistakes. Revise your calculations before submissions";

type Row = (Group, &'static str, bool, Normalization, Direction, Option<&'static str>);

const RATIO: Normalization = Normalization::Ratio;
const COUNT: Normalization = Normalization::MinMax { lo: 0.0, hi: 0.0 };

fn registry_rows() -> Vec<Row> {
    use Direction::*;
    use Group::*;
    vec![
        (Aq, "mean BKT learned probability", false, RATIO, Both, None),
        (Aq, "min BKT learned probability", false, RATIO, Both, None),
        (Aq, "fraction of attempted concepts mastered", false, RATIO, Both, None),
        (Aq, "mean BKT guess probability", false, RATIO, Both, None),
        (Aq, "mean BKT slip probability", false, RATIO, Both, None),
        (Aq, "fraction of concepts attempted", false, RATIO, Both, None),
        (Aq, "score on last test", false, RATIO, Both, None),
        (Aq, "score on second-last test", false, RATIO, Both, None),
        (Aq, "score on third-last test", false, RATIO, Both, None),
        (Aq, "best prior score", false, RATIO, Both, None),
        (Aq, "score trend", false, RATIO, Both, None),
        (Aq, "accuracy on last test", false, RATIO, Both, None),
        (Aq, "mean accuracy over prior tests", false, RATIO, Both, None),
        (Aq, "cumulative practice accuracy", false, RATIO, Both, None),
        (Aq, "mean predicted concept mastery", false, RATIO, Both, None),
        (Aq, "fraction of concepts with high predicted mastery", false, RATIO, Both, None),
        (Aq, "mean accuracy in last three tests", false, RATIO, Both, None),
        (Bq, "test kind", false, RATIO, Both, None),
        (Bq, "careless-mistake ratio", true, RATIO, DecreaseOnly, Some(CARELESS_MESSAGE)),
        (Bq, "non-attempt time ratio", true, RATIO, DecreaseOnly,
            Some("You spend a lot of time on questions you do not attempt. Decide sooner whether to attempt or skip")),
        (Bq, "number of test sessions", false, COUNT, Both, None),
        (Bq, "careless-mistake ratio over last three tests", false, RATIO, Both, None),
        (Bq, "overtime-incorrect ratio", true, RATIO, DecreaseOnly,
            Some("You spend too long on questions you end up getting wrong. Move on when you are stuck")),
        (Bq, "wasted-attempt ratio", true, RATIO, DecreaseOnly,
            Some("Many quick attempts land on concepts you have not mastered. Slow down on unfamiliar topics")),
        (Bq, "unused time ratio", true, RATIO, DecreaseOnly,
            Some("You leave test time unused. Use the remaining time to review your answers")),
        (Bq, "skipped-question ratio", true, RATIO, DecreaseOnly,
            Some("You skip many questions. Try attempting the ones you can reason through")),
        (Bq, "days since last test", false, COUNT, Both, None),
        (Tq, "first-look attempt ratio", true, RATIO, IncreaseOnly,
            Some("Commit to an answer on the first look when you are confident")),
        (Tq, "too-fast attempt ratio", true, RATIO, DecreaseOnly,
            Some("You rush through some questions. Give each question the time it needs")),
        (Tq, "too-slow attempt ratio", true, RATIO, DecreaseOnly,
            Some("Some questions take you far longer than expected. Practice timed sets to build speed")),
        (Tq, "review-mark ratio", true, RATIO, DecreaseOnly,
            Some("Resolve questions on the first visit instead of marking them for review")),
        (Tq, "option-change ratio", true, RATIO, DecreaseOnly,
            Some("You change answers often. Trust your first well-reasoned answer")),
        (Tq, "subject swaps", false, COUNT, Both, None),
        (Tq, "mean time per attempt relative to ideal", false, COUNT, Both, None),
        (Tq, "first-look accuracy", false, RATIO, Both, None),
        (Tq, "too-slow accuracy", false, RATIO, Both, None),
        (Tq, "attempted-question ratio", true, RATIO, IncreaseOnly,
            Some("Attempt more of the questions in the paper")),
        (Tq, "first-look ratio over last three tests", false, RATIO, Both, None),
        (Tq, "too-fast ratio over last three tests", false, RATIO, Both, None),
        (Tq, "too-slow ratio over last three tests", false, RATIO, Both, None),
        (Tq, "revisited-question ratio", false, RATIO, Both, None),
        (Eq, "practice time between last two tests", false, COUNT, Both, None),
        (Eq, "practice time since last test", true, COUNT, IncreaseOnly,
            Some("Spend more time practising before your next test")),
        (Eq, "distinct activity kinds since last test", true, RATIO, IncreaseOnly,
            Some("Mix your preparation across practice questions, videos and reading")),
        (Eq, "events since last test", true, COUNT, IncreaseOnly,
            Some("Engage with your study material more often between tests")),
        (Eq, "video share of practice time", true, RATIO, Both,
            Some("Balance video lessons with hands-on practice")),
        (Eq, "searches since last test", false, COUNT, Both, None),
        (Eq, "questions asked since last test", false, COUNT, Both, None),
        (Eq, "practice attempts since last test", true, COUNT, IncreaseOnly,
            Some("Solve more practice questions before the next test")),
        (Eq, "practice accuracy since last test", false, RATIO, Both, None),
        (Eq, "active-day ratio since last test", true, RATIO, IncreaseOnly,
            Some("Study a little every day rather than all at once")),
        (Eq, "content browses since last test", false, COUNT, Both, None),
        (Eq, "cumulative practice time", false, COUNT, Both, None),
        (Eq, "distinct activity kinds between last two tests", false, RATIO, Both, None),
    ]
}

impl FeatureSpec {
    /// The standard registry plus `mastery_dim` projected mastery features.
    pub fn standard(mastery_dim: usize) -> Self {
        let mut features: Vec<FeatureDef> = registry_rows()
            .into_iter()
            .enumerate()
            .map(|(i, (group, name, mutable, normalization, direction, message))| FeatureDef {
                code: format!("{}_{i}", group.prefix()),
                group,
                name: name.to_string(),
                normalization,
                mutable,
                direction,
                message: message.map(str::to_string),
            })
            .collect();
        for j in 0..mastery_dim {
            features.push(FeatureDef {
                code: format!("aq_cm_{j}"),
                group: Group::Aq,
                name: format!("projected concept mastery {j}"),
                normalization: COUNT,
                mutable: false,
                direction: Direction::Both,
                message: None,
            });
        }
        Self {
            features,
            thresholds: Thresholds::default(),
            mastery_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn codes(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.code.as_str()).collect()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.features.iter().position(|f| f.code == code)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.code.as_str()) {
                return Err(FeatureError::DuplicateCode(f.code.clone()));
            }
        }
        Ok(())
    }

    /// Freeze min-max bounds from raw training rows.
    pub fn fit_bounds(&mut self, raw_rows: &[Vec<f64>]) {
        for (i, f) in self.features.iter_mut().enumerate() {
            if let Normalization::MinMax { .. } = f.normalization {
                let (lo, hi) = raw_rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[i]), hi.max(r[i]))
                });
                f.normalization = if lo.is_finite() {
                    Normalization::MinMax { lo, hi }
                } else {
                    Normalization::MinMax { lo: 0.0, hi: 0.0 }
                };
            }
        }
    }

    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if raw.len() != self.len() {
            return Err(FeatureError::Length {
                expected: self.len(),
                got: raw.len(),
            });
        }
        Ok(raw
            .iter()
            .zip(&self.features)
            .map(|(&v, f)| {
                let v = if v.is_finite() { v } else { 0.0 };
                match f.normalization {
                    Normalization::Ratio => v.clamp(0.0, 1.0),
                    Normalization::MinMax { lo, hi } => {
                        if hi > lo {
                            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ColdStart {
    pub aq: bool,
    pub bq: bool,
    pub tq: bool,
    pub eq: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub learner_id: String,
    pub test_id: String,
    pub as_of: i64,
    pub values: Vec<f64>,
    pub cold_start: ColdStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub y: f64,
}

/// Prior-performance segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    B1,
    B2,
    B3,
    B4,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::B1, Bucket::B2, Bucket::B3, Bucket::B4];

    /// Half-open `[0,25) [25,50) [50,75) [75,100]`.
    pub fn from_mean(score: f64) -> Self {
        if score < 25.0 {
            Bucket::B1
        } else if score < 50.0 {
            Bucket::B2
        } else if score < 75.0 {
            Bucket::B3
        } else {
            Bucket::B4
        }
    }

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Bucket::ALL.get(usize::from(id).checked_sub(1)?).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::B1 => "B1",
            Bucket::B2 => "B2",
            Bucket::B3 => "B3",
            Bucket::B4 => "B4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    pub bucket: Bucket,
    pub cold_start: bool,
}

/// Bucket of the mean of up to the last three prior scores; no history
/// falls back to B2 with a cold-start flag.
pub fn assign_bucket(prev_scores: &[f64]) -> BucketAssignment {
    let recent = &prev_scores[prev_scores.len().saturating_sub(3)..];
    if recent.is_empty() {
        return BucketAssignment {
            bucket: Bucket::B2,
            cold_start: true,
        };
    }
    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
    BucketAssignment {
        bucket: Bucket::from_mean(mean),
        cold_start: false,
    }
}

/// Bucket derived from a normalized feature vector, via the last-three mean.
pub fn bucket_for_vector(values: &[f64]) -> Bucket {
    Bucket::from_mean(values[MEAN_SCORE_LAST3] * 100.0)
}

/// Fitted upstream models and registry used to featurize.
#[derive(Debug, Clone)]
pub struct FeatureContext {
    pub spec: FeatureSpec,
    pub catalog: Catalog,
    pub bkt: BTreeMap<u32, BktParams>,
    pub fm: Option<FmModel>,
    pub projection: Option<RandomProjection>,
    pub individualized: bool,
}

impl FeatureContext {
    fn params(&self, concept: u32) -> BktParams {
        self.bkt.get(&concept).copied().unwrap_or_default()
    }
}

/// The upcoming test a vector is built for.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTest {
    pub test_id: String,
    pub kind: TestKind,
    pub start_ts: i64,
}

impl From<&TestSession> for TargetTest {
    fn from(s: &TestSession) -> Self {
        Self {
            test_id: s.test_id.to_string(),
            kind: s.test_kind,
            start_ts: s.start_ts,
        }
    }
}

/// Per-session test-taking statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SessionStats {
    pub start_ts: i64,
    pub end_ts: i64,
    pub score: f64,
    pub attempts: f64,
    pub accuracy: f64,
    pub first_look: f64,
    pub first_look_accuracy: f64,
    pub too_fast: f64,
    pub too_slow: f64,
    pub too_slow_accuracy: f64,
    pub review: f64,
    pub option_change: f64,
    pub careless: f64,
    pub wasted: f64,
    pub overtime_incorrect: f64,
    pub non_attempt_time: f64,
    pub unused_time: f64,
    pub skip: f64,
    pub attempt_ratio: f64,
    pub swaps: f64,
    pub time_vs_ideal: f64,
    pub revisit: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Statistics for one session using only events before `as_of`. `learned`
/// gives the BKT learned probability per concept at session start.
pub fn session_stats(
    session: &TestSession,
    catalog: &Catalog,
    thresholds: &Thresholds,
    learned: &dyn Fn(u32) -> f64,
    as_of: i64,
) -> SessionStats {
    let mut views: HashMap<&str, u32> = HashMap::new();
    let mut changed: HashSet<&str> = HashSet::new();
    let mut reviewed: HashSet<&str> = HashSet::new();
    let mut s = SessionStats {
        start_ts: session.start_ts,
        end_ts: session.end_ts,
        score: session.score_pct / 100.0,
        ..SessionStats::default()
    };
    let (mut correct, mut first_look, mut first_look_correct) = (0.0, 0.0, 0.0);
    let (mut slow_correct, mut attempt_time, mut ideal_ratio_sum, mut changes) = (0.0, 0.0, 0.0, 0.0);
    for e in session.events.iter().filter(|e| e.ts < as_of) {
        let q = e.question_id.as_deref();
        match e.kind {
            EventKind::ViewQuestion => {
                if let Some(q) = q {
                    *views.entry(q).or_default() += 1;
                }
            }
            EventKind::ChangeOption => {
                changes += 1.0;
                if let Some(q) = q {
                    changed.insert(q);
                }
            }
            EventKind::MarkReview => {
                if let Some(q) = q {
                    reviewed.insert(q);
                }
            }
            EventKind::SwapSubject => s.swaps += 1.0,
            EventKind::Attempt => {
                let (Some(q), Some(ok)) = (q, e.correct) else { continue };
                let dur = e.duration_s.unwrap_or(0.0);
                attempt_time += dur;
                s.attempts += 1.0;
                correct += ok as u8 as f64;
                let meta = catalog.get(q);
                let ideal = meta.map_or(f64::NAN, |m| m.ideal_time_s);
                let mastered = meta.is_some_and(|m| learned(m.concept_id) > thresholds.mastery_cut);
                if ideal.is_finite() {
                    ideal_ratio_sum += dur / ideal;
                    let fast = dur < thresholds.too_fast * ideal;
                    let slow = dur > thresholds.too_slow * ideal;
                    if fast {
                        s.too_fast += 1.0;
                        if mastered && !ok {
                            s.careless += 1.0;
                        }
                        if !mastered {
                            s.wasted += 1.0;
                        }
                    }
                    if slow {
                        s.too_slow += 1.0;
                        slow_correct += ok as u8 as f64;
                        if !ok {
                            s.overtime_incorrect += 1.0;
                        }
                    }
                }
                if views.get(q).copied().unwrap_or(0) <= 1 && !changed.contains(q) {
                    first_look += 1.0;
                    first_look_correct += ok as u8 as f64;
                }
            }
            _ => {}
        }
    }
    let n = s.attempts;
    let spent = ((session.end_ts.min(as_of) - session.start_ts).max(0) as f64) / 1000.0;
    let total_q = session.total_questions as f64;
    s.accuracy = ratio(correct, n);
    s.first_look_accuracy = ratio(first_look_correct, first_look);
    s.too_slow_accuracy = ratio(slow_correct, s.too_slow);
    s.first_look = ratio(first_look, n);
    s.too_fast = ratio(s.too_fast, n);
    s.too_slow = ratio(s.too_slow, n);
    s.careless = ratio(s.careless, n);
    s.wasted = ratio(s.wasted, n);
    s.overtime_incorrect = ratio(s.overtime_incorrect, n);
    s.option_change = ratio(changes, n).min(1.0);
    s.review = ratio(reviewed.len() as f64, total_q);
    s.non_attempt_time = ratio((spent - attempt_time).max(0.0), spent).min(1.0);
    s.unused_time = (1.0 - ratio(spent, session.total_time_s)).clamp(0.0, 1.0);
    s.attempt_ratio = ratio(n, total_q).min(1.0);
    s.skip = 1.0 - s.attempt_ratio;
    s.time_vs_ideal = ratio(ideal_ratio_sum, n);
    s.revisit = ratio(views.values().filter(|&&v| v > 1).count() as f64, views.len() as f64);
    s
}

/// Practice/effort statistics over `[from, to)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ActivityStats {
    hours: f64,
    video_hours: f64,
    events: f64,
    kinds: f64,
    searches: f64,
    asks: f64,
    browses: f64,
    attempts: f64,
    correct: f64,
    active_days: f64,
}

const ACTIVITY_KINDS: f64 = 5.0;
const DAY_MS: i64 = 86_400_000;

fn activity_stats(events: &[&InteractionEvent], from: i64, to: i64) -> ActivityStats {
    let mut a = ActivityStats::default();
    let mut kinds = HashSet::new();
    let mut days = HashSet::new();
    for e in events.iter().filter(|e| e.ts >= from && e.ts < to) {
        a.events += 1.0;
        kinds.insert(e.kind);
        days.insert(e.ts.div_euclid(DAY_MS));
        let hours = e.duration_s.unwrap_or(0.0) / 3600.0;
        match e.kind {
            EventKind::Attempt => {
                a.attempts += 1.0;
                a.correct += e.correct.unwrap_or(false) as u8 as f64;
                a.hours += hours;
            }
            EventKind::WatchVideo => {
                a.hours += hours;
                a.video_hours += hours;
            }
            EventKind::BrowseContent => {
                a.browses += 1.0;
                a.hours += hours;
            }
            EventKind::Search => a.searches += 1.0,
            EventKind::AskQuestion => a.asks += 1.0,
            _ => {}
        }
    }
    a.kinds = (kinds.len() as f64 / ACTIVITY_KINDS).min(1.0);
    a.active_days = days.len() as f64;
    a
}

/// Chronological attempt outcomes `(ts, concept, correct)` before `as_of`.
fn attempts_before(history: &LearnerLog, catalog: &Catalog, as_of: i64) -> Vec<(i64, u32, bool)> {
    let mut out: Vec<(i64, u32, bool)> = history
        .sessions
        .iter()
        .flat_map(|s| s.events.iter())
        .chain(history.activity.iter())
        .filter(|e| e.ts < as_of && e.kind == EventKind::Attempt)
        .filter_map(|e| {
            let q = catalog.get(e.question_id.as_deref()?)?;
            Some((e.ts, q.concept_id, e.correct?))
        })
        .collect();
    out.sort_by_key(|&(ts, c, _)| (ts, c));
    out
}

/// Per-concept observation sequences grouped from chronological attempts.
pub fn concept_sequences(attempts: &[(i64, u32, bool)]) -> Vec<(u32, Vec<bool>)> {
    let mut by: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for &(_, c, ok) in attempts {
        by.entry(c).or_default().push(ok);
    }
    by.into_iter().collect()
}

/// Valid tests that finished before `as_of`, with events restricted to it.
fn prior_valid_tests(history: &LearnerLog, as_of: i64) -> Vec<TestSession> {
    let mut prior: Vec<TestSession> = history
        .sessions
        .iter()
        .filter(|s| s.end_ts < as_of)
        .map(|s| {
            let mut s = s.clone();
            s.events.retain(|e| e.ts < as_of);
            s
        })
        .filter(is_valid_test)
        .collect();
    prior.sort_by_key(|s| (s.start_ts, s.end_ts));
    prior
}

/// Forward-filter attempts and snapshot learned probabilities at each
/// checkpoint. Returns the final states and the snapshots.
fn filter_states(
    ctx: &FeatureContext,
    params: &BTreeMap<u32, BktParams>,
    attempts: &[(i64, u32, bool)],
    checkpoints: &[i64],
) -> (BTreeMap<u32, KnowledgeState>, Vec<BTreeMap<u32, f64>>) {
    let mut states: BTreeMap<u32, KnowledgeState> = BTreeMap::new();
    let mut snapshots = Vec::with_capacity(checkpoints.len());
    let mut i = 0;
    for &cp in checkpoints {
        while i < attempts.len() && attempts[i].0 < cp {
            let (_, c, ok) = attempts[i];
            let p = params.get(&c).copied().unwrap_or_else(|| ctx.params(c));
            let s = states.entry(c).or_insert_with(|| KnowledgeState::initial(c, &p));
            *s = bkt::forward_update(*s, ok, &p);
            i += 1;
        }
        snapshots.push(states.iter().map(|(&c, s)| (c, s.p_learned)).collect());
    }
    for &(_, c, ok) in &attempts[i..] {
        let p = params.get(&c).copied().unwrap_or_else(|| ctx.params(c));
        let s = states.entry(c).or_insert_with(|| KnowledgeState::initial(c, &p));
        *s = bkt::forward_update(*s, ok, &p);
    }
    (states, snapshots)
}

fn mean_of<F: Fn(&SessionStats) -> f64>(stats: &[SessionStats], f: F) -> f64 {
    if stats.is_empty() {
        0.0
    } else {
        stats.iter().map(f).sum::<f64>() / stats.len() as f64
    }
}

/// Raw (unnormalized) features plus cold-start flags.
pub fn featurize_raw(
    ctx: &FeatureContext,
    history: &LearnerLog,
    target: &TargetTest,
    as_of: i64,
) -> Result<(Vec<f64>, ColdStart), FeatureError> {
    if as_of > target.start_ts {
        return Err(FeatureError::Leakage {
            as_of,
            start: target.start_ts,
        });
    }
    let th = &ctx.spec.thresholds;
    let prior = prior_valid_tests(history, as_of);
    let attempts = attempts_before(history, &ctx.catalog, as_of);

    let params: BTreeMap<u32, BktParams> = if ctx.individualized {
        let m = bkt::individualize(&ctx.bkt, &concept_sequences(&attempts));
        ctx.bkt.iter().map(|(&c, p)| (c, m.apply(p))).collect()
    } else {
        ctx.bkt.clone()
    };
    let checkpoints: Vec<i64> = prior.iter().map(|s| s.start_ts).collect();
    let (states, snapshots) = filter_states(ctx, &params, &attempts, &checkpoints);
    let state_list: Vec<KnowledgeState> = states.values().copied().collect();
    let bf = bkt::bkt_features(&state_list, |c| params.get(&c));

    let stats: Vec<SessionStats> = prior
        .iter()
        .zip(&snapshots)
        .map(|(s, snap)| {
            let learned = |c: u32| snap.get(&c).copied().unwrap_or_else(|| ctx.params(c).p_init);
            session_stats(s, &ctx.catalog, th, &learned, as_of)
        })
        .collect();
    let last3 = &stats[stats.len().saturating_sub(3)..];
    let last = stats.last().copied().unwrap_or_default();
    let score_back = |k: usize| stats.len().checked_sub(k + 1).map_or(0.0, |i| stats[i].score);

    let activity: Vec<&InteractionEvent> = history.activity.iter().filter(|e| e.ts < as_of).collect();
    let last_end = prior.last().map_or(i64::MIN, |s| s.end_ts);
    let prev_end = if prior.len() >= 2 { prior[prior.len() - 2].end_ts } else { i64::MIN };
    let prev_start_of_last = prior.last().map_or(i64::MIN, |s| s.start_ts);
    let since = activity_stats(&activity, last_end, as_of);
    let between = if prior.len() >= 2 {
        activity_stats(&activity, prev_end, prev_start_of_last)
    } else {
        ActivityStats::default()
    };
    let overall = activity_stats(&activity, i64::MIN, as_of);
    let days_since = if prior.is_empty() {
        0.0
    } else {
        (as_of - last_end) as f64 / DAY_MS as f64
    };
    let span_days = if prior.is_empty() {
        0.0
    } else {
        ((as_of - last_end) as f64 / DAY_MS as f64).ceil().max(1.0)
    };

    let mastery = match (&ctx.fm, &ctx.projection, ctx.spec.mastery_dim) {
        (_, _, 0) => None,
        (Some(fm), Some(proj), _) => {
            let m = fm.mastery_vector(&history.learner_id);
            let centered: Vec<f64> = m.iter().map(|p| p - 0.5).collect();
            let projected = proj.project(&centered).map_err(|_| FeatureError::MissingMastery)?;
            Some((m, projected))
        }
        _ => return Err(FeatureError::MissingMastery),
    };
    let (mean_mastery, high_mastery) = match &mastery {
        Some((m, _)) if !m.is_empty() => (
            m.iter().sum::<f64>() / m.len() as f64,
            m.iter().filter(|&&p| p > 0.8).count() as f64 / m.len() as f64,
        ),
        _ => (0.0, 0.0),
    };
    let attempted_concepts = states.values().filter(|s| s.n_attempts > 0).count() as f64;
    let trend = if stats.len() >= 2 {
        let prev = mean_of(&stats[..stats.len() - 1], |s| s.score);
        (0.5 + (last.score - prev) / 2.0).clamp(0.0, 1.0)
    } else {
        0.5
    };

    let mut raw = vec![
        bf.mean_learned,
        bf.min_learned,
        bf.mastered_fraction,
        bf.mean_guess,
        bf.mean_slip,
        ratio(attempted_concepts, ctx.catalog.n_concepts as f64),
        score_back(0),
        score_back(1),
        score_back(2),
        stats.iter().map(|s| s.score).fold(0.0, f64::max),
        trend,
        last.accuracy,
        mean_of(&stats, |s| s.accuracy),
        ratio(overall.correct, overall.attempts),
        mean_mastery,
        high_mastery,
        mean_of(last3, |s| s.score),
        // BQ
        target.kind.code(),
        last.careless,
        last.non_attempt_time,
        prior.len() as f64,
        mean_of(last3, |s| s.careless),
        last.overtime_incorrect,
        last.wasted,
        last.unused_time,
        if stats.is_empty() { 0.0 } else { last.skip },
        days_since,
        // TQ
        last.first_look,
        last.too_fast,
        last.too_slow,
        last.review,
        last.option_change,
        last.swaps,
        last.time_vs_ideal,
        last.first_look_accuracy,
        last.too_slow_accuracy,
        last.attempt_ratio,
        mean_of(last3, |s| s.first_look),
        mean_of(last3, |s| s.too_fast),
        mean_of(last3, |s| s.too_slow),
        last.revisit,
        // EQ
        between.hours,
        since.hours,
        since.kinds,
        since.events,
        ratio(since.video_hours, since.hours),
        since.searches,
        since.asks,
        since.attempts,
        ratio(since.correct, since.attempts),
        if prior.is_empty() { 0.0 } else { (since.active_days / span_days).min(1.0) },
        since.browses,
        overall.hours,
        between.kinds,
    ];
    debug_assert_eq!(raw.len(), BASE_FEATURES);
    if let Some((_, projected)) = mastery {
        raw.extend(projected);
    }
    if raw.len() != ctx.spec.len() {
        return Err(FeatureError::Length {
            expected: ctx.spec.len(),
            got: raw.len(),
        });
    }
    let cold = ColdStart {
        aq: prior.is_empty() && bf.cold_start,
        bq: prior.is_empty(),
        tq: prior.is_empty(),
        eq: activity.is_empty(),
    };
    Ok((raw, cold))
}

/// Normalized feature vector for `target` built from events before `as_of`.
pub fn featurize(
    ctx: &FeatureContext,
    history: &LearnerLog,
    target: &TargetTest,
    as_of: i64,
) -> Result<FeatureVector, FeatureError> {
    let (raw, cold_start) = featurize_raw(ctx, history, target, as_of)?;
    Ok(FeatureVector {
        learner_id: history.learner_id.to_string(),
        test_id: target.test_id.clone(),
        as_of,
        values: ctx.spec.normalize(&raw)?,
        cold_start,
    })
}

/// A (learner, target test) pair with at least one prior valid test.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPlan {
    pub learner: usize,
    pub session: usize,
    pub as_of: i64,
    pub y: f64,
}

/// One row per valid test that has a prior valid test, chronological
/// within learner.
pub fn plan_rows(logs: &[LearnerLog]) -> Vec<RowPlan> {
    let mut plans = Vec::new();
    for (li, log) in logs.iter().enumerate() {
        let mut valid: Vec<usize> = (0..log.sessions.len())
            .filter(|&i| is_valid_test(&log.sessions[i]))
            .collect();
        valid.sort_by_key(|&i| log.sessions[i].start_ts);
        for &si in valid.iter().skip(1) {
            let target = &log.sessions[si];
            let has_prior = valid
                .iter()
                .any(|&p| log.sessions[p].end_ts < target.start_ts);
            if has_prior {
                plans.push(RowPlan {
                    learner: li,
                    session: si,
                    as_of: target.start_ts,
                    y: target.score_pct,
                });
            }
        }
    }
    plans
}

/// Rows with `as_of` strictly before the returned cutoff are training rows.
pub fn time_cutoff(plans: &[RowPlan], train_fraction: f64) -> i64 {
    let mut times: Vec<i64> = plans.iter().map(|p| p.as_of).collect();
    times.sort_unstable();
    if times.is_empty() {
        return i64::MAX;
    }
    let k = ((times.len() as f64) * train_fraction).floor() as usize;
    times.get(k).copied().unwrap_or(i64::MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub learner_id: String,
    pub test_id: String,
    pub vector: FeatureVector,
    pub bucket: Bucket,
    pub y: f64,
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: FeatureSpec,
    pub cutoff: i64,
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn split(&self, bucket: Option<Bucket>, train: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.rows
            .iter()
            .filter(|r| r.train == train && bucket.is_none_or(|b| r.bucket == b))
            .map(|r| (r.vector.values.clone(), r.y))
            .unzip()
    }

    /// Read rows written by [`Dataset::write_csv`]; the header must match
    /// the registry.
    pub fn read_csv(path: &Path, spec: &FeatureSpec, train: bool) -> Result<Vec<DatasetRow>, FeatureError> {
        let bad = |m: String| FeatureError::Io(format!("{}: {m}", path.display()));
        let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let mut expected: Vec<&str> = vec!["learner_id", "test_id", "as_of", "bucket"];
        expected.extend(spec.codes());
        expected.push("y");
        if header.iter().ne(expected.iter().copied()) {
            return Err(bad("header does not match the feature registry".into()));
        }
        let p = spec.len();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<f64, FeatureError> {
                rec[i].parse::<f64>().map_err(|e| bad(format!("row {}: {e}", line + 2)))
            };
            let as_of: i64 = rec[2].parse().map_err(|e| bad(format!("row {}: {e}", line + 2)))?;
            let values = (0..p).map(|j| num(4 + j)).collect::<Result<Vec<f64>, _>>()?;
            let bucket = bucket_for_vector(&values);
            if bucket.label() != &rec[3] {
                return Err(bad(format!("row {}: bucket disagrees with features", line + 2)));
            }
            rows.push(DatasetRow {
                learner_id: rec[0].to_string(),
                test_id: rec[1].to_string(),
                vector: FeatureVector {
                    learner_id: rec[0].to_string(),
                    test_id: rec[1].to_string(),
                    as_of,
                    values,
                    cold_start: ColdStart::default(),
                },
                bucket,
                y: num(4 + p)?,
                train,
            });
        }
        Ok(rows)
    }

    pub fn write_csv(&self, path: &Path, train: bool) -> Result<(), FeatureError> {
        let io = |e: std::io::Error| FeatureError::Io(e.to_string());
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut header: Vec<&str> = vec!["learner_id", "test_id", "as_of", "bucket"];
        header.extend(self.spec.codes());
        header.push("y");
        writeln!(f, "{}", header.join(",")).map_err(io)?;
        for r in self.rows.iter().filter(|r| r.train == train) {
            write!(f, "{},{},{},{}", r.learner_id, r.test_id, r.vector.as_of, r.bucket.label()).map_err(io)?;
            for v in &r.vector.values {
                write!(f, ",{v}").map_err(io)?;
            }
            writeln!(f, ",{}", r.y).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

fn featurize_plans(
    logs: &[LearnerLog],
    ctx: &FeatureContext,
    plans: &[RowPlan],
) -> Result<Vec<(Vec<f64>, ColdStart)>, FeatureError> {
    plans
        .iter()
        .map(|p| {
            let log = &logs[p.learner];
            featurize_raw(ctx, log, &TargetTest::from(&log.sessions[p.session]), p.as_of)
        })
        .collect()
}

fn assemble(
    logs: &[LearnerLog],
    plans: &[RowPlan],
    raws: Vec<(Vec<f64>, ColdStart)>,
    spec: FeatureSpec,
    cutoff: i64,
) -> Result<Dataset, FeatureError> {
    let mut rows = Vec::with_capacity(plans.len());
    for (p, (raw, cold)) in plans.iter().zip(raws) {
        let log = &logs[p.learner];
        let session = &log.sessions[p.session];
        let values = spec.normalize(&raw)?;
        rows.push(DatasetRow {
            learner_id: log.learner_id.to_string(),
            test_id: session.test_id.to_string(),
            bucket: bucket_for_vector(&values),
            vector: FeatureVector {
                learner_id: log.learner_id.to_string(),
                test_id: session.test_id.to_string(),
                as_of: p.as_of,
                values,
                cold_start: cold,
            },
            y: p.y,
            train: p.as_of < cutoff,
        });
    }
    Ok(Dataset { spec, cutoff, rows })
}

/// Featurize every planned row, freeze normalization bounds on the
/// training rows and assign buckets.
pub fn build_dataset(
    logs: &[LearnerLog],
    ctx: &FeatureContext,
    train_fraction: f64,
) -> Result<Dataset, FeatureError> {
    ctx.spec.validate()?;
    let plans = plan_rows(logs);
    let cutoff = time_cutoff(&plans, train_fraction);
    let raws = featurize_plans(logs, ctx, &plans)?;
    let mut spec = ctx.spec.clone();
    let train_raw: Vec<Vec<f64>> = plans
        .iter()
        .zip(&raws)
        .filter(|(p, _)| p.as_of < cutoff)
        .map(|(_, (r, _))| r.clone())
        .collect();
    spec.fit_bounds(&train_raw);
    assemble(logs, &plans, raws, spec, cutoff)
}

/// Like [`build_dataset`] but keeps the context's normalization bounds and
/// splits at a given cutoff.
pub fn dataset_with_spec(logs: &[LearnerLog], ctx: &FeatureContext, cutoff: i64) -> Result<Dataset, FeatureError> {
    ctx.spec.validate()?;
    let plans = plan_rows(logs);
    let raws = featurize_plans(logs, ctx, &plans)?;
    assemble(logs, &plans, raws, ctx.spec.clone(), cutoff)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub test_index: usize,
    pub n_learners: usize,
    pub marks: f64,
    pub wasted_attempt_ratio: f64,
    pub unused_time_ratio: f64,
    pub overtime_incorrect_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrendTable {
    pub rows: Vec<TrendRow>,
    pub qualifying_learners: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub const TREND_TESTS: usize = 10;

/// Test-on-test means over learners with at least `min_tests` valid tests.
pub fn cohort_trends(logs: &[LearnerLog], ctx: &FeatureContext, min_tests: usize) -> TrendTable {
    let mut per_index: Vec<Vec<SessionStats>> = vec![Vec::new(); TREND_TESTS];
    let mut qualifying = 0;
    for log in logs {
        let mut valid: Vec<&TestSession> = log.sessions.iter().filter(|s| is_valid_test(s)).collect();
        if valid.len() < min_tests.max(1) {
            continue;
        }
        qualifying += 1;
        valid.sort_by_key(|s| s.start_ts);
        let attempts = attempts_before(log, &ctx.catalog, i64::MAX);
        let checkpoints: Vec<i64> = valid.iter().map(|s| s.start_ts).collect();
        let (_, snapshots) = filter_states(ctx, &ctx.bkt, &attempts, &checkpoints);
        for (k, (s, snap)) in valid.iter().zip(&snapshots).take(TREND_TESTS).enumerate() {
            let learned = |c: u32| snap.get(&c).copied().unwrap_or_else(|| ctx.params(c).p_init);
            per_index[k].push(session_stats(s, &ctx.catalog, &ctx.spec.thresholds, &learned, i64::MAX));
        }
    }
    if qualifying == 0 {
        return TrendTable {
            rows: Vec::new(),
            qualifying_learners: 0,
            warning: Some(format!("no learners with at least {min_tests} valid tests")),
        };
    }
    let rows = per_index
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(k, s)| TrendRow {
            test_index: k + 1,
            n_learners: s.len(),
            marks: mean_of(s, |x| x.score * 100.0),
            wasted_attempt_ratio: mean_of(s, |x| x.wasted),
            unused_time_ratio: mean_of(s, |x| x.unused_time),
            overtime_incorrect_ratio: mean_of(s, |x| x.overtime_incorrect),
        })
        .collect();
    TrendTable {
        rows,
        qualifying_learners: qualifying,
        warning: None,
    }
}

/// Session ids help callers line rows back up with the log.
pub fn session_key(s: &TestSession) -> (Id, Id) {
    (s.learner_id.clone(), s.session_id.clone())
}
