//! Synthetic learner populations with planted ground truth, plus the JSONL
//! event-log and question-catalog formats shared with external producers.
//!
//! Attempt correctness follows a per-concept BKT process (guess/slip
//! emissions, unlearned -> learned transitions) with an optional logistic
//! shift by learner ability minus question difficulty.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bkt::BktParams;
use crate::rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("n must be ≥ 1")]
    EmptyPopulation,
    #[error("profiles must be nonempty")]
    NoProfiles,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown question id {0}")]
    UnknownQuestion(String),
    #[error("unknown concept id {0}")]
    UnknownConcept(u32),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: non-monotone timestamp in session {session_id}")]
    NonMonotone { line: usize, session_id: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog: {0}")]
    Catalog(String),
}

pub type Id = Arc<str>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerProfile {
    pub learner_id: String,
    pub ability: f64,
    pub learn_rate: f64,
    pub carelessness: f64,
    pub pace_bias: f64,
    pub engagement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMeta {
    pub question_id: Id,
    pub concept_id: u32,
    pub difficulty: f64,
    pub ideal_time_s: f64,
}

/// Question catalog with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    pub n_concepts: u32,
    questions: Vec<QuestionMeta>,
    index: HashMap<Id, usize>,
}

impl Catalog {
    pub fn new(n_concepts: u32, questions: Vec<QuestionMeta>) -> Result<Self, SimError> {
        let mut index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            if q.concept_id >= n_concepts {
                return Err(SimError::UnknownConcept(q.concept_id));
            }
            if !(q.ideal_time_s > 0.0) {
                return Err(SimError::InvalidConfig(format!(
                    "question {} has non-positive ideal time",
                    q.question_id
                )));
            }
            index.insert(q.question_id.clone(), i);
        }
        Ok(Self {
            n_concepts,
            questions,
            index,
        })
    }

    pub fn get(&self, id: &str) -> Option<&QuestionMeta> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    pub fn questions(&self) -> &[QuestionMeta] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| IngestError::Catalog(e.to_string()))?;
        w.write_record(["question_id", "concept_id", "difficulty", "ideal_time_s"])
            .map_err(|e| IngestError::Catalog(e.to_string()))?;
        for q in &self.questions {
            w.write_record([
                q.question_id.to_string(),
                q.concept_id.to_string(),
                q.difficulty.to_string(),
                q.ideal_time_s.to_string(),
            ])
            .map_err(|e| IngestError::Catalog(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `question_id,concept_id,difficulty,ideal_time_s`. The concept
    /// count is one past the largest concept id unless given.
    pub fn read_csv(path: &Path, n_concepts: Option<u32>) -> Result<Self, IngestError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| IngestError::Catalog(e.to_string()))?;
        let mut questions = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| IngestError::Catalog(e.to_string()))?;
            let field = |k: usize| -> Result<&str, IngestError> {
                rec.get(k).ok_or_else(|| {
                    IngestError::Catalog(format!("row {}: missing column {k}", i + 2))
                })
            };
            let parse_err = |what: &str| IngestError::Catalog(format!("row {}: bad {what}", i + 2));
            questions.push(QuestionMeta {
                question_id: Arc::from(field(0)?),
                concept_id: field(1)?.parse().map_err(|_| parse_err("concept_id"))?,
                difficulty: field(2)?.parse().map_err(|_| parse_err("difficulty"))?,
                ideal_time_s: field(3)?.parse().map_err(|_| parse_err("ideal_time_s"))?,
            });
        }
        let n = n_concepts.unwrap_or_else(|| {
            questions.iter().map(|q| q.concept_id + 1).max().unwrap_or(0)
        });
        Catalog::new(n, questions).map_err(|e| IngestError::Catalog(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ViewQuestion,
    ChooseOption,
    ChangeOption,
    MarkReview,
    Attempt,
    SwapSubject,
    BrowseContent,
    WatchVideo,
    Search,
    AskQuestion,
}

impl EventKind {
    pub const ALL: [EventKind; 10] = [
        EventKind::ViewQuestion,
        EventKind::ChooseOption,
        EventKind::ChangeOption,
        EventKind::MarkReview,
        EventKind::Attempt,
        EventKind::SwapSubject,
        EventKind::BrowseContent,
        EventKind::WatchVideo,
        EventKind::Search,
        EventKind::AskQuestion,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub learner_id: Id,
    pub session_id: Id,
    pub ts: i64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<Id>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Mock,
    Practice,
    Sectional,
}

impl TestKind {
    /// Encoding used for the test-kind feature.
    pub fn code(self) -> f64 {
        match self {
            TestKind::Mock => 0.0,
            TestKind::Practice => 0.5,
            TestKind::Sectional => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSession {
    pub session_id: Id,
    pub learner_id: Id,
    pub test_id: Id,
    pub test_kind: TestKind,
    pub start_ts: i64,
    pub end_ts: i64,
    pub total_questions: u32,
    pub total_time_s: f64,
    pub score_pct: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub question_ids: Vec<Id>,
    #[serde(skip)]
    pub events: Vec<InteractionEvent>,
}

impl TestSession {
    pub fn time_spent_s(&self) -> f64 {
        (self.end_ts - self.start_ts) as f64 / 1000.0
    }

    /// Distinct questions with an attempt event.
    pub fn attempted_questions(&self) -> usize {
        let mut seen = HashSet::new();
        for e in &self.events {
            if e.kind == EventKind::Attempt {
                if let Some(q) = &e.question_id {
                    seen.insert(q.clone());
                }
            }
        }
        seen.len()
    }
}

/// Everything recorded for one learner: test sessions and the activity
/// events outside tests.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearnerLog {
    pub learner_id: Id,
    pub sessions: Vec<TestSession>,
    pub activity: Vec<InteractionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBlueprint {
    pub test_id: Id,
    pub kind: TestKind,
    pub question_ids: Vec<Id>,
    pub total_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, name: &str, min: f64, max: f64) -> Result<(), SimError> {
        if !(self.lo <= self.hi) || self.lo < min || self.hi > max {
            return Err(SimError::InvalidConfig(format!(
                "{name} range [{}, {}] outside [{min}, {max}] or inverted",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_concepts: u32,
    pub questions_per_concept: u32,
    pub p_init: Range,
    pub p_transit: Range,
    pub p_guess: Range,
    pub p_slip: Range,
    pub ability_sd: f64,
    /// Logit shift of `p_init` per unit of ability.
    pub ability_init_scale: f64,
    /// Logit shift of correctness per unit of (ability - difficulty).
    pub irt_scale: f64,
    pub difficulty_sd: f64,
    pub learn_rate: Range,
    pub carelessness: Range,
    pub pace_sigma: f64,
    pub engagement: Range,
    pub ideal_time_s: Range,
    pub n_blueprints: u32,
    pub questions_per_test: u32,
    pub tests_per_learner: (u32, u32),
    /// Multiplicative decay of carelessness after each test.
    pub careless_decay: f64,
    pub abandon_prob: f64,
    pub horizon_days: u32,
    pub start_ts: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_concepts: 50,
            questions_per_concept: 20,
            p_init: Range::new(0.15, 0.5),
            p_transit: Range::new(0.05, 0.2),
            p_guess: Range::new(0.1, 0.25),
            p_slip: Range::new(0.05, 0.12),
            ability_sd: 1.0,
            ability_init_scale: 1.5,
            irt_scale: 0.5,
            difficulty_sd: 0.5,
            learn_rate: Range::new(0.0, 0.1),
            carelessness: Range::new(0.0, 0.3),
            pace_sigma: 0.25,
            engagement: Range::new(0.5, 4.0),
            ideal_time_s: Range::new(45.0, 150.0),
            n_blueprints: 12,
            questions_per_test: 40,
            tests_per_learner: (5, 8),
            careless_decay: 0.9,
            abandon_prob: 0.05,
            horizon_days: 120,
            start_ts: 1_700_000_000_000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_concepts == 0 || self.questions_per_concept == 0 {
            return bad("catalog must be nonempty");
        }
        self.p_init.check("p_init", 0.0, 1.0)?;
        self.p_transit.check("p_transit", 0.0, 1.0)?;
        self.p_guess.check("p_guess", 0.0, 1.0)?;
        self.p_slip.check("p_slip", 0.0, 1.0)?;
        self.learn_rate.check("learn_rate", 0.0, 1.0)?;
        self.carelessness.check("carelessness", 0.0, 1.0)?;
        self.engagement.check("engagement", 0.0, f64::INFINITY)?;
        self.ideal_time_s.check("ideal_time_s", f64::MIN_POSITIVE, f64::INFINITY)?;
        if !(self.ability_sd >= 0.0 && self.pace_sigma >= 0.0 && self.difficulty_sd >= 0.0) {
            return bad("spreads must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.careless_decay) || !(0.0..=1.0).contains(&self.abandon_prob) {
            return bad("careless_decay and abandon_prob must be probabilities");
        }
        if self.tests_per_learner.0 > self.tests_per_learner.1 {
            return bad("tests_per_learner range inverted");
        }
        if self.n_blueprints == 0 || self.questions_per_test == 0 {
            return bad("need at least one test with one question");
        }
        if self.horizon_days == 0 {
            return bad("horizon_days must be positive");
        }
        Ok(())
    }
}

/// Generated catalog, planted concept parameters and test blueprints.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SimConfig,
    pub catalog: Catalog,
    pub concept_params: Vec<BktParams>,
    pub blueprints: Vec<TestBlueprint>,
}

pub fn generate_world(config: &SimConfig, seed: u64) -> Result<World, SimError> {
    config.validate()?;
    let mut r = rng::stream(seed, "world");
    let diff = Normal::new(0.0, config.difficulty_sd.max(1e-12)).unwrap();
    let mut concept_params = Vec::with_capacity(config.n_concepts as usize);
    for _ in 0..config.n_concepts {
        concept_params.push(BktParams {
            p_init: config.p_init.sample(&mut r),
            p_transit: config.p_transit.sample(&mut r),
            p_guess: config.p_guess.sample(&mut r),
            p_slip: config.p_slip.sample(&mut r),
        });
    }
    let mut questions = Vec::new();
    for c in 0..config.n_concepts {
        for k in 0..config.questions_per_concept {
            let difficulty = if config.difficulty_sd > 0.0 { diff.sample(&mut r) } else { 0.0 };
            questions.push(QuestionMeta {
                question_id: Arc::from(format!("q{c:04}_{k:03}")),
                concept_id: c,
                difficulty,
                ideal_time_s: config.ideal_time_s.sample(&mut r).round().max(1.0),
            });
        }
    }
    let catalog = Catalog::new(config.n_concepts, questions)?;
    let mut blueprints = Vec::with_capacity(config.n_blueprints as usize);
    let kinds = [TestKind::Mock, TestKind::Practice, TestKind::Sectional];
    for b in 0..config.n_blueprints {
        let kind = kinds[b as usize % kinds.len()];
        let pool: Vec<&QuestionMeta> = match kind {
            // Sectional tests cover one contiguous third of the concepts.
            TestKind::Sectional => {
                let third = (config.n_concepts / 3).max(1);
                let lo = (b / 3 % 3) * third;
                catalog
                    .questions()
                    .iter()
                    .filter(|q| q.concept_id >= lo && q.concept_id < lo + third)
                    .collect()
            }
            _ => catalog.questions().iter().collect(),
        };
        let n = (config.questions_per_test as usize).min(pool.len());
        let mut chosen: Vec<&QuestionMeta> = pool.choose_multiple(&mut r, n).copied().collect();
        chosen.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        let total_time_s = (chosen.iter().map(|q| q.ideal_time_s).sum::<f64>() * 1.2).round();
        blueprints.push(TestBlueprint {
            test_id: Arc::from(format!("t{b:03}")),
            kind,
            question_ids: chosen.iter().map(|q| q.question_id.clone()).collect(),
            total_time_s,
        });
    }
    Ok(World {
        config: config.clone(),
        catalog,
        concept_params,
        blueprints,
    })
}

pub fn generate_population(
    n: usize,
    seed: u64,
    config: &SimConfig,
) -> Result<Vec<LearnerProfile>, SimError> {
    if n == 0 {
        return Err(SimError::EmptyPopulation);
    }
    config.validate()?;
    let ability = Normal::new(0.0, config.ability_sd.max(1e-12)).unwrap();
    let pace = LogNormal::new(0.0, config.pace_sigma.max(1e-12)).unwrap();
    Ok((0..n)
        .map(|i| {
            let learner_id = format!("s{i:05}");
            let mut r = rng::stream(seed, &format!("profile/{learner_id}"));
            LearnerProfile {
                ability: if config.ability_sd > 0.0 { ability.sample(&mut r) } else { 0.0 },
                learn_rate: config.learn_rate.sample(&mut r),
                carelessness: config.carelessness.sample(&mut r),
                pace_bias: if config.pace_sigma > 0.0 { pace.sample(&mut r) } else { 1.0 },
                engagement: config.engagement.sample(&mut r),
                learner_id,
            }
        })
        .collect())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic shift that leaves exact 0/1 probabilities untouched.
fn shift(p: f64, by: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 || by == 0.0 {
        p
    } else {
        sigmoid(logit(p) + by)
    }
}

/// Hidden knowledge of one simulated learner.
pub struct PlantedLearner<'a> {
    params: &'a [BktParams],
    learned: Vec<bool>,
    ability: f64,
    learn_rate: f64,
    irt_scale: f64,
}

impl<'a> PlantedLearner<'a> {
    pub fn new(
        params: &'a [BktParams],
        ability: f64,
        learn_rate: f64,
        init_scale: f64,
        irt_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let learned = params
            .iter()
            .map(|p| rng.random::<f64>() < shift(p.p_init, init_scale * ability))
            .collect();
        Self {
            params,
            learned,
            ability,
            learn_rate,
            irt_scale,
        }
    }

    pub fn is_learned(&self, concept: u32) -> bool {
        self.learned[concept as usize]
    }

    /// Probability of a correct answer before the attempt.
    pub fn p_correct(&self, concept: u32, difficulty: f64) -> f64 {
        let p = &self.params[concept as usize];
        let base = if self.learned[concept as usize] { 1.0 - p.p_slip } else { p.p_guess };
        shift(base, self.irt_scale * (self.ability - difficulty))
    }

    /// Draw correctness, then apply the learning transition.
    pub fn attempt(&mut self, concept: u32, difficulty: f64, rng: &mut ChaCha8Rng) -> bool {
        let correct = rng.random::<f64>() < self.p_correct(concept, difficulty);
        self.practice(concept, 1.0, rng);
        correct
    }

    /// Learning opportunity without an observation; `strength` scales the transit.
    pub fn practice(&mut self, concept: u32, strength: f64, rng: &mut ChaCha8Rng) {
        let c = concept as usize;
        if !self.learned[c] {
            let t = 1.0 - (1.0 - self.params[c].p_transit) * (1.0 - self.learn_rate);
            if rng.random::<f64>() < t * strength {
                self.learned[c] = true;
            }
        }
    }
}

/// Pure BKT observation sequences from planted parameters (no ability shift),
/// one per learner.
pub fn simulate_bkt_sequences(
    params: &BktParams,
    n_learners: usize,
    n_attempts: usize,
    seed: u64,
) -> Vec<Vec<bool>> {
    let table = [*params];
    (0..n_learners)
        .map(|i| {
            let mut r = rng::indexed(seed, "bkt-seq", i as u64);
            let mut learner = PlantedLearner::new(&table, 0.0, 0.0, 0.0, 0.0, &mut r);
            (0..n_attempts).map(|_| learner.attempt(0, 0.0, &mut r)).collect()
        })
        .collect()
}

const DAY_MS: i64 = 86_400_000;

struct SessionBuilder {
    learner: Id,
    session: Id,
    events: Vec<InteractionEvent>,
}

impl SessionBuilder {
    fn push(&mut self, ts: i64, kind: EventKind, q: Option<&Id>, correct: Option<bool>, dur: Option<f64>) {
        self.events.push(InteractionEvent {
            learner_id: self.learner.clone(),
            session_id: self.session.clone(),
            ts,
            kind,
            question_id: q.cloned(),
            correct,
            duration_s: dur,
        });
    }
}

/// Simulate every learner's practice activity and tests over the horizon.
pub fn generate_events(
    world: &World,
    profiles: &[LearnerProfile],
    seed: u64,
) -> Result<Vec<LearnerLog>, SimError> {
    if profiles.is_empty() {
        return Err(SimError::NoProfiles);
    }
    for b in &world.blueprints {
        for q in &b.question_ids {
            if world.catalog.get(q).is_none() {
                return Err(SimError::UnknownQuestion(q.to_string()));
            }
        }
    }
    if world.concept_params.len() != world.catalog.n_concepts as usize {
        return Err(SimError::InvalidConfig("concept parameter count mismatch".into()));
    }
    profiles
        .iter()
        .map(|p| simulate_learner(world, p, seed))
        .collect()
}

fn simulate_learner(world: &World, profile: &LearnerProfile, seed: u64) -> Result<LearnerLog, SimError> {
    let cfg = &world.config;
    let mut r = rng::stream(seed, &format!("events/{}", profile.learner_id));
    let learner_id: Id = Arc::from(profile.learner_id.as_str());
    let mut hidden = PlantedLearner::new(
        &world.concept_params,
        profile.ability,
        profile.learn_rate,
        cfg.ability_init_scale,
        cfg.irt_scale,
        &mut r,
    );
    let (tmin, tmax) = cfg.tests_per_learner;
    let n_tests = r.random_range(tmin..=tmax) as i64;
    let gap_ms = cfg.horizon_days as i64 * DAY_MS / (n_tests + 1).max(1);
    let offset = r.random_range(0..world.blueprints.len());
    let noise = LogNormal::new(0.0, 0.3).unwrap();
    let mut carelessness = profile.carelessness;
    let mut pace = profile.pace_bias;
    let mut log = LearnerLog {
        learner_id: learner_id.clone(),
        ..LearnerLog::default()
    };
    let mut clock = cfg.start_ts + r.random_range(0..DAY_MS);

    for k in 0..n_tests {
        let test_start = cfg.start_ts + (k + 1) * gap_ms + r.random_range(0..DAY_MS / 2);
        // Practice until the next test.
        let mut practice = SessionBuilder {
            learner: learner_id.clone(),
            session: Arc::from(format!("{}-p{k:02}", profile.learner_id)),
            events: Vec::new(),
        };
        let mut day = clock;
        while day + DAY_MS < test_start {
            let n_events = if profile.engagement > 0.0 {
                Poisson::new(profile.engagement).unwrap().sample(&mut r) as usize
            } else {
                0
            };
            let mut stamps: Vec<i64> = (0..n_events).map(|_| day + r.random_range(0..DAY_MS)).collect();
            stamps.sort_unstable();
            for ts in stamps {
                let roll: f64 = r.random();
                if roll < 0.5 {
                    let q = &world.catalog.questions()[r.random_range(0..world.catalog.len())];
                    let correct = hidden.attempt(q.concept_id, q.difficulty, &mut r);
                    let dur = (q.ideal_time_s * pace * noise.sample(&mut r) * 100.0).round() / 100.0;
                    practice.push(ts, EventKind::Attempt, Some(&q.question_id), Some(correct), Some(dur));
                } else if roll < 0.7 {
                    let c = r.random_range(0..cfg.n_concepts);
                    hidden.practice(c, 0.5, &mut r);
                    let dur = r.random_range(60.0..900.0f64).round();
                    practice.push(ts, EventKind::WatchVideo, None, None, Some(dur));
                } else if roll < 0.85 {
                    let dur = r.random_range(10.0..300.0f64).round();
                    practice.push(ts, EventKind::BrowseContent, None, None, Some(dur));
                } else if roll < 0.95 {
                    practice.push(ts, EventKind::Search, None, None, None);
                } else {
                    practice.push(ts, EventKind::AskQuestion, None, None, None);
                }
            }
            day += DAY_MS;
        }
        log.activity.extend(practice.events);

        let blueprint = &world.blueprints[(offset + k as usize) % world.blueprints.len()];
        let session = simulate_test(
            world,
            blueprint,
            &learner_id,
            &format!("{}-t{k:02}", profile.learner_id),
            test_start,
            &mut hidden,
            carelessness,
            pace,
            &mut r,
        );
        clock = session.end_ts;
        log.sessions.push(session);
        carelessness *= cfg.careless_decay;
        pace = 1.0 + (pace - 1.0) * 0.9;
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn simulate_test(
    world: &World,
    blueprint: &TestBlueprint,
    learner_id: &Id,
    session_id: &str,
    start: i64,
    hidden: &mut PlantedLearner<'_>,
    carelessness: f64,
    pace: f64,
    r: &mut ChaCha8Rng,
) -> TestSession {
    let noise = LogNormal::new(0.0, 0.3).unwrap();
    let mut b = SessionBuilder {
        learner: learner_id.clone(),
        session: Arc::from(session_id),
        events: Vec::new(),
    };
    let total_time = blueprint.total_time_s;
    let abandon_at = if r.random::<f64>() < world.config.abandon_prob {
        Some((blueprint.question_ids.len() / 20).max(1))
    } else {
        None
    };
    let mut elapsed = 0.0f64;
    let mut correct_count = 0u32;
    let mut revisit: Vec<&QuestionMeta> = Vec::new();
    let ts_at = |elapsed: f64| start + (elapsed * 1000.0).round() as i64;

    let answer = |q: &QuestionMeta,
                  hidden: &mut PlantedLearner<'_>,
                  elapsed: &mut f64,
                  b: &mut SessionBuilder,
                  r: &mut ChaCha8Rng,
                  first_view: bool|
     -> Option<bool> {
        let learned = hidden.is_learned(q.concept_id);
        let careless = learned && r.random::<f64>() < carelessness;
        let mut dur = q.ideal_time_s * pace * noise.sample(r) * if learned { 1.0 } else { 1.6 };
        if careless {
            dur = q.ideal_time_s * 0.15;
        }
        dur = (dur * 100.0).round() / 100.0;
        if *elapsed + dur > total_time {
            return None;
        }
        b.push(ts_at(*elapsed), EventKind::ChooseOption, Some(&q.question_id), None, None);
        *elapsed += dur;
        let change_p = if learned { 0.05 } else { 0.15 };
        if first_view && r.random::<f64>() < change_p {
            b.push(ts_at(*elapsed), EventKind::ChangeOption, Some(&q.question_id), None, None);
        }
        let correct = if careless {
            hidden.practice(q.concept_id, 1.0, r);
            false
        } else {
            hidden.attempt(q.concept_id, q.difficulty, r)
        };
        b.push(ts_at(*elapsed), EventKind::Attempt, Some(&q.question_id), Some(correct), Some(dur));
        Some(correct)
    };

    let mut attempted = 0usize;
    let mut out_of_time = false;
    for (i, qid) in blueprint.question_ids.iter().enumerate() {
        if abandon_at.is_some_and(|a| attempted >= a) {
            break;
        }
        let q = world.catalog.get(qid).expect("validated blueprint");
        if i > 0 && i % 10 == 0 && r.random::<f64>() < 0.3 {
            b.push(ts_at(elapsed), EventKind::SwapSubject, None, None, None);
        }
        b.push(ts_at(elapsed), EventKind::ViewQuestion, Some(&q.question_id), None, None);
        let learned = hidden.is_learned(q.concept_id);
        let roll: f64 = r.random();
        let skip_p = if learned { 0.03 } else { 0.25 };
        if roll < skip_p {
            elapsed += (q.ideal_time_s * 0.3 * 100.0).round() / 100.0;
            continue;
        }
        if roll < skip_p + 0.1 {
            b.push(ts_at(elapsed), EventKind::MarkReview, Some(&q.question_id), None, None);
            elapsed += (q.ideal_time_s * 0.2 * 100.0).round() / 100.0;
            revisit.push(q);
            continue;
        }
        match answer(q, hidden, &mut elapsed, &mut b, r, true) {
            Some(c) => {
                attempted += 1;
                correct_count += c as u32;
            }
            None => {
                out_of_time = true;
                break;
            }
        }
    }
    if !out_of_time && abandon_at.is_none() {
        for q in revisit {
            b.push(ts_at(elapsed), EventKind::ViewQuestion, Some(&q.question_id), None, None);
            match answer(q, hidden, &mut elapsed, &mut b, r, false) {
                Some(c) => correct_count += c as u32,
                None => break,
            }
        }
    }
    let elapsed = elapsed.min(total_time);
    let total_questions = blueprint.question_ids.len() as u32;
    TestSession {
        session_id: b.session.clone(),
        learner_id: learner_id.clone(),
        test_id: blueprint.test_id.clone(),
        test_kind: blueprint.kind,
        start_ts: start,
        end_ts: ts_at(elapsed).max(b.events.last().map_or(start, |e| e.ts)),
        total_questions,
        total_time_s: total_time,
        score_pct: 100.0 * correct_count as f64 / total_questions as f64,
        question_ids: blueprint.question_ids.clone(),
        events: b.events,
    }
}

/// Sessions meeting both the 10% attempted-questions and 10% time thresholds.
pub fn filter_valid_tests(sessions: &[TestSession]) -> Vec<TestSession> {
    sessions.iter().filter(|s| is_valid_test(s)).cloned().collect()
}

pub const VALID_FRACTION: f64 = 0.10;

pub fn is_valid_test(s: &TestSession) -> bool {
    let attempts = s.attempted_questions() as f64;
    attempts >= VALID_FRACTION * s.total_questions as f64
        && s.time_spent_s() >= VALID_FRACTION * s.total_time_s
}

#[derive(Serialize, Deserialize)]
struct SessionLine {
    session: TestSession,
}

/// Write logs as JSONL: per learner, chronological, each session header
/// immediately before its events.
pub fn write_jsonl<W: Write>(logs: &[LearnerLog], out: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    for log in logs {
        let mut activity = log.activity.iter().peekable();
        for s in &log.sessions {
            while let Some(e) = activity.next_if(|e| e.ts < s.start_ts) {
                serde_json::to_writer(&mut w, e)?;
                w.write_all(b"\n")?;
            }
            serde_json::to_writer(&mut w, &SessionLine { session: s.clone() })?;
            w.write_all(b"\n")?;
            for e in &s.events {
                serde_json::to_writer(&mut w, e)?;
                w.write_all(b"\n")?;
            }
        }
        for e in activity {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()
}

pub fn write_jsonl_file(logs: &[LearnerLog], path: &Path) -> std::io::Result<()> {
    write_jsonl(logs, File::create(path)?)
}

/// Parse a JSONL event log. Learners in `excluded` (bots, system testers)
/// are dropped.
pub fn ingest_log(path: &Path, excluded: &HashSet<String>) -> Result<Vec<LearnerLog>, IngestError> {
    ingest_reader(BufReader::new(File::open(path)?), excluded)
}

pub fn ingest_reader<R: BufRead>(
    reader: R,
    excluded: &HashSet<String>,
) -> Result<Vec<LearnerLog>, IngestError> {
    let mut learners: BTreeMap<Id, LearnerLog> = BTreeMap::new();
    // session id -> (learner, index into that learner's sessions)
    let mut test_sessions: HashMap<Id, (Id, usize)> = HashMap::new();
    let mut last_ts: HashMap<Id, i64> = HashMap::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| IngestError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        let schema = |message: String| IngestError::Schema { line: lineno, message };
        if let Some(obj) = value.get("session") {
            let session: TestSession =
                serde_json::from_value(obj.clone()).map_err(|e| schema(e.to_string()))?;
            if session.end_ts < session.start_ts {
                return Err(schema("session ends before it starts".into()));
            }
            if !(0.0..=100.0).contains(&session.score_pct) {
                return Err(schema(format!("score_pct {} outside [0, 100]", session.score_pct)));
            }
            if excluded.contains(&*session.learner_id) {
                continue;
            }
            if test_sessions.contains_key(&session.session_id) {
                return Err(schema(format!("duplicate session {}", session.session_id)));
            }
            let entry = learners
                .entry(session.learner_id.clone())
                .or_insert_with(|| LearnerLog {
                    learner_id: session.learner_id.clone(),
                    ..LearnerLog::default()
                });
            test_sessions.insert(
                session.session_id.clone(),
                (session.learner_id.clone(), entry.sessions.len()),
            );
            entry.sessions.push(session);
            continue;
        }
        let event: InteractionEvent =
            serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        if event.kind == EventKind::Attempt && (event.question_id.is_none() || event.correct.is_none()) {
            return Err(schema("attempt event requires question_id and correct".into()));
        }
        if excluded.contains(&*event.learner_id) {
            continue;
        }
        if let Some(prev) = last_ts.insert(event.session_id.clone(), event.ts) {
            if event.ts < prev {
                return Err(IngestError::NonMonotone {
                    line: lineno,
                    session_id: event.session_id.to_string(),
                });
            }
        }
        if let Some((owner, idx)) = test_sessions.get(&event.session_id) {
            if owner != &event.learner_id {
                return Err(schema(format!(
                    "event learner {} does not own session {}",
                    event.learner_id, event.session_id
                )));
            }
            let session = &mut learners.get_mut(owner).expect("owner registered").sessions[*idx];
            if event.kind == EventKind::Attempt && !session.question_ids.is_empty() {
                let q = event.question_id.as_ref().expect("checked above");
                if !session.question_ids.contains(q) {
                    return Err(schema(format!("question {q} not in session {}", session.session_id)));
                }
            }
            session.events.push(event);
        } else {
            learners
                .entry(event.learner_id.clone())
                .or_insert_with(|| LearnerLog {
                    learner_id: event.learner_id.clone(),
                    ..LearnerLog::default()
                })
                .activity
                .push(event);
        }
    }
    Ok(learners.into_values().collect())
}
