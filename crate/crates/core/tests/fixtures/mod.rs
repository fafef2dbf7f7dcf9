//! Small simulated corpora shared by the integration tests.
#![allow(dead_code)]

use esq_core::forest::TrainConfig;
use esq_core::pipeline::PipelineConfig;
use esq_core::simulator::{self, EventKind, Id, InteractionEvent, LearnerLog, SimConfig, World};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn corpus(n_learners: usize, seed: u64) -> (World, Vec<LearnerLog>) {
    let config = SimConfig {
        n_concepts: 20,
        questions_per_concept: 10,
        ..SimConfig::default()
    };
    let world = simulator::generate_world(&config, seed).unwrap();
    let people = simulator::generate_population(n_learners, seed, &config).unwrap();
    let logs = simulator::generate_events(&world, &people, seed).unwrap();
    (world, logs)
}

pub fn quick_config() -> PipelineConfig {
    PipelineConfig {
        projection_dim: 8,
        forest: TrainConfig {
            n_trees: 40,
            ..TrainConfig::default()
        },
        min_bucket_train: 30,
        background_rows: 200,
        ..PipelineConfig::default()
    }
}

const DAY_MS: i64 = 86_400_000;

fn future_event(r: &mut ChaCha8Rng, log: &LearnerLog, questions: &[Id], session: &Id, as_of: i64) -> InteractionEvent {
    let kind = *EventKind::ALL.choose(r).unwrap();
    let with_q = matches!(
        kind,
        EventKind::Attempt | EventKind::ViewQuestion | EventKind::ChooseOption | EventKind::ChangeOption | EventKind::MarkReview
    );
    InteractionEvent {
        learner_id: log.learner_id.clone(),
        session_id: session.clone(),
        // as_of itself is already the future.
        ts: as_of + r.random_range(0..30 * DAY_MS),
        kind,
        question_id: with_q.then(|| questions.choose(r).unwrap().clone()),
        correct: (kind == EventKind::Attempt).then(|| r.random()),
        duration_s: Some(r.random_range(1.0..300.0)),
    }
}

/// Append activity, late events inside past sessions and whole new test
/// sessions, all stamped at or after `as_of`.
pub fn append_future(r: &mut ChaCha8Rng, log: &LearnerLog, questions: &[Id], as_of: i64) -> LearnerLog {
    let mut out = log.clone();
    for _ in 0..r.random_range(1..40) {
        let sid: Id = format!("{}-future", log.learner_id).into();
        let e = future_event(r, log, questions, &sid, as_of);
        out.activity.push(e);
    }
    if !out.sessions.is_empty() {
        for _ in 0..r.random_range(0..5) {
            let i = r.random_range(0..out.sessions.len());
            let sid = out.sessions[i].session_id.clone();
            let e = future_event(r, log, questions, &sid, as_of);
            out.sessions[i].events.push(e);
        }
        if r.random::<bool>() {
            let mut s = log.sessions.choose(r).unwrap().clone();
            let shift = as_of + r.random_range(0..10 * DAY_MS) - s.start_ts;
            s.session_id = format!("{}-late", s.session_id).into();
            s.start_ts += shift;
            s.end_ts += shift;
            for e in &mut s.events {
                e.ts += shift;
                e.session_id = s.session_id.clone();
            }
            out.sessions.push(s);
        }
    }
    out
}
