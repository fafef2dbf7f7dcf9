#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use esq_core::bundle::ModelBundle;
use esq_core::forest::TrainConfig;
use esq_core::pipeline::{self, PipelineConfig, PipelineOutput};
use esq_core::simulator::{self, LearnerLog, SimConfig};
use esq_serve::api::{self, ApiConfig};
use esq_serve::engine::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

pub fn small_run(n_learners: usize, seed: u64) -> (PipelineOutput, Vec<LearnerLog>) {
    let sim = SimConfig {
        n_concepts: 20,
        questions_per_concept: 10,
        ..SimConfig::default()
    };
    let world = simulator::generate_world(&sim, seed).unwrap();
    let people = simulator::generate_population(n_learners, seed, &sim).unwrap();
    let logs = simulator::generate_events(&world, &people, seed).unwrap();
    let config = PipelineConfig {
        projection_dim: 8,
        forest: TrainConfig {
            n_trees: 40,
            ..TrainConfig::default()
        },
        min_bucket_train: 30,
        background_rows: 200,
        ..PipelineConfig::default()
    };
    (pipeline::run(&logs, &world.catalog, &config).unwrap(), logs)
}

pub fn app(bundle: Option<ModelBundle>, logs: Vec<LearnerLog>) -> Router {
    let engine = bundle.map(|b| Engine::new(b).unwrap().with_logs(logs));
    api::router(Arc::new(engine), &ApiConfig::default())
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call_json(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, serde_json::Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(serde_json::Value::Null))
}
