//! End-to-end training: upstream knowledge models, dataset, per-bucket
//! forests, holdout evaluation and the bundle that carries it all.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bkt::{self, BktParams, ConceptFit, EmConfig};
use crate::bundle::{BundleMeta, ModelBundle, FORMAT_VERSION};
use crate::features::{
    self, Bucket, Dataset, FeatureContext, FeatureError, FeatureSpec, RowPlan,
};
use crate::forest::{self, Forest, ForestError, Metrics, TrainConfig};
use crate::mastery::{self, FmConfig, FmModel, ProjectionConfig, ProjectionScheme, RandomProjection, Triple};
use crate::rng;
use crate::simulator::{Catalog, EventKind, LearnerLog, QuestionMeta};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no rows: every learner needs at least two valid tests")]
    NoRows,
    #[error("no training rows before the time cutoff")]
    NoTrainingRows,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("mastery model: {0}")]
    Mastery(String),
    #[error("knowledge tracing: {0}")]
    Bkt(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub em: EmConfig,
    pub fm: FmConfig,
    /// Projected mastery width; clipped to the concept count, 0 disables.
    pub projection_dim: usize,
    pub projection_scheme: ProjectionScheme,
    pub projection_seed: u64,
    pub individualized: bool,
    pub forest: TrainConfig,
    pub interval_tau: f64,
    /// Buckets with fewer training rows fall back to the global model.
    pub min_bucket_train: usize,
    /// Per-bucket cap on attribution background rows.
    pub background_rows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            em: EmConfig::default(),
            fm: FmConfig::default(),
            projection_dim: 50,
            projection_scheme: ProjectionScheme::Sign,
            projection_seed: 0,
            individualized: false,
            forest: TrainConfig::default(),
            interval_tau: 0.05,
            min_bucket_train: 50,
            background_rows: 2000,
        }
    }
}

/// Knowledge models fitted on events before the cutoff.
#[derive(Debug, Clone)]
pub struct Upstream {
    pub bkt: BTreeMap<u32, BktParams>,
    pub fits: Vec<ConceptFit>,
    pub fm: Option<FmModel>,
}

/// (time, concept, correct) per learner, sorted by time.
type Attempts = Vec<(String, Vec<(i64, u32, bool)>)>;

fn attempts_before(logs: &[LearnerLog], catalog: &Catalog, cutoff: i64) -> Attempts {
    logs.iter()
        .map(|log| {
            let mut a: Vec<(i64, u32, bool)> = log
                .sessions
                .iter()
                .flat_map(|s| s.events.iter())
                .chain(log.activity.iter())
                .filter(|e| e.ts < cutoff && e.kind == EventKind::Attempt)
                .filter_map(|e| {
                    let q = catalog.get(e.question_id.as_deref()?)?;
                    Some((e.ts, q.concept_id, e.correct?))
                })
                .collect();
            a.sort_by_key(|&(ts, c, _)| (ts, c));
            (log.learner_id.to_string(), a)
        })
        .collect()
}

pub fn fit_upstream(
    logs: &[LearnerLog],
    catalog: &Catalog,
    cutoff: i64,
    config: &PipelineConfig,
) -> Result<Upstream, PipelineError> {
    let per_learner = attempts_before(logs, catalog, cutoff);
    let mut by_concept: BTreeMap<u32, Vec<Vec<bool>>> = BTreeMap::new();
    let mut triples = Vec::new();
    for (learner, attempts) in &per_learner {
        for (c, seq) in features::concept_sequences(attempts) {
            by_concept.entry(c).or_default().push(seq);
        }
        triples.extend(attempts.iter().map(|&(_, concept, correct)| Triple {
            learner: learner.clone(),
            concept,
            correct,
        }));
    }
    let mut bkt_map = BTreeMap::new();
    let mut fits = Vec::new();
    for c in 0..catalog.n_concepts {
        let params = match by_concept.get(&c) {
            Some(seqs) if !seqs.is_empty() => match bkt::fit_em(seqs, BktParams::default(), config.em) {
                Ok((p, report)) => {
                    fits.push(ConceptFit {
                        concept_id: c,
                        params: p,
                        loglik: report.final_loglik(),
                        n_seq: report.n_sequences,
                    });
                    p
                }
                Err(bkt::BktError::DegenerateInput) => BktParams::default(),
                Err(e) => return Err(PipelineError::Bkt(e.to_string())),
            },
            _ => BktParams::default(),
        };
        bkt_map.insert(c, params);
    }
    let fm = if config.projection_dim > 0 && !triples.is_empty() {
        let (m, _) = mastery::fit_fm(&triples, catalog.n_concepts, &config.fm)
            .map_err(|e| PipelineError::Mastery(e.to_string()))?;
        Some(m)
    } else {
        None
    };
    Ok(Upstream {
        bkt: bkt_map,
        fits,
        fm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: Bucket,
    pub n_train: usize,
    pub n_holdout: usize,
    pub has_model: bool,
    /// Holdout metrics of the routed model for rows in this bucket.
    pub routed: Option<Metrics>,
    /// Holdout metrics of the global model for rows in this bucket.
    pub global: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoff: i64,
    pub n_train: usize,
    pub n_holdout: usize,
    pub routed: Metrics,
    pub global: Metrics,
    pub buckets: Vec<BucketReport>,
    pub interval_tau: f64,
    /// Fraction of holdout scores inside the predicted interval.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub learner_id: String,
    pub test_id: String,
    pub bucket: Bucket,
    pub y: f64,
    pub yhat: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub global_yhat: f64,
    pub fallback: bool,
}

pub struct PipelineOutput {
    pub bundle: ModelBundle,
    pub dataset: Dataset,
    pub upstream: Upstream,
    pub predictions: Vec<Prediction>,
}

/// Upstream fits, dataset and feature context for a corpus.
pub fn prepare(
    logs: &[LearnerLog],
    catalog: &Catalog,
    config: &PipelineConfig,
) -> Result<(Upstream, FeatureContext, Dataset), PipelineError> {
    let plans: Vec<RowPlan> = features::plan_rows(logs);
    if plans.is_empty() {
        return Err(PipelineError::NoRows);
    }
    let cutoff = features::time_cutoff(&plans, config.train_fraction);
    let upstream = fit_upstream(logs, catalog, cutoff, config)?;
    let dim = config.projection_dim.min(catalog.n_concepts as usize);
    let (projection, dim) = match (&upstream.fm, dim) {
        (Some(_), d) if d > 0 => (
            Some(
                RandomProjection::new(ProjectionConfig {
                    input_dim: catalog.n_concepts as usize,
                    output_dim: d,
                    seed: config.projection_seed,
                    scheme: config.projection_scheme,
                })
                .map_err(|e| PipelineError::Mastery(e.to_string()))?,
            ),
            d,
        ),
        _ => (None, 0),
    };
    let ctx = FeatureContext {
        spec: FeatureSpec::standard(dim),
        catalog: catalog.clone(),
        bkt: upstream.bkt.clone(),
        fm: if dim > 0 { upstream.fm.clone() } else { None },
        projection,
        individualized: config.individualized,
    };
    let dataset = features::build_dataset(logs, &ctx, config.train_fraction)?;
    if !dataset.rows.iter().any(|r| r.train) {
        return Err(PipelineError::NoTrainingRows);
    }
    let ctx = FeatureContext {
        spec: dataset.spec.clone(),
        ..ctx
    };
    Ok((upstream, ctx, dataset))
}

/// Global forest plus one per bucket with enough training rows.
pub fn train_forests(
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<(Vec<Forest>, Vec<Option<Bucket>>), PipelineError> {
    let (x, y) = dataset.split(None, true);
    let mut forests = vec![forest::train(&x, &y, &config.forest, None)?];
    let mut buckets = vec![None];
    for b in Bucket::ALL {
        let (xb, yb) = dataset.split(Some(b), true);
        if xb.len() >= config.min_bucket_train.max(1) {
            forests.push(forest::train(&xb, &yb, &config.forest, Some(b.id()))?);
            buckets.push(Some(b));
        }
    }
    Ok((forests, buckets))
}

/// Score holdout rows with the routed and global models.
pub fn evaluate(bundle: &ModelBundle, dataset: &Dataset) -> Result<(EvalReport, Vec<Prediction>), PipelineError> {
    let tau = bundle.meta.interval_tau;
    let global = bundle.global().ok_or(PipelineError::NoTrainingRows)?;
    let mut preds = Vec::new();
    for r in dataset.rows.iter().filter(|r| !r.train) {
        let (f, fallback) = bundle.route(r.bucket).ok_or(PipelineError::NoTrainingRows)?;
        let x = &r.vector.values;
        let (q_lo, q_hi) = f.predict_interval(x, tau)?;
        preds.push(Prediction {
            learner_id: r.learner_id.clone(),
            test_id: r.test_id.clone(),
            bucket: r.bucket,
            y: r.y,
            yhat: f.predict_mean(x)?,
            q_lo,
            q_hi,
            global_yhat: global.predict_mean(x)?,
            fallback,
        });
    }
    if preds.is_empty() {
        return Err(ForestError::EmptyHoldout.into());
    }
    let metrics = |rows: &[&Prediction], routed: bool| -> Result<Metrics, ForestError> {
        let y: Vec<f64> = rows.iter().map(|p| p.y).collect();
        let yhat: Vec<f64> = rows.iter().map(|p| if routed { p.yhat } else { p.global_yhat }).collect();
        let q = if routed {
            vec![
                (tau, rows.iter().map(|p| p.q_lo).collect()),
                (1.0 - tau, rows.iter().map(|p| p.q_hi).collect()),
            ]
        } else {
            vec![]
        };
        Metrics::compute(&y, &yhat, &q)
    };
    let all: Vec<&Prediction> = preds.iter().collect();
    let mut buckets = Vec::new();
    for b in Bucket::ALL {
        let rows: Vec<&Prediction> = preds.iter().filter(|p| p.bucket == b).collect();
        buckets.push(BucketReport {
            bucket: b,
            n_train: dataset.rows.iter().filter(|r| r.train && r.bucket == b).count(),
            n_holdout: rows.len(),
            has_model: bundle.bucket_forest(b).is_some(),
            routed: metrics(&rows, true).ok(),
            global: metrics(&rows, false).ok(),
        });
    }
    let covered = preds.iter().filter(|p| p.q_lo <= p.y && p.y <= p.q_hi).count();
    let report = EvalReport {
        cutoff: dataset.cutoff,
        n_train: dataset.rows.iter().filter(|r| r.train).count(),
        n_holdout: preds.len(),
        routed: metrics(&all, true)?,
        global: metrics(&all, false)?,
        buckets,
        interval_tau: tau,
        coverage: covered as f64 / preds.len() as f64,
    };
    Ok((report, preds))
}

pub fn config_digest(config: &PipelineConfig) -> String {
    let json = serde_json::to_vec(config).expect("config is serializable");
    hex::encode(Sha256::digest(json))
}

/// Seeded subsample of each bucket's training rows, in row order.
pub fn background_rows(dataset: &Dataset, config: &PipelineConfig) -> BTreeMap<Bucket, Vec<Vec<f64>>> {
    let mut out = BTreeMap::new();
    for b in Bucket::ALL {
        let rows: Vec<&Vec<f64>> = dataset
            .rows
            .iter()
            .filter(|r| r.train && r.bucket == b)
            .map(|r| &r.vector.values)
            .collect();
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        if rows.len() > config.background_rows {
            let mut r = rng::stream(config.forest.seed, &format!("background/{}", b.label()));
            idx = idx.choose_multiple(&mut r, config.background_rows).copied().collect();
            idx.sort_unstable();
        }
        out.insert(b, idx.into_iter().map(|i| rows[i].clone()).collect());
    }
    out
}

/// Everything besides the forests that a bundle needs; written next to
/// the dataset CSVs so training can run from files alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub spec: FeatureSpec,
    pub n_concepts: u32,
    pub catalog: Vec<QuestionMeta>,
    pub bkt: BTreeMap<u32, BktParams>,
    pub fm: Option<FmModel>,
    pub projection: Option<ProjectionConfig>,
    pub individualized: bool,
    pub cutoff: i64,
    pub config: PipelineConfig,
}

impl Artifacts {
    pub fn new(ctx: &FeatureContext, cutoff: i64, config: &PipelineConfig) -> Self {
        Self {
            spec: ctx.spec.clone(),
            n_concepts: ctx.catalog.n_concepts,
            catalog: ctx.catalog.questions().to_vec(),
            bkt: ctx.bkt.clone(),
            fm: ctx.fm.clone(),
            projection: ctx.projection.as_ref().map(|p| *p.config()),
            individualized: ctx.individualized,
            cutoff,
            config: config.clone(),
        }
    }
}

/// Train forests on the dataset's training rows, evaluate on its holdout
/// rows and package the bundle. `config` supplies the forest settings.
pub fn train_bundle(
    artifacts: &Artifacts,
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<(ModelBundle, Vec<Prediction>), PipelineError> {
    if !dataset.rows.iter().any(|r| r.train) {
        return Err(PipelineError::NoTrainingRows);
    }
    let (forests, forest_buckets) = train_forests(dataset, config)?;
    let mut bundle = ModelBundle {
        meta: BundleMeta {
            format_version: FORMAT_VERSION,
            spec: dataset.spec.clone(),
            n_concepts: artifacts.n_concepts,
            catalog: artifacts.catalog.clone(),
            bkt: artifacts.bkt.clone(),
            fm: artifacts.fm.clone(),
            projection: artifacts.projection,
            individualized: artifacts.individualized,
            config: config.clone(),
            config_digest: config_digest(config),
            interval_tau: config.interval_tau,
            forest_buckets,
            background: background_rows(dataset, config),
            report: None,
        },
        forests,
    };
    let (report, predictions) = evaluate(&bundle, dataset)?;
    bundle.meta.report = Some(report);
    Ok((bundle, predictions))
}

pub fn run(logs: &[LearnerLog], catalog: &Catalog, config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let (upstream, ctx, dataset) = prepare(logs, catalog, config)?;
    let artifacts = Artifacts::new(&ctx, dataset.cutoff, config);
    let (bundle, predictions) = train_bundle(&artifacts, &dataset, config)?;
    Ok(PipelineOutput {
        bundle,
        dataset,
        upstream,
        predictions,
    })
}

pub fn write_predictions_csv(path: &Path, preds: &[Prediction], tau: f64) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Io(e.to_string());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let lo = format!("q{:02}", (tau * 100.0).round() as u32);
    let hi = format!("q{:02}", ((1.0 - tau) * 100.0).round() as u32);
    writeln!(f, "learner_id,test_id,bucket,y,yhat,{lo},{hi}").map_err(io)?;
    for p in preds {
        writeln!(f, "{},{},{},{},{},{},{}", p.learner_id, p.test_id, p.bucket.label(), p.y, p.yhat, p.q_lo, p.q_hi)
            .map_err(io)?;
    }
    f.flush().map_err(io)
}
