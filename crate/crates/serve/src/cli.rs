//! `esq` command line: simulate, featurize, train, eval, explain, nudge,
//! trends and serve.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use esq_core::bkt;
use esq_core::bundle::ModelBundle;
use esq_core::features::{self, Dataset, FeatureContext, FeatureSpec};
use esq_core::forest::Metrics;
use esq_core::mastery::{self, ProjectionScheme};
use esq_core::pipeline::{self, Artifacts, EvalReport, PipelineConfig};
use esq_core::simulator::{self, Catalog, LearnerLog, SimConfig, TestKind};

use crate::api::{self, ApiConfig};
use crate::engine::{Constraints, Engine, FeaturesInput, InstanceRequest, NudgeBody};

#[derive(Debug, Parser)]
#[command(name = "esq", version, about = "Score prediction, explanation and nudges for learner test performance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population and write its event log.
    Simulate(SimulateArgs),
    /// Fit knowledge models and write train/holdout feature CSVs.
    Featurize(FeaturizeArgs),
    /// Train bucket forests from a featurized directory into a bundle.
    Train(TrainArgs),
    /// Score a featurized holdout with an existing bundle.
    Eval(EvalArgs),
    /// Per-instance force-plot JSON.
    Explain(ExplainArgs),
    /// Solve for feature changes that reach a desired score gain.
    Nudge(NudgeArgs),
    /// Test-on-test cohort trends for long-tenure learners.
    Trends(TrendsArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 5000)]
    pub students: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Event log (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Question catalog CSV; defaults to catalog.csv next to --out.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub concepts: Option<u32>,
    #[arg(long)]
    pub questions_per_concept: Option<u32>,
    #[arg(long)]
    pub min_tests: Option<u32>,
    #[arg(long)]
    pub max_tests: Option<u32>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    /// Learner ids to drop while reading the log.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 50)]
    pub projection_dim: usize,
    #[arg(long, value_parser = ["sign", "sparse"], default_value = "sign")]
    pub projection_scheme: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-learner BKT multipliers.
    #[arg(long)]
    pub individualized: bool,
}

#[derive(Debug, Args)]
pub struct ForestArgs {
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_bucket_train: Option<usize>,
    #[arg(long)]
    pub interval_tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `featurize`.
    #[arg(long)]
    pub data: PathBuf,
    /// Bundle path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub forest: ForestArgs,
    /// Holdout predictions CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Directory written by `featurize`; its holdout.csv is scored.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// JSON file with a feature array or a code-to-value object.
    #[arg(long, conflicts_with_all = ["events", "learner", "as_of"])]
    pub features: Option<PathBuf>,
    /// Event log used with --learner and --as-of.
    #[arg(long, requires_all = ["learner", "as_of"])]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub as_of: Option<i64>,
    #[arg(long, value_parser = ["mock", "practice", "sectional"])]
    pub test_kind: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
}

#[derive(Debug, Args)]
pub struct NudgeArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[arg(long, default_value_t = 10.0)]
    pub delta_y: f64,
    /// JSON constraints: mutable codes, bounds, step, max_step, max_rounds, tol.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrendsArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Reuse the bundle's BKT parameters instead of fitting on the log.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub min_tests: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Bundle path; the ESQ_BUNDLE environment variable takes precedence.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub addr: IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Allowed CORS origin; `*` for any, `none` to disable.
    #[arg(long, default_value = "*")]
    pub cors_origin: String,
    #[arg(long, default_value_t = 1 << 20)]
    pub max_body_bytes: usize,
    /// Event log enabling learner_id + as_of requests.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

type CliResult<T> = Result<T, String>;

fn err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

fn load_corpus(c: &CorpusArgs) -> CliResult<(Vec<LearnerLog>, Catalog)> {
    let excluded: HashSet<String> = c.exclude.iter().cloned().collect();
    let logs = simulator::ingest_log(&c.events, &excluded).map_err(err(&c.events.display().to_string()))?;
    let catalog = Catalog::read_csv(&c.catalog, None).map_err(err(&c.catalog.display().to_string()))?;
    Ok((logs, catalog))
}

fn load_bundle(path: &Path) -> CliResult<ModelBundle> {
    ModelBundle::load(path).map_err(err(&path.display().to_string()))
}

fn read_artifacts(dir: &Path) -> CliResult<Artifacts> {
    let path = dir.join("context.json");
    let text = std::fs::read_to_string(&path).map_err(err(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(err(&path.display().to_string()))
}

fn read_dataset(dir: &Path, spec: &FeatureSpec, cutoff: i64, holdout_only: bool) -> CliResult<Dataset> {
    let mut rows = Vec::new();
    if !holdout_only {
        rows.extend(features::Dataset::read_csv(&dir.join("train.csv"), spec, true).map_err(|e| e.to_string())?);
    }
    rows.extend(features::Dataset::read_csv(&dir.join("holdout.csv"), spec, false).map_err(|e| e.to_string())?);
    Ok(Dataset {
        spec: spec.clone(),
        cutoff,
        rows,
    })
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(format!("stdout: {e}")),
        _ => Ok(()),
    }
}

fn write_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    emit(&(serde_json::to_string_pretty(v).map_err(err("json"))? + "\n"))
}

fn fmt_metrics(out: &mut String, label: &str, n_train: Option<usize>, m: Option<&Metrics>) {
    let n_train = n_train.map_or("-".to_string(), |n| n.to_string());
    match m {
        Some(m) => {
            let rho = m.pearson_rho.map_or("undef".to_string(), |r| format!("{r:.3}"));
            let _ = writeln!(
                out,
                "{label:<12} {n_train:>8} {:>8} {:>8.2} {:>8.2} {:>8.2} {rho:>8}",
                m.n, m.medae, m.mae, m.rmse
            );
        }
        None => {
            let _ = writeln!(out, "{label:<12} {n_train:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", 0, "-", "-", "-", "-");
        }
    }
}

/// Plain-text metrics table.
pub fn metrics_block(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "model", "n_train", "n_test", "MedAE", "MAE", "RMSE", "rho");
    for b in &r.buckets {
        let label = format!("{}{}", b.bucket.label(), if b.has_model { "" } else { " (global)" });
        fmt_metrics(&mut out, &label, Some(b.n_train), b.routed.as_ref());
    }
    fmt_metrics(&mut out, "bucketed", Some(r.n_train), Some(&r.routed));
    fmt_metrics(&mut out, "global", Some(r.n_train), Some(&r.global));
    let _ = writeln!(
        out,
        "interval ({:.2}, {:.2}) coverage {:.3}",
        r.interval_tau,
        1.0 - r.interval_tau,
        r.coverage
    );
    for q in &r.routed.check_loss {
        let _ = writeln!(out, "check loss tau={:.2}: {:.4}", q.tau, q.mean_check_loss);
    }
    out
}

fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut config = SimConfig::default();
    if let Some(c) = a.concepts {
        config.n_concepts = c;
    }
    if let Some(q) = a.questions_per_concept {
        config.questions_per_concept = q;
    }
    let (lo, hi) = config.tests_per_learner;
    config.tests_per_learner = (a.min_tests.unwrap_or(lo), a.max_tests.unwrap_or(hi));
    let world = simulator::generate_world(&config, a.seed).map_err(err("simulate"))?;
    let population = simulator::generate_population(a.students, a.seed, &config).map_err(err("simulate"))?;
    let logs = simulator::generate_events(&world, &population, a.seed).map_err(err("simulate"))?;
    simulator::write_jsonl_file(&logs, &a.out).map_err(err(&a.out.display().to_string()))?;
    let catalog = a.catalog.clone().unwrap_or_else(|| a.out.with_file_name("catalog.csv"));
    world.catalog.write_csv(&catalog).map_err(err(&catalog.display().to_string()))?;
    let sessions: usize = logs.iter().map(|l| l.sessions.len()).sum();
    eprintln!(
        "wrote {} learners, {sessions} test sessions to {}; catalog {}",
        logs.len(),
        a.out.display(),
        catalog.display()
    );
    Ok(())
}

fn featurize(a: &FeaturizeArgs) -> CliResult<()> {
    let (logs, catalog) = load_corpus(&a.corpus)?;
    let config = PipelineConfig {
        train_fraction: a.train_fraction,
        projection_dim: a.projection_dim,
        projection_scheme: if a.projection_scheme == "sparse" {
            ProjectionScheme::Sparse
        } else {
            ProjectionScheme::Sign
        },
        projection_seed: a.seed,
        individualized: a.individualized,
        fm: mastery::FmConfig {
            seed: a.seed,
            ..Default::default()
        },
        ..PipelineConfig::default()
    };
    let (upstream, ctx, dataset) = pipeline::prepare(&logs, &catalog, &config).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&a.out).map_err(err(&a.out.display().to_string()))?;
    dataset.write_csv(&a.out.join("train.csv"), true).map_err(|e| e.to_string())?;
    dataset.write_csv(&a.out.join("holdout.csv"), false).map_err(|e| e.to_string())?;
    let artifacts = Artifacts::new(&ctx, dataset.cutoff, &config);
    let context = serde_json::to_string(&artifacts).map_err(err("context"))?;
    std::fs::write(a.out.join("context.json"), context).map_err(err("context.json"))?;
    bkt::write_diagnostics(&a.out.join("bkt_params.csv"), &upstream.fits).map_err(err("bkt_params.csv"))?;
    if let Some(fm) = &upstream.fm {
        mastery::write_mastery_csv(fm, &a.out.join("mastery.csv")).map_err(err("mastery.csv"))?;
    }
    let n_train = dataset.rows.iter().filter(|r| r.train).count();
    eprintln!(
        "{} rows ({n_train} train, {} holdout), {} features, written to {}",
        dataset.rows.len(),
        dataset.rows.len() - n_train,
        dataset.spec.len(),
        a.out.display()
    );
    Ok(())
}

fn apply_forest_args(config: &mut PipelineConfig, f: &ForestArgs) {
    if let Some(v) = f.trees {
        config.forest.n_trees = v;
    }
    if let Some(v) = f.max_depth {
        config.forest.max_depth = v;
    }
    if let Some(v) = f.min_leaf {
        config.forest.min_leaf = v;
    }
    if let Some(v) = f.seed {
        config.forest.seed = v;
    }
    if let Some(v) = f.min_bucket_train {
        config.min_bucket_train = v;
    }
    if let Some(v) = f.interval_tau {
        config.interval_tau = v;
    }
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let artifacts = read_artifacts(&a.data)?;
    let dataset = read_dataset(&a.data, &artifacts.spec, artifacts.cutoff, false)?;
    let mut config = artifacts.config.clone();
    apply_forest_args(&mut config, &a.forest);
    let (bundle, predictions) = pipeline::train_bundle(&artifacts, &dataset, &config).map_err(|e| e.to_string())?;
    bundle.save(&a.out).map_err(err(&a.out.display().to_string()))?;
    if let Some(p) = &a.predictions {
        pipeline::write_predictions_csv(p, &predictions, config.interval_tau).map_err(|e| e.to_string())?;
    }
    if let Some(r) = &bundle.meta.report {
        emit(&metrics_block(r))?;
    }
    eprintln!("bundle {} sha256 {}", a.out.display(), bundle.digest());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let bundle = load_bundle(&a.bundle)?;
    let cutoff = bundle.meta.report.as_ref().map_or(i64::MIN, |r| r.cutoff);
    let dataset = read_dataset(&a.data, &bundle.meta.spec, cutoff, true)?;
    let (report, predictions) = pipeline::evaluate(&bundle, &dataset).map_err(|e| e.to_string())?;
    if let Some(p) = &a.predictions {
        pipeline::write_predictions_csv(p, &predictions, bundle.meta.interval_tau).map_err(|e| e.to_string())?;
    }
    if a.json {
        write_json(&report)
    } else {
        emit(&metrics_block(&report))
    }
}

fn instance(a: &InstanceArgs) -> CliResult<(Engine, InstanceRequest)> {
    let bundle = load_bundle(&a.bundle)?;
    let mut engine = Engine::new(bundle).map_err(|e| e.to_string())?;
    let req = if let Some(path) = &a.features {
        let text = std::fs::read_to_string(path).map_err(err(&path.display().to_string()))?;
        let features: FeaturesInput = serde_json::from_str(&text).map_err(err(&path.display().to_string()))?;
        InstanceRequest {
            features: Some(features),
            ..Default::default()
        }
    } else if let Some(events) = &a.events {
        let logs = simulator::ingest_log(events, &HashSet::new()).map_err(err(&events.display().to_string()))?;
        engine = engine.with_logs(logs);
        InstanceRequest {
            features: None,
            learner_id: a.learner.clone(),
            as_of: a.as_of,
            test_kind: a.test_kind.as_deref().map(|k| match k {
                "practice" => TestKind::Practice,
                "sectional" => TestKind::Sectional,
                _ => TestKind::Mock,
            }),
        }
    } else {
        return Err("give --features or --events with --learner and --as-of".into());
    };
    Ok((engine, req))
}

fn explain(a: &ExplainArgs) -> CliResult<()> {
    let (engine, req) = instance(&a.instance)?;
    let x = engine.resolve(&req).map_err(|e| e.to_string())?;
    write_json(&engine.explain(&x).map_err(|e| e.to_string())?)
}

fn nudge(a: &NudgeArgs) -> CliResult<()> {
    let (engine, req) = instance(&a.instance)?;
    let x = engine.resolve(&req).map_err(|e| e.to_string())?;
    let constraints: Option<Constraints> = match &a.constraints {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(err(&p.display().to_string()))?;
            Some(serde_json::from_str(&text).map_err(err(&p.display().to_string()))?)
        }
        None => None,
    };
    let body = NudgeBody {
        features: FeaturesInput::Vector(x),
        delta_y: a.delta_y,
        constraints,
    };
    write_json(&engine.nudge(&body).map_err(|e| e.to_string())?)
}

fn trends(a: &TrendsArgs) -> CliResult<()> {
    let (logs, catalog) = load_corpus(&a.corpus)?;
    let ctx = match &a.bundle {
        Some(p) => {
            let mut ctx = load_bundle(p)?.context().map_err(|e| e.to_string())?;
            ctx.catalog = catalog;
            ctx
        }
        None => {
            let config = PipelineConfig {
                projection_dim: 0,
                ..PipelineConfig::default()
            };
            let upstream = pipeline::fit_upstream(&logs, &catalog, i64::MAX, &config).map_err(|e| e.to_string())?;
            FeatureContext {
                spec: FeatureSpec::standard(0),
                catalog,
                bkt: upstream.bkt,
                fm: None,
                projection: None,
                individualized: false,
            }
        }
    };
    let table = features::cohort_trends(&logs, &ctx, a.min_tests);
    if a.json {
        return write_json(&table);
    }
    if let Some(w) = &table.warning {
        eprintln!("warning: {w}");
    }
    let mut text = format!("{} qualifying learners\n", table.qualifying_learners);
    let _ = writeln!(text, "{:>5} {:>6} {:>8} {:>8} {:>8} {:>8}", "test", "n", "marks", "wasted", "unused", "overtime");
    for r in &table.rows {
        let _ = writeln!(
            text,
            "{:>5} {:>6} {:>8.2} {:>8.3} {:>8.3} {:>8.3}",
            r.test_index, r.n_learners, r.marks, r.wasted_attempt_ratio, r.unused_time_ratio, r.overtime_incorrect_ratio
        );
    }
    emit(&text)
}

/// `ESQ_BUNDLE`, when set and non-empty, wins over `--bundle`.
pub fn bundle_path(flag: Option<PathBuf>, env: Option<std::ffi::OsString>) -> Option<PathBuf> {
    env.filter(|v| !v.is_empty()).map(PathBuf::from).or(flag)
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let path = bundle_path(a.bundle.clone(), std::env::var_os("ESQ_BUNDLE"));
    let engine = match path {
        Some(p) => match ModelBundle::load(&p).map_err(|e| e.to_string()).and_then(|b| Engine::new(b).map_err(|e| e.to_string())) {
            Ok(e) => Some(e),
            Err(e) => {
                tracing::error!(bundle = %p.display(), error = %e, "bundle failed to load; model endpoints will answer 503");
                None
            }
        },
        None => {
            tracing::warn!("no bundle given; model endpoints will answer 503");
            None
        }
    };
    let engine = match (engine, &a.events) {
        (Some(e), Some(events)) => {
            let logs = simulator::ingest_log(events, &HashSet::new()).map_err(err(&events.display().to_string()))?;
            Some(e.with_logs(logs))
        }
        (e, _) => e,
    };
    let config = ApiConfig {
        addr: SocketAddr::new(a.addr, a.port),
        max_body_bytes: a.max_body_bytes,
        cors_origin: (a.cors_origin != "none").then(|| a.cors_origin.clone()),
    };
    let rt = tokio::runtime::Runtime::new().map_err(err("runtime"))?;
    rt.block_on(api::serve(Arc::new(engine), config)).map_err(err("serve"))
}

/// Run with explicit arguments; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Featurize(a) => featurize(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Nudge(a) => nudge(a),
        Command::Trends(a) => trends(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
