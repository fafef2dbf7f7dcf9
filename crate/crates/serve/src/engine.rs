//! Request handling shared by the HTTP API and the CLI: input decoding,
//! validation and the model calls behind each endpoint.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use esq_core::attribution::{self, Explainer, ForcePlot, GroupShares};
use esq_core::bundle::ModelBundle;
use esq_core::features::{self, Bucket, FeatureContext, Group, TargetTest};
use esq_core::forest::Forest;
use esq_core::nudge::{self, FeasibilitySpec, Feedback, NudgeRequest, NudgeStatus};
use esq_core::pipeline::EvalReport;
use esq_core::simulator::{LearnerLog, TestKind};

#[derive(Debug, Clone, PartialEq)]
pub enum EngineError {
    /// Malformed body, wrong shape or unknown feature code.
    BadRequest(String),
    /// Well-formed but out-of-range or otherwise unusable values.
    Unprocessable(String),
    Internal(String),
}

impl std::fmt::Display for EngineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EngineError::BadRequest(m) | EngineError::Unprocessable(m) | EngineError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for EngineError {}

type Result<T> = std::result::Result<T, EngineError>;

/// Feature vector given positionally or by registry code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeaturesInput {
    Vector(Vec<f64>),
    Named(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRequest {
    #[serde(default)]
    pub features: Option<FeaturesInput>,
    #[serde(default)]
    pub learner_id: Option<String>,
    #[serde(default)]
    pub as_of: Option<i64>,
    #[serde(default)]
    pub test_kind: Option<TestKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub features: FeaturesInput,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    /// Restrict the search to these mutable codes.
    #[serde(default)]
    pub mutable: Option<Vec<String>>,
    #[serde(default)]
    pub bounds: BTreeMap<String, [f64; 2]>,
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub max_step: Option<f64>,
    #[serde(default)]
    pub max_rounds: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NudgeBody {
    pub features: FeaturesInput,
    pub delta_y: f64,
    #[serde(default)]
    pub constraints: Option<Constraints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub yhat: f64,
    pub q05: f64,
    pub q95: f64,
    pub bucket: Bucket,
    /// True when the bucket had no model and the global forest answered.
    pub fallback_global: bool,
    pub interval_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub base: f64,
    pub prediction: f64,
    pub items: Vec<attribution::ForceItem>,
    pub bucket: Bucket,
    pub group_shares: GroupShares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    #[serde(flatten)]
    pub prediction: PredictResponse,
    pub attribution: ForcePlot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeOut {
    pub code: String,
    pub name: String,
    pub group: Group,
    pub from: f64,
    pub to: f64,
    pub delta: f64,
    pub marginal_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NudgeResponse {
    pub status: NudgeStatus,
    pub delta_y: f64,
    pub yhat_before: f64,
    pub yhat_after: f64,
    pub target: f64,
    pub bucket: Bucket,
    pub changes: Vec<ChangeOut>,
    pub feedback: Vec<Feedback>,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub code: String,
    pub name: String,
    pub group: Group,
    pub mutable: bool,
    pub direction: features::Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketInfo {
    pub bucket: Bucket,
    pub has_model: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub format_version: u32,
    pub digest: String,
    pub config_digest: String,
    pub n_features: usize,
    pub interval_tau: f64,
    pub buckets: Vec<BucketInfo>,
    pub features: Vec<FeatureInfo>,
    pub metrics: Option<EvalReport>,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EngineError::Internal(format!("{name} is not finite")))
    }
}

pub struct Engine {
    bundle: ModelBundle,
    ctx: FeatureContext,
    digest: String,
    logs: HashMap<String, LearnerLog>,
}

impl Engine {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        let ctx = bundle.context().map_err(|e| EngineError::Internal(e.to_string()))?;
        if bundle.global().is_none() {
            return Err(EngineError::Internal("bundle has no global forest".into()));
        }
        let digest = bundle.digest();
        Ok(Self {
            bundle,
            ctx,
            digest,
            logs: HashMap::new(),
        })
    }

    /// Event history used to featurize `learner_id` + `as_of` requests.
    pub fn with_logs(mut self, logs: Vec<LearnerLog>) -> Self {
        self.logs = logs.into_iter().map(|l| (l.learner_id.to_string(), l)).collect();
        self
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn n_features(&self) -> usize {
        self.ctx.spec.len()
    }

    pub fn info(&self) -> ModelInfo {
        let spec = &self.bundle.meta.spec;
        ModelInfo {
            format_version: self.bundle.meta.format_version,
            digest: self.digest.clone(),
            config_digest: self.bundle.meta.config_digest.clone(),
            n_features: spec.len(),
            interval_tau: self.bundle.meta.interval_tau,
            buckets: Bucket::ALL
                .iter()
                .map(|&b| BucketInfo {
                    bucket: b,
                    has_model: self.bundle.bucket_forest(b).is_some(),
                })
                .collect(),
            features: spec
                .features
                .iter()
                .map(|f| FeatureInfo {
                    code: f.code.clone(),
                    name: f.name.clone(),
                    group: f.group,
                    mutable: f.mutable,
                    direction: f.direction,
                })
                .collect(),
            metrics: self.bundle.meta.report.clone(),
        }
    }

    fn code_index(&self, code: &str) -> Result<usize> {
        self.ctx
            .spec
            .index_of(code)
            .ok_or_else(|| EngineError::BadRequest(format!("unknown feature code {code}")))
    }

    fn check_unit(code: &str, v: f64) -> Result<()> {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(EngineError::Unprocessable(format!("{code} = {v} is outside [0, 1]")))
        }
    }

    pub fn decode_features(&self, input: &FeaturesInput) -> Result<Vec<f64>> {
        let spec = &self.ctx.spec;
        let x = match input {
            FeaturesInput::Vector(v) => {
                if v.len() != spec.len() {
                    return Err(EngineError::BadRequest(format!(
                        "features has {} values, the registry has {}",
                        v.len(),
                        spec.len()
                    )));
                }
                v.clone()
            }
            FeaturesInput::Named(m) => {
                let mut x = vec![f64::NAN; spec.len()];
                for (code, &v) in m {
                    x[self.code_index(code)?] = v;
                }
                if let Some(i) = x.iter().position(|v| v.is_nan()) {
                    return Err(EngineError::BadRequest(format!("missing feature {}", spec.features[i].code)));
                }
                x
            }
        };
        for (f, &v) in spec.features.iter().zip(&x) {
            Self::check_unit(&f.code, v)?;
        }
        Ok(x)
    }

    /// Feature vector from an explicit vector or from the event history.
    pub fn resolve(&self, req: &InstanceRequest) -> Result<Vec<f64>> {
        match (&req.features, &req.learner_id, req.as_of) {
            (Some(f), None, None) => self.decode_features(f),
            (None, Some(learner), Some(as_of)) => {
                let log = self
                    .logs
                    .get(learner)
                    .ok_or_else(|| EngineError::Unprocessable(format!("no event history for learner {learner}")))?;
                let target = TargetTest {
                    test_id: "next".into(),
                    kind: req.test_kind.unwrap_or(TestKind::Mock),
                    start_ts: as_of,
                };
                features::featurize(&self.ctx, log, &target, as_of)
                    .map(|v| v.values)
                    .map_err(|e| EngineError::Unprocessable(e.to_string()))
            }
            _ => Err(EngineError::BadRequest(
                "give either features or both learner_id and as_of".into(),
            )),
        }
    }

    fn route(&self, x: &[f64]) -> (&Forest, Bucket, bool) {
        let bucket = features::bucket_for_vector(x);
        let (f, fallback) = self.bundle.route(bucket).expect("global forest checked at load");
        (f, bucket, fallback)
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictResponse> {
        let (forest, bucket, fallback_global) = self.route(x);
        let tau = self.bundle.meta.interval_tau;
        let internal = |e: esq_core::forest::ForestError| EngineError::Internal(e.to_string());
        let yhat = forest.predict_mean(x).map_err(internal)?;
        let (lo, hi) = forest.predict_interval(x, tau).map_err(internal)?;
        Ok(PredictResponse {
            yhat: finite("yhat", yhat)?,
            q05: finite("q05", lo)?,
            q95: finite("q95", hi)?,
            bucket,
            fallback_global,
            interval_tau: tau,
        })
    }

    fn force_plot(&self, x: &[f64]) -> Result<(ForcePlot, Bucket, Vec<f64>)> {
        let (forest, bucket, _) = self.route(x);
        let background = self.bundle.background(bucket);
        let ex = Explainer::new(forest, &background).map_err(|e| EngineError::Internal(e.to_string()))?;
        let a = ex.shap(x).map_err(|e| EngineError::Internal(e.to_string()))?;
        finite("base", a.base_value)?;
        finite("prediction", a.prediction)?;
        for v in &a.phi {
            finite("phi", *v)?;
        }
        let plot = attribution::force_plot_export(&a, x, &self.ctx.spec);
        Ok((plot, bucket, a.phi))
    }

    pub fn explain(&self, x: &[f64]) -> Result<ExplainResponse> {
        let (plot, bucket, phi) = self.force_plot(x)?;
        Ok(ExplainResponse {
            base: plot.base,
            prediction: plot.prediction,
            items: plot.items,
            bucket,
            group_shares: attribution::group_contributions(&[phi], &self.ctx.spec),
        })
    }

    pub fn whatif(&self, req: &WhatIfRequest) -> Result<WhatIfResponse> {
        let x = self.decode_features(&req.features)?;
        let mut overrides = Vec::with_capacity(req.overrides.len());
        for (code, &v) in &req.overrides {
            let i = self.code_index(code)?;
            Self::check_unit(code, v)?;
            overrides.push((i, v));
        }
        let x_new = nudge::apply_overrides(&x, &overrides).map_err(|e| EngineError::Unprocessable(e.to_string()))?;
        Ok(WhatIfResponse {
            prediction: self.predict(&x_new)?,
            attribution: self.force_plot(&x_new)?.0,
        })
    }

    pub fn feasibility(&self, constraints: Option<&Constraints>) -> Result<(FeasibilitySpec, f64)> {
        let mut f = FeasibilitySpec::from_spec(&self.ctx.spec);
        let mut tol = nudge::DEFAULT_TOL;
        let Some(c) = constraints else {
            return Ok((f, tol));
        };
        if let Some(codes) = &c.mutable {
            let allowed = codes.iter().map(|c| self.code_index(c)).collect::<Result<Vec<_>>>()?;
            if let Some(&i) = allowed.iter().find(|&&i| !f.mutable[i]) {
                return Err(EngineError::Unprocessable(format!(
                    "{} is not an actionable feature",
                    self.ctx.spec.features[i].code
                )));
            }
            f.restrict_to(&allowed);
        }
        for (code, [lo, hi]) in &c.bounds {
            let i = self.code_index(code)?;
            if !(0.0 <= *lo && lo <= hi && *hi <= 1.0) {
                return Err(EngineError::Unprocessable(format!("bounds for {code} must satisfy 0 <= lo <= hi <= 1")));
            }
            f.lower[i] = *lo;
            f.upper[i] = *hi;
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(v)
            } else {
                Err(EngineError::Unprocessable(format!("{name} must be in (0, 1]")))
            }
        };
        if let Some(s) = c.step {
            f.step = positive("step", s)?;
        }
        if let Some(s) = c.max_step {
            f.max_step = positive("max_step", s)?;
        }
        if let Some(r) = c.max_rounds {
            f.max_rounds = r;
        }
        if let Some(t) = c.tol {
            if !(t >= 0.0) {
                return Err(EngineError::Unprocessable("tol must be non-negative".into()));
            }
            tol = t;
        }
        Ok((f, tol))
    }

    pub fn nudge(&self, body: &NudgeBody) -> Result<NudgeResponse> {
        let x = self.decode_features(&body.features)?;
        if !body.delta_y.is_finite() {
            return Err(EngineError::Unprocessable("delta_y must be finite".into()));
        }
        let (feasibility, tol) = self.feasibility(body.constraints.as_ref())?;
        let (forest, bucket, _) = self.route(&x);
        let request = NudgeRequest {
            x,
            delta_y: body.delta_y,
            tol,
        };
        let result = nudge::solve_nudge(forest, &request, &feasibility)
            .map_err(|e| EngineError::Unprocessable(e.to_string()))?;
        let spec = &self.ctx.spec;
        Ok(NudgeResponse {
            status: result.status,
            delta_y: body.delta_y,
            yhat_before: finite("yhat_before", result.predicted_before)?,
            yhat_after: finite("yhat_after", result.predicted_after)?,
            target: result.target,
            bucket,
            changes: result
                .changes
                .iter()
                .map(|c| ChangeOut {
                    code: spec.features[c.index].code.clone(),
                    name: spec.features[c.index].name.clone(),
                    group: spec.features[c.index].group,
                    from: c.from,
                    to: c.to,
                    delta: c.delta,
                    marginal_gain: c.marginal_gain,
                })
                .collect(),
            feedback: nudge::render_feedback(&result, spec),
            rounds: result.rounds,
        })
    }
}
