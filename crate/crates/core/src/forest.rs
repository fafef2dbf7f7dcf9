//! Bagged CART regression forest that keeps every training response in its
//! leaves, so one fitted forest answers both mean and conditional-quantile
//! queries.
//!
//! Split search runs on per-feature histograms. Candidate thresholds are the
//! midpoints between consecutive distinct training values; features with more
//! than `max_bins` distinct values use quantile-spaced midpoints.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyRows,
    #[error("feature vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("response count {0} does not match row count {1}")]
    ResponseMismatch(usize, usize),
    #[error("quantile level {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error("interval level {0} outside (0, 0.5)")]
    BadInterval(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no rows to evaluate")]
    EmptyHoldout,
    #[error("corrupt forest encoding: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: f64,
    pub seed: u64,
    pub quantiles: Vec<f64>,
    pub max_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_trees: 500,
            max_depth: 5,
            min_leaf: 5,
            features_per_split: 1.0 / 3.0,
            seed: 0,
            quantiles: vec![0.05, 0.5, 0.95],
            max_bins: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidConfig("n_trees must be ≥ 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(ForestError::InvalidConfig("min_leaf must be ≥ 1".into()));
        }
        if !(self.features_per_split > 0.0 && self.features_per_split <= 1.0) {
            return Err(ForestError::InvalidConfig("features_per_split must be in (0, 1]".into()));
        }
        if self.max_bins < 2 {
            return Err(ForestError::InvalidConfig("max_bins must be ≥ 2".into()));
        }
        for &q in &self.quantiles {
            if !(q > 0.0 && q < 1.0) {
                return Err(ForestError::BadQuantile(q));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        /// Bootstrap rows that reached this node.
        n_train: u32,
    },
    Leaf {
        mean: f64,
        responses: Vec<f64>,
    },
}

impl Node {
    pub fn n_train(&self) -> usize {
        match self {
            Node::Split { n_train, .. } => *n_train as usize,
            Node::Leaf { responses, .. } => responses.len(),
        }
    }
}

/// Binary tree stored as a node array with the root at index 0.
/// Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn leaf(&self, x: &[f64]) -> (&[f64], f64) {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { mean, responses } => (responses, *mean),
            Node::Split { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaf(x).1
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => {
                    1 + walk(t, *left as usize).max(walk(t, *right as usize))
                }
                Node::Leaf { .. } => 0,
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_features: usize,
    pub bucket: Option<u8>,
    pub tree_seeds: Vec<u64>,
    pub trees: Vec<Tree>,
}

/// Histogram bin edges for one feature.
struct Binning {
    cuts: Vec<f64>,
}

impl Binning {
    fn fit(values: &mut [f64], max_bins: usize) -> Self {
        values.sort_by(f64::total_cmp);
        let mut distinct: Vec<f64> = Vec::new();
        for &v in values.iter() {
            if distinct.last() != Some(&v) {
                distinct.push(v);
            }
        }
        let mids: Vec<f64> = distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
        let cuts = if mids.len() < max_bins {
            mids
        } else {
            let mut picked: Vec<f64> = (1..max_bins)
                .map(|k| mids[k * mids.len() / max_bins])
                .collect();
            picked.dedup();
            picked
        };
        Self { cuts }
    }

    fn bin(&self, x: f64) -> u16 {
        self.cuts.partition_point(|&t| t < x) as u16
    }
}

struct Binned {
    n_features: usize,
    bins: Vec<u16>,
    binnings: Vec<Binning>,
}

impl Binned {
    fn new(x: &[Vec<f64>], max_bins: usize) -> Self {
        let p = x[0].len();
        let binnings: Vec<Binning> = (0..p)
            .map(|f| {
                let mut col: Vec<f64> = x.iter().map(|r| r[f]).collect();
                Binning::fit(&mut col, max_bins)
            })
            .collect();
        let mut bins = Vec::with_capacity(x.len() * p);
        for row in x {
            for (f, b) in binnings.iter().enumerate() {
                bins.push(b.bin(row[f]));
            }
        }
        Self {
            n_features: p,
            bins,
            binnings,
        }
    }

    fn get(&self, row: usize, f: usize) -> usize {
        self.bins[row * self.n_features + f] as usize
    }
}

struct Builder<'a> {
    data: &'a Binned,
    y: &'a [f64],
    config: &'a TrainConfig,
    mtry: usize,
    nodes: Vec<Node>,
    hist_count: Vec<u32>,
    hist_sum: Vec<f64>,
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> u32 {
        let responses: Vec<f64> = rows.iter().map(|&r| self.y[r]).collect();
        let mean = responses.iter().sum::<f64>() / responses.len().max(1) as f64;
        self.nodes.push(Node::Leaf { mean, responses });
        (self.nodes.len() - 1) as u32
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize, rng: &mut rand_chacha::ChaCha8Rng) -> u32 {
        let n = rows.len();
        let constant = rows.iter().all(|&r| self.y[r] == self.y[rows[0]]);
        if depth >= self.config.max_depth || n < 2 * self.config.min_leaf || constant {
            return self.leaf(&rows);
        }
        let mut features = index::sample(rng, self.data.n_features, self.mtry).into_vec();
        features.sort_unstable();

        let total_sum: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let parent_score = total_sum * total_sum / n as f64;
        let mut best: Option<(f64, usize, usize)> = None; // (gain, feature, cut index)
        for &f in &features {
            let n_cuts = self.data.binnings[f].cuts.len();
            if n_cuts == 0 {
                continue;
            }
            let n_bins = n_cuts + 1;
            self.hist_count[..n_bins].iter_mut().for_each(|c| *c = 0);
            self.hist_sum[..n_bins].iter_mut().for_each(|s| *s = 0.0);
            for &r in &rows {
                let b = self.data.get(r, f);
                self.hist_count[b] += 1;
                self.hist_sum[b] += self.y[r];
            }
            let mut nl = 0usize;
            let mut sl = 0.0;
            for cut in 0..n_cuts {
                nl += self.hist_count[cut] as usize;
                sl += self.hist_sum[cut];
                let nr = n - nl;
                if nl < self.config.min_leaf {
                    continue;
                }
                if nr < self.config.min_leaf {
                    break;
                }
                let sr = total_sum - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent_score;
                if gain > best.map_or(1e-9, |b| b.0) {
                    best = Some((gain, f, cut));
                }
            }
        }
        let Some((_, feature, cut)) = best else {
            return self.leaf(&rows);
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.data.get(r, feature) <= cut);
        let threshold = self.data.binnings[feature].cuts[cut];
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            mean: 0.0,
            responses: Vec::new(),
        });
        let left = self.build(left_rows, depth + 1, rng);
        let right = self.build(right_rows, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: feature as u32,
            threshold,
            left,
            right,
            n_train: n as u32,
        };
        id as u32
    }
}

/// Fit a forest on `x` rows and `y` responses.
pub fn train(
    x: &[Vec<f64>],
    y: &[f64],
    config: &TrainConfig,
    bucket: Option<u8>,
) -> Result<Forest, ForestError> {
    config.validate()?;
    if x.is_empty() {
        return Err(ForestError::EmptyRows);
    }
    if x.len() != y.len() {
        return Err(ForestError::ResponseMismatch(y.len(), x.len()));
    }
    let p = x[0].len();
    if let Some(bad) = x.iter().find(|r| r.len() != p) {
        return Err(ForestError::DimensionMismatch {
            expected: p,
            got: bad.len(),
        });
    }
    let data = Binned::new(x, config.max_bins);
    let mtry = ((p as f64 * config.features_per_split).floor() as usize).clamp(1, p.max(1));
    let max_bins = data.binnings.iter().map(|b| b.cuts.len() + 1).max().unwrap_or(1);
    let label = match bucket {
        Some(b) => format!("bucket{b}"),
        None => "global".to_string(),
    };
    let n = x.len();
    let mut tree_seeds = Vec::with_capacity(config.n_trees);
    let mut trees = Vec::with_capacity(config.n_trees);
    for t in 0..config.n_trees {
        let tree_seed: u64 = rng::indexed(config.seed, &format!("forest/{label}"), t as u64).random();
        let mut r = rng::indexed(tree_seed, "tree", 0);
        let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let mut builder = Builder {
            data: &data,
            y,
            config,
            mtry,
            nodes: Vec::new(),
            hist_count: vec![0; max_bins],
            hist_sum: vec![0.0; max_bins],
        };
        builder.build(rows, 0, &mut r);
        tree_seeds.push(tree_seed);
        trees.push(Tree { nodes: builder.nodes });
    }
    Ok(Forest {
        n_features: p,
        bucket,
        tree_seeds,
        trees,
    })
}

impl Forest {
    fn check(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Mean over trees of leaf means, clamped to `[0, 100]`.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64, ForestError> {
        Ok(self.raw_mean(x)?.clamp(0.0, 100.0))
    }

    /// Unclamped tree average, the quantity Shapley values decompose.
    pub fn raw_mean(&self, x: &[f64]) -> Result<f64, ForestError> {
        self.check(x)?;
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Training responses co-located with `x`, weighted by
    /// `1 / (n_trees * leaf_size)`.
    pub fn weighted_responses(&self, x: &[f64]) -> Result<Vec<(f64, f64)>, ForestError> {
        self.check(x)?;
        let t = self.trees.len() as f64;
        let mut out = Vec::new();
        for tree in &self.trees {
            let (responses, _) = tree.leaf(x);
            let w = 1.0 / (t * responses.len() as f64);
            out.extend(responses.iter().map(|&y| (y, w)));
        }
        Ok(out)
    }

    pub fn predict_quantile(&self, x: &[f64], tau: f64) -> Result<f64, ForestError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(ForestError::BadQuantile(tau));
        }
        let mut pairs = self.weighted_responses(x)?;
        Ok(weighted_quantile(&mut pairs, tau))
    }

    pub fn predict_quantiles(&self, x: &[f64], taus: &[f64]) -> Result<Vec<f64>, ForestError> {
        if let Some(&bad) = taus.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
            return Err(ForestError::BadQuantile(bad));
        }
        let mut pairs = self.weighted_responses(x)?;
        sort_pairs(&mut pairs);
        Ok(taus.iter().map(|&t| quantile_sorted(&pairs, t)).collect())
    }

    /// `(Q_tau, Q_{1-tau})`.
    pub fn predict_interval(&self, x: &[f64], tau: f64) -> Result<(f64, f64), ForestError> {
        if !(tau > 0.0 && tau < 0.5) {
            return Err(ForestError::BadInterval(tau));
        }
        let q = self.predict_quantiles(x, &[tau, 1.0 - tau])?;
        Ok((q[0], q[1]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.n_features as u32).to_le_bytes());
        out.push(self.bucket.map_or(0, |_| 1));
        out.push(self.bucket.unwrap_or(0));
        out.extend((self.trees.len() as u32).to_le_bytes());
        for (tree, seed) in self.trees.iter().zip(&self.tree_seeds) {
            out.extend(seed.to_le_bytes());
            out.extend((tree.nodes.len() as u32).to_le_bytes());
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        n_train,
                    } => {
                        out.push(0);
                        out.extend(feature.to_le_bytes());
                        out.extend(threshold.to_bits().to_le_bytes());
                        out.extend(left.to_le_bytes());
                        out.extend(right.to_le_bytes());
                        out.extend(n_train.to_le_bytes());
                    }
                    Node::Leaf { mean, responses } => {
                        out.push(1);
                        out.extend(mean.to_bits().to_le_bytes());
                        out.extend((responses.len() as u32).to_le_bytes());
                        for y in responses {
                            out.extend(y.to_bits().to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ForestError> {
        let mut r = Reader { bytes, pos: 0 };
        let n_features = r.u32()? as usize;
        let has_bucket = r.u8()?;
        let bucket_value = r.u8()?;
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        let mut tree_seeds = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            tree_seeds.push(r.u64()?);
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
            for _ in 0..n_nodes {
                let node = match r.u8()? {
                    0 => Node::Split {
                        feature: r.u32()?,
                        threshold: f64::from_bits(r.u64()?),
                        left: r.u32()?,
                        right: r.u32()?,
                        n_train: r.u32()?,
                    },
                    1 => {
                        let mean = f64::from_bits(r.u64()?);
                        let n = r.u32()? as usize;
                        let mut responses = Vec::with_capacity(n.min(1 << 20));
                        for _ in 0..n {
                            responses.push(f64::from_bits(r.u64()?));
                        }
                        Node::Leaf { mean, responses }
                    }
                    tag => return Err(ForestError::Decode(format!("unknown node tag {tag}"))),
                };
                nodes.push(node);
            }
            for node in &nodes {
                if let Node::Split { feature, left, right, .. } = node {
                    if *feature as usize >= n_features
                        || *left as usize >= n_nodes
                        || *right as usize >= n_nodes
                    {
                        return Err(ForestError::Decode("node reference out of range".into()));
                    }
                }
            }
            if nodes.is_empty() {
                return Err(ForestError::Decode("empty tree".into()));
            }
            trees.push(Tree { nodes });
        }
        if r.pos != bytes.len() {
            return Err(ForestError::Decode("trailing bytes".into()));
        }
        Ok(Forest {
            n_features,
            bucket: (has_bucket == 1).then_some(bucket_value),
            tree_seeds,
            trees,
        })
    }

    /// SHA-256 of the canonical encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ForestError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ForestError::Decode("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ForestError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ForestError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ForestError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn sort_pairs(pairs: &mut [(f64, f64)]) {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
}

/// Relative slack on cumulative weight comparisons, so that e.g. ten weights
/// of 0.1 reach 0.9 after nine steps.
const CDF_EPS: f64 = 1e-12;

/// Left-continuous inverse of the weighted empirical CDF:
/// `inf { y : sum_{y_i <= y} w_i >= tau * W }`.
pub fn weighted_quantile(pairs: &mut [(f64, f64)], tau: f64) -> f64 {
    sort_pairs(pairs);
    quantile_sorted(pairs, tau)
}

fn quantile_sorted(pairs: &[(f64, f64)], tau: f64) -> f64 {
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let target = tau * total - CDF_EPS * total;
    let mut cum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let y = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == y {
            cum += pairs[i].1;
            i += 1;
        }
        if cum >= target {
            return y;
        }
    }
    pairs.last().map_or(f64::NAN, |p| p.0)
}

/// Pinball loss `(tau - 1{e < 0}) * e`.
pub fn check_loss(e: f64, tau: f64) -> f64 {
    (tau - if e < 0.0 { 1.0 } else { 0.0 }) * e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileLoss {
    pub tau: f64,
    pub mean_check_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    pub medae: f64,
    /// `None` when either side has zero variance.
    pub pearson_rho: Option<f64>,
    pub rho_undefined: bool,
    pub check_loss: Vec<QuantileLoss>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 || a.len() != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

impl Metrics {
    /// `quantile_preds` pairs each τ with per-row predicted quantiles.
    pub fn compute(
        y: &[f64],
        yhat: &[f64],
        quantile_preds: &[(f64, Vec<f64>)],
    ) -> Result<Self, ForestError> {
        if y.is_empty() {
            return Err(ForestError::EmptyHoldout);
        }
        if y.len() != yhat.len() {
            return Err(ForestError::ResponseMismatch(yhat.len(), y.len()));
        }
        let n = y.len() as f64;
        let mut abs: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).collect();
        let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let mae = abs.iter().sum::<f64>() / n;
        let rho = pearson(yhat, y);
        let check_loss = quantile_preds
            .iter()
            .map(|(tau, q)| QuantileLoss {
                tau: *tau,
                mean_check_loss: y.iter().zip(q).map(|(a, b)| check_loss(a - b, *tau)).sum::<f64>() / n,
            })
            .collect();
        Ok(Self {
            n: y.len(),
            rmse: mse.sqrt(),
            mae,
            medae: median(&mut abs),
            pearson_rho: rho,
            rho_undefined: rho.is_none(),
            check_loss,
        })
    }
}
