//! Exact Shapley attributions for forest predictions.
//!
//! A missing feature is marginalized by sending the row down both children
//! of a split, weighted by the fraction of background rows that went each
//! way. A node no background row reached falls back to bootstrap counts.
//! The forest value function is the mean over trees, so the Shapley values
//! are the mean of the per-tree values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureSpec, Group};
use crate::forest::{Forest, Node, Tree};

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("brute force needs p <= {max}, got {p}")]
    TooManyFeatures { p: usize, max: usize },
    #[error("forest has no trees")]
    EmptyForest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub prediction: f64,
}

impl Attribution {
    /// `base + sum(phi) - prediction`; zero up to rounding.
    pub fn efficiency_gap(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>() - self.prediction
    }
}

pub const BRUTE_MAX_FEATURES: usize = 15;

/// Forest plus per-node left-branch fractions.
#[derive(Debug, Clone)]
pub struct Explainer<'a> {
    forest: &'a Forest,
    left_frac: Vec<Vec<f64>>,
}

fn leaf_value(node: &Node) -> f64 {
    match node {
        Node::Leaf { mean, .. } => *mean,
        Node::Split { .. } => unreachable!(),
    }
}

impl<'a> Explainer<'a> {
    /// With an empty background every split uses bootstrap counts.
    pub fn new(forest: &'a Forest, background: &[Vec<f64>]) -> Result<Self, AttributionError> {
        if forest.trees.is_empty() {
            return Err(AttributionError::EmptyForest);
        }
        for row in background {
            if row.len() != forest.n_features {
                return Err(AttributionError::DimensionMismatch {
                    expected: forest.n_features,
                    got: row.len(),
                });
            }
        }
        let left_frac = forest
            .trees
            .iter()
            .map(|t| tree_fractions(t, background))
            .collect();
        Ok(Self { forest, left_frac })
    }

    fn check(&self, x: &[f64]) -> Result<(), AttributionError> {
        if x.len() != self.forest.n_features {
            return Err(AttributionError::DimensionMismatch {
                expected: self.forest.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Value of the empty coalition.
    pub fn expected_value(&self) -> f64 {
        let n = self.forest.trees.len() as f64;
        self.forest
            .trees
            .iter()
            .zip(&self.left_frac)
            .map(|(t, lf)| cond_expectation(t, lf, &[], &[], 0))
            .sum::<f64>()
            / n
    }

    /// Polynomial-time path-dependent TreeSHAP.
    pub fn shap(&self, x: &[f64]) -> Result<Attribution, AttributionError> {
        self.check(x)?;
        let p = self.forest.n_features;
        let n = self.forest.trees.len() as f64;
        let mut phi = vec![0.0; p];
        let mut tree_phi = vec![0.0; p];
        for (tree, lf) in self.forest.trees.iter().zip(&self.left_frac) {
            tree_phi.iter_mut().for_each(|v| *v = 0.0);
            recurse(tree, lf, x, 0, &[], 1.0, 1.0, None, &mut tree_phi);
            for (a, b) in phi.iter_mut().zip(&tree_phi) {
                *a += b;
            }
        }
        phi.iter_mut().for_each(|v| *v /= n);
        Ok(Attribution {
            base_value: self.expected_value(),
            phi,
            prediction: self.forest.raw_mean(x).expect("dimension checked"),
        })
    }

    /// Coalition value: features in `known` take their values from `x`.
    pub fn value(&self, x: &[f64], known: &[bool]) -> f64 {
        let n = self.forest.trees.len() as f64;
        self.forest
            .trees
            .iter()
            .zip(&self.left_frac)
            .map(|(t, lf)| cond_expectation(t, lf, x, known, 0))
            .sum::<f64>()
            / n
    }

    /// Shapley values by enumerating every coalition. Exponential in `p`.
    pub fn shap_brute(&self, x: &[f64]) -> Result<Attribution, AttributionError> {
        self.check(x)?;
        let p = self.forest.n_features;
        if p > BRUTE_MAX_FEATURES {
            return Err(AttributionError::TooManyFeatures {
                p,
                max: BRUTE_MAX_FEATURES,
            });
        }
        let values: Vec<f64> = (0..1usize << p)
            .map(|mask| {
                let known: Vec<bool> = (0..p).map(|i| mask >> i & 1 == 1).collect();
                self.value(x, &known)
            })
            .collect();
        // weight(|S|) = |S|! (p - |S| - 1)! / p!
        let fact: Vec<f64> = (0..=p).scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
        let mut phi = vec![0.0; p];
        for (i, phi_i) in phi.iter_mut().enumerate() {
            for mask in 0..1usize << p {
                if mask >> i & 1 == 1 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = fact[s] * fact[p - s - 1] / fact[p];
                *phi_i += w * (values[mask | 1 << i] - values[mask]);
            }
        }
        Ok(Attribution {
            base_value: values[0],
            phi,
            prediction: values[(1 << p) - 1],
        })
    }
}

fn tree_fractions(tree: &Tree, background: &[Vec<f64>]) -> Vec<f64> {
    let mut cover = vec![0usize; tree.nodes.len()];
    for row in background {
        let mut i = 0;
        loop {
            cover[i] += 1;
            match &tree.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    }
                }
                Node::Leaf { .. } => break,
            }
        }
    }
    tree.nodes
        .iter()
        .enumerate()
        .map(|(i, node)| match node {
            Node::Split { left, n_train, .. } => {
                if cover[i] > 0 {
                    cover[*left as usize] as f64 / cover[i] as f64
                } else if *n_train > 0 {
                    tree.nodes[*left as usize].n_train() as f64 / *n_train as f64
                } else {
                    0.5
                }
            }
            Node::Leaf { .. } => f64::NAN,
        })
        .collect()
}

fn cond_expectation(tree: &Tree, lf: &[f64], x: &[f64], known: &[bool], i: usize) -> f64 {
    match &tree.nodes[i] {
        Node::Leaf { mean, .. } => *mean,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => {
            let f = *feature as usize;
            if known.get(f).copied().unwrap_or(false) {
                let next = if x[f] <= *threshold { left } else { right };
                cond_expectation(tree, lf, x, known, *next as usize)
            } else {
                let w = lf[i];
                let mut v = 0.0;
                if w > 0.0 {
                    v += w * cond_expectation(tree, lf, x, known, *left as usize);
                }
                if w < 1.0 {
                    v += (1.0 - w) * cond_expectation(tree, lf, x, known, *right as usize);
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let d = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if d == 0 { 1.0 } else { 0.0 },
    });
    let dp1 = (d + 1) as f64;
    for i in (0..d).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / dp1;
        path[i].weight = zero * path[i].weight * (d - i) as f64 / dp1;
    }
}

fn unwind(path: &mut Vec<PathElem>, k: usize) {
    let d = path.len() - 1;
    let (zero, one) = (path[k].zero, path[k].one);
    let dp1 = (d + 1) as f64;
    let mut next = path[d].weight;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * dp1 / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (d - i) as f64 / dp1;
        } else {
            path[i].weight = path[i].weight * dp1 / (zero * (d - i) as f64);
        }
    }
    for i in k..d {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], k: usize) -> f64 {
    let d = path.len() - 1;
    let (zero, one) = (path[k].zero, path[k].one);
    let dp1 = (d + 1) as f64;
    let mut next = path[d].weight;
    let mut total = 0.0;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = next * dp1 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i) as f64 / dp1;
        } else if zero != 0.0 {
            total += path[i].weight / zero / ((d - i) as f64 / dp1);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    lf: &[f64],
    x: &[f64],
    node: usize,
    parent: &[PathElem],
    zero: f64,
    one: f64,
    feature: Option<usize>,
    phi: &mut [f64],
) {
    let mut path = parent.to_vec();
    extend(&mut path, zero, one, feature);
    match &tree.nodes[node] {
        Node::Leaf { .. } => {
            let v = leaf_value(&tree.nodes[node]);
            for k in 1..path.len() {
                let w = unwound_sum(&path, k);
                let e = path[k];
                phi[e.feature.expect("only the root lacks a feature")] += w * (e.one - e.zero) * v;
            }
        }
        Node::Split {
            feature: f,
            threshold,
            left,
            right,
            ..
        } => {
            let f = *f as usize;
            let w_left = lf[node];
            let (hot, cold, hot_frac, cold_frac) = if x[f] <= *threshold {
                (*left as usize, *right as usize, w_left, 1.0 - w_left)
            } else {
                (*right as usize, *left as usize, 1.0 - w_left, w_left)
            };
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(f)) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind(&mut path, k);
            }
            recurse(tree, lf, x, hot, &path, hot_frac * in_zero, in_one, Some(f), phi);
            // A cold branch with zero weight contributes nothing and would
            // divide by zero if a descendant unwound it.
            if cold_frac * in_zero > 0.0 {
                recurse(tree, lf, x, cold, &path, cold_frac * in_zero, 0.0, Some(f), phi);
            }
        }
    }
}

/// Share of total absolute attribution per feature family over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShares {
    pub shares: Vec<(Group, f64)>,
    /// True when every attribution in the batch is zero.
    pub undefined: bool,
}

impl GroupShares {
    pub fn get(&self, g: Group) -> f64 {
        self.shares
            .iter()
            .find(|(k, _)| *k == g)
            .map_or(0.0, |(_, v)| *v)
    }
}

pub fn group_contributions(phis: &[Vec<f64>], spec: &FeatureSpec) -> GroupShares {
    let mut sums = [0.0f64; 4];
    for phi in phis {
        for (v, f) in phi.iter().zip(&spec.features) {
            sums[f.group.index()] += v.abs();
        }
    }
    let total: f64 = sums.iter().sum();
    let undefined = total <= 0.0;
    GroupShares {
        shares: Group::ALL
            .iter()
            .map(|&g| (g, if undefined { 0.0 } else { sums[g.index()] / total }))
            .collect(),
        undefined,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceItem {
    pub code: String,
    pub name: String,
    pub group: Group,
    pub value: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcePlot {
    pub base: f64,
    pub prediction: f64,
    pub items: Vec<ForceItem>,
}

/// Items sorted by absolute contribution, largest first; registry order
/// breaks ties.
pub fn force_plot_export(a: &Attribution, x: &[f64], spec: &FeatureSpec) -> ForcePlot {
    let mut items: Vec<(usize, ForceItem)> = spec
        .features
        .iter()
        .zip(x.iter().zip(&a.phi))
        .enumerate()
        .map(|(i, (f, (&value, &phi)))| {
            (
                i,
                ForceItem {
                    code: f.code.clone(),
                    name: f.name.clone(),
                    group: f.group,
                    value,
                    phi,
                },
            )
        })
        .collect();
    items.sort_by(|a, b| b.1.phi.abs().total_cmp(&a.1.phi.abs()).then(a.0.cmp(&b.0)));
    ForcePlot {
        base: a.base_value,
        prediction: a.prediction,
        items: items.into_iter().map(|(_, it)| it).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(mean: f64, n: usize) -> Node {
        Node::Leaf {
            mean,
            responses: vec![mean; n],
        }
    }

    fn split(feature: u32, threshold: f64, left: u32, right: u32, n: u32) -> Node {
        Node::Split {
            feature,
            threshold,
            left,
            right,
            n_train: n,
        }
    }

    fn forest(p: usize, trees: Vec<Vec<Node>>) -> Forest {
        Forest {
            n_features: p,
            bucket: None,
            tree_seeds: vec![0; trees.len()],
            trees: trees.into_iter().map(|nodes| Tree { nodes }).collect(),
        }
    }

    #[test]
    fn stump_splits_credit_to_its_feature() {
        let f = forest(2, vec![vec![split(0, 0.5, 1, 2, 10), leaf(0.0, 5), leaf(10.0, 5)]]);
        let bg = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let ex = Explainer::new(&f, &bg).unwrap();
        let a = ex.shap(&[1.0, 0.0]).unwrap();
        assert_eq!(a.base_value, 5.0);
        assert_eq!(a.phi, vec![5.0, 0.0]);
        assert_eq!(a.prediction, 10.0);
    }

    fn sample_forest() -> Forest {
        forest(
            3,
            vec![
                vec![
                    split(0, 0.5, 1, 2, 20),
                    split(1, 0.3, 3, 4, 12),
                    split(0, 0.8, 5, 6, 8),
                    leaf(1.0, 4),
                    leaf(7.0, 8),
                    split(1, 0.6, 7, 8, 5),
                    leaf(-2.0, 3),
                    leaf(3.0, 2),
                    leaf(11.0, 3),
                ],
                vec![split(2, 0.5, 1, 2, 10), leaf(4.0, 7), leaf(-4.0, 3)],
            ],
        )
    }

    #[test]
    fn matches_subset_enumeration() {
        let f = sample_forest();
        let bg: Vec<Vec<f64>> = (0..13)
            .map(|i| vec![(i as f64 * 0.37) % 1.0, (i as f64 * 0.61) % 1.0, (i as f64 * 0.23) % 1.0])
            .collect();
        for (k, background) in [bg, vec![]].into_iter().enumerate() {
            let ex = Explainer::new(&f, &background).unwrap();
            for x in [[0.1, 0.2, 0.9], [0.6, 0.7, 0.1], [0.9, 0.5, 0.5], [0.55, 0.1, 0.49]] {
                let a = ex.shap(&x).unwrap();
                let b = ex.shap_brute(&x).unwrap();
                for (u, v) in a.phi.iter().zip(&b.phi) {
                    assert!((u - v).abs() < 1e-9, "case {k}: {:?} vs {:?}", a.phi, b.phi);
                }
                assert!((a.base_value - b.base_value).abs() < 1e-12);
                assert!(a.efficiency_gap().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unused_feature_gets_zero() {
        let f = sample_forest();
        let four = Forest {
            n_features: 4,
            ..f
        };
        let ex = Explainer::new(&four, &[]).unwrap();
        let a = ex.shap(&[0.2, 0.9, 0.1, 123.0]).unwrap();
        assert_eq!(a.phi[3], 0.0);
    }

    #[test]
    fn brute_force_guard() {
        let f = forest(16, vec![vec![leaf(1.0, 1)]]);
        let ex = Explainer::new(&f, &[]).unwrap();
        assert_eq!(
            ex.shap_brute(&[0.0; 16]),
            Err(AttributionError::TooManyFeatures { p: 16, max: 15 })
        );
        assert!(matches!(ex.shap(&[0.0; 3]), Err(AttributionError::DimensionMismatch { .. })));
    }

    #[test]
    fn group_shares_sum_to_one_or_flag() {
        let spec = FeatureSpec::standard(0);
        let mut phi = vec![0.0; spec.len()];
        phi[0] = 3.0;
        phi[18] = -1.0;
        let g = group_contributions(&[phi], &spec);
        assert!(!g.undefined);
        assert_eq!(g.get(Group::Aq), 0.75);
        assert_eq!(g.get(Group::Bq), 0.25);
        let z = group_contributions(&[vec![0.0; spec.len()]], &spec);
        assert!(z.undefined);
    }

    #[test]
    fn force_plot_orders_by_magnitude() {
        let spec = FeatureSpec::standard(0);
        let mut phi = vec![0.0; spec.len()];
        phi[5] = -4.0;
        phi[2] = 4.0;
        phi[9] = 1.0;
        let a = Attribution {
            base_value: 50.0,
            phi,
            prediction: 51.0,
        };
        let plot = force_plot_export(&a, &vec![0.5; spec.len()], &spec);
        assert_eq!(plot.items[0].code, "aq_2");
        assert_eq!(plot.items[1].code, "aq_5");
        assert_eq!(plot.items[2].code, "aq_9");
        let json = serde_json::to_value(&plot).unwrap();
        assert_eq!(json["items"][0]["group"], "AQ");
        assert!(json["base"].is_number());
    }
}
