//! Reference implementations written from the definitions, sharing no code
//! with the library. Used by the integration and acceptance tests.
#![allow(dead_code)]

use esq_core::bkt::BktParams;
use esq_core::forest::{Forest, Node, Tree};
use esq_core::mastery::FmModel;

/// Log-likelihood of `obs` by summing over every hidden learned/unlearned
/// trajectory. Learned is absorbing.
pub fn bkt_enum_loglik(obs: &[bool], p: &BktParams) -> f64 {
    enum_joint(obs, p, None).ln()
}

/// P(learned before attempt n+1 | obs) by enumeration over n+1 states.
pub fn bkt_enum_next_learned(obs: &[bool], p: &BktParams) -> f64 {
    enum_joint(obs, p, Some(true)) / enum_joint(obs, p, None)
}

fn enum_joint(obs: &[bool], p: &BktParams, last: Option<bool>) -> f64 {
    let n = obs.len();
    let mut total = 0.0;
    for mask in 0u32..1 << (n + 1) {
        let state = |t: usize| mask >> t & 1 == 1;
        if let Some(want) = last {
            if state(n) != want {
                continue;
            }
        }
        let mut pr = if state(0) { p.p_init } else { 1.0 - p.p_init };
        for t in 0..n {
            let (l, next) = (state(t), state(t + 1));
            pr *= match (l, obs[t]) {
                (true, true) => 1.0 - p.p_slip,
                (true, false) => p.p_slip,
                (false, true) => p.p_guess,
                (false, false) => 1.0 - p.p_guess,
            };
            pr *= match (l, next) {
                (true, true) => 1.0,
                (true, false) => 0.0,
                (false, true) => p.p_transit,
                (false, false) => 1.0 - p.p_transit,
            };
        }
        total += pr;
    }
    total
}

/// Degree-2 FM score with the explicit double sum over pairs.
pub fn fm_naive(m: &FmModel, active: &[(usize, f64)]) -> f64 {
    let mut s = m.w0;
    for &(i, x) in active {
        s += m.w[i] * x;
    }
    for a in 0..active.len() {
        for b in a + 1..active.len() {
            let (i, xi) = active[a];
            let (j, xj) = active[b];
            let dot: f64 = (0..m.rank).map(|f| m.v[i * m.rank + f] * m.v[j * m.rank + f]).sum();
            s += dot * xi * xj;
        }
    }
    s
}

/// `max(tau * e, (tau - 1) * e)`.
pub fn pinball(e: f64, tau: f64) -> f64 {
    (tau * e).max((tau - 1.0) * e)
}

/// Smallest sample value whose empirical CDF reaches `tau`.
pub fn empirical_quantile(sample: &[f64], tau: f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((tau * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[k - 1]
}

fn goes_left(node: &Node, x: &[f64]) -> Option<(bool, usize, usize)> {
    match node {
        Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => Some((x[*feature as usize] <= *threshold, *left as usize, *right as usize)),
        Node::Leaf { .. } => None,
    }
}

/// Background rows reaching each node.
fn cover(tree: &Tree, background: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; tree.nodes.len()];
    for row in background {
        let mut i = 0;
        c[0] += 1.0;
        while let Some((l, left, right)) = goes_left(&tree.nodes[i], row) {
            i = if l { left } else { right };
            c[i] += 1.0;
        }
    }
    c
}

/// E[f(X) | X_S = x_S] for one tree, with unknown splits weighted by the
/// background share of each child (bootstrap counts where no background
/// row reaches the node).
fn tree_value(tree: &Tree, cov: &[f64], x: &[f64], known: &[bool], i: usize) -> f64 {
    match &tree.nodes[i] {
        Node::Leaf { mean, .. } => *mean,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            n_train,
        } => {
            let (l, r) = (*left as usize, *right as usize);
            if known[*feature as usize] {
                let next = if x[*feature as usize] <= *threshold { l } else { r };
                return tree_value(tree, cov, x, known, next);
            }
            let (wl, wr) = if cov[i] > 0.0 {
                (cov[l] / cov[i], cov[r] / cov[i])
            } else if *n_train > 0 {
                let n = *n_train as f64;
                (tree.nodes[l].n_train() as f64 / n, tree.nodes[r].n_train() as f64 / n)
            } else {
                (0.5, 0.5)
            };
            let mut v = 0.0;
            if wl > 0.0 {
                v += wl * tree_value(tree, cov, x, known, l);
            }
            if wr > 0.0 {
                v += wr * tree_value(tree, cov, x, known, r);
            }
            v
        }
    }
}

/// Exact Shapley values of the forest's coalition game, by subset
/// enumeration. Returns (base, phi, full value).
pub fn shapley_enum(forest: &Forest, background: &[Vec<f64>], x: &[f64]) -> (f64, Vec<f64>, f64) {
    let p = forest.n_features;
    assert!(p <= 16, "enumeration is exponential");
    let covers: Vec<Vec<f64>> = forest.trees.iter().map(|t| cover(t, background)).collect();
    let value = |mask: usize| {
        let known: Vec<bool> = (0..p).map(|j| mask >> j & 1 == 1).collect();
        forest
            .trees
            .iter()
            .zip(&covers)
            .map(|(t, c)| tree_value(t, c, x, &known, 0))
            .sum::<f64>()
            / forest.trees.len() as f64
    };
    let v: Vec<f64> = (0..1usize << p).map(value).collect();
    let mut fact = vec![1.0f64; p + 1];
    for k in 1..=p {
        fact[k] = fact[k - 1] * k as f64;
    }
    let phi = (0..p)
        .map(|j| {
            (0..1usize << p)
                .filter(|m| m >> j & 1 == 0)
                .map(|m| {
                    let s = m.count_ones() as usize;
                    fact[s] * fact[p - s - 1] / fact[p] * (v[m | 1 << j] - v[m])
                })
                .sum()
        })
        .collect();
    (v[0], phi, v[(1 << p) - 1])
}

/// Plain average of per-tree leaf means.
pub fn forest_mean(forest: &Forest, x: &[f64]) -> f64 {
    forest
        .trees
        .iter()
        .map(|t| {
            let mut i = 0;
            while let Some((l, left, right)) = goes_left(&t.nodes[i], x) {
                i = if l { left } else { right };
            }
            match &t.nodes[i] {
                Node::Leaf { mean, .. } => *mean,
                Node::Split { .. } => unreachable!(),
            }
        })
        .sum::<f64>()
        / forest.trees.len() as f64
}

/// Mean Bernoulli log-loss of predictions, clipped away from 0 and 1.
pub fn mean_logloss(pred: &[f64], y: &[bool]) -> f64 {
    pred.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / pred.len() as f64
}
