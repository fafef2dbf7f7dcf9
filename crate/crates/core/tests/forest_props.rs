mod oracles;

use esq_core::forest::{self, check_loss, weighted_quantile, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn check_loss_unit_cases() {
    assert_eq!(check_loss(0.0, 0.3), 0.0);
    assert_eq!(check_loss(2.0, 0.9), 1.8);
    // 1 - 0.9 is not 0.1 in binary; the exact product for the stored
    // tau sits two ulps below 0.2.
    assert!((check_loss(-2.0, 0.9) - 0.2).abs() <= 2.0 * f64::EPSILON * 0.2);
    let mut r = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..1000 {
        let (e, tau) = (r.random_range(-50.0..50.0), r.random_range(0.01..0.99));
        assert!((check_loss(e, tau) - oracles::pinball(e, tau)).abs() <= 1e-12);
    }
}

#[test]
fn empirical_quantile_minimizes_check_loss_on_grid() {
    let mut r = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..20 {
        let n = r.random_range(5..200);
        // Values on the grid so the minimizer is representable.
        let sample: Vec<f64> = (0..n).map(|_| r.random_range(0..2000) as f64 * 1e-3).collect();
        let tau = r.random_range(0.05..0.95);
        let mean_loss = |t: f64| sample.iter().map(|y| oracles::pinball(y - t, tau)).sum::<f64>() / n as f64;
        let mut pairs: Vec<(f64, f64)> = sample.iter().map(|&y| (y, 1.0)).collect();
        let q = weighted_quantile(&mut pairs, tau);
        assert_eq!(q, oracles::empirical_quantile(&sample, tau));
        let grid_min = (0..=2000).map(|k| mean_loss(k as f64 * 1e-3)).fold(f64::INFINITY, f64::min);
        assert!(mean_loss(q) <= grid_min + 1e-12, "tau {tau}: {} vs {grid_min}", mean_loss(q));
    }
}

fn noisy(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| r.random::<f64>()).collect()).collect();
    let y = x
        .iter()
        .map(|row| (30.0 + 40.0 * row[0] + 20.0 * row[1] * row[2] + r.random_range(-10.0..10.0) * (0.5 + row[3])).clamp(0.0, 100.0))
        .collect();
    (x, y)
}

#[test]
fn quantiles_are_monotone_and_mean_is_tree_average() {
    let (x, y) = noisy(800, 6, 53);
    let cfg = TrainConfig {
        n_trees: 60,
        seed: 9,
        ..TrainConfig::default()
    };
    let f = forest::train(&x, &y, &cfg, None).unwrap();
    let (probe, _) = noisy(300, 6, 54);
    let taus = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];
    for row in &probe {
        let q = f.predict_quantiles(row, &taus).unwrap();
        assert!(q.windows(2).all(|w| w[0] <= w[1]), "{q:?}");
        let (lo, hi) = f.predict_interval(row, 0.05).unwrap();
        assert!(lo <= hi);
        assert!((f.raw_mean(row).unwrap() - oracles::forest_mean(&f, row)).abs() <= 1e-9);
    }
}

#[test]
fn interval_covers_held_out_noise() {
    let (x, y) = noisy(3000, 6, 55);
    let cfg = TrainConfig {
        n_trees: 200,
        seed: 3,
        ..TrainConfig::default()
    };
    let f = forest::train(&x, &y, &cfg, None).unwrap();
    let (tx, ty) = noisy(1000, 6, 56);
    let hits = tx
        .iter()
        .zip(&ty)
        .filter(|(row, y)| {
            let (lo, hi) = f.predict_interval(row, 0.05).unwrap();
            lo <= **y && **y <= hi
        })
        .count();
    let coverage = hits as f64 / 1000.0;
    assert!((0.80..=0.97).contains(&coverage), "coverage {coverage}");
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let (x, y) = noisy(300, 5, 57);
    let cfg = TrainConfig {
        n_trees: 20,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = forest::train(&x, &y, &cfg, Some(2)).unwrap();
    let b = forest::train(&x, &y, &cfg, Some(2)).unwrap();
    assert_eq!(a.digest(), b.digest());
    let back = forest::Forest::from_bytes(&a.to_bytes()).unwrap();
    assert_eq!(back, a);
}
