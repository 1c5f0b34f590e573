use gldn_core::training::metrics::{compute_metrics, mean_predictor_mae};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean rank by counting: rank = 1 + #smaller + (#equal - 1) / 2.
fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn check(pred: &[f64], truth: &[f64]) {
    let m = compute_metrics(pred, truth).unwrap();
    let n = pred.len() as f64;
    let mae = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let rmse = (pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    assert!((m.mae - mae).abs() < 1e-9);
    assert!((m.rmse - rmse).abs() < 1e-9);
    assert!((m.pcc.unwrap() - pearson_oracle(pred, truth)).abs() < 1e-9);
    let srcc = pearson_oracle(&rank_oracle(pred), &rank_oracle(truth));
    assert!((m.srcc.unwrap() - srcc).abs() < 1e-9);
    assert!(m.rmse >= m.mae);
}

#[test]
fn hundred_random_vectors_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..100 {
        let n = rng.random_range(3..60);
        // Rounding to a coarse grid forces ties.
        let grid = if case % 2 == 0 { 1.0 } else { 0.25 };
        let truth: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(14.0..97.0) / grid as f64).round() * grid)
            .collect();
        let pred: Vec<f64> = truth
            .iter()
            .map(|t| ((t + rng.random_range(-15.0..15.0)) / grid).round() * grid)
            .collect();
        if truth.iter().all(|&t| t == truth[0]) || pred.iter().all(|&p| p == pred[0]) {
            continue;
        }
        check(&pred, &truth);
    }
}

#[test]
fn documented_tie_case() {
    check(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn perfect_and_anti_monotone() {
    let t = [20.0, 35.0, 50.0, 65.0, 80.0];
    let m = compute_metrics(&t, &t).unwrap();
    assert_eq!((m.mae, m.rmse), (0.0, 0.0));
    assert!((m.pcc.unwrap() - 1.0).abs() < 1e-12 && (m.srcc.unwrap() - 1.0).abs() < 1e-12);
    let anti: Vec<f64> = t.iter().map(|v| 100.0 - v).collect();
    let m = compute_metrics(&anti, &t).unwrap();
    assert!((m.pcc.unwrap() + 1.0).abs() < 1e-12 && (m.srcc.unwrap() + 1.0).abs() < 1e-12);
}

#[test]
fn zero_variance_is_undefined_not_nan() {
    let m = compute_metrics(&[40.0, 40.0, 40.0], &[20.0, 50.0, 70.0]).unwrap();
    assert!(m.pcc.is_none() && m.srcc.is_none());
    assert!(m.mae.is_finite());
    assert!(compute_metrics(&[], &[]).is_err());
    assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn baseline_is_mean_absolute_deviation() {
    let ages = [14.0, 20.0, 50.0, 97.0];
    let mu = mean(&ages);
    let mad = ages.iter().map(|a| (a - mu).abs()).sum::<f64>() / 4.0;
    assert!((mean_predictor_mae(&ages) - mad).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rmse_at_least_mae(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..50)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = compute_metrics(&p, &t).unwrap();
        prop_assert!(m.rmse + 1e-12 >= m.mae);
    }

    #[test]
    fn srcc_invariant_under_monotone_maps(pairs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..40)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = compute_metrics(&p, &t).unwrap().srcc;
        let warped: Vec<f64> = p.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let b = compute_metrics(&warped, &t).unwrap().srcc;
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }
}
