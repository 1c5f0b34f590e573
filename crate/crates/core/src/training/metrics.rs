use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression metrics; correlations are `None` when either side has zero
/// variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub pcc: Option<f64>,
    pub srcc: Option<f64>,
}

pub fn compute_metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::arg(format!(
            "metrics need equal nonzero lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mae = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    Ok(Metrics {
        mae,
        rmse: mse.sqrt(),
        pcc: pearson(pred, truth),
        srcc: spearman(pred, truth),
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// MAE of always predicting the mean age.
pub fn mean_predictor_mae(ages: &[f64]) -> f64 {
    let n = ages.len() as f64;
    let mean = ages.iter().sum::<f64>() / n;
    ages.iter().map(|a| (a - mean).abs()).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let t = [20.0, 35.0, 50.0, 71.0];
        let m = compute_metrics(&t, &t).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        assert!((m.pcc.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.srcc.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_monotone() {
        let t = [-3.0, -1.0, 0.5, 3.5];
        let p: Vec<f64> = t.iter().map(|v| -v).collect();
        let m = compute_metrics(&p, &t).unwrap();
        assert!((m.pcc.unwrap() + 1.0).abs() < 1e-12);
        assert!((m.srcc.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tied_ranks() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), [1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn zero_variance_is_undefined() {
        let m = compute_metrics(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.pcc, m.srcc), (None, None));
        assert_eq!(serde_json::to_string(&m.pcc).unwrap(), "null");
    }

    #[test]
    fn bad_lengths() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_predictor_baseline() {
        assert_eq!(mean_predictor_mae(&[10.0, 20.0, 30.0, 40.0]), 10.0);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..60)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let m = compute_metrics(&p, &t).unwrap();
            prop_assert!(m.rmse + 1e-12 >= m.mae);
        }

        #[test]
        fn spearman_invariant_under_monotone_map(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let mapped: Vec<f64> = p.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let (a, b) = (spearman(&p, &t), spearman(&mapped, &t));
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
