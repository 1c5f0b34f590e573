//! Age label distributions and the losses built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const MIN_AGE: u32 = 14;
pub const MAX_AGE: u32 = 97;
pub const NUM_BINS: usize = (MAX_AGE - MIN_AGE + 1) as usize;
/// Lower clamp on predicted probabilities inside the KL logarithm.
pub const KL_CLAMP: f64 = 1e-12;
/// Allowed deviation of a distribution's total mass from 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Bin label `l_k` for bin index `k`.
pub fn label(k: usize) -> f64 {
    (MIN_AGE as usize + k) as f64
}

pub fn labels() -> [f64; NUM_BINS] {
    std::array::from_fn(label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Gaussian width in years.
    pub theta: f64,
    pub lambda_patience: usize,
    /// Fixed λ instead of the 0 -> 1 schedule.
    pub lambda_override: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            theta: 2.0,
            lambda_patience: 10,
            lambda_override: None,
        }
    }
}

/// Probabilities over the 84 age bins.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    pub q: [f64; NUM_BINS],
}

impl LabelDistribution {
    pub fn expectation(&self) -> f64 {
        expectation(&self.q)
    }
}

/// Normalized Gaussian over the bins, centred on `age`.
pub fn gen_distribution(age: f64, theta: f64) -> Result<LabelDistribution> {
    if !(MIN_AGE as f64..=MAX_AGE as f64).contains(&age) {
        return Err(Error::Domain(format!(
            "age {age} outside [{MIN_AGE}, {MAX_AGE}]"
        )));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::arg(format!("theta must be positive, got {theta}")));
    }
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * theta);
    let mut q = std::array::from_fn(|k| {
        let z = (label(k) - age) / theta;
        norm * (-0.5 * z * z).exp()
    });
    let total: f64 = q.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(format!(
            "distribution for age {age}, theta {theta} has no mass"
        )));
    }
    for v in &mut q {
        *v /= total;
    }
    Ok(LabelDistribution { q })
}

/// `sum_k l_k q_k`.
pub fn expectation(q: &[f64]) -> f64 {
    q.iter().enumerate().map(|(k, &p)| label(k) * p).sum()
}

fn check_simplex(q: &[f64], what: &str) -> Result<()> {
    if q.len() != NUM_BINS {
        return Err(Error::arg(format!(
            "{what} has {} bins, expected {NUM_BINS}",
            q.len()
        )));
    }
    if q.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::arg(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::arg(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(q || q_hat)` with `q_hat` clamped below at [`KL_CLAMP`].
pub fn kl_divergence(q: &[f64], q_hat: &[f64]) -> Result<f64> {
    check_simplex(q, "target distribution")?;
    check_simplex(q_hat, "predicted distribution")?;
    Ok(q.iter().zip(q_hat).map(|(&p, &ph)| kl_term(p, ph)).sum())
}

fn kl_term(p: f64, ph: f64) -> f64 {
    if p > 0.0 {
        p * (p.ln() - ph.max(KL_CLAMP).ln())
    } else {
        0.0
    }
}

/// `|E[q_hat] - age|`.
pub fn mae_loss(q_hat: &[f64], age: f64) -> f64 {
    (expectation(q_hat) - age).abs()
}

/// `KL + λ·MAE`; exactly the KL term when λ is zero.
pub fn combined_loss(q: &[f64], q_hat: &[f64], age: f64, lambda: f64) -> Result<f64> {
    let kl = kl_divergence(q, q_hat)?;
    Ok(if lambda == 0.0 {
        kl
    } else {
        kl + lambda * mae_loss(q_hat, age)
    })
}

/// Stacked target distributions `[B, 84]` for a batch of ages.
pub fn target_batch<T: Element>(ages: &[f64], theta: f64) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ages.len() * NUM_BINS);
    for &a in ages {
        data.extend(gen_distribution(a, theta)?.q.iter().map(|&v| T::of(v)));
    }
    Tensor::new(&[ages.len(), NUM_BINS], data)
}

impl<T: Element> Tape<T> {
    /// Batch-mean `KL(q || q_hat)` over rows of `[B, 84]`.
    pub fn kl_loss(&mut self, q_hat: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(q_hat).to_vec();
        if shape.len() != 2 || shape[1] != NUM_BINS || target.shape() != shape.as_slice() {
            return Err(Error::dim(format!(
                "kl_loss: prediction {shape:?} and target {:?} must both be [B, {NUM_BINS}]",
                target.shape()
            )));
        }
        let batch = shape[0];
        let pred = self.value(q_hat);
        for b in 0..batch {
            let rows = b * NUM_BINS..(b + 1) * NUM_BINS;
            let qh: Vec<f64> = pred.data()[rows.clone()]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let q: Vec<f64> = target.data()[rows].iter().map(|v| v.as_f64()).collect();
            check_simplex(&q, "target distribution")?;
            check_simplex(&qh, "predicted distribution")?;
        }
        let total: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(ph, p)| kl_term(p.as_f64(), ph.as_f64()))
            .sum();
        let out = Tensor::scalar(T::of(total / batch as f64));
        let target = target.clone();
        self.record_fn("kl_loss", &[q_hat], out, move |ins, _, g, _| {
            // Straight-through clamp.
            let scale = g.item()? / T::of(batch as f64);
            let clamp = T::of(KL_CLAMP);
            let grad = ins[0].zip_map(&target, |ph, p| -scale * p / ph.max(clamp))?;
            Ok(vec![Some(grad)])
        })
    }

    /// Expected age per row: `[B, 84] -> [B]`.
    pub fn expected_age(&mut self, q_hat: Var) -> Result<Var> {
        let shape = self.shape(q_hat).to_vec();
        if shape.len() != 2 || shape[1] != NUM_BINS {
            return Err(Error::dim(format!(
                "expected_age expects [B, {NUM_BINS}], got {shape:?}"
            )));
        }
        let l = self.constant(Tensor::from_fn(&[NUM_BINS, 1], |k| T::of(label(k))));
        let e = self.matmul(q_hat, l)?;
        self.reshape(e, &[shape[0]])
    }

    /// Batch-mean `|E[q_hat] - age|`.
    pub fn mae_loss(&mut self, q_hat: Var, ages: &[f64]) -> Result<Var> {
        let e = self.expected_age(q_hat)?;
        if self.shape(e)[0] != ages.len() {
            return Err(Error::dim(format!(
                "mae_loss: {} predictions for {} ages",
                self.shape(e)[0],
                ages.len()
            )));
        }
        let y = self.constant(Tensor::from_fn(&[ages.len()], |i| T::of(ages[i])));
        let diff = self.sub(e, y)?;
        let a = self.abs(diff)?;
        self.mean(a)
    }

    /// `KL + λ·MAE`, batch-averaged; the KL node itself when λ is zero.
    pub fn combined_loss(
        &mut self,
        q_hat: Var,
        target: &Tensor<T>,
        ages: &[f64],
        lambda: f64,
    ) -> Result<Var> {
        let kl = self.kl_loss(q_hat, target)?;
        if lambda == 0.0 {
            return Ok(kl);
        }
        let mae = self.mae_loss(q_hat, ages)?;
        let weighted = self.scale(mae, T::of(lambda))?;
        self.add(kl, weighted)
    }
}

/// λ schedule: 0 until the monitored loss fails to improve for `patience`
/// consecutive epochs, then 1 for the rest of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaScheduler {
    pub patience: usize,
    pub best: f64,
    pub stalled: usize,
    pub lambda: f64,
    pub flipped_at: Option<usize>,
    pub epochs_seen: usize,
}

impl LambdaScheduler {
    pub fn new(patience: usize) -> Self {
        LambdaScheduler {
            patience: patience.max(1),
            best: f64::INFINITY,
            stalled: 0,
            lambda: 0.0,
            flipped_at: None,
            epochs_seen: 0,
        }
    }

    /// Feeds one validation loss; returns true on the epoch λ flips.
    pub fn step(&mut self, val_loss: f64) -> bool {
        let epoch = self.epochs_seen;
        self.epochs_seen += 1;
        if self.flipped_at.is_some() {
            return false;
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.stalled = 0;
            return false;
        }
        self.stalled += 1;
        if self.stalled >= self.patience {
            self.lambda = 1.0;
            self.flipped_at = Some(epoch);
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_grid() {
        let l = labels();
        assert_eq!(l.len(), 84);
        assert_eq!((l[0], l[83]), (14.0, 97.0));
    }

    #[test]
    fn midpoint_expectation_exact() {
        for theta in [0.5, 2.0, 10.0, 40.0] {
            let q = gen_distribution(55.5, theta).unwrap();
            assert!((q.expectation() - 55.5).abs() < 1e-9);
        }
    }

    #[test]
    fn brute_force_age_20() {
        let q = gen_distribution(20.0, 2.0).unwrap();
        let dens =
            |l: f64| (-(l - 20.0).powi(2) / 8.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / 2.0;
        let z: f64 = (14..=97).map(|l| dens(l as f64)).sum();
        assert!((q.q[6] - dens(20.0) / z).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_ratio_is_sqrt_e() {
        let q = gen_distribution(40.0, 2.0).unwrap();
        let ratio = q.q[40 - 14] / q.q[42 - 14];
        assert!((ratio - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn domain_and_argument_errors() {
        assert!(matches!(gen_distribution(13.9, 2.0), Err(Error::Domain(_))));
        assert!(matches!(gen_distribution(98.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(
            gen_distribution(50.0, 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn small_theta_concentrates() {
        for y in [14.0, 30.0, 97.0] {
            let q = gen_distribution(y, 0.1).unwrap();
            assert!((q.expectation() - y).abs() < 1e-6);
        }
    }

    #[test]
    fn expectation_cases() {
        let mut one_hot = [0.0; NUM_BINS];
        one_hot[30 - 14] = 1.0;
        assert_eq!(expectation(&one_hot), 30.0);
        let uniform = [1.0 / 84.0; NUM_BINS];
        assert!((expectation(&uniform) - 55.5).abs() < 1e-9);
        assert!(mae_loss(&uniform, 55.5) < 1e-9);
        assert!((mae_loss(&one_hot, 35.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        let q = gen_distribution(33.0, 3.0).unwrap().q;
        assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-12);
        let mut one_hot = [0.0; NUM_BINS];
        one_hot[10] = 1.0;
        let uniform = [1.0 / 84.0; NUM_BINS];
        assert!((kl_divergence(&one_hot, &uniform).unwrap() - 84f64.ln()).abs() < 1e-12);
        let bad = [0.02; NUM_BINS];
        assert!(matches!(kl_divergence(&q, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn combined_at_zero_lambda_is_kl() {
        let q = gen_distribution(40.0, 2.0).unwrap().q;
        let qh = gen_distribution(60.0, 5.0).unwrap().q;
        let kl = kl_divergence(&q, &qh).unwrap();
        assert_eq!(
            combined_loss(&q, &qh, 40.0, 0.0).unwrap().to_bits(),
            kl.to_bits()
        );
        assert_eq!(
            combined_loss(&q, &qh, 90.0, 0.0).unwrap().to_bits(),
            kl.to_bits()
        );
        assert!(combined_loss(&q, &q, 40.0, 1.0).unwrap() < 1e-9);
    }

    #[test]
    fn tape_losses_match_scalar_versions() {
        let ages = [25.0, 71.0];
        let target = target_batch::<f64>(&ages, 2.0).unwrap();
        let pred = Tensor::new(
            &[2, NUM_BINS],
            [
                gen_distribution(30.0, 4.0).unwrap().q,
                gen_distribution(65.0, 6.0).unwrap().q,
            ]
            .concat(),
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(pred.clone(), true);
        let loss = tape.combined_loss(p, &target, &ages, 1.0).unwrap();
        let expected: f64 = (0..2)
            .map(|b| {
                let r = b * NUM_BINS..(b + 1) * NUM_BINS;
                combined_loss(&target.data()[r.clone()], &pred.data()[r], ages[b], 1.0).unwrap()
            })
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn lambda_flips_at_patience() {
        let mut s = LambdaScheduler::new(50);
        assert!(!s.step(1.0));
        for _ in 0..49 {
            assert!(!s.step(1.0));
        }
        assert_eq!(s.lambda, 0.0);
        assert!(s.step(1.0));
        assert_eq!(s.lambda, 1.0);
        assert_eq!(s.flipped_at, Some(50));
        assert!(!s.step(0.1));
        assert_eq!(s.lambda, 1.0);
    }

    #[test]
    fn lambda_improvement_resets_stall() {
        let mut s = LambdaScheduler::new(3);
        for v in [5.0, 6.0, 6.0, 4.0, 6.0, 6.0] {
            assert!(!s.step(v));
        }
        assert!(s.step(6.0));
    }

    proptest! {
        #[test]
        fn distribution_is_simplex(age in 14.0f64..=97.0, theta in 0.3f64..30.0) {
            let q = gen_distribution(age, theta).unwrap().q;
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn distribution_symmetric_about_grid_age(age in 24u32..=87, theta in 0.5f64..3.0, d in 1usize..10) {
            let q = gen_distribution(age as f64, theta).unwrap().q;
            let k = (age - MIN_AGE) as usize;
            prop_assert!((q[k - d] - q[k + d]).abs() < 1e-9);
        }

        #[test]
        fn lambda_is_monotone(losses in proptest::collection::vec(0.0f64..10.0, 1..200), patience in 1usize..20) {
            let mut s = LambdaScheduler::new(patience);
            let mut prev = 0.0;
            let mut flips = 0;
            for l in losses {
                flips += s.step(l) as usize;
                prop_assert!(s.lambda >= prev);
                prev = s.lambda;
            }
            prop_assert!(flips <= 1);
        }
    }
}
