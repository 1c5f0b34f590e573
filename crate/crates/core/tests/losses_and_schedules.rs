use gldn_core::agedist::{
    combined_loss, expectation, gen_distribution, kl_divergence, label, target_batch,
    LambdaScheduler,
};
use gldn_core::training::{warmup_lr, EarlyStopping, StopDecision};
use gldn_core::{Tape, Tensor, NUM_BINS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_simplex(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..NUM_BINS).map(|_| -rng.random::<f64>().ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn distributions_sum_to_one() {
    for age in [14.0, 14.5, 20.0, 37.25, 55.5, 80.0, 96.9, 97.0] {
        for theta in [0.1, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let q = gen_distribution(age, theta).unwrap().q;
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn midpoint_expectation() {
    for theta in [0.3, 2.0, 9.0] {
        let q = gen_distribution(55.5, theta).unwrap();
        assert!((expectation(&q.q) - 55.5).abs() < 1e-9);
    }
}

#[test]
fn small_theta_concentrates_on_integer_ages() {
    for age in [14u32, 30, 55, 97] {
        let q = gen_distribution(age as f64, 0.1).unwrap();
        assert!((expectation(&q.q) - age as f64).abs() < 1e-6);
    }
}

#[test]
fn unnormalized_ratio_one_theta_away() {
    let q = gen_distribution(40.0, 2.0).unwrap().q;
    let k = (40 - 14) as usize;
    assert_eq!(label(k), 40.0);
    assert!((q[k] / q[k + 2] - 0.5f64.exp()).abs() < 1e-12);
}

#[test]
fn kl_of_identical_is_zero_and_random_pairs_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = gen_distribution(33.0, 2.0).unwrap().q;
    assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-12);
    for _ in 0..1000 {
        let (a, b) = (random_simplex(&mut rng), random_simplex(&mut rng));
        assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn lambda_zero_is_kl_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for age in [15.0, 42.0, 90.0] {
        let q = gen_distribution(age, 2.0).unwrap().q;
        let q_hat = random_simplex(&mut rng);
        let kl = kl_divergence(&q, &q_hat).unwrap();
        assert_eq!(
            combined_loss(&q, &q_hat, age, 0.0).unwrap().to_bits(),
            kl.to_bits()
        );
    }

    let ages = [20.0, 61.0];
    let target = target_batch::<f64>(&ages, 2.0).unwrap();
    let rows: Vec<f64> = (0..2).flat_map(|_| random_simplex(&mut rng)).collect();
    let q_hat = Tensor::new(&[2, NUM_BINS], rows).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(q_hat.clone());
    let kl = tape.kl_loss(v, &target).unwrap();
    let comb = tape.combined_loss(v, &target, &ages, 0.0).unwrap();
    assert_eq!(
        tape.value(kl).item().unwrap().to_bits(),
        tape.value(comb).item().unwrap().to_bits()
    );
}

#[test]
fn perfect_prediction_has_zero_combined_loss() {
    let q = gen_distribution(55.5, 2.0).unwrap().q;
    assert!(combined_loss(&q, &q, 55.5, 1.0).unwrap().abs() < 1e-9);
}

#[test]
fn lambda_flips_exactly_at_patience() {
    for patience in [1usize, 3, 10, 50] {
        let mut s = LambdaScheduler::new(patience);
        let mut stream = vec![5.0, 4.0, 3.0];
        stream.extend(std::iter::repeat_n(3.0, patience));
        let flips: Vec<bool> = stream.iter().map(|&v| s.step(v)).collect();
        let at = flips.iter().position(|&f| f).unwrap();
        assert_eq!(at, 2 + patience);
        assert_eq!(flips.iter().filter(|&&f| f).count(), 1);
        assert_eq!(s.lambda, 1.0);
        assert_eq!(s.flipped_at, Some(2 + patience));
        assert!(!s.step(0.0));
        assert_eq!(s.lambda, 1.0);
    }
}

#[test]
fn lambda_stays_zero_while_improving() {
    let mut s = LambdaScheduler::new(2);
    for e in 0..100 {
        assert!(!s.step(100.0 - e as f64));
    }
    assert_eq!(s.lambda, 0.0);
}

#[test]
fn early_stop_fires_exactly_at_patience() {
    for patience in [1usize, 4, 20, 80] {
        let mut es = EarlyStopping::new(patience);
        assert_eq!(es.update(1.0), (true, StopDecision::Continue));
        for i in 1..patience {
            assert_eq!(es.update(1.0), (false, StopDecision::Continue), "epoch {i}");
        }
        assert_eq!(es.update(1.0).1, StopDecision::Stop);
    }
}

#[test]
fn early_stop_improvement_resets_the_counter() {
    let mut es = EarlyStopping::new(80);
    es.update(1.0);
    for _ in 0..79 {
        assert_eq!(es.update(2.0).1, StopDecision::Continue);
    }
    assert_eq!(es.update(0.5), (true, StopDecision::Continue));
    for _ in 0..79 {
        assert_eq!(es.update(0.6).1, StopDecision::Continue);
    }
    assert_eq!(es.update(0.6).1, StopDecision::Stop);
}

#[test]
fn warmup_hits_base_at_configured_epoch() {
    assert!((warmup_lr(0, 1e-4, 20) - 5e-6).abs() < 1e-18);
    assert_eq!(warmup_lr(19, 1e-4, 20), 1e-4);
    assert!(warmup_lr(18, 1e-4, 20) < 1e-4);
    assert_eq!(warmup_lr(199, 1e-4, 200), 1e-4);
    assert_eq!(warmup_lr(5000, 1e-4, 200), 1e-4);
}

proptest! {
    #[test]
    fn warmup_nondecreasing_and_bounded(w in 1usize..300, e in 0usize..600) {
        let a = warmup_lr(e, 1e-4, w);
        let b = warmup_lr(e + 1, 1e-4, w);
        prop_assert!(a <= b && b <= 1e-4);
    }

    #[test]
    fn expectation_inside_label_range(age in 14.0f64..=97.0, theta in 0.1f64..40.0) {
        let e = gen_distribution(age, theta).unwrap().expectation();
        prop_assert!((14.0..=97.0).contains(&e));
    }
}
