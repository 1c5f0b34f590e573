use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// Adam with classic (coupled) L2 regularization.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update with learning rate `lr`. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::arg(format!(
                "adam_step: {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (entry, g) in store.params().iter().zip(grads) {
            if g.shape() != entry.value.shape() {
                return Err(Error::dim(format!(
                    "adam_step: gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            if let Some(i) = g.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {} at flat index {i}",
                    entry.name
                )));
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, wd, eps) = (T::one(), T::of(c.weight_decay), T::of(c.eps));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::of(lr);
        for (k, entry) in store.params_mut().iter_mut().enumerate() {
            let p = entry.value.data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &g), m), v) in p.iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                let g = g + wd * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("w", Tensor::scalar(value));
        s
    }

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(1.0);
        let mut adam = Adam::new(&s, no_decay());
        adam.step(&mut s, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.params()[0].value.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = single(0.37);
        let mut adam = Adam::new(&s, no_decay());
        for _ in 0..10 {
            adam.step(&mut s, &[Tensor::scalar(0.0)], 0.1).unwrap();
        }
        assert_eq!(s.params()[0].value.data()[0], 0.37);
        assert_eq!(adam.t, 10);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = single(0.0);
        let mut adam = Adam::new(&s, no_decay());
        for _ in 0..1000 {
            let w = s.params()[0].value.data()[0];
            adam.step(&mut s, &[Tensor::scalar(2.0 * (w - 3.0))], 0.1)
                .unwrap();
        }
        assert!((s.params()[0].value.data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut s = single(2.0);
        let mut adam = Adam::new(
            &s,
            AdamConfig {
                weight_decay: 0.5,
                ..no_decay()
            },
        );
        adam.step(&mut s, &[Tensor::scalar(0.0)], 0.1).unwrap();
        // g = 1, so the first bias-corrected step is lr in the direction of -p.
        assert!((s.params()[0].value.data()[0] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = single(1.0);
        let mut adam = Adam::new(&s, no_decay());
        let err = adam
            .step(&mut s, &[Tensor::scalar(f64::NAN)], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("w")));
        assert_eq!(s.params()[0].value.data()[0], 1.0);
        assert_eq!(adam.t, 0);
    }
}
