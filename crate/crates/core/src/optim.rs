//! Adam with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        let valid = |b: f64| (0.0..1.0).contains(&b);
        if !valid(config.beta1) || !valid(config.beta2) {
            return Err(Error::InvalidConfig(format!(
                "Adam betas must lie in [0, 1): beta1={}, beta2={}",
                config.beta1, config.beta2
            )));
        }
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn second_moment(&self, index: usize) -> &Tensor<T> {
        &self.second[index]
    }

    /// Applies one update from the gradients accumulated in `store`.
    ///
    /// Nothing is modified when any trainable gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.trainable && !p.grad.all_finite())
        {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::one() - T::lit(c.beta1.powi(self.steps as i32));
        let bias2 = T::one() - T::lit(c.beta2.powi(self.steps as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.epsilon));
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64s(values)).unwrap();
        s.get_mut(id).grad = Tensor::from_f64s(grads);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[0.0], &[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        // m_hat = 1, v_hat = 1 => delta = lr / (1 + eps)
        let moved = -s.value(s.id("w").unwrap()).data()[0];
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn second_moment_grows() {
        let mut s = store(&[0.0], &[0.5]);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        let v1 = adam.second_moment(0).data()[0];
        adam.step(&mut s).unwrap();
        let v2 = adam.second_moment(0).data()[0];
        assert!(v2 > v1);
    }

    #[test]
    fn non_finite_gradient_rejected_untouched() {
        let mut s = store(&[1.0, 1.0], &[0.1, f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        let err = adam.step(&mut s).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { param: "w".into() });
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[1.0, 1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn invalid_betas() {
        let s = store(&[0.0], &[0.0]);
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(cfg, &s).is_err());
    }
}
