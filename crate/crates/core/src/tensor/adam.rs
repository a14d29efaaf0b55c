use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                config.learning_rate
            )));
        }
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.value(id).len()])
            .collect();
        Ok(Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the gradients currently held by `store`. Gradients
    /// are left in place; callers zero them explicitly.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let entries = store.entries_mut();
        if entries.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                entries.len()
            )));
        }
        for e in entries.iter() {
            if e.trainable && !e.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {}", e.name)));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((e, m), v) in entries
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if !e.trainable {
                continue;
            }
            let mut data = e.value.data().to_vec();
            for k in 0..data.len() {
                let g = e.grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            e.value = super::Tensor::from_parts(e.value.shape().to_vec(), data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        store.entries_mut()[0].grad = vec![g];
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.002] {
            let mut store = scalar_store(1.0);
            let mut adam = Adam::new(
                AdamConfig {
                    learning_rate: 0.1,
                    ..Default::default()
                },
                &store,
            )
            .unwrap();
            set_grad(&mut store, g);
            adam.step(&mut store).unwrap();
            let moved = store.value(crate::tensor::ParamId(0)).item() - 1.0;
            assert!((moved + 0.1 * f64::signum(g)).abs() < 1e-6, "{moved}");
            assert_eq!(adam.step_count(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(crate::tensor::ParamId(0)).item(), 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        set_grad(&mut store, f64::NAN);
        let err = adam.step(&mut store).unwrap_err();
        assert!(
            matches!(&err, Error::Numeric(m) if m.contains('x')),
            "{err}"
        );
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let store = scalar_store(0.0);
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(Adam::new(cfg, &store).is_err());
    }

    #[test]
    fn minimises_square() {
        // Oracle: the same recurrence written out on plain scalars.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(x.abs() < 0.05, "oracle ended at {x}");

        let mut store = scalar_store(1.0);
        let id = store.id("x").unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &store,
        )
        .unwrap();
        for _ in 0..100 {
            let mut g = Graph::new();
            let xv = g.param(&store, id);
            let sq = g.mul(xv, xv).unwrap();
            g.backward(sq).unwrap();
            store.zero_grad();
            store.accumulate_grads(&g);
            adam.step(&mut store).unwrap();
        }
        let got = store.value(id).item();
        assert!(got.abs() < 0.05);
        assert_eq!(got.to_bits(), x.to_bits());
    }
}
