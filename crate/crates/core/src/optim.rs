//! Adam with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, shaped like their parameter.
#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: per-parameter moments and the shared step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    moments: IndexMap<String, Moments>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: IndexMap::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters are skipped even if a gradient is supplied.
    pub fn step<T: Element>(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(dim_err!("gradient {:?} for parameter {name} {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let moments = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.numel()],
                second: vec![0.0; g.numel()],
            });
            let tensor = params.tensor_mut(name).expect("checked above");
            for (((p, &gv), m), v) in tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(moments.first.iter_mut())
                .zip(moments.second.iter_mut())
            {
                let gv = gv.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = T::from_f64(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f32, trainable: bool) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full([3], v), trainable).unwrap();
        s
    }

    fn grads(v: f32) -> GradMap<f32> {
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::full([3], v));
        g
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(0.3, true);
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
        adam.step(&mut s, &grads(0.0)).unwrap();
        assert_eq!(s, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::scalar(0.0), true).unwrap();
        let mut g = GradMap::new();
        g.insert("x".into(), Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::with_lr(1e-4));
        adam.step(&mut s, &g).unwrap();
        let x = s.get("x").unwrap().item().unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        assert!((x + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{x}");
    }

    #[test]
    fn frozen_tensor_untouched() {
        let mut s = store(0.5, false);
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..100 {
            adam.step(&mut s, &grads(1.0)).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = store(0.0, true);
        let err = Adam::new(AdamConfig::default())
            .step(&mut s, &grads(f32::NAN))
            .unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }
}
