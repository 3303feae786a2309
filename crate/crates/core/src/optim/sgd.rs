use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::tensor::{Float, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exempt batch-norm affine terms and PReLU slopes from weight decay.
    pub skip_norm_decay: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            skip_norm_decay: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param_err!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(param_err!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Momentum SGD: `g' = g + wd·p; v = μ·v + g'; p -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Float = f32> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let velocity = store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
        Ok(Self { config, velocity })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update with learning rate `lr`. Every parameter must carry a
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.len() != self.velocity.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.velocity.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            if store.get(*id).grad().is_none() {
                return Err(Error::State(format!("parameter '{}' has no gradient", store.name(*id))));
            }
        }
        let mu = T::lit(self.config.momentum);
        let lr = T::lit(lr);
        for (k, id) in ids.into_iter().enumerate() {
            let wd = if self.config.skip_norm_decay && store.is_norm(id) {
                T::zero()
            } else {
                T::lit(self.config.weight_decay)
            };
            let v = &mut self.velocity[k];
            let p = store.get_mut(id);
            if v.len() != p.numel() {
                return Err(Error::State(format!("velocity shape drift for parameter {k}")));
            }
            let grad = p.grad().expect("checked above").to_vec();
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                let g = gi + wd * *pi;
                *vi = mu * *vi + g;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p), false).unwrap();
        s.get_mut(id).accumulate_grad(&[g]).unwrap();
        s
    }

    #[test]
    fn one_step_recurrence() {
        let mut s = store(1.0, 1.0);
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            skip_norm_decay: false,
        };
        let mut opt = Sgd::new(cfg, &s).unwrap();
        opt.step(&mut s, 0.1).unwrap();
        let id = s.find("p").unwrap();
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(opt.velocity()[0], vec![1.0]);
    }

    #[test]
    fn zero_grad_is_noop_without_decay() {
        let mut s = store(0.7, 0.0);
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut opt = Sgd::new(cfg, &s).unwrap();
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(s.find("p").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[3]), false).unwrap();
        let mut opt = Sgd::new(SgdConfig::default(), &s).unwrap();
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn norm_params_can_skip_decay() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("bn.gamma", Tensor::scalar(1.0), true).unwrap();
        let b = s.add("conv.weight", Tensor::scalar(1.0), false).unwrap();
        s.get_mut(a).accumulate_grad(&[0.0]).unwrap();
        s.get_mut(b).accumulate_grad(&[0.0]).unwrap();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.5,
            skip_norm_decay: true,
        };
        Sgd::new(cfg, &s).unwrap().step(&mut s, 1.0).unwrap();
        assert_eq!(s.get(a).data()[0], 1.0);
        assert_eq!(s.get(b).data()[0], 0.5);
    }
}
