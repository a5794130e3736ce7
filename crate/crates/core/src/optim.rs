use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the joint gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.03,
            momentum: 0.9,
            grad_clip: Some(1.0),
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// `v <- momentum * v + g; p <- p - lr * v` for every named gradient.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Architecture(format!("gradient for unknown parameter {name}")))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.config.momentum * *vv + gv * scale;
                *pv -= self.config.lr * *vv;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::ones(&[2]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::full(&[2], 0.5));
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            grad_clip: None,
        });
        opt.step(&mut params, &grads).unwrap();
        assert!((params.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
        opt.step(&mut params, &grads).unwrap();
        // v = 0.9 * 0.5 + 0.5 = 0.95
        assert!((params.get("w").unwrap().data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::full(&[2], 3.0));
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.0,
            ..Default::default()
        });
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(&[1]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::full(&[1], 100.0));
        let mut opt = Sgd::new(SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            grad_clip: Some(2.0),
        });
        let norm = opt.step(&mut params, &grads).unwrap();
        assert_eq!(norm, 100.0);
        assert!((params.get("w").unwrap().data()[0] + 2.0).abs() < 1e-12);
        grads.insert("w".to_string(), Tensor::full(&[1], f64::NAN));
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
