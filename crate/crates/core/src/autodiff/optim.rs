use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{PheError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam moments with weight decay applied directly to the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: AdamWConfig,
    step: u64,
    trainable: BTreeSet<String>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    /// State over the parameters named in `trainable`; everything else in a
    /// store is left untouched by [`step`](Self::step).
    pub fn new<I, S>(config: AdamWConfig, trainable: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        OptimizerState {
            config,
            step: 0,
            trainable: trainable.into_iter().map(Into::into).collect(),
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    /// One update: `θ ← θ − lr·decay·θ − lr·m̂/(√v̂ + ε)`.
    /// A trainable parameter missing from `grads` is treated as having a
    /// zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for name in &self.trainable {
            let p = params.get(name).ok_or_else(|| PheError::CheckpointMismatch {
                missing: vec![name.clone()],
            })?;
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(PheError::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for name in &self.trainable {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).unwrap());
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).unwrap());
            let g = grads.get(name);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let theta = p.data()[i];
                p.data_mut()[i] = theta - lr * weight_decay * theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at epoch `t` of `total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(PheError::Config("cosine schedule needs at least one epoch".into()));
    }
    if t > total {
        return Err(PheError::Config(format!("epoch {t} beyond schedule length {total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::column(v));
        s
    }

    fn grads(v: Vec<f64>) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::column(v))])
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = store(vec![0.3, -1.2]);
        let before = p.clone();
        let mut opt = OptimizerState::new(cfg, ["w"]);
        opt.step(&mut p, &grads(vec![0.0, 0.0]), 0.1).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = store(vec![1.0, 1.0, 1.0]);
        let g = vec![0.5, -2.0, 1e-3];
        let mut opt = OptimizerState::new(cfg.clone(), ["w"]);
        let lr = 0.01;
        opt.step(&mut p, &grads(g.clone()), lr).unwrap();
        for (i, gi) in g.iter().enumerate() {
            // m̂ = g, v̂ = g² after bias correction on the first step
            let expected = 1.0 - lr * gi / (gi.abs() + cfg.eps);
            let got = p.get("w").unwrap().data()[i];
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            assert_eq!((got - 1.0).signum(), -gi.signum());
        }
    }

    #[test]
    fn decay_without_gradient_shrinks() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = store(vec![2.0, -4.0]);
        let mut opt = OptimizerState::new(cfg, ["w"]);
        opt.step(&mut p, &grads(vec![0.0, 0.0]), 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(vec![1.0, 2.0]);
        let mut opt = OptimizerState::new(AdamWConfig::default(), ["w"]);
        let err = opt.step(&mut p, &grads(vec![1.0]), 0.1).unwrap_err();
        assert!(matches!(err, PheError::Shape(_)));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn untracked_parameters_untouched() {
        let mut p = store(vec![1.0]);
        p.insert("frozen", Tensor::scalar(5.0));
        let mut opt = OptimizerState::new(AdamWConfig::default(), ["w"]);
        let mut g = grads(vec![1.0]);
        g.insert("frozen".into(), Tensor::scalar(1.0));
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.get("frozen").unwrap().item(), 5.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 1e-3, 1e-5).unwrap();
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
        assert!(cosine_lr(5, 4, 1e-3, 0.0).is_err());
    }
}
