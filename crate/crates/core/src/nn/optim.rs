use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam hyper-parameters plus reduce-on-plateau learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate on a plateau.
    pub plateau_factor: f64,
    /// Epochs without improvement tolerated before decaying.
    pub plateau_patience: usize,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 2,
            min_lr: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |name: &str, msg: &str| Err(Error::config(format!("{field}.{name}"), msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("plateau_factor", "must lie in (0, 1]");
        }
        Ok(())
    }
}

pub struct Optimizer {
    inner: AdamW,
    config: OptimizerConfig,
    best: Option<f64>,
    stale_epochs: usize,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, config: &OptimizerConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: 0.0,
        };
        Ok(Optimizer {
            inner: AdamW::new(vars, params)?,
            config: config.clone(),
            best: None,
            stale_epochs: 0,
        })
    }

    /// Backpropagates `loss` and applies one Adam update.
    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        self.inner.backward_step(loss)?;
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.inner.learning_rate()
    }

    /// Feeds an epoch metric (lower is better); returns true when the learning rate was decayed.
    pub fn end_epoch(&mut self, metric: f64) -> bool {
        match self.best {
            Some(best) if metric >= best => {
                self.stale_epochs += 1;
                if self.stale_epochs > self.config.plateau_patience {
                    self.stale_epochs = 0;
                    let lr = (self.lr() * self.config.plateau_factor).max(self.config.min_lr);
                    let decayed = lr < self.lr();
                    self.inner.set_learning_rate(lr);
                    return decayed;
                }
                false
            }
            _ => {
                self.best = Some(metric);
                self.stale_epochs = 0;
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.1,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(vec![x.clone()], &cfg).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss).unwrap();
        }
        let v = x.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn plateau_decay() {
        let x = Var::new(&[0.0f32], &Device::Cpu).unwrap();
        let cfg = OptimizerConfig {
            plateau_patience: 1,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(vec![x], &cfg).unwrap();
        assert!(!opt.end_epoch(1.0));
        assert!(!opt.end_epoch(0.5));
        assert!(!opt.end_epoch(0.6));
        assert!(opt.end_epoch(0.7));
        assert!((opt.lr() - 5e-4).abs() < 1e-12);
        assert!(OptimizerConfig { lr: 0.0, ..cfg }.validate("opt").is_err());
    }
}
