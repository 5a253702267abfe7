//! SGD with momentum, LARS, learning-rate scaling and the warmup + cosine
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::models::{Param, ParamGroupKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Lars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    /// Base learning rate for weights at batch size 256.
    pub base_lr: f64,
    /// Base learning rate for biases and BN parameters at batch size 256.
    pub bias_lr: f64,
    pub momentum: f64,
    /// Applied to the adapted (weight) group only.
    pub weight_decay: f64,
    /// LARS trust coefficient.
    pub eta: f64,
    /// Warmup length as a fraction of the total epochs.
    pub warmup_fraction: f64,
    pub final_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            optimizer: OptimizerKind::Sgd,
            base_lr: 0.05,
            bias_lr: 0.0048,
            momentum: 0.9,
            weight_decay: 1.5e-6,
            eta: 0.001,
            warmup_fraction: 1.0 / 30.0,
            final_lr_ratio: 1e-3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} out of range: {v}")));
        if !(self.base_lr >= 0.0) {
            return bad("base_lr", self.base_lr);
        }
        if !(self.bias_lr >= 0.0) {
            return bad("bias_lr", self.bias_lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum);
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay);
        }
        if !(self.eta > 0.0) {
            return bad("eta", self.eta);
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", self.warmup_fraction);
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return bad("final_lr_ratio", self.final_lr_ratio);
        }
        Ok(())
    }

    pub fn schedule(&self, batch_size: usize, total_epochs: usize) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            bias_lr: self.bias_lr,
            batch_size,
            warmup_epochs: self.warmup_fraction * total_epochs as f64,
            total_epochs,
            final_lr_ratio: self.final_lr_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub bias_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub final_lr_ratio: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            return Err(Error::Config(format!(
                "warmup_epochs must lie in [0, {}), got {}",
                self.total_epochs, self.warmup_epochs
            )));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "final_lr_ratio must lie in (0, 1], got {}",
                self.final_lr_ratio
            )));
        }
        Ok(())
    }

    /// `(lr_weights, lr_biases)`, each base rate times `batch_size / 256`.
    pub fn scaled_lr(&self) -> (f64, f64) {
        let k = self.batch_size as f64 / 256.0;
        (self.base_lr * k, self.bias_lr * k)
    }

    pub fn warmup_steps(&self, steps_per_epoch: usize) -> usize {
        (self.warmup_epochs * steps_per_epoch as f64).round() as usize
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        self.total_epochs * steps_per_epoch
    }

    /// Multiplier on the scaled rates at `step`: a linear ramp from 0 over
    /// the warmup, then a cosine from 1 down to `final_lr_ratio`.
    pub fn factor_at(&self, step: usize, steps_per_epoch: usize) -> Result<f64> {
        let total = self.total_steps(steps_per_epoch);
        if step > total {
            return Err(precondition(format!(
                "step {step} beyond the final step {total}"
            )));
        }
        let warmup = self.warmup_steps(steps_per_epoch).min(total);
        if step < warmup {
            return Ok(step as f64 / warmup as f64);
        }
        let span = total - warmup;
        let t = if span == 0 {
            1.0
        } else {
            (step - warmup) as f64 / span as f64
        };
        let r = self.final_lr_ratio;
        Ok(r + (1.0 - r) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
    }

    /// Weight learning rate at `step`.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> Result<f64> {
        Ok(self.scaled_lr().0 * self.factor_at(step, steps_per_epoch)?)
    }

    pub fn lr_pair_at(&self, step: usize, steps_per_epoch: usize) -> Result<(f64, f64)> {
        let f = self.factor_at(step, steps_per_epoch)?;
        let (w, b) = self.scaled_lr();
        Ok((w * f, b * f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub kind: ParamGroupKind,
    /// Indices into the model's parameter list.
    pub params: Vec<usize>,
    pub weight_decay: f64,
    pub lars_adapted: bool,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub groups: Vec<ParamGroup>,
    /// One momentum buffer per parameter, in parameter order.
    pub buffers: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(params: &[Param], config: OptimConfig) -> Result<Self> {
        config.validate()?;
        let lars = config.optimizer == OptimizerKind::Lars;
        let mut groups = vec![
            ParamGroup {
                kind: ParamGroupKind::Adapted,
                params: Vec::new(),
                weight_decay: config.weight_decay,
                lars_adapted: lars,
            },
            ParamGroup {
                kind: ParamGroupKind::Excluded,
                params: Vec::new(),
                weight_decay: 0.0,
                lars_adapted: false,
            },
        ];
        for (i, p) in params.iter().enumerate() {
            let g = match p.group {
                ParamGroupKind::Adapted => 0,
                ParamGroupKind::Excluded => 1,
            };
            groups[g].params.push(i);
        }
        let buffers = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Ok(Optimizer {
            config,
            groups,
            buffers,
        })
    }

    /// One update using the gradients stored on `params`. `lr_weights`
    /// applies to the adapted group and `lr_biases` to the excluded group.
    /// Each parameter is replaced by a fresh leaf, so gradients start from
    /// zero on the next forward pass.
    pub fn step(&mut self, params: &mut [Param], lr_weights: f64, lr_biases: f64) -> Result<()> {
        if params.len() != self.buffers.len() {
            return Err(precondition(format!(
                "optimizer tracks {} parameters, model has {}",
                self.buffers.len(),
                params.len()
            )));
        }
        let grads = params
            .iter()
            .map(|p| {
                p.value
                    .grad()
                    .ok_or_else(|| Error::MissingGradient(p.name.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = self.config.momentum;
        for group in &self.groups {
            let lr = match group.kind {
                ParamGroupKind::Adapted => lr_weights,
                ParamGroupKind::Excluded => lr_biases,
            };
            for &i in &group.params {
                let w = params[i].value.data();
                let mut d: Vec<f64> = grads[i]
                    .iter()
                    .zip(w)
                    .map(|(g, w)| g + group.weight_decay * w)
                    .collect();
                if group.lars_adapted {
                    let (wn, dn) = (norm(w), norm(&d));
                    let trust = if wn > 0.0 && dn > 0.0 {
                        self.config.eta * wn / dn
                    } else {
                        1.0
                    };
                    d.iter_mut().for_each(|x| *x *= trust);
                }
                let v = &mut self.buffers[i];
                let updated: Vec<f64> = v
                    .iter_mut()
                    .zip(&d)
                    .zip(w)
                    .map(|((v, d), w)| {
                        *v = m * *v + d;
                        w - lr * *v
                    })
                    .collect();
                let shape = params[i].value.shape().to_vec();
                params[i].value = Tensor::parameter(updated, &shape)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(warmup: f64) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: 0.2,
            bias_lr: 0.0048,
            batch_size: 256,
            warmup_epochs: warmup,
            total_epochs: 30,
            final_lr_ratio: 1e-3,
        }
    }

    #[test]
    fn scaling_arithmetic() {
        let mut s = schedule(1.0);
        assert_eq!(s.scaled_lr().0, 0.2);
        s.batch_size = 512;
        assert_eq!(s.scaled_lr().1, 0.0096);
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule(1.0);
        assert_eq!(s.lr_at(0, 32).unwrap(), 0.0);
        assert_eq!(s.lr_at(32, 32).unwrap(), 0.2);
        assert!((s.lr_at(960, 32).unwrap() - 0.2e-3).abs() < 1e-12);
        assert!(s.lr_at(961, 32).is_err());
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = schedule(0.0);
        assert_eq!(s.lr_at(0, 10).unwrap(), 0.2);
    }

    #[test]
    fn schedule_validation() {
        assert!(schedule(30.0).validate().is_err());
        assert!(schedule(-1.0).validate().is_err());
        let mut s = schedule(1.0);
        s.final_lr_ratio = 0.0;
        assert!(s.validate().is_err());
    }
}
