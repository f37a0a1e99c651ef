use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::params::Params;
use crate::error::{Result, SemiError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup then cosine decay to zero at `total` steps.
    WarmupCosine { warmup: usize, total: usize },
}

impl Schedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupCosine { warmup, total } => {
                if step < warmup {
                    (step + 1) as f64 / warmup as f64
                } else if total <= warmup {
                    1.0
                } else {
                    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
                    0.5 * (1.0 + (PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if !ok {
            return Err(SemiError::Config(format!("invalid optimizer block {self:?}")));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay. Moment buffers attach by slot name.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    moments: BTreeMap<String, (DenseMatrix, DenseMatrix)>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr * self.cfg.schedule.factor(self.step)
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        let clip = if self.cfg.clip_norm > 0.0 {
            let n = grads.global_norm();
            if !n.is_finite() {
                return Err(SemiError::Numeric("non-finite gradient norm".into()));
            }
            if n > self.cfg.clip_norm {
                self.cfg.clip_norm / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, value) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            if g.shape() != value.shape() {
                return Err(SemiError::Shape(format!("gradient shape for {name}")));
            }
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                (
                    DenseMatrix::zeros(value.rows(), value.cols()),
                    DenseMatrix::zeros(value.rows(), value.cols()),
                )
            });
            let gd = g.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, w) in value.data_mut().iter_mut().enumerate() {
                let gk = gd[k] * clip;
                md[k] = b1 * md[k] + (1.0 - b1) * gk;
                vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(schedule: Schedule) -> OptimizerConfig {
        OptimizerConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule,
            clip_norm: 0.0,
        }
    }

    #[test]
    fn warmup_cosine_shape() {
        let s = Schedule::WarmupCosine { warmup: 10, total: 110 };
        assert!((s.factor(0) - 0.1).abs() < 1e-12);
        assert!((s.factor(9) - 1.0).abs() < 1e-12);
        assert!((s.factor(60) - 0.5).abs() < 1e-12);
        assert!(s.factor(110).abs() < 1e-12);
        assert_eq!(Schedule::Constant.factor(1000), 1.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Params::new();
        p.insert("w", DenseMatrix::row_vector(&[3.0, -2.0]));
        let mut opt = AdamW::new(cfg(Schedule::Constant));
        for _ in 0..500 {
            let mut g = Params::new();
            g.insert("w", p.get("w").unwrap().scale(2.0));
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("w").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Params::new();
        p.insert("w", DenseMatrix::row_vector(&[1.0]));
        let mut g = Params::new();
        g.insert("w", DenseMatrix::row_vector(&[5.0]));
        let mut opt = AdamW::new(cfg(Schedule::Constant));
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().get(0, 0) - 0.9).abs() < 1e-6);
    }
}
