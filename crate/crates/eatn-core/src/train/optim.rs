//! Optimizers (SGD with momentum, Adam) and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which update rule to use; learning rates come from a [`Schedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    /// Adam with the seq2seq-preset moments: beta1 0.9, beta2 0.98, eps 1e-8.
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.98, epsilon: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!("momentum {} outside [0, 1)", momentum)));
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
                }
                if epsilon <= 0.0 {
                    return Err(Error::Config("Adam epsilon must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-tensor accumulator slots; `m` doubles as SGD velocity.
struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Optimizer state over a fixed list of parameter tensors (addressed by
/// position, in the model's canonical traversal order).
pub struct Optimizer<S: Scalar = f64> {
    kind: OptimizerKind,
    step: usize,
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Result<Self> {
        kind.validate()?;
        let needs_v = matches!(kind, OptimizerKind::Adam { .. });
        let slots = sizes
            .iter()
            .map(|&n| Slot {
                m: vec![S::zero(); n],
                v: if needs_v { vec![S::zero(); n] } else { Vec::new() },
            })
            .collect();
        Ok(Self { kind, step: 0, slots })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Starts update step `t+1`; must precede the per-tensor
    /// [`update`](Self::update) calls of that step (Adam bias correction
    /// depends on the shared step count).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates tensor `idx` in place. `grad = None` means a zero gradient.
    pub fn update(
        &mut self,
        idx: usize,
        data: &mut [S],
        grad: Option<&[S]>,
        lr: f64,
    ) -> Result<()> {
        let slot = self
            .slots
            .get_mut(idx)
            .ok_or_else(|| Error::Contract(format!("optimizer has no tensor {}", idx)))?;
        if slot.m.len() != data.len() || grad.is_some_and(|g| g.len() != data.len()) {
            return Err(Error::Contract(format!(
                "optimizer tensor {} sized {}, got {} values",
                idx,
                slot.m.len(),
                data.len()
            )));
        }
        let lr = S::from_f64(lr);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = S::from_f64(momentum);
                for i in 0..data.len() {
                    let gi = grad.map_or(S::zero(), |g| g[i]);
                    slot.m[i] = mu * slot.m[i] + gi;
                    data[i] -= lr * slot.m[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let b1 = S::from_f64(beta1);
                let b2 = S::from_f64(beta2);
                let eps = S::from_f64(epsilon);
                let one = S::one();
                let bc1 = one - S::from_f64(beta1.powi(self.step as i32));
                let bc2 = one - S::from_f64(beta2.powi(self.step as i32));
                for i in 0..data.len() {
                    let gi = grad.map_or(S::zero(), |g| g[i]);
                    slot.m[i] = b1 * slot.m[i] + (one - b1) * gi;
                    slot.v[i] = b2 * slot.v[i] + (one - b2) * gi * gi;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Applies one full update over all tensors at once.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Option<Vec<S>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        self.begin_step();
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(idx, p.data_mut(), g.as_deref(), lr)?;
        }
        Ok(())
    }
}

/// Learning-rate schedule; `t` is the 1-based update step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { lr: f64 },
    /// `lr(t) = peak * min(t / warmup, sqrt(warmup / t))`; peaks at
    /// `t = warmup`.
    InverseSqrtWarmup { peak_lr: f64, warmup: usize },
    /// Multiplies by `factor` after every `every` steps.
    StepDecay { lr: f64, factor: f64, every: usize },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant { lr } => lr > 0.0,
            Schedule::InverseSqrtWarmup { peak_lr, warmup } => peak_lr > 0.0 && warmup >= 1,
            Schedule::StepDecay { lr, factor, every } => {
                lr > 0.0 && factor > 0.0 && factor <= 1.0 && every >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {:?}", self)))
        }
    }

    pub fn lr(&self, t: usize) -> f64 {
        let t = t.max(1);
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::InverseSqrtWarmup { peak_lr, warmup } => {
                let t = t as f64;
                let w = warmup as f64;
                peak_lr * (t / w).min((w / t).sqrt())
            }
            Schedule::StepDecay { lr, factor, every } => lr * factor.powi(((t - 1) / every) as i32),
        }
    }
}
