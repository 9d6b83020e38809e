use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, TensorError};

/// Learning-rate schedule, indexed by zero-based epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// `lr(e) = initial_lr * gamma^e`.
    PerEpochDecay { initial_lr: f64, gamma: f64 },
    /// `lr` multiplied by `gamma` at every milestone epoch already reached.
    MilestoneDecay { initial_lr: f64, gamma: f64, milestones: Vec<usize> },
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule::MilestoneDecay { initial_lr: lr, gamma: 0.1, milestones: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let (lr, gamma) = match self {
            Schedule::PerEpochDecay { initial_lr, gamma } => (*initial_lr, *gamma),
            Schedule::MilestoneDecay { initial_lr, gamma, milestones } => {
                if milestones.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(TensorError::Schedule(format!("milestones {milestones:?} are not strictly increasing")));
                }
                (*initial_lr, *gamma)
            }
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::Schedule(format!("initial_lr {lr} must be positive")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(TensorError::Schedule(format!("gamma {gamma} must lie in (0, 1)")));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        match self {
            Schedule::PerEpochDecay { initial_lr, gamma } => initial_lr * gamma.powi(epoch as i32),
            Schedule::MilestoneDecay { initial_lr, gamma, milestones } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                initial_lr * gamma.powi(passed as i32)
            }
        }
    }
}

/// Plain SGD, `p <- p - lr * g`, for every parameter holding a gradient.
/// Nothing is updated if any gradient is non-finite.
pub fn sgd_step(params: &mut ParamStore, schedule: &Schedule, epoch: usize) -> Result<f64, TensorError> {
    let lr = schedule.lr(epoch);
    for (name, _, grad) in params.values_and_grads_mut() {
        if grad.is_some_and(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGradient(name.to_string()));
        }
    }
    let step = lr as Real;
    for (_, value, grad) in params.values_and_grads_mut() {
        if let Some(g) = grad {
            for (p, d) in value.data_mut().iter_mut().zip(g.data()) {
                *p -= step * d;
            }
        }
    }
    Ok(lr)
}
