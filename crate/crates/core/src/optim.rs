//! SGD with momentum and decoupled step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::model::{Classifier, Grads};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Grads<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Classifier<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.zero_grads(),
        }
    }

    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
    pub fn step(&mut self, model: &mut Classifier<T>, grads: &Grads<T>, lr: f64) {
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        let lr = T::from_f64(lr);
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((theta, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *theta;
                *theta -= lr * *vi;
            }
        }
    }
}

/// Multiplicative step decay: `lr0 · factor^(number of milestones ≤ epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<u32>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: u32) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
        self.base_lr * self.factor.powi(passed)
    }

    pub fn is_milestone(&self, epoch: u32) -> bool {
        self.milestones.contains(&epoch)
    }
}

/// Place milestones at the same fractional positions of a shorter run.
pub fn rescale_milestones(milestones: &[u32], from_epochs: u32, to_epochs: u32) -> Vec<u32> {
    milestones
        .iter()
        .map(|&m| ((m as f64) * to_epochs as f64 / from_epochs as f64).round() as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_by_five() {
        let s = StepSchedule {
            base_lr: 0.1,
            milestones: vec![9, 18, 24],
            factor: 0.2,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(8), 0.1);
        assert!((s.lr_at(9) - 0.02).abs() < 1e-15);
        assert!((s.lr_at(29) - 0.1 * 0.2f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn desk_milestones_match_full_schedule_fractions() {
        assert_eq!(rescale_milestones(&[60, 120, 160], 200, 30), vec![9, 18, 24]);
    }
}
