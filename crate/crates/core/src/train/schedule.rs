use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Cosine annealing with warm restarts, stepped once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosineRestarts {
    /// Length of the first period, in epochs.
    pub period: usize,
    /// Growth factor of each following period.
    pub mult: usize,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for CosineRestarts {
    fn default() -> Self {
        Self {
            period: 10,
            mult: 2,
            lr_max: 1e-4,
            lr_min: 1e-6,
        }
    }
}

impl CosineRestarts {
    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_warm_restart_lr(epoch, self.period, self.mult, self.lr_max, self.lr_min)
    }
}

/// Position of `epoch` inside its period: `(epochs since restart, period length)`.
fn locate(epoch: usize, period: usize, mult: usize) -> (usize, usize) {
    let (mut start, mut len) = (0, period.max(1));
    while epoch >= start + len {
        start += len;
        len *= mult.max(1);
    }
    (epoch - start, len)
}

/// Learning rate at a 0-based `epoch`.
pub fn cosine_warm_restart_lr(epoch: usize, period: usize, mult: usize, lr_max: f64, lr_min: f64) -> f64 {
    let (t, len) = locate(epoch, period, mult);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t as f64 / len as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restarts_follow_geometric_sums() {
        let s = CosineRestarts::default();
        // 0, 10, 10 + 20, 10 + 20 + 40
        let restarts: Vec<usize> = (1..200).filter(|&e| s.lr(e) > s.lr(e - 1)).collect();
        assert_eq!(&restarts[..3], &[10, 30, 70]);
        for e in [0, 10, 30, 70, 150] {
            assert_eq!(s.lr(e), s.lr_max);
        }
    }

    #[test]
    fn midpoint_is_average() {
        let lr = cosine_warm_restart_lr(5, 10, 2, 1e-4, 1e-6);
        assert!((lr - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
        let lr = cosine_warm_restart_lr(20, 10, 2, 1e-4, 1e-6);
        assert!((lr - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn constant_periods_without_growth() {
        assert_eq!(cosine_warm_restart_lr(12, 4, 1, 1.0, 0.0), 1.0);
        assert!((0..100).all(|e| cosine_warm_restart_lr(e, 3, 1, 1.0, 0.0) >= 0.0));
    }
}
