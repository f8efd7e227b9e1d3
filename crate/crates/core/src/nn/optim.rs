use serde::{Deserialize, Serialize};

use super::param::Param;

/// Linear warmup from 0 followed by cosine decay to 0, evaluated per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Self {
        Self { base_lr, warmup_steps: warmup_epochs * steps_per_epoch, total_steps: epochs * steps_per_epoch }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// SGD with Nesterov momentum in the PyTorch formulation:
/// `g += wd * w; v = mu * v + g; w -= lr * (g + mu * v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step(&self, param: &mut Param, lr: f64) {
        let wd = if param.decay { self.weight_decay } else { 0.0 };
        for i in 0..param.value.len() {
            let g = param.grad[i] + wd * param.value[i];
            let v = self.momentum * param.momentum[i] + g;
            param.momentum[i] = v;
            param.value[i] -= lr * (g + self.momentum * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_reaches_base_at_fifth_epoch() {
        let s = LrSchedule::new(0.05, 5, 300, 391);
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(5 * 391) - 0.05).abs() < 1e-15);
        let mid = s.at(5 * 391 / 2);
        assert!((mid - 0.05 * (5 * 391 / 2) as f64 / (5.0 * 391.0)).abs() < 1e-15);
        assert!(s.at(300 * 391 - 1) < 1e-8);
        assert_eq!(s.at(300 * 391), 0.0);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Param::new(vec![0.3, -1.2, 4.0], true);
        let opt = Sgd { momentum: 0.9, weight_decay: 0.0 };
        for _ in 0..5 {
            opt.step(&mut p, 0.05);
        }
        assert_eq!(p.value, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn nesterov_two_steps() {
        let mut p = Param::new(vec![1.0], false);
        let opt = Sgd { momentum: 0.9, weight_decay: 0.1 };
        p.grad[0] = 0.5;
        opt.step(&mut p, 0.1);
        // no decay on this param: v = 0.5, w = 1 - 0.1 * (0.5 + 0.45)
        assert!((p.value[0] - 0.905).abs() < 1e-15);
        opt.step(&mut p, 0.1);
        // v = 0.45 + 0.5 = 0.95, w -= 0.1 * (0.5 + 0.855)
        assert!((p.value[0] - (0.905 - 0.1355)).abs() < 1e-15);
    }
}
