use serde::{Deserialize, Serialize};

use super::Param;

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    /// Advances the step counter; call once per optimisation step before
    /// [`update`](Self::update)-ing the parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&self, p: &mut Param) {
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
            p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = p.m[i] / c1;
            let vhat = p.v[i] / c2;
            p.value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::zeros(&[2]);
        p.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(0.01);
        opt.begin_step();
        opt.update(&mut p);
        assert!((p.value[0] + 0.01).abs() < 1e-9);
        assert!((p.value[1] - 0.01).abs() < 1e-9);
    }
}
