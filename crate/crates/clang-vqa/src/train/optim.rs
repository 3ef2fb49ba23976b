//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamRef;
use crate::error::{Error, Result};

/// Constants echoed into every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;

/// One optimizer owns one parameter list; moments are aligned by index, so
/// the list must be the same on every step.
pub struct AdamW {
    pub info: OptimizerInfo,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, params: &[ParamRef<f64>]) -> AdamW {
        AdamW {
            info: OptimizerInfo {
                lr,
                beta1: BETA1,
                beta2: BETA2,
                eps: EPS,
                weight_decay: WEIGHT_DECAY,
            },
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.borrow().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.borrow().len()]).collect(),
        }
    }

    /// Apply accumulated gradients and clear them. Decay is decoupled:
    /// it scales the weights directly instead of entering the moments.
    pub fn step(&mut self, params: &[ParamRef<f64>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, step got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.info.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.info.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let mut tensor = p.borrow_mut();
            if tensor.len() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "parameter {i} changed size under the optimizer"
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..tensor.len() {
                let g = tensor.grad[j];
                m[j] = self.info.beta1 * m[j] + (1.0 - self.info.beta1) * g;
                v[j] = self.info.beta2 * v[j] + (1.0 - self.info.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.info.eps);
                tensor.data[j] -= self.info.lr * (update + self.info.weight_decay * tensor.data[j]);
            }
            tensor.zero_grad();
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param;

    #[test]
    fn quadratic_bowl_converges_to_its_minimum() {
        let p = param(1, 2, vec![5.0, -4.0]);
        let mut opt = AdamW::new(0.05, std::slice::from_ref(&p));
        for _ in 0..2000 {
            {
                let mut t = p.borrow_mut();
                let g: Vec<f64> = t.data.iter().map(|&x| 2.0 * (x - 3.0)).collect();
                t.grad.copy_from_slice(&g);
            }
            opt.step(std::slice::from_ref(&p)).unwrap();
        }
        // wd=0.01 biases the fixed point slightly toward the origin.
        for &x in &p.borrow().data {
            assert!((x - 3.0).abs() < 0.1, "settled at {x}");
        }
    }

    #[test]
    fn decay_is_decoupled_from_the_moments() {
        let p = param(1, 1, vec![2.0]);
        let mut opt = AdamW::new(0.1, std::slice::from_ref(&p));
        // Zero gradient: the adaptive update vanishes, decay alone acts.
        opt.step(std::slice::from_ref(&p)).unwrap();
        let got = p.borrow().data[0];
        assert!((got - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn gradients_are_cleared_by_the_step() {
        let p = param(1, 1, vec![1.0]);
        let mut opt = AdamW::new(0.1, std::slice::from_ref(&p));
        p.borrow_mut().grad[0] = 3.0;
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.borrow().grad[0], 0.0);
    }

    #[test]
    fn parameter_list_mismatch_is_a_contract_error() {
        let p = param(1, 1, vec![1.0]);
        let q = param(1, 1, vec![1.0]);
        let mut opt = AdamW::new(0.1, std::slice::from_ref(&p));
        let both = [p, q];
        assert!(matches!(opt.step(&both), Err(Error::Contract(_))));
    }
}
