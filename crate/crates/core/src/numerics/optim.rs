//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Scalar};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState<T> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamWState<T> {
    /// Zeroed accumulators shaped like `params`.
    pub fn new(params: &ParamSet<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            lr,
            weight_decay,
        }
    }

    /// One update: `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::shape("adamw_step", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = T::of(1.0 - self.beta1.powf(t));
        let bc2 = T::of(1.0 - self.beta2.powf(t));
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, wd, eps) = (T::of(self.lr), T::of(self.weight_decay), T::of(self.eps));
        let one = T::one();
        for (slot, p) in params.tensors_mut().iter_mut().enumerate() {
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            let g = &grads[slot];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_epochs`, then cosine decay that
/// reaches 0 at `total_epochs`.
pub fn lr_schedule(base_lr: f64, epoch: usize, total_epochs: usize, warmup_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    if epoch < warmup_epochs {
        return base_lr * epoch as f64 / warmup_epochs as f64;
    }
    let span = (total_epochs - warmup_epochs) as f64;
    let progress = (epoch - warmup_epochs) as f64 / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Default warmup: 10% of the epoch budget.
pub fn default_warmup(total_epochs: usize) -> usize {
    total_epochs / 10
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn params(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = params(&[1.0, -2.0]);
        let mut st = AdamWState::new(&p, 1e-3, 0.0);
        st.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.get(0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let g = [0.5, -3.0];
        let w0 = [0.2, 0.4];
        let lr = 1e-2;
        let mut p = params(&w0);
        let mut st = AdamWState::new(&p, lr, 0.0);
        st.step(&mut p, &[g.to_vec()]).unwrap();
        for j in 0..2 {
            // m_hat = g, v_hat = g^2 at t = 1
            let expect = w0[j] - lr * g[j] / (g[j].abs() + EPSILON);
            assert!((p.get(0).data()[j] - expect).abs() < 1e-15);
            assert!((w0[j] - p.get(0).data()[j]).signum() == g[j].signum());
        }
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = params(&[2.0, -1.0]);
        let mut st = AdamWState::new(&p, 0.1, 0.5);
        st.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert!((p.get(0).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!((p.get(0).data()[1] + 1.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = params(&[1.0]);
        let mut st = AdamWState::new(&p, 0.1, 0.0);
        assert!(st.step(&mut p, &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn schedule_shape() {
        let base = 1.5e-4;
        assert_eq!(lr_schedule(base, 10, 100, 10), base);
        assert_eq!(lr_schedule(base, 0, 100, 10), 0.0);
        let last = lr_schedule(base, 99, 100, 10);
        let step = base * (1.0 - (std::f64::consts::PI / 90.0).cos());
        assert!(last <= step + 1e-18);
        assert!((lr_schedule(base, 55, 100, 10) - base / 2.0).abs() < 1e-12);
    }
}
