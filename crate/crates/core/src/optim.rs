//! Adam and plain gradient descent over a fixed list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moments and step counts for one parameter list. Each tensor has its own
/// step counter so tensors skipped in an update keep consistent bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub adam: AdamParams,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[&Tensor]) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(config_err("lr", format!("must be finite and >= 0, got {}", lr)));
        }
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            kind,
            lr,
            adam: AdamParams::default(),
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        })
    }

    /// Updates `params[i]` from `grads[i]`; `None` leaves the tensor and its
    /// moments untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(
                "optimizer step",
                format!(
                    "{} params and {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() || p.shape() != self.m[i].shape() {
                return Err(shape_err(
                    "optimizer step",
                    format!("slot {}: param {:?}, grad {:?}", i, p.shape(), g.shape()),
                ));
            }
            match self.kind {
                OptimizerKind::Sgd => sgd_update(p, g, self.lr),
                OptimizerKind::Adam => {
                    self.steps[i] += 1;
                    let AdamParams { beta1, beta2, epsilon } = self.adam;
                    let t = self.steps[i] as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `p <- p - lr * g`.
pub fn sgd_update(p: &mut Tensor, g: &Tensor, lr: f64) {
    for (w, &gj) in p.data_mut().iter_mut().zip(g.data()) {
        *w -= lr * gj;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_on_square() {
        // d/dw w^2 = 2w; one step from 1 with lr 0.1 lands on 0.8
        let mut w = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &[&w]).unwrap();
        let g = Tensor::scalar(2.0 * w.item());
        opt.step(vec![&mut w], &[Some(g)]).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let before = w.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01, &[&w]).unwrap();
        opt.step(vec![&mut w], &[Some(Tensor::from_vec(vec![3.0, -0.2, 1e-3]))]).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        for ((a, b), g) in w.data().iter().zip(before.data()).zip([3.0f64, -0.2, 1e-3]) {
            let expect = b - 0.01 * g / (g.abs() + 1e-8);
            assert!((a - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_matches_scalar_reference_over_steps() {
        let mut w = Tensor::scalar(0.3);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.05, &[&w]).unwrap();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=20 {
            let g = 2.0 * x - 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let gw = Tensor::scalar(2.0 * w.item() - 1.0);
            opt.step(vec![&mut w], &[Some(gw)]).unwrap();
        }
        assert!((w.item() - x).abs() < 1e-14);
    }

    #[test]
    fn skipped_slots_are_untouched() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, &[&a, &b]).unwrap();
        opt.step(vec![&mut a, &mut b], &[Some(Tensor::scalar(1.0)), None]).unwrap();
        assert_eq!(b.item(), 2.0);
        assert_eq!(opt.steps, vec![1, 0]);
        assert_eq!(opt.m[1].item(), 0.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut w = Tensor::from_vec(vec![0.1, 0.2]);
        let before = w.clone();
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = OptimizerState::new(kind, 0.0, &[&w]).unwrap();
            for _ in 0..5 {
                opt.step(vec![&mut w], &[Some(Tensor::from_vec(vec![1.0, -3.0]))]).unwrap();
            }
        }
        assert_eq!(w, before);
    }

    #[test]
    fn mismatches_are_errors() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &[&w]).unwrap();
        assert!(opt.step(vec![&mut w], &[]).is_err());
        assert!(opt.step(vec![&mut w], &[Some(Tensor::zeros(&[2]))]).is_err());
        assert!(OptimizerState::new(OptimizerKind::Sgd, -1.0, &[]).is_err());
    }
}
