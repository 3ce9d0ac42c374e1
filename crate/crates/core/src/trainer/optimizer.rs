use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (sgd|adam)")),
        }
    }
}

/// Constant-learning-rate optimizer with per-leaf state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to `leaves` given gradients in the same order.
    pub fn step(&mut self, leaves: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<(), TrainError> {
        if leaves.len() != grads.len() {
            return Err(TrainError::Shape(format!(
                "{} parameter leaves but {} gradients",
                leaves.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in leaves.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(TrainError::Shape(format!(
                    "leaf {i}: {} parameters but {} gradient entries",
                    p.numel(),
                    g.len()
                )));
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in leaves.into_iter().zip(grads) {
                    p.data_mut()
                        .iter_mut()
                        .zip(g)
                        .for_each(|(w, d)| *w -= self.lr * d);
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (((p, g), m), v) in leaves
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for (((w, &d), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * d;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_unit_rate_on_own_gradient_zeroes() {
        let mut p = Tensor::row_vector(vec![1.5, -2.0, 0.25]);
        let g = vec![p.data().to_vec()];
        Optimizer::new(OptimizerKind::Sgd, 1.0)
            .step(vec![&mut p], &g)
            .unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Tensor::row_vector(vec![0.3, -0.7]);
            let before = p.clone();
            let mut opt = Optimizer::new(kind, 0.1);
            for _ in 0..3 {
                opt.step(vec![&mut p], &[vec![0.0, 0.0]]).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn first_adam_step_is_lr() {
        let lr = 0.01;
        let mut p = Tensor::row_vector(vec![0.0, 1.0]);
        Optimizer::new(OptimizerKind::Adam, lr)
            .step(vec![&mut p], &[vec![1.0, 1.0]])
            .unwrap();
        let expected = -lr * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::row_vector(vec![0.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        assert!(opt.step(vec![&mut p], &[vec![1.0]]).is_err());
        assert!(opt.step(vec![&mut p], &[]).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
