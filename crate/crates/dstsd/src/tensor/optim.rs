use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { lr: f64, momentum: f64 },
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    /// AdamW with standard published defaults at the given learning rate.
    pub fn adamw(lr: f64) -> Self {
        OptimizerKind::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment buffers for either update rule.
pub struct OptimizerState {
    pub kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = match kind {
            OptimizerKind::AdamW { .. } => {
                params.iter().map(|p| vec![0.0; p.numel()]).collect()
            }
            _ => Vec::new(),
        };
        OptimizerState {
            kind,
            m,
            v,
            step_count: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(
                "optimizer_step: param/grad count mismatch".into(),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape != g.shape {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer_step: param {:?} vs grad {:?}",
                    p.shape, g.shape
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numerical("non-finite gradient entries".into()));
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for i in 0..p.numel() {
                        m[i] = momentum * m[i] + g.data[i];
                        p.data[i] -= lr * m[i];
                    }
                }
            }
            OptimizerKind::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let bc1 = 1.0 - beta1.powi(self.step_count as i32);
                let bc2 = 1.0 - beta2.powi(self.step_count as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for i in 0..p.numel() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g.data[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g.data[i] * g.data[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p.data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p.data[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scale all gradients by max_norm/norm when the global L2 norm exceeds
/// max_norm; otherwise leave them unchanged.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) {
    debug_assert!(max_norm > 0.0);
    let norm: f64 = grads
        .iter()
        .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            for x in &mut g.data {
                *x *= scale;
            }
        }
    }
}
