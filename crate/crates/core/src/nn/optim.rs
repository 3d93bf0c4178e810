use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics:
/// the first step seeds the momentum buffer with the raw gradient).
pub struct Sgd {
    vars: Vec<Var>,
    buffers: Vec<Option<Tensor>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = vec![None; vars.len()];
        Self {
            vars,
            buffers,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (var, buf) in self.vars.iter().zip(self.buffers.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Detached so the buffer does not keep every step's graph alive.
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor().detach() * self.weight_decay)?)?;
            }
            let update = if self.momentum != 0.0 {
                let next = match buf.take() {
                    Some(b) => ((b * self.momentum)? + g)?,
                    None => g,
                };
                *buf = Some(next.clone());
                next
            } else {
                g
            };
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` to 0 over `total_steps` optimizer steps.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base_lr: 0.01,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 0.01);
        assert!((s.lr(50) - 0.005).abs() < 1e-15);
        assert!(s.lr(100).abs() < 1e-15);
        assert!(s.lr(99) > 0.0);
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        let v = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![v.clone()], 0.9, 0.0);
        // loss = w^2 / 2, grad = w
        let mut w = 1.0f64;
        let mut buf = 0.0f64;
        for i in 0..3 {
            let loss = (v.as_tensor().sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.1).unwrap();
            buf = if i == 0 { w } else { 0.9 * buf + w };
            w -= 0.1 * buf;
        }
        let got = v.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((got - w).abs() < 1e-15);
    }
}
