use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

/// Plain Adam: candle's AdamW with the decoupled decay switched off.
pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, beta1, beta2, eps: 1e-8, weight_decay: 0.0 })?)
}

/// SGD with heavy-ball momentum and L2 weight decay, PyTorch semantics:
/// `g += wd * w; buf = momentum * buf + g; w -= lr * buf`.
pub struct SgdMomentum {
    vars: Vec<(Var, Option<Tensor>)>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { vars: vars.into_iter().map(|v| (v, None)).collect(), lr, momentum, weight_decay }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, buf) in self.vars.iter_mut() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients of variable-bearing ops carry graph edges; the buffer
            // must not, or every step would retain all earlier graphs.
            let g = if self.weight_decay != 0.0 { (g + (var.as_tensor() * self.weight_decay)?)? } else { g.clone() };
            let next = match buf.take() {
                Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + g)?,
                _ => g,
            }
            .detach();
            var.set(&(var.as_tensor() - (&next * self.lr)?)?)?;
            *buf = Some(next);
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Cosine-decayed learning rate with optional linear warmup, evaluated at a
/// fractional epoch. Returns `peak` at the end of warmup and 0 at `total`.
pub fn cosine_lr(peak: f64, epoch: f64, total_epochs: f64, warmup_epochs: f64) -> f64 {
    if warmup_epochs > 0.0 && epoch < warmup_epochs {
        return peak * epoch / warmup_epochs;
    }
    let span = (total_epochs - warmup_epochs).max(f64::EPSILON);
    let progress = ((epoch - warmup_epochs) / span).clamp(0.0, 1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn momentum_sgd_matches_hand_recurrence() -> Result<()> {
        let w = Var::new(&[1.0f32, -2.0], &Device::Cpu)?;
        let mut opt = SgdMomentum::new(vec![w.clone()], 0.1, 0.9, 0.01);
        let (mut ref_w, mut buf) = ([1.0f64, -2.0], [0.0f64, 0.0]);
        for step in 0..3 {
            // loss = sum(w^2) -> grad = 2w
            let loss = w.as_tensor().sqr()?.sum_all()?;
            opt.backward_step(&loss)?;
            for i in 0..2 {
                let g = 2.0 * ref_w[i] + 0.01 * ref_w[i];
                buf[i] = if step == 0 { g } else { 0.9 * buf[i] + g };
                ref_w[i] -= 0.1 * buf[i];
            }
        }
        let got = w.as_tensor().to_vec1::<f32>()?;
        for i in 0..2 {
            assert!((got[i] as f64 - ref_w[i]).abs() < 1e-5);
        }
        Ok(())
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0.2, 0.0, 100.0, 0.0) - 0.2).abs() < 1e-12);
        assert!(cosine_lr(0.2, 100.0, 100.0, 0.0).abs() < 1e-12);
        assert!((cosine_lr(0.2, 5.0, 100.0, 10.0) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(0.2, 10.0, 100.0, 10.0) - 0.2).abs() < 1e-12);
    }
}
