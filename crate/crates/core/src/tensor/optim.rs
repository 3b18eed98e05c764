//! Bias-corrected Adam.

use super::Parameter;
use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One optimizer step over a parameter set. Every parameter must carry a
/// gradient from a completed backward pass; gradients are consumed by the
/// update, so a second call without a fresh backward is a state error.
pub fn adam_step<F: Element>(params: &mut [&mut Parameter<F>], cfg: &AdamConfig) -> Result<()> {
    for p in params.iter() {
        if p.tensor.grad.is_none() {
            return Err(Error::State(
                "adam_step: parameter has no gradient; run backward first".into(),
            ));
        }
    }
    let lr = F::from_f64(cfg.learning_rate);
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let eps = F::from_f64(cfg.eps);
    for p in params.iter_mut() {
        let grad = p.tensor.grad.take().unwrap();
        p.step_count += 1;
        let t = p.step_count as i32;
        let corr1 = F::one() - b1.powi(t);
        let corr2 = F::one() - b2.powi(t);
        for ((w, &g), (m, v)) in p
            .tensor
            .data
            .iter_mut()
            .zip(&grad)
            .zip(p.adam_m.iter_mut().zip(p.adam_v.iter_mut()))
        {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
