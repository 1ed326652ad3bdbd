use crate::autodiff::ParamRegistry;
use crate::error::{Error, Result};

/// Floor under the AdaGrad square root.
pub const ADAGRAD_FLOOR: f64 = 1e-12;

/// Diagonal AdaGrad: `G += g²; θ −= ρ g / √G`. Elements with zero gradient
/// are left alone. Fails before touching anything if a gradient is NaN.
pub fn adagrad_step(reg: &mut ParamRegistry, lr: f64) -> Result<()> {
    if let Some(p) = reg.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
    }
    for p in reg.iter_mut() {
        let values = p.value.data_mut();
        for ((v, &g), acc) in values.iter_mut().zip(&p.grad).zip(p.accum.iter_mut()) {
            if g == 0.0 {
                continue;
            }
            *acc += g * g;
            *v -= lr * g / acc.max(ADAGRAD_FLOOR).sqrt();
        }
    }
    Ok(())
}

/// `shadow = decay · shadow + (1 − decay) · θ` for every element.
pub fn ema_update(reg: &mut ParamRegistry, decay: f64) {
    for p in reg.iter_mut() {
        for (s, &v) in p.shadow.iter_mut().zip(p.value.data()) {
            *s = decay * *s + (1.0 - decay) * v;
        }
    }
}

/// Decay used at optimiser step `step` (0-based): the configured rate,
/// capped by `(1 + step) / (10 + step)` so early shadows track the weights.
pub fn warmup_decay(decay: f64, step: usize) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_gradients(reg: &mut ParamRegistry, max_norm: f64) -> f64 {
    let norm = reg.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in reg.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
