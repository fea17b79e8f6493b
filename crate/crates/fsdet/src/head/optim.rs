use super::{Heads, ParamTensors};
use crate::error::{Error, Result};

/// Plain momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamTensors,
}

impl OptimState {
    pub fn new(heads: &Heads, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(OptimState {
            lr,
            momentum,
            weight_decay,
            velocity: ParamTensors::zeros_like(heads),
        })
    }
}

/// One update: `g' = g + wd * p; v = mu * v + g'; p -= lr * v`.
///
/// Entries whose `trainable` mask is false are skipped entirely: neither the
/// parameter nor its velocity changes, so weight decay does not touch them.
pub fn sgd_step(
    heads: &mut Heads,
    grads: &ParamTensors,
    opt: &mut OptimState,
    trainable: Option<&ParamTensors<bool>>,
) {
    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    let params = heads.tensors_mut();
    let grads = grads.tensors();
    let vels = opt.velocity.tensors_mut();
    let masks = trainable.map(|m| m.tensors());
    for (t, ((p, g), v)) in params.into_iter().zip(grads).zip(vels).enumerate() {
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        assert_eq!(p.len(), v.len(), "velocity shape mismatch");
        let mask = masks.map(|m| m[t]);
        for i in 0..p.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let step = g[i] + wd * p[i];
            v[i] = mu * v[i] + step;
            p[i] -= lr * v[i];
        }
    }
}
