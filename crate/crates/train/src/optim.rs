//! SGD with momentum, decoupled per-kind learning rates and cosine decay.

use std::collections::BTreeMap;

use repq::quant::STEP_FLOOR;
use repq::{ParamId, ParamKind, ParamStore, Scalar};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    /// Applied to [`ParamKind::Weight`] entries only.
    pub weight_decay: f64,
    /// Learning-rate multiplier for quantizer steps.
    pub steps_lr_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// `v = m v + (g + wd p)`, `p -= lr v`. Steps are kept at or above
    /// [`STEP_FLOOR`].
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) -> Result<()> {
        let m = T::of(self.config.momentum);
        for (id, grad) in grads {
            let kind = store.kind(*id);
            let (rate, wd) = match kind {
                ParamKind::Weight => (lr, self.config.weight_decay),
                ParamKind::Affine => (lr, 0.0),
                ParamKind::Step => (lr * self.config.steps_lr_ratio, 0.0),
                ParamKind::Buffer => continue,
            };
            let (rate, wd) = (T::of(rate), T::of(wd));
            let p = store.get_mut(*id).data_mut();
            let v = self.velocity.entry(*id).or_insert_with(|| vec![T::zero(); p.len()]);
            for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = m * *vi + gi + wd * *pi;
                *pi -= rate * *vi;
            }
            if kind == ParamKind::Step {
                let floor = T::of(STEP_FLOOR);
                p.iter_mut().for_each(|s| *s = s.max(floor));
            }
            store.get(*id).ensure_finite("sgd")?;
        }
        Ok(())
    }
}

/// `base * (1 + cos(pi t / total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}
