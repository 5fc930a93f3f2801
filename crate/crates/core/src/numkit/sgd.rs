use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// The video encoder.
    Backbone,
    /// Projection modules and classification heads.
    Heads,
}

/// Plain SGD with a step-decayed learning rate per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr_backbone: f64,
    pub base_lr_heads: f64,
    pub decay_gamma: f64,
    pub decay_every_epochs: usize,
}

impl SgdConfig {
    /// Rates used for full-size backbones: 1e-4 backbone, 2e-2 heads,
    /// ×0.01 every 2 epochs.
    pub fn full_scale() -> Self {
        Self {
            base_lr_backbone: 1e-4,
            base_lr_heads: 2e-2,
            decay_gamma: 0.01,
            decay_every_epochs: 2,
        }
    }

    /// Rates tuned for the small from-scratch encoders used at desk scale.
    pub fn desk_scale() -> Self {
        Self {
            base_lr_backbone: 0.05,
            base_lr_heads: 0.1,
            decay_gamma: 0.5,
            decay_every_epochs: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = |v: f64| v.is_finite() && v >= 0.0;
        if !rates_ok(self.base_lr_backbone) || !rates_ok(self.base_lr_heads) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::Config("decay_gamma must lie in (0, 1]".into()));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::Config("decay_every_epochs must be positive".into()));
        }
        Ok(())
    }

    /// `base · γ^⌊epoch / k⌋`.
    pub fn lr(&self, epoch: usize, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.base_lr_backbone,
            ParamGroup::Heads => self.base_lr_heads,
        };
        let decays = (epoch / self.decay_every_epochs) as i32;
        base * self.decay_gamma.powi(decays)
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

/// A model that SGD can update group by group.
pub trait SgdTarget {
    type Grads;

    fn grads_are_finite(grads: &Self::Grads) -> bool;

    fn apply_gradients(&mut self, grads: &Self::Grads, lr_backbone: f64, lr_heads: f64) -> Result<()>;
}

/// One SGD update at the learning rates of `epoch`. Non-finite gradients are
/// rejected before anything is modified.
pub fn sgd_step<T: SgdTarget>(state: &mut T, grads: &T::Grads, epoch: usize, cfg: &SgdConfig) -> Result<()> {
    if !T::grads_are_finite(grads) {
        return Err(Error::Numeric("non-finite gradient, step rejected".into()));
    }
    state.apply_gradients(
        grads,
        cfg.lr(epoch, ParamGroup::Backbone),
        cfg.lr(epoch, ParamGroup::Heads),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_rates() {
        let cfg = SgdConfig::full_scale();
        assert_eq!(cfg.lr(0, ParamGroup::Backbone), 1e-4);
        assert_eq!(cfg.lr(0, ParamGroup::Heads), 2e-2);
        assert_eq!(cfg.lr(1, ParamGroup::Backbone), 1e-4);
        // 1e-4 · 0.01
        assert!((cfg.lr(2, ParamGroup::Backbone) - 1e-6).abs() < 1e-21);
        assert!((cfg.lr(4, ParamGroup::Backbone) - 1e-8).abs() < 1e-23);
    }

    #[test]
    fn schedule_is_non_increasing_and_exact() {
        let cfg = SgdConfig {
            base_lr_backbone: 0.3,
            base_lr_heads: 0.7,
            decay_gamma: 0.5,
            decay_every_epochs: 3,
        };
        let mut prev = f64::INFINITY;
        for e in 0..20 {
            let lr = cfg.lr(e, ParamGroup::Heads);
            assert!(lr <= prev);
            assert_eq!(lr, 0.7 * 0.5f64.powi((e / 3) as i32));
            prev = lr;
        }
    }

    #[test]
    fn validation() {
        assert!(SgdConfig::desk_scale().validate().is_ok());
        let mut bad = SgdConfig::desk_scale();
        bad.decay_gamma = 0.0;
        assert!(bad.validate().is_err());
        bad = SgdConfig::desk_scale();
        bad.decay_every_epochs = 0;
        assert!(bad.validate().is_err());
    }
}
