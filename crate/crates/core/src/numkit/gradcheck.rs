use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Above this many parameters a seeded random subset of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Smallest denominator in the relative error.
    pub denominator_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 4096,
            seed: 0,
            denominator_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Compares an analytic gradient against central finite differences of
/// `loss_fn`. Relative error per coordinate is
/// `|a − n| / max(|a|, |n|, floor)` with `floor` 1e-8 by default.
pub fn grad_check<S, F>(
    state: &S,
    analytic: &[f64],
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    S: Parameters + Clone,
    F: Fn(&S) -> Result<f64>,
{
    if !(cfg.step > 1e-7 && cfg.step < 1e-3) {
        return Err(Error::Input(format!(
            "finite-difference step {} outside (1e-7, 1e-3)",
            cfg.step
        )));
    }
    let base = state.to_flat();
    if analytic.len() != base.len() {
        return Err(Error::Config(format!(
            "analytic gradient has {} entries, state has {} parameters",
            analytic.len(),
            base.len()
        )));
    }
    let coords: Vec<usize> = if base.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked = sample(&mut rng, base.len(), cfg.max_coords).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..base.len()).collect()
    };

    let mut probe = state.clone();
    let mut flat = base.clone();
    let eval = |flat: &[f64], probe: &mut S| -> Result<f64> {
        probe.load_flat(flat)?;
        let v = loss_fn(probe)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: coords.len(),
    };
    for &i in &coords {
        flat[i] = base[i] + cfg.step;
        let plus = eval(&flat, &mut probe)?;
        flat[i] = base[i] - cfg.step;
        let minus = eval(&flat, &mut probe)?;
        flat[i] = base[i];
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.denominator_floor);
        if err > report.max_relative_error || report.worst_index.is_none() {
            report.max_relative_error = err;
            report.worst_index = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
