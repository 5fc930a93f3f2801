//! Dense linear algebra, layers with explicit backward passes, SGD and a
//! finite-difference gradient checker.

mod gradcheck;
mod layers;
mod matrix;
mod sgd;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{
    Affine, Layer, LayerGrads, LayerStack, StackGrads, Standardize, Tape, STANDARDIZE_EPSILON,
    STANDARDIZE_MOMENTUM,
};
pub use matrix::{cosine, dot, l2_distance, l2_norm, normalized, DenseMatrix};
pub use sgd::{sgd_step, ParamGroup, SgdConfig, SgdTarget};

use crate::error::{Error, Result};

/// Trainable values viewed as one flat vector, in a fixed order.
pub trait Parameters {
    fn num_params(&self) -> usize;

    fn write_params(&self, out: &mut Vec<f64>);

    /// Overwrites parameters from the front of `flat`, returning how many
    /// values were consumed.
    fn read_params(&mut self, flat: &[f64]) -> Result<usize>;

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let used = self.read_params(flat)?;
        if used != flat.len() {
            return Err(Error::Config(format!(
                "flat vector has {} values, parameters need {used}",
                flat.len()
            )));
        }
        Ok(())
    }
}

impl Parameters for DenseMatrix {
    fn num_params(&self) -> usize {
        self.data().len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.data());
    }

    fn read_params(&mut self, flat: &[f64]) -> Result<usize> {
        let n = self.data().len();
        let src = flat
            .get(..n)
            .ok_or_else(|| Error::Config("flat parameter vector too short".into()))?;
        self.data_mut().copy_from_slice(src);
        Ok(n)
    }
}
