use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::Parameters;
use crate::error::{Error, Result};

pub const STANDARDIZE_MOMENTUM: f64 = 0.1;
pub const STANDARDIZE_EPSILON: f64 = 1e-5;

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

/// Identifies one parameter configuration of a stack. Every mutation draws a
/// fresh value so tapes recorded before the mutation are detected as stale.
/// Equality is deliberately ignored when comparing stacks.
#[derive(Clone, Copy, Debug, Default)]
struct Revision(u64);

impl Revision {
    fn fresh() -> Self {
        Revision(NEXT_REVISION.fetch_add(1, Ordering::Relaxed))
    }
}

impl PartialEq for Revision {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// `y = x W + b`, with `W` stored `in_dim × out_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (k, &xk) in x.iter().enumerate() {
            for (o, w) in y.iter_mut().zip(self.weight.row(k)) {
                *o += xk * w;
            }
        }
        y
    }
}

/// Per-feature standardization with learned scale and shift (batch norm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardize {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Standardize {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            momentum: STANDARDIZE_MOMENTUM,
            epsilon: STANDARDIZE_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Affine(Affine),
    Relu { dim: usize },
    Standardize(Standardize),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Affine(a) => a.in_dim(),
            Layer::Relu { dim } => *dim,
            Layer::Standardize(s) => s.dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Affine(a) => a.out_dim(),
            Layer::Relu { dim } => *dim,
            Layer::Standardize(s) => s.dim(),
        }
    }
}

#[derive(Clone, Debug)]
enum Record {
    Affine {
        input: DenseMatrix,
    },
    Relu {
        active: Vec<bool>,
    },
    Standardize {
        normalized: DenseMatrix,
        inv_std: Vec<f64>,
        /// Batch statistics (mean, unbiased variance) when run in training mode.
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    revision: u64,
    records: Vec<Record>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    Affine { weight: DenseMatrix, bias: Vec<f64> },
    Relu,
    Standardize { scale: Vec<f64>, shift: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<LayerGrads>,
}

impl StackGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for g in &self.layers {
            match g {
                LayerGrads::Affine { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias);
                }
                LayerGrads::Relu => {}
                LayerGrads::Standardize { scale, shift } => {
                    out.extend_from_slice(scale);
                    out.extend_from_slice(shift);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| match g {
            LayerGrads::Affine { weight, bias } => {
                weight.is_finite() && bias.iter().all(|v| v.is_finite())
            }
            LayerGrads::Relu => true,
            LayerGrads::Standardize { scale, shift } => {
                scale.iter().chain(shift).all(|v| v.is_finite())
            }
        })
    }

    pub fn max_abs(&self) -> f64 {
        let mut flat = Vec::new();
        self.flatten_into(&mut flat);
        flat.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// An ordered chain of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    layers: Vec<Layer>,
    training: bool,
    #[serde(skip)]
    revision: Revision,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("layer stack must not be empty".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "adjacent layers disagree: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        for layer in &layers {
            if let Layer::Standardize(s) = layer {
                if s.running_var.iter().any(|v| v.is_nan() || *v <= 0.0) {
                    return Err(Error::Config("running variance must be positive".into()));
                }
                let d = s.dim();
                if s.running_mean.len() != d || s.running_var.len() != d || s.shift.len() != d {
                    return Err(Error::Config("standardize vectors disagree in length".into()));
                }
            }
            if let Layer::Affine(a) = layer {
                if a.bias.len() != a.out_dim() {
                    return Err(Error::Config("affine bias length mismatch".into()));
                }
            }
        }
        Ok(Self {
            layers,
            training: true,
            revision: Revision::fresh(),
        })
    }

    /// Re-checks a stack built outside [`LayerStack::new`] (for example by
    /// deserialization) and gives it a fresh revision.
    pub fn revalidated(self) -> Result<Self> {
        let training = self.training;
        let mut stack = Self::new(self.layers)?;
        stack.training = training;
        Ok(stack)
    }

    /// `dims[0] → dims[1] → …`, each affine followed by a ReLU.
    pub fn relu_mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least two dims".into()));
        }
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(Layer::Affine(Affine::glorot(w[0], w[1], rng)));
            layers.push(Layer::Relu { dim: w[1] });
        }
        Self::new(layers)
    }

    /// `depth` standardize+affine pairs, ReLU between consecutive pairs.
    pub fn projection<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("projection depth must be at least 1".into()));
        }
        let mut layers = Vec::new();
        let mut d = in_dim;
        for i in 0..depth {
            if i > 0 {
                layers.push(Layer::Relu { dim: d });
            }
            layers.push(Layer::Standardize(Standardize::new(d)));
            layers.push(Layer::Affine(Affine::glorot(d, out_dim, rng)));
            d = out_dim;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.revision = Revision::fresh();
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Runs the stack on a batch (one sample per row).
    ///
    /// The stack is not mutated: running statistics gathered in training mode
    /// are kept on the tape and applied by [`LayerStack::commit_running_stats`].
    pub fn forward(&self, batch: &DenseMatrix) -> Result<(DenseMatrix, Tape)> {
        if batch.cols() != self.in_dim() {
            return Err(Error::Config(format!(
                "batch has {} columns, stack expects {}",
                batch.cols(),
                self.in_dim()
            )));
        }
        let mut x = batch.clone();
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Affine(a) => {
                    let y = a.apply(&x)?;
                    records.push(Record::Affine { input: x });
                    x = y;
                }
                Layer::Relu { .. } => {
                    let active: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                    for (v, &on) in x.data_mut().iter_mut().zip(&active) {
                        if !on {
                            *v = 0.0;
                        }
                    }
                    records.push(Record::Relu { active });
                }
                Layer::Standardize(s) => {
                    let (y, rec) = standardize_forward(s, &x, self.training)?;
                    records.push(rec);
                    x = y;
                }
            }
        }
        Ok((
            x,
            Tape {
                revision: self.revision.0,
                records,
            },
        ))
    }

    /// Eval-style convenience: forward without keeping the tape.
    pub fn apply(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(batch).map(|(y, _)| y)
    }

    /// Exact gradients of a scalar loss given `grad_output = ∂L/∂output`.
    pub fn backward(&self, tape: &Tape, grad_output: &DenseMatrix) -> Result<(DenseMatrix, StackGrads)> {
        if tape.revision != self.revision.0 || tape.records.len() != self.layers.len() {
            return Err(Error::Usage(
                "tape was not produced by the current parameters of this stack".into(),
            ));
        }
        let mut grad = grad_output.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, record) in self.layers.iter().zip(&tape.records).rev() {
            match (layer, record) {
                (Layer::Affine(a), Record::Affine { input }) => {
                    let weight = input.t_matmul(&grad)?;
                    let bias = grad.column_sums();
                    grad = grad.matmul_t(&a.weight)?;
                    grads.push(LayerGrads::Affine { weight, bias });
                }
                (Layer::Relu { .. }, Record::Relu { active }) => {
                    for (g, &on) in grad.data_mut().iter_mut().zip(active) {
                        if !on {
                            *g = 0.0;
                        }
                    }
                    grads.push(LayerGrads::Relu);
                }
                (
                    Layer::Standardize(s),
                    Record::Standardize {
                        normalized,
                        inv_std,
                        batch_stats,
                    },
                ) => {
                    let (gx, gscale, gshift) =
                        standardize_backward(s, normalized, inv_std, batch_stats.is_some(), &grad);
                    grad = gx;
                    grads.push(LayerGrads::Standardize {
                        scale: gscale,
                        shift: gshift,
                    });
                }
                _ => return Err(Error::Usage("tape does not match stack layout".into())),
            }
        }
        grads.reverse();
        Ok((grad, StackGrads { layers: grads }))
    }

    /// Folds the batch statistics of a training-mode tape into the running
    /// averages.
    pub fn commit_running_stats(&mut self, tape: &Tape) -> Result<()> {
        if tape.revision != self.revision.0 {
            return Err(Error::Usage("stale tape".into()));
        }
        for (layer, record) in self.layers.iter_mut().zip(&tape.records) {
            if let (
                Layer::Standardize(s),
                Record::Standardize {
                    batch_stats: Some((mean, var)),
                    ..
                },
            ) = (layer, record)
            {
                let m = s.momentum;
                for i in 0..s.dim() {
                    s.running_mean[i] = (1.0 - m) * s.running_mean[i] + m * mean[i];
                    s.running_var[i] = (1.0 - m) * s.running_var[i] + m * var[i];
                }
            }
        }
        self.revision = Revision::fresh();
        Ok(())
    }

    /// `p ← p − lr·g` for every parameter.
    pub fn apply_update(&mut self, grads: &StackGrads, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Config("gradient layout does not match stack".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            match (layer, g) {
                (Layer::Affine(a), LayerGrads::Affine { weight, bias }) => {
                    if weight.shape() != a.weight.shape() {
                        return Err(Error::Config("weight gradient shape mismatch".into()));
                    }
                    for (p, g) in a.weight.data_mut().iter_mut().zip(weight.data()) {
                        *p -= lr * g;
                    }
                    for (p, g) in a.bias.iter_mut().zip(bias) {
                        *p -= lr * g;
                    }
                }
                (Layer::Relu { .. }, LayerGrads::Relu) => {}
                (Layer::Standardize(s), LayerGrads::Standardize { scale, shift }) => {
                    for (p, g) in s.scale.iter_mut().zip(scale) {
                        *p -= lr * g;
                    }
                    for (p, g) in s.shift.iter_mut().zip(shift) {
                        *p -= lr * g;
                    }
                }
                _ => return Err(Error::Config("gradient layout does not match stack".into())),
            }
        }
        self.revision = Revision::fresh();
        Ok(())
    }

    pub fn zero_grads(&self) -> StackGrads {
        StackGrads {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Affine(a) => LayerGrads::Affine {
                        weight: DenseMatrix::zeros(a.in_dim(), a.out_dim()),
                        bias: vec![0.0; a.out_dim()],
                    },
                    Layer::Relu { .. } => LayerGrads::Relu,
                    Layer::Standardize(s) => LayerGrads::Standardize {
                        scale: vec![0.0; s.dim()],
                        shift: vec![0.0; s.dim()],
                    },
                })
                .collect(),
        }
    }
}

impl Parameters for LayerStack {
    fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Affine(a) => a.weight.data().len() + a.bias.len(),
                Layer::Relu { .. } => 0,
                Layer::Standardize(s) => 2 * s.dim(),
            })
            .sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            match l {
                Layer::Affine(a) => {
                    out.extend_from_slice(a.weight.data());
                    out.extend_from_slice(&a.bias);
                }
                Layer::Relu { .. } => {}
                Layer::Standardize(s) => {
                    out.extend_from_slice(&s.scale);
                    out.extend_from_slice(&s.shift);
                }
            }
        }
    }

    fn read_params(&mut self, flat: &[f64]) -> Result<usize> {
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| -> Result<()> {
            let end = pos + dst.len();
            let src = flat
                .get(pos..end)
                .ok_or_else(|| Error::Config("flat parameter vector too short".into()))?;
            dst.copy_from_slice(src);
            pos = end;
            Ok(())
        };
        for l in &mut self.layers {
            match l {
                Layer::Affine(a) => {
                    take(a.weight.data_mut())?;
                    take(&mut a.bias)?;
                }
                Layer::Relu { .. } => {}
                Layer::Standardize(s) => {
                    take(&mut s.scale)?;
                    take(&mut s.shift)?;
                }
            }
        }
        self.revision = Revision::fresh();
        Ok(pos)
    }
}

fn standardize_forward(
    s: &Standardize,
    x: &DenseMatrix,
    training: bool,
) -> Result<(DenseMatrix, Record)> {
    let n = x.rows();
    let d = s.dim();
    let (mean, biased_var, batch_stats) = if training {
        if n == 0 {
            return Err(Error::Input("standardize needs a non-empty batch".into()));
        }
        let mean = x.column_means();
        let mut var = vec![0.0; d];
        for row in x.row_iter() {
            for ((v, &xi), &mi) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xi - mi) * (xi - mi);
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let unbiased: Vec<f64> = if n > 1 {
            var.iter().map(|v| v / (n - 1) as f64).collect()
        } else {
            biased.clone()
        };
        (mean.clone(), biased, Some((mean, unbiased)))
    } else {
        (s.running_mean.clone(), s.running_var.clone(), None)
    };
    let inv_std: Vec<f64> = biased_var
        .iter()
        .map(|v| 1.0 / (v + s.epsilon).sqrt())
        .collect();
    let mut normalized = DenseMatrix::zeros(n, d);
    let mut y = DenseMatrix::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            let xh = (x.get(r, c) - mean[c]) * inv_std[c];
            normalized.set(r, c, xh);
            y.set(r, c, s.scale[c] * xh + s.shift[c]);
        }
    }
    Ok((
        y,
        Record::Standardize {
            normalized,
            inv_std,
            batch_stats,
        },
    ))
}

fn standardize_backward(
    s: &Standardize,
    normalized: &DenseMatrix,
    inv_std: &[f64],
    batch_mode: bool,
    grad: &DenseMatrix,
) -> (DenseMatrix, Vec<f64>, Vec<f64>) {
    let (n, d) = grad.shape();
    let mut gscale = vec![0.0; d];
    let gshift = grad.column_sums();
    for r in 0..n {
        for c in 0..d {
            gscale[c] += grad.get(r, c) * normalized.get(r, c);
        }
    }
    let mut gx = DenseMatrix::zeros(n, d);
    if batch_mode {
        // dx = inv_std/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = dy·scale
        let nf = n as f64;
        for c in 0..d {
            let sum_dxh = s.scale[c] * gshift[c];
            let sum_dxh_xh = s.scale[c] * gscale[c];
            for r in 0..n {
                let dxh = grad.get(r, c) * s.scale[c];
                let v = inv_std[c] / nf * (nf * dxh - sum_dxh - normalized.get(r, c) * sum_dxh_xh);
                gx.set(r, c, v);
            }
        }
    } else {
        for r in 0..n {
            for c in 0..d {
                gx.set(r, c, grad.get(r, c) * s.scale[c] * inv_std[c]);
            }
        }
    }
    (gx, gscale, gshift)
}
