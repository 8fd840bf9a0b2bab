//! Dense vector and matrix primitives, parameter initialization, AdaGrad and the
//! finite-difference gradient oracle.
//!
//! Everything is computed in `f64`. Matrices are row-major with shape
//! `(rows, cols)`; a dense layer stores its weights as `(out_dim, in_dim)` so that
//! the forward pass is a sequence of contiguous dot products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the normal initializer used for every embedding table.
pub const EMBEDDING_INIT_STD: f64 = 1e-3;
/// Multiplier in front of the `sqrt(3)/sqrt(dim)` uniform bound.
pub const UNIFORM_INIT_SCALE: f64 = 0.036;
pub const DEFAULT_LEARNING_RATE: f64 = 0.03;
pub const ADAGRAD_STABILIZER: f64 = 1e-6;

/// Returns an independent generator for the named stream under `seed`.
///
/// Streams with different labels never overlap, so adding a tensor (or a feature
/// group) to a model does not perturb the initialization of any other tensor.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325_u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor1(pub Vec<f64>);

impl Tensor1 {
    pub fn zeros(len: usize) -> Self {
        Tensor1(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out = self · x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · y`.
    pub fn matvec_transposed_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += y ⊗ x`.
    pub fn outer_acc(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if yi != 0.0 {
                axpy(yi, x, row);
            }
        }
    }
}

/// Dot product with sixteen independent partial sums, so the loop vectorizes
/// and the adds pipeline.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let mut acc = [0.0_f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut width = LANES / 2;
    while width > 0 {
        for i in 0..width {
            acc[i] += acc[i + width];
        }
        width /= 2;
    }
    acc[0] + tail
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A fully-connected layer, weights `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Tensor2,
    pub bias: Tensor1,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weights: Tensor2::zeros(out_dim, in_dim),
            bias: Tensor1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `out = W x + b`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        self.weights.matvec_into(x, out);
        for (o, b) in out.iter_mut().zip(&self.bias.0) {
            *o += b;
        }
    }
}

/// An `rows × dim` table with entries drawn i.i.d. from `Normal(0, std)`.
pub fn init_embedding_table(
    rows: usize,
    dim: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Result<Tensor2> {
    if rows == 0 || dim == 0 {
        return Err(Error::ZeroDimension("embedding table"));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
    Tensor2::from_vec(rows, dim, data)
}

/// Half-width of the uniform initializer for a layer with `in_dim` inputs.
pub fn uniform_bound(in_dim: usize, scale: f64) -> f64 {
    scale * 3f64.sqrt() / (in_dim as f64).sqrt()
}

/// Weights uniform in `±scale·sqrt(3)/sqrt(in_dim)`, zero bias.
pub fn init_dense_layer(
    in_dim: usize,
    out_dim: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<Dense> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::ZeroDimension("dense layer"));
    }
    let bound = uniform_bound(in_dim, scale);
    let data = (0..in_dim * out_dim)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Ok(Dense {
        weights: Tensor2::from_vec(out_dim, in_dim, data)?,
        bias: Tensor1::zeros(out_dim),
    })
}

/// A vector of `len` entries uniform in `±scale·sqrt(3)/sqrt(in_dim)`.
pub fn init_uniform_vector(
    len: usize,
    in_dim: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<Tensor1> {
    if len == 0 || in_dim == 0 {
        return Err(Error::ZeroDimension("vector"));
    }
    let bound = uniform_bound(in_dim, scale);
    Ok(Tensor1(
        (0..len).map(|_| rng.gen_range(-bound..=bound)).collect(),
    ))
}

/// One AdaGrad update in place: `acc += g²; p -= lr·g/(sqrt(acc)+δ)`.
pub fn adagrad_update(
    param: &mut [f64],
    grad: &[f64],
    accumulator: &mut [f64],
    learning_rate: f64,
    stabilizer: f64,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            expected: param.len(),
            actual: grad.len(),
        });
    }
    if param.len() != accumulator.len() {
        return Err(Error::ShapeMismatch {
            expected: param.len(),
            actual: accumulator.len(),
        });
    }
    for ((p, &g), a) in param.iter_mut().zip(grad).zip(accumulator.iter_mut()) {
        if g != 0.0 {
            *a += g * g;
            *p -= learning_rate * g / (a.sqrt() + stabilizer);
        }
    }
    Ok(())
}

/// Accumulated squared gradients for a single tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaGradState {
    pub accumulator: Vec<f64>,
    pub learning_rate: f64,
    pub stabilizer: f64,
}

impl AdaGradState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        AdaGradState {
            accumulator: vec![0.0; len],
            learning_rate,
            stabilizer: ADAGRAD_STABILIZER,
        }
    }

    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) -> Result<()> {
        adagrad_update(
            param,
            grad,
            &mut self.accumulator,
            self.learning_rate,
            self.stabilizer,
        )
    }
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_difference_gradient(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = loss(&x);
            x[i] = orig - eps;
            let minus = loss(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// dominating a relative comparison.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
