use crate::error::{GsnError, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense multi-dimensional array of `f64` values in row-major order.
///
/// Shape `[]` denotes a scalar, `[n]` a vector, `[n, k]` a matrix. Constructors
/// reject non-finite values so that every tensor in circulation holds only
/// finite numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(GsnError::invalid(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if numel != data.len() {
            return Err(GsnError::invalid(
                "tensor",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(GsnError::invalid(
                "tensor",
                format!("non-finite value {bad} in input data"),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![], vec![v]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// Row vector `[k]`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    /// Matrix `[rows, cols]` from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    /// Independent standard-normal draws, consuming `numel` values from `rng`.
    pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single stored value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Extract row `i` of a rank-2 tensor as a vector `[k]`.
    pub fn row(&self, i: usize) -> Tensor {
        let k = self.cols();
        Tensor {
            shape: vec![k],
            data: self.data[i * k..(i + 1) * k].to_vec(),
        }
    }

    /// Row `i` of a rank-2 tensor as a borrowed slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let k = self.cols();
        &self.data[i * k..(i + 1) * k]
    }

    /// Stack rank-1 rows of equal length into a `[n, k]` matrix.
    pub fn from_rows(rows: &[Tensor]) -> Result<Self> {
        if rows.is_empty() {
            return Err(GsnError::invalid("tensor", "from_rows on empty slice"));
        }
        let k = rows[0].numel();
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.numel() != k {
                return Err(GsnError::invalid(
                    "tensor",
                    format!("ragged rows: {} vs {}", r.numel(), k),
                ));
            }
            data.extend_from_slice(r.data());
        }
        Tensor::from_vec(vec![rows.len(), k], data)
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Elementwise map into a new tensor (internal: caller guarantees finiteness
    /// is checked downstream where required).
    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert!(self.same_shape(other));
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// Numerically stable `log(1 + exp(t))`; exact to within one ulp of `t`
/// for large positive `t` and underflows gracefully for large negative `t`.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
