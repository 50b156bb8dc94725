//! Multilayer perceptrons and parameter bookkeeping.
//!
//! Parameters live outside any tape as plain tensors. Each forward pass
//! registers them as leaves on the caller's tape exactly once (via
//! [`Mlp::register`]) and may then be applied to many inputs on that tape —
//! this is what makes gradients through an unrolled chain accumulate into a
//! single set of parameter leaves rather than per-step copies.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{GsnError, Result};

/// Fully connected network with tanh hidden layers and an affine final layer.
///
/// Activations are row vectors: a batch is `[n, d_in]` and each layer maps
/// `h -> h W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Tape handles for one registered [`Mlp`], in layer order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl Mlp {
    /// Network with the given layer widths (input first, output last),
    /// Glorot-uniform weights, and zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(GsnError::invalid(
                "Mlp::new",
                format!("need at least input and output widths, got {widths:?}"),
            ));
        }
        if widths.contains(&0) {
            return Err(GsnError::invalid(
                "Mlp::new",
                format!("zero layer width in {widths:?}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Tensor::from_vec(vec![fan_in, fan_out], data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("widths non-empty")
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn leaf_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }

    /// Replace all parameters from the order produced by [`Mlp::leaf_tensors`].
    pub fn set_from_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != 2 * self.weights.len() {
            return Err(GsnError::invalid(
                "Mlp::set_from_tensors",
                format!(
                    "expected {} tensors, got {}",
                    2 * self.weights.len(),
                    tensors.len()
                ),
            ));
        }
        for (i, chunk) in tensors.chunks(2).enumerate() {
            if chunk[0].shape() != self.weights[i].shape()
                || chunk[1].shape() != self.biases[i].shape()
            {
                return Err(GsnError::invalid(
                    "Mlp::set_from_tensors",
                    format!("layer {i} shape mismatch"),
                ));
            }
            self.weights[i] = chunk[0].clone();
            self.biases[i] = chunk[1].clone();
        }
        Ok(())
    }

    /// Put every parameter on `tape` as a leaf. Call once per tape.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        let weights = self.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let biases = self.biases.iter().map(|b| tape.leaf(b.clone())).collect();
        MlpVars { weights, biases }
    }

    /// Wrap pre-registered leaves (ordered `w0, b0, w1, b1, ...`) as this
    /// network's variables. Used by gradient checks that own the leaf list.
    pub fn bind(&self, vars: &[Var]) -> Result<MlpVars> {
        if vars.len() != 2 * self.weights.len() {
            return Err(GsnError::invalid(
                "Mlp::bind",
                format!("expected {} vars, got {}", 2 * self.weights.len(), vars.len()),
            ));
        }
        Ok(MlpVars {
            weights: vars.iter().step_by(2).copied().collect(),
            biases: vars.iter().skip(1).step_by(2).copied().collect(),
        })
    }

    /// Apply the network to `x: [n, in_dim]` using already-registered
    /// parameter leaves. Returns `[n, out_dim]` (pre-activation final layer).
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let got = tape.value(x).shape().to_vec();
        if got.len() != 2 || got[1] != self.in_dim() {
            return Err(GsnError::ShapeMismatch {
                op: "Mlp::forward",
                lhs: got,
                rhs: vec![self.in_dim()],
            });
        }
        let mut h = x;
        let last = vars.weights.len() - 1;
        for (i, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Gradient tensors for this network's leaves, ordered as
    /// [`Mlp::leaf_tensors`]. `grads` must come from the same tape as `vars`.
    pub fn collect_grads(&self, grads: &crate::autodiff::Gradients, vars: &MlpVars) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * vars.weights.len());
        for (&w, &b) in vars.weights.iter().zip(&vars.biases) {
            out.push(grads.get(w).clone());
            out.push(grads.get(b).clone());
        }
        out
    }
}

/// Split a `[n, 2k]` network output into a mean and a bounded log-variance,
/// each `[n, k]`.
///
/// The raw log-variance is squashed through `c * tanh(raw / c)` with `c = 8`,
/// keeping variances within `[e^-8, e^8]` so that downstream `exp` calls and
/// density evaluations stay finite while the map remains smooth and strictly
/// increasing (identity-like near zero).
pub fn gaussian_head(tape: &mut Tape, raw: Var) -> Result<(Var, Var)> {
    const CLAMP: f64 = 8.0;
    let t = tape.value(raw);
    if t.shape().len() != 2 || t.cols() % 2 != 0 || t.cols() == 0 {
        return Err(GsnError::invalid(
            "gaussian_head",
            format!("output width must be even and positive, shape {:?}", t.shape()),
        ));
    }
    let k = t.cols() / 2;
    let mean = tape.slice_cols(raw, 0, k)?;
    let raw_lv = tape.slice_cols(raw, k, k)?;
    let scaled = tape.mul_scalar(raw_lv, 1.0 / CLAMP)?;
    let squashed = tape.tanh(scaled)?;
    let logvar = tape.mul_scalar(squashed, CLAMP)?;
    Ok((mean, logvar))
}

/// Named parameter collection with stable iteration order.
///
/// Keys are stable across runs (BTreeMap), shapes are fixed at insertion, and
/// updates must preserve them — the optimizer and the checkpoint format both
/// rely on this.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(GsnError::invalid(
                "ParamStore::insert",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| GsnError::invalid("ParamStore::get", format!("unknown parameter {name:?}")))
    }

    pub fn update(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| {
            GsnError::invalid("ParamStore::update", format!("unknown parameter {name:?}"))
        })?;
        if slot.shape() != value.shape() {
            return Err(GsnError::ShapeMismatch {
                op: "ParamStore::update",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Entries in ascending name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }
}
