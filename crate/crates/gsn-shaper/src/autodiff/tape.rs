//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations append nodes to a [`Tape`] during the forward pass and cache
//! their results; [`Tape::backward`] replays the tape in reverse, accumulating
//! vector-Jacobian products from a scalar output down to every leaf. A tape
//! and its variables are confined to one thread while being built; finished
//! values and gradients are plain tensors and may be read from anywhere.

use crate::autodiff::tensor::{sigmoid, softplus, Tensor};
use crate::error::{GsnError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    /// `[n, k] + [k]`, the vector broadcast along rows.
    AddRow(Var, Var),
    ConcatRows(Var, Var),
    /// Column window `[start, start + len)` of a rank-2 input.
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Square(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColSum(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of forward operations; inputs always precede their users.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GsnError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        ensure_finite(name, &value)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: impl Fn(Var, Var) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(GsnError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = ta.zip(tb, f);
        self.push(name, make(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.shape().len() == 2 && tb.shape().len() == 2 && ta.cols() == tb.rows();
        if !ok {
            return Err(GsnError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = matmul_raw(ta, tb);
        self.push("matmul", Op::MatMul(a, b), value)
    }

    /// Broadcast-add a `[k]` vector to every row of an `[n, k]` matrix.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        let ok = ta.shape().len() == 2 && tv.shape().len() == 1 && ta.cols() == tv.numel();
        if !ok {
            return Err(GsnError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let (n, k) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            for j in 0..k {
                data.push(ta.data()[i * k + j] + tv.data()[j]);
            }
        }
        let value = Tensor::from_vec(vec![n, k], data)?;
        self.push("add_row", Op::AddRow(a, v), value)
    }

    /// Stack two matrices with equal column counts, `a` on top.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.shape().len() == 2 && tb.shape().len() == 2 && ta.cols() == tb.cols();
        if !ok {
            return Err(GsnError::ShapeMismatch {
                op: "concat_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let k = ta.cols();
        let mut data = Vec::with_capacity((ta.rows() + tb.rows()) * k);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::from_vec(vec![ta.rows() + tb.rows(), k], data)?;
        self.push("concat_rows", Op::ConcatRows(a, b), value)
    }

    /// Columns `[start, start + len)` of a rank-2 input.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || start + len > ta.cols() || len == 0 {
            return Err(GsnError::invalid(
                "slice_cols",
                format!(
                    "window [{start}, {}) out of range for shape {:?}",
                    start + len,
                    ta.shape()
                ),
            ));
        }
        let (n, k) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * k + start..i * k + start + len]);
        }
        let value = Tensor::from_vec(vec![n, len], data)?;
        self.push("slice_cols", Op::SliceCols(a, start, len), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(GsnError::invalid(
                "transpose",
                format!("rank-2 input required, got shape {:?}", ta.shape()),
            ));
        }
        let value = transpose_raw(ta);
        self.push("transpose", Op::Transpose(a), value)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        make: impl Fn(Var) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, make(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus, softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0)
        {
            return Err(GsnError::LogDomain { value, index });
        }
        self.unary("log", a, Op::Log, f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs, f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu, |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square, |x| x * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("mul_scalar", a, |v| Op::MulScalar(v, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", Op::Sum(a), value)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push("mean", Op::Mean(a), value)
    }

    /// Per-row sum of an `[n, k]` matrix, as an `[n]` vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(GsnError::invalid(
                "row_sum",
                format!("rank-2 input required, got shape {:?}", ta.shape()),
            ));
        }
        let (n, k) = (ta.rows(), ta.cols());
        let data: Vec<f64> = (0..n)
            .map(|i| ta.data()[i * k..(i + 1) * k].iter().sum())
            .collect();
        let value = Tensor::from_vec(vec![n], data)?;
        self.push("row_sum", Op::RowSum(a), value)
    }

    /// Per-column sum of an `[n, k]` matrix, as a `[k]` vector.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(GsnError::invalid(
                "col_sum",
                format!("rank-2 input required, got shape {:?}", ta.shape()),
            ));
        }
        let (n, k) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                data[j] += ta.data()[i * k + j];
            }
        }
        let value = Tensor::from_vec(vec![k], data)?;
        self.push("col_sum", Op::ColSum(a), value)
    }

    /// Per-column mean of an `[n, k]` matrix, as a `[k]` vector.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let n = {
            let ta = self.value(a);
            if ta.shape().len() != 2 {
                return Err(GsnError::invalid(
                    "col_mean",
                    format!("rank-2 input required, got shape {:?}", ta.shape()),
                ));
            }
            ta.rows()
        };
        let s = self.col_sum(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Reverse-mode accumulation of `d(output)/d(node)` for every node.
    ///
    /// `output` must hold exactly one element.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_t = self.value(output);
        if !out_t.is_scalar() {
            return Err(GsnError::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", out_t.shape()),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[output.0] = Tensor::filled(out_t.shape(), 1.0);

        for idx in (0..self.nodes.len()).rev() {
            // split_at_mut lets us read the out-grad while writing input grads
            let (before, after) = grads.split_at_mut(idx);
            let g = &after[0];
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    before[a.0].add_assign(g);
                    before[b.0].add_assign(g);
                }
                Op::Sub(a, b) => {
                    before[a.0].add_assign(g);
                    before[b.0].add_assign(&g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    before[a.0].add_assign(&g.zip(tb, |gv, bv| gv * bv));
                    before[b.0].add_assign(&g.zip(ta, |gv, av| gv * av));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    before[a.0].add_assign(&matmul_raw(g, &transpose_raw(tb)));
                    before[b.0].add_assign(&matmul_raw(&transpose_raw(ta), g));
                }
                Op::AddRow(a, v) => {
                    before[a.0].add_assign(g);
                    let (n, k) = (g.rows(), g.cols());
                    let mut dv = vec![0.0; k];
                    for i in 0..n {
                        for j in 0..k {
                            dv[j] += g.data()[i * k + j];
                        }
                    }
                    before[v.0].add_assign(&Tensor::from_vec(vec![k], dv)?);
                }
                Op::ConcatRows(a, b) => {
                    let k = g.cols();
                    let na = self.nodes[a.0].value.rows();
                    let nb = self.nodes[b.0].value.rows();
                    let da = Tensor::from_vec(vec![na, k], g.data()[..na * k].to_vec())?;
                    let db = Tensor::from_vec(vec![nb, k], g.data()[na * k..].to_vec())?;
                    before[a.0].add_assign(&da);
                    before[b.0].add_assign(&db);
                }
                Op::SliceCols(a, start, len) => {
                    let ta = &self.nodes[a.0].value;
                    let (n, k) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..len {
                            da[i * k + start + j] = g.data()[i * len + j];
                        }
                    }
                    before[a.0].add_assign(&Tensor::from_vec(vec![n, k], da)?);
                }
                Op::Transpose(a) => {
                    before[a.0].add_assign(&transpose_raw(g));
                }
                Op::Tanh(a) => {
                    before[a.0].add_assign(&g.zip(&node.value, |gv, y| gv * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    before[a.0].add_assign(&g.zip(&node.value, |gv, y| gv * y * (1.0 - y)));
                }
                Op::Softplus(a) => {
                    let ta = &self.nodes[a.0].value;
                    before[a.0].add_assign(&g.zip(ta, |gv, x| gv * sigmoid(x)));
                }
                Op::Exp(a) => {
                    before[a.0].add_assign(&g.zip(&node.value, |gv, y| gv * y));
                }
                Op::Log(a) => {
                    let ta = &self.nodes[a.0].value;
                    before[a.0].add_assign(&g.zip(ta, |gv, x| gv / x));
                }
                Op::Abs(a) => {
                    // subgradient 0 at the kink
                    let ta = &self.nodes[a.0].value;
                    before[a.0].add_assign(&g.zip(ta, |gv, x| gv * x.signum() * ((x != 0.0) as u8 as f64)));
                }
                Op::Relu(a) => {
                    // subgradient 0 at the kink
                    let ta = &self.nodes[a.0].value;
                    before[a.0].add_assign(&g.zip(ta, |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
                Op::Square(a) => {
                    let ta = &self.nodes[a.0].value;
                    before[a.0].add_assign(&g.zip(ta, |gv, x| gv * 2.0 * x));
                }
                Op::AddScalar(a) => {
                    before[a.0].add_assign(g);
                }
                Op::MulScalar(a, c) => {
                    before[a.0].add_assign(&g.map(|v| v * c));
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    before[a.0].add_assign(&Tensor::filled(&shape, g.item()));
                }
                Op::Mean(a) => {
                    let ta = &self.nodes[a.0].value;
                    let shape = ta.shape().to_vec();
                    before[a.0].add_assign(&Tensor::filled(&shape, g.item() / ta.numel() as f64));
                }
                Op::RowSum(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (n, k) = (ta.rows(), ta.cols());
                    let mut da = Vec::with_capacity(n * k);
                    for i in 0..n {
                        for _ in 0..k {
                            da.push(g.data()[i]);
                        }
                    }
                    before[a.0].add_assign(&Tensor::from_vec(vec![n, k], da)?);
                }
                Op::ColSum(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (n, k) = (ta.rows(), ta.cols());
                    let mut da = Vec::with_capacity(n * k);
                    for _ in 0..n {
                        da.extend_from_slice(g.data());
                    }
                    before[a.0].add_assign(&Tensor::from_vec(vec![n, k], da)?);
                }
            }
        }

        for (i, gt) in grads.iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                ensure_finite("backward", gt)?;
            }
        }
        Ok(Gradients { grads })
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for l in 0..m {
            let av = a.data()[i * m + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..p {
                out[i * p + j] += av * b.data()[l * p + j];
            }
        }
    }
    Tensor::from_vec(vec![n, p], out).expect("matmul output well-formed")
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[j * n + i] = a.data()[i * k + j];
        }
    }
    Tensor::from_vec(vec![k, n], out).expect("transpose output well-formed")
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` rebuilds the objective from scratch on a fresh tape each call, with
/// the supplied leaves registered in order. Returns the maximum relative
/// error over every element of every leaf, with relative error defined as
/// `|fd - ad| / max(|fd|, |ad|, 1e-8)`.
pub fn grad_check<F>(f: &F, leaves: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(GsnError::invalid("grad_check", "step must be > 0"));
    }
    let eval = |ls: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(GsnError::invalid("grad_check", "objective must be scalar"));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel = 0.0_f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.numel() {
            let orig = leaf.data()[j];
            work[li].data_mut()[j] = orig + step;
            let fp = eval(&work)?;
            work[li].data_mut()[j] = orig - step;
            let fm = eval(&work)?;
            work[li].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let ad = grads.get(vars[li]).data()[j];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
