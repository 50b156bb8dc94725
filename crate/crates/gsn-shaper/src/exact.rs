//! Exact finite-space machinery: probability tables, transition operators,
//! ergodicity verdicts, stationary distributions, and Bayes posteriors, all
//! by brute-force linear algebra.
//!
//! This module is the oracle side of the crate: the chain built from
//! continuous networks is *believed* to converge; the finite-space chain
//! built from tables is *proved* to, state by state, and the verification
//! suites lean on that.

use std::fmt;
use std::path::Path;

use crate::error::{GsnError, Result};
use crate::iofmt::{csv_row, fmt_f64};

const PROB_TOL: f64 = 1e-12;
/// Entries at or below this are structural zeros in the support digraph;
/// numeric underflow must not fake connectivity.
const SUPPORT_EPS: f64 = 1e-300;

/// Probability distribution over `m` states.
#[derive(Clone, Debug, PartialEq)]
pub struct Dist {
    p: Vec<f64>,
}

impl Dist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(GsnError::invalid("Dist::new", "no states"));
        }
        if let Some(&bad) = p.iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(GsnError::invalid(
                "Dist::new",
                format!("negative or non-finite probability {bad}"),
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(GsnError::invalid(
                "Dist::new",
                format!("probabilities sum to {total}, not 1"),
            ));
        }
        Ok(Dist { p })
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(GsnError::invalid("Dist::uniform", "no states"));
        }
        Ok(Dist {
            p: vec![1.0 / m as f64; m],
        })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    /// Indices with probability above the structural-zero threshold.
    pub fn support(&self) -> Vec<usize> {
        (0..self.p.len())
            .filter(|&i| self.p[i] > SUPPORT_EPS)
            .collect()
    }

    /// Total variation distance ½ Σ |self − other|.
    pub fn tv(&self, other: &Dist) -> Result<f64> {
        if self.len() != other.len() {
            return Err(GsnError::ShapeMismatch {
                op: "Dist::tv",
                lhs: vec![self.len()],
                rhs: vec![other.len()],
            });
        }
        Ok(0.5
            * self
                .p
                .iter()
                .zip(&other.p)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

/// Conditional probability table; `get(out, cond)` is P(out | cond), and
/// every conditioning column sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CondTable {
    out_dim: usize,
    cond_dim: usize,
    /// Row-major `[out][cond]`.
    p: Vec<f64>,
}

impl CondTable {
    pub fn new(out_dim: usize, cond_dim: usize, p: Vec<f64>) -> Result<Self> {
        if out_dim == 0 || cond_dim == 0 {
            return Err(GsnError::invalid("CondTable::new", "zero dimension"));
        }
        if p.len() != out_dim * cond_dim {
            return Err(GsnError::invalid(
                "CondTable::new",
                format!(
                    "{out_dim}x{cond_dim} table needs {} entries, got {}",
                    out_dim * cond_dim,
                    p.len()
                ),
            ));
        }
        if let Some(&bad) = p.iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(GsnError::invalid(
                "CondTable::new",
                format!("negative or non-finite probability {bad}"),
            ));
        }
        let table = CondTable { out_dim, cond_dim, p };
        for c in 0..cond_dim {
            let total: f64 = (0..out_dim).map(|o| table.get(o, c)).sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(GsnError::invalid(
                    "CondTable::new",
                    format!("column {c} sums to {total}, not 1"),
                ));
            }
        }
        Ok(table)
    }

    /// Assemble a table from per-condition distributions.
    pub fn from_columns(columns: &[Dist]) -> Result<Self> {
        if columns.is_empty() {
            return Err(GsnError::invalid("CondTable::from_columns", "no columns"));
        }
        let out_dim = columns[0].len();
        if columns.iter().any(|c| c.len() != out_dim) {
            return Err(GsnError::invalid(
                "CondTable::from_columns",
                "columns have differing state counts",
            ));
        }
        let cond_dim = columns.len();
        let mut p = vec![0.0; out_dim * cond_dim];
        for (c, col) in columns.iter().enumerate() {
            for o in 0..out_dim {
                p[o * cond_dim + c] = col.probs()[o];
            }
        }
        CondTable::new(out_dim, cond_dim, p)
    }

    pub fn identity(m: usize) -> Result<Self> {
        let mut p = vec![0.0; m * m];
        for i in 0..m {
            p[i * m + i] = 1.0;
        }
        CondTable::new(m, m, p)
    }

    pub fn uniform(out_dim: usize, cond_dim: usize) -> Result<Self> {
        CondTable::new(out_dim, cond_dim, vec![1.0 / out_dim as f64; out_dim * cond_dim])
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// P(out | cond).
    pub fn get(&self, out: usize, cond: usize) -> f64 {
        self.p[out * self.cond_dim + cond]
    }

    /// The conditional distribution for one conditioning state.
    pub fn column(&self, cond: usize) -> Result<Dist> {
        Dist::new((0..self.out_dim).map(|o| self.get(o, cond)).collect())
    }
}

/// Column-stochastic one-step Markov kernel; `get(to, from)` is T(to | from).
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    m: usize,
    /// Row-major `[to][from]`.
    p: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(m: usize, p: Vec<f64>) -> Result<Self> {
        let table = CondTable::new(m, m, p)?;
        Ok(TransitionMatrix { m, p: table.p })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// T(to | from).
    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.p[to * self.m + from]
    }

    /// One step of the chain on a distribution: (Tπ)[to] = Σ_from T(to|from) π[from].
    pub fn apply(&self, pi: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m];
        for to in 0..m {
            for from in 0..m {
                out[to] += self.p[to * m + from] * pi[from];
            }
        }
        out
    }
}

/// Outcome of the ergodicity check, with a witness for each failure mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ErgodicityVerdict {
    Ergodic,
    /// `from` cannot reach `to` through positive-probability transitions.
    Reducible { from: usize, to: usize },
    Periodic { period: usize },
}

impl fmt::Display for ErgodicityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErgodicityVerdict::Ergodic => write!(f, "ergodic"),
            ErgodicityVerdict::Reducible { from, to } => {
                write!(f, "reducible (state {from} cannot reach state {to})")
            }
            ErgodicityVerdict::Periodic { period } => write!(f, "periodic, period {period}"),
        }
    }
}

/// Compose reconstruction and corruption tables into the one-step kernel
/// T(x'|x) = Σ_z P(x'|z) Q(z|x).
pub fn transition_matrix(p: &CondTable, q: &CondTable) -> Result<TransitionMatrix> {
    if p.cond_dim() != q.out_dim() || p.out_dim() != q.cond_dim() {
        return Err(GsnError::ShapeMismatch {
            op: "transition_matrix",
            lhs: vec![p.out_dim(), p.cond_dim()],
            rhs: vec![q.out_dim(), q.cond_dim()],
        });
    }
    let m = p.out_dim();
    let n = p.cond_dim();
    let mut t = vec![0.0; m * m];
    for to in 0..m {
        for from in 0..m {
            let mut acc = 0.0;
            for z in 0..n {
                acc += p.get(to, z) * q.get(z, from);
            }
            t[to * m + from] = acc;
        }
    }
    TransitionMatrix::new(m, t)
}

/// BFS levels over the positive-support digraph; `None` for unreachable nodes.
fn bfs_levels(m: usize, edge: impl Fn(usize, usize) -> bool, start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; m];
    level[start] = Some(0);
    let mut frontier = vec![start];
    while let Some(u) = frontier.pop() {
        let lu = level[u].expect("frontier nodes are levelled");
        for v in 0..m {
            if edge(u, v) && level[v].is_none() {
                level[v] = Some(lu + 1);
                frontier.push(v);
            }
        }
    }
    level
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Classify the chain: irreducibility by strong connectivity of the support
/// digraph, aperiodicity by the gcd of cycle lengths (via BFS level algebra).
/// A finite irreducible chain is automatically positive recurrent.
pub fn is_ergodic(t: &TransitionMatrix) -> ErgodicityVerdict {
    let m = t.dim();
    let edge = |u: usize, v: usize| t.get(v, u) > SUPPORT_EPS;

    let fwd = bfs_levels(m, edge, 0);
    if let Some(to) = fwd.iter().position(Option::is_none) {
        return ErgodicityVerdict::Reducible { from: 0, to };
    }
    let bwd = bfs_levels(m, |u, v| edge(v, u), 0);
    if let Some(from) = bwd.iter().position(Option::is_none) {
        return ErgodicityVerdict::Reducible { from, to: 0 };
    }

    // Every edge (u, v) closes a cycle of length d[u] + 1 + (dist v -> 0);
    // the gcd of d[u] + 1 - d[v] over all edges equals the gcd of all cycle
    // lengths through state 0, which is the period of the (irreducible) chain.
    let mut g: u64 = 0;
    for u in 0..m {
        let du = fwd[u].expect("strongly connected") as i64;
        for v in 0..m {
            if edge(u, v) {
                let dv = fwd[v].expect("strongly connected") as i64;
                g = gcd(g, (du + 1 - dv).unsigned_abs());
            }
        }
    }
    if g == 1 {
        ErgodicityVerdict::Ergodic
    } else {
        ErgodicityVerdict::Periodic { period: g as usize }
    }
}

const STATIONARY_RESIDUAL: f64 = 1e-12;
/// Power iteration and the direct solve must agree this tightly.
const ROUTE_AGREEMENT: f64 = 1e-10;

/// Stationary distribution via power iteration from the uniform vector,
/// cross-checked against the independent linear solve of
/// [`stationary_direct`]; rejects non-ergodic kernels with the verdict.
pub fn stationary(t: &TransitionMatrix) -> Result<Dist> {
    let verdict = is_ergodic(t);
    if verdict != ErgodicityVerdict::Ergodic {
        return Err(GsnError::NotErgodic {
            witness: verdict.to_string(),
        });
    }
    let m = t.dim();
    let mut pi = vec![1.0 / m as f64; m];
    let mut converged = false;
    for _ in 0..1_000_000 {
        let next = t.apply(&pi);
        let residual = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // renormalize to keep rounding from drifting the total
        let total: f64 = next.iter().sum();
        pi = next.into_iter().map(|v| v / total).collect();
        if residual < STATIONARY_RESIDUAL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GsnError::invalid(
            "stationary",
            "power iteration did not reach the residual tolerance",
        ));
    }
    let direct = stationary_direct(t)?;
    let gap = pi
        .iter()
        .zip(direct.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if gap > ROUTE_AGREEMENT {
        return Err(GsnError::invalid(
            "stationary",
            format!("power iteration and linear solve disagree by {gap}"),
        ));
    }
    Dist::new(pi)
}

/// Stationary distribution by solving (T − I)π = 0 with Σπ = 1 directly:
/// Gaussian elimination with partial pivoting, the last equation replaced by
/// the normalization constraint. Independent of the power-iteration route.
pub fn stationary_direct(t: &TransitionMatrix) -> Result<Dist> {
    let verdict = is_ergodic(t);
    if verdict != ErgodicityVerdict::Ergodic {
        return Err(GsnError::NotErgodic {
            witness: verdict.to_string(),
        });
    }
    let m = t.dim();
    // augmented system [A | b]
    let mut a = vec![0.0; m * (m + 1)];
    for r in 0..m - 1 {
        for c in 0..m {
            a[r * (m + 1) + c] = t.get(r, c) - if r == c { 1.0 } else { 0.0 };
        }
    }
    for c in 0..m {
        a[(m - 1) * (m + 1) + c] = 1.0;
    }
    a[(m - 1) * (m + 1) + m] = 1.0;

    for col in 0..m {
        let pivot_row = (col..m)
            .max_by(|&r1, &r2| {
                a[r1 * (m + 1) + col]
                    .abs()
                    .total_cmp(&a[r2 * (m + 1) + col].abs())
            })
            .expect("non-empty range");
        if a[pivot_row * (m + 1) + col].abs() < 1e-14 {
            return Err(GsnError::invalid(
                "stationary_direct",
                format!("singular system at column {col}"),
            ));
        }
        for c in 0..=m {
            a.swap(col * (m + 1) + c, pivot_row * (m + 1) + c);
        }
        for r in col + 1..m {
            let factor = a[r * (m + 1) + col] / a[col * (m + 1) + col];
            for c in col..=m {
                a[r * (m + 1) + c] -= factor * a[col * (m + 1) + c];
            }
        }
    }
    let mut pi = vec![0.0; m];
    for r in (0..m).rev() {
        let mut acc = a[r * (m + 1) + m];
        for c in r + 1..m {
            acc -= a[r * (m + 1) + c] * pi[c];
        }
        pi[r] = acc / a[r * (m + 1) + r];
    }
    // rounding may leave tiny negatives on near-zero entries
    for v in &mut pi {
        if *v < 0.0 && *v > -PROB_TOL {
            *v = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    Dist::new(pi.into_iter().map(|v| v / total).collect())
}

/// Joint table J(x, z) = D(x) · Q(z | x) of the target and its corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    x_dim: usize,
    z_dim: usize,
    /// Row-major `[x][z]`.
    p: Vec<f64>,
}

impl JointTable {
    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.p[x * self.z_dim + z]
    }

    /// Σ_z J(x, z), which recovers the target distribution.
    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.x_dim)
            .map(|x| (0..self.z_dim).map(|z| self.get(x, z)).sum())
            .collect()
    }

    /// Σ_x J(x, z), the latent marginal under the joint.
    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.z_dim)
            .map(|z| (0..self.x_dim).map(|x| self.get(x, z)).sum())
            .collect()
    }
}

/// Joint of one Gibbs sweep: J(x, z) = D(x) Q(z|x).
pub fn gibbs_joint(d: &Dist, q: &CondTable) -> Result<JointTable> {
    if q.cond_dim() != d.len() {
        return Err(GsnError::ShapeMismatch {
            op: "gibbs_joint",
            lhs: vec![d.len()],
            rhs: vec![q.out_dim(), q.cond_dim()],
        });
    }
    let (x_dim, z_dim) = (d.len(), q.out_dim());
    let mut p = vec![0.0; x_dim * z_dim];
    for x in 0..x_dim {
        for z in 0..z_dim {
            p[x * z_dim + z] = d.probs()[x] * q.get(z, x);
        }
    }
    Ok(JointTable { x_dim, z_dim, p })
}

/// Bayes posterior P*(x|z) = J(x,z) / Σ_x J(x,z) of the target given its
/// corruption; rejects latent states that the joint never visits.
pub fn exact_posterior(d: &Dist, q: &CondTable) -> Result<CondTable> {
    let joint = gibbs_joint(d, q)?;
    let mz = joint.marginal_z();
    if let Some(z) = mz.iter().position(|&v| v <= SUPPORT_EPS) {
        return Err(GsnError::SupportViolation {
            msg: format!("exact_posterior: latent state {z} has zero marginal probability"),
        });
    }
    let (x_dim, z_dim) = (joint.x_dim(), joint.z_dim());
    let mut p = vec![0.0; x_dim * z_dim];
    for x in 0..x_dim {
        for z in 0..z_dim {
            p[x * z_dim + z] = joint.get(x, z) / mz[z];
        }
    }
    CondTable::new(x_dim, z_dim, p)
}

/// Desk-scale check that the chain built from the exact posterior walks back
/// to the target: builds P* = posterior(D, Q), T = P*·Q restricted to the
/// support of D, and returns max_x |π(x) − D(x)| over that support.
///
/// Zero-probability target states are dropped before the chain is formed —
/// they are transient under P* and would break column-stochasticity.
pub fn stationarity_residual(d: &Dist, q: &CondTable) -> Result<f64> {
    if q.cond_dim() != d.len() {
        return Err(GsnError::ShapeMismatch {
            op: "stationarity_residual",
            lhs: vec![d.len()],
            rhs: vec![q.out_dim(), q.cond_dim()],
        });
    }
    let support = d.support();
    if support.len() < 2 {
        return Err(GsnError::SupportViolation {
            msg: "stationarity_residual: target support has fewer than 2 states".into(),
        });
    }
    let (d_s, q_s) = if support.len() == d.len() {
        (d.clone(), q.clone())
    } else {
        let d_s = Dist::new(support.iter().map(|&x| d.probs()[x]).collect())?;
        let mut cols = Vec::with_capacity(support.len());
        for &x in &support {
            cols.push(q.column(x)?);
        }
        (d_s, CondTable::from_columns(&cols)?)
    };
    let posterior = exact_posterior(&d_s, &q_s)?;
    let t = transition_matrix(&posterior, &q_s)?;
    let pi = stationary(&t)?;
    Ok(pi
        .probs()
        .iter()
        .zip(d_s.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Write a conditional table as CSV: header names the conditioning states,
/// each row is one output state.
pub fn save_cond_table(table: &CondTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..table.cond_dim()).map(|c| format!("c{c}")).collect();
    out.push_str(&csv_row(&header));
    out.push('\n');
    for o in 0..table.out_dim() {
        let row: Vec<String> = (0..table.cond_dim())
            .map(|c| fmt_f64(table.get(o, c)))
            .collect();
        out.push_str(&csv_row(&row));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| GsnError::io(path.display().to_string(), e))
}

pub fn load_cond_table(path: &Path) -> Result<CondTable> {
    let text =
        std::fs::read_to_string(path).map_err(|e| GsnError::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| GsnError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cond_dim = header.split(',').count();
    let mut p = Vec::new();
    let mut out_dim = 0;
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cond_dim {
            return Err(GsnError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected {cond_dim} fields, got {}", fields.len()),
            });
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| GsnError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("not a number: {f:?}"),
            })?;
            p.push(v);
        }
        out_dim += 1;
    }
    CondTable::new(out_dim, cond_dim, p)
}

/// Write a distribution as one `p`-headed CSV column.
pub fn save_dist(d: &Dist, path: &Path) -> Result<()> {
    let mut out = String::from("p\n");
    for &v in d.probs() {
        out.push_str(&fmt_f64(v));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| GsnError::io(path.display().to_string(), e))
}

pub fn load_dist(path: &Path) -> Result<Dist> {
    let text =
        std::fs::read_to_string(path).map_err(|e| GsnError::io(path.display().to_string(), e))?;
    let mut p = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let v: f64 = line.trim().parse().map_err(|_| GsnError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("not a number: {line:?}"),
        })?;
        p.push(v);
    }
    Dist::new(p)
}
