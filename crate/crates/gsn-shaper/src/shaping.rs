//! Collaborative shaping: a scalar guide trained by logistic regression to
//! tell data from generated samples, and a one-sided penalty that pushes
//! only the generator's over-dense mass toward the guide's zero set.
//!
//! The joint optimum is characterized exactly: the guide's loss is minimized
//! at f = log(D/G), and at that guide the generator's penalty vanishes iff
//! G = D. The finite-space functions at the bottom of this module verify
//! that characterization by closed form, by independent convex minimization,
//! and by running the alternating scheme itself.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, softplus, Tape, Tensor, Var};
use crate::error::{GsnError, Result};
use crate::exact::Dist;
use crate::nets::{Mlp, MlpVars};

/// Scalar-valued network f_ψ scoring how data-like a point looks.
#[derive(Clone, Debug, PartialEq)]
pub struct Guide {
    net: Mlp,
}

impl Guide {
    /// Guide over d_x-dimensional inputs with the given hidden widths.
    pub fn new(d_x: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![d_x];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Guide {
            net: Mlp::new(&widths, seed)?,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        self.net.register(tape)
    }

    /// Scores `[n, 1]` for a batch `[n, d_x]`.
    pub fn score(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        self.net.forward(tape, vars, x)
    }
}

/// Elementwise binomial deviance b(f) = log(exp(−f) + 1), the logistic loss
/// of calling a point "data" when its score is f. Stable for |f| up to 1e6.
pub fn binomial_deviance(tape: &mut Tape, f: Var) -> Result<Var> {
    let neg = tape.neg(f)?;
    tape.softplus(neg)
}

/// Scalar form of [`binomial_deviance`].
pub fn deviance(f: f64) -> f64 {
    softplus(-f)
}

/// Guide objective: mean b(f) over data plus mean b(−f) over generated
/// samples — logistic regression with equal class priors. The generated
/// batch must enter as a constant leaf: this loss trains the guide only.
pub fn loss_f(
    tape: &mut Tape,
    guide: &Guide,
    vars: &MlpVars,
    data_batch: Var,
    gen_batch: Var,
) -> Result<Var> {
    let (dw, gw) = (tape.value(data_batch).cols(), tape.value(gen_batch).cols());
    if dw != gw {
        return Err(GsnError::ShapeMismatch {
            op: "loss_f",
            lhs: tape.value(data_batch).shape().to_vec(),
            rhs: tape.value(gen_batch).shape().to_vec(),
        });
    }
    let f_data = guide.score(tape, vars, data_batch)?;
    let b_data = binomial_deviance(tape, f_data)?;
    let data_term = tape.mean(b_data)?;

    let f_gen = guide.score(tape, vars, gen_batch)?;
    let neg_f_gen = tape.neg(f_gen)?;
    let b_gen = binomial_deviance(tape, neg_f_gen)?;
    let gen_term = tape.mean(b_gen)?;
    tape.add(data_term, gen_term)
}

/// Generator objective: mean of rectifier(−f) over generated samples — the
/// one-sided absolute value |f|·𝟙[f < 0]. Gradients flow through the batch
/// into whatever produced it; the guide's parameters must be frozen by the
/// caller for the step this is used in.
pub fn loss_g(tape: &mut Tape, guide: &Guide, vars: &MlpVars, gen_batch: Var) -> Result<Var> {
    let f = guide.score(tape, vars, gen_batch)?;
    let neg_f = tape.neg(f)?;
    let rect = tape.relu(neg_f)?;
    tape.mean(rect)
}

/// Squared distance between the batch's sample statistics and target
/// statistics: ‖mean − μ‖² + ‖cov − Σ‖²_F, with the unbiased covariance.
pub fn moment_match_loss(
    tape: &mut Tape,
    gen_batch: Var,
    data_mean: &Tensor,
    data_cov: &Tensor,
) -> Result<Var> {
    let t = tape.value(gen_batch);
    if t.shape().len() != 2 {
        return Err(GsnError::invalid(
            "moment_match_loss",
            format!("rank-2 batch required, got shape {:?}", t.shape()),
        ));
    }
    let (n, k) = (t.rows(), t.cols());
    if n < 2 {
        return Err(GsnError::invalid(
            "moment_match_loss",
            "covariance needs at least two rows",
        ));
    }
    if data_mean.shape() != [k] || data_cov.shape() != [k, k] {
        return Err(GsnError::ShapeMismatch {
            op: "moment_match_loss",
            lhs: vec![n, k],
            rhs: data_mean.shape().to_vec(),
        });
    }
    let mean = tape.col_mean(gen_batch)?;
    let neg_mean = tape.neg(mean)?;
    let centered = tape.add_row(gen_batch, neg_mean)?;
    let centered_t = tape.transpose(centered)?;
    let scatter = tape.matmul(centered_t, centered)?;
    let cov = tape.mul_scalar(scatter, 1.0 / (n - 1) as f64)?;

    let mu = tape.leaf(data_mean.clone());
    let dm = tape.sub(mean, mu)?;
    let dm2 = tape.square(dm)?;
    let mean_term = tape.sum(dm2)?;

    let sigma = tape.leaf(data_cov.clone());
    let dc = tape.sub(cov, sigma)?;
    let dc2 = tape.square(dc)?;
    let cov_term = tape.sum(dc2)?;
    tape.add(mean_term, cov_term)
}

/// Finite generator distribution parameterized by free logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GenDist {
    logits: Vec<f64>,
}

impl GenDist {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(GsnError::invalid("GenDist::new", "need at least two states"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(GsnError::NonFinite { op: "GenDist::new" });
        }
        Ok(GenDist { logits })
    }

    /// Standard-normal logits, deterministic given seed.
    pub fn random(m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GenDist::new(Tensor::standard_normal(&[m], &mut rng).data().to_vec())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// The softmax distribution, computed with the max-shift for stability.
    pub fn probs(&self) -> Dist {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Dist::new(exps.into_iter().map(|v| v / total).collect())
            .expect("softmax is a valid distribution")
    }
}

/// The guide that minimizes the exact logistic objective: f*(x) = log(D(x)/G(x))
/// on the common support. States outside both supports get 0 — no evidence
/// either way. Support mismatch is rejected with the offending state.
pub fn optimal_guide_discrete(d: &Dist, g: &Dist) -> Result<Vec<f64>> {
    if d.len() != g.len() {
        return Err(GsnError::ShapeMismatch {
            op: "optimal_guide_discrete",
            lhs: vec![d.len()],
            rhs: vec![g.len()],
        });
    }
    let mut f = vec![0.0; d.len()];
    for x in 0..d.len() {
        let (dx, gx) = (d.probs()[x], g.probs()[x]);
        match (dx > 0.0, gx > 0.0) {
            (true, true) => f[x] = (dx / gx).ln(),
            (false, false) => f[x] = 0.0,
            _ => {
                return Err(GsnError::SupportViolation {
                    msg: format!("supports differ at state {x}: D = {dx}, G = {gx}"),
                })
            }
        }
    }
    Ok(f)
}

/// Exact finite-space guide objective Σ_x D(x) b(f(x)) + G(x) b(−f(x)).
pub fn loss_f_exact(f: &[f64], d: &Dist, g: &Dist) -> Result<f64> {
    if f.len() != d.len() || d.len() != g.len() {
        return Err(GsnError::ShapeMismatch {
            op: "loss_f_exact",
            lhs: vec![f.len()],
            rhs: vec![d.len()],
        });
    }
    Ok(f
        .iter()
        .zip(d.probs().iter().zip(g.probs()))
        .map(|(&fx, (&dx, &gx))| dx * deviance(fx) + gx * deviance(-fx))
        .sum())
}

/// Exact finite-space generator objective Σ_x G(x) · rectifier(−f(x)).
pub fn loss_g_exact(f: &[f64], g: &Dist) -> Result<f64> {
    if f.len() != g.len() {
        return Err(GsnError::ShapeMismatch {
            op: "loss_g_exact",
            lhs: vec![f.len()],
            rhs: vec![g.len()],
        });
    }
    Ok(f
        .iter()
        .zip(g.probs())
        .map(|(&fx, &gx)| gx * (-fx).max(0.0))
        .sum())
}

/// Minimize the exact guide objective over an unconstrained score vector by
/// per-coordinate Newton iteration — an oracle for the closed form that never
/// consults it. The objective is separable and strictly convex per state:
/// L_x(f) = D b(f) + G b(−f), L'_x = −D σ(−f) + G σ(f), L''_x = (D+G) σ(f) σ(−f).
pub fn minimize_loss_f(d: &Dist, g: &Dist, max_iters: usize) -> Result<Vec<f64>> {
    if d.len() != g.len() {
        return Err(GsnError::ShapeMismatch {
            op: "minimize_loss_f",
            lhs: vec![d.len()],
            rhs: vec![g.len()],
        });
    }
    let mut f = vec![0.0; d.len()];
    for x in 0..d.len() {
        let (dx, gx) = (d.probs()[x], g.probs()[x]);
        if dx == 0.0 && gx == 0.0 {
            continue; // no mass, objective flat: leave at 0
        }
        if dx == 0.0 || gx == 0.0 {
            return Err(GsnError::SupportViolation {
                msg: format!("supports differ at state {x}: D = {dx}, G = {gx}"),
            });
        }
        let mut fx = 0.0;
        for _ in 0..max_iters {
            let grad = -dx * sigmoid(-fx) + gx * sigmoid(fx);
            if grad.abs() < 1e-15 {
                break;
            }
            let hess = (dx + gx) * sigmoid(fx) * sigmoid(-fx);
            fx -= grad / hess;
        }
        f[x] = fx;
    }
    Ok(f)
}

/// Gradient of the exact generator objective with respect to the logits,
/// with the guide frozen: for r(x) = rectifier(−f(x)),
/// ∂L_g/∂θ_j = G(j) · (r(j) − Σ_x r(x) G(x)), by the softmax chain rule.
pub fn loss_g_logit_gradient(f: &[f64], g: &Dist) -> Result<Vec<f64>> {
    let lg = loss_g_exact(f, g)?;
    Ok((0..g.len())
        .map(|j| g.probs()[j] * ((-f[j]).max(0.0) - lg))
        .collect())
}

/// Max |∂L_g/∂θ| at the generator's fixed point G = D: the optimal guide is
/// identically zero there, the rectifier's subgradient at 0 is 0, so the
/// gradient vanishes exactly — not merely within tolerance.
pub fn fixed_point_gradient(d: &Dist) -> Result<f64> {
    let f = optimal_guide_discrete(d, d)?;
    let grad = loss_g_logit_gradient(&f, d)?;
    Ok(grad.iter().fold(0.0, |acc, v| acc.max(v.abs())))
}

/// Record of one alternating collaborative run on a finite space.
#[derive(Clone, Debug)]
pub struct CollabRun {
    /// TV(G, D) after each generator update.
    pub tv_trace: Vec<f64>,
    pub final_tv: f64,
    /// Max |gradient| at G = D, asserted to be exactly zero.
    pub fixed_point_grad: f64,
}

/// Run the alternating scheme at desk scale: each iteration sets the guide
/// to its exact optimum for the current G, then takes one gradient step on
/// the generator's logits. Also certifies the G = D fixed point.
///
/// No convergence theorem backs this procedure; the returned trace is the
/// empirical evidence.
pub fn verify_collaborative(
    d: &Dist,
    iterations: usize,
    step: f64,
    seed: u64,
) -> Result<CollabRun> {
    if step <= 0.0 {
        return Err(GsnError::invalid("verify_collaborative", "step must be > 0"));
    }
    if d.support().len() != d.len() {
        return Err(GsnError::SupportViolation {
            msg: "verify_collaborative: target must have full support".into(),
        });
    }
    let fixed_point_grad = fixed_point_gradient(d)?;
    if fixed_point_grad != 0.0 {
        return Err(GsnError::invalid(
            "verify_collaborative",
            format!("fixed-point gradient is {fixed_point_grad}, expected exactly 0"),
        ));
    }

    let mut gen = GenDist::random(d.len(), seed)?;
    let mut tv_trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let g = gen.probs();
        let f = optimal_guide_discrete(d, &g)?;
        let grad = loss_g_logit_gradient(&f, &g)?;
        let mut logits = gen.logits().to_vec();
        for (l, dg) in logits.iter_mut().zip(&grad) {
            *l -= step * dg;
        }
        gen = GenDist::new(logits)?;
        tv_trace.push(gen.probs().tv(d)?);
    }
    let final_tv = tv_trace.last().copied().unwrap_or(gen.probs().tv(d)?);
    Ok(CollabRun {
        tv_trace,
        final_tv,
        fixed_point_grad,
    })
}
