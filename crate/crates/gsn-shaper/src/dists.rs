//! Conditional and prior distributions: exact log-densities, the closed-form
//! divergence to a standard-normal prior, and reparameterized sampling.
//!
//! Every function here is pure given its inputs; noise is always injected by
//! the caller, never drawn internally, so fixed-noise gradient checks and
//! deterministic replay work unchanged.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{GsnError, Result};

/// Batch of independent diagonal Gaussians: row i is N(mean[i], diag exp(logvar[i])).
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub logvar: Var,
}

/// Batch of independent Bernoulli vectors parameterized by logits.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliVec {
    pub logits: Var,
}

/// The fixed standard-normal prior over a k-dimensional latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StdPrior {
    pub dim: usize,
}

const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

fn check_pair(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<(usize, usize)> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape().len() != 2 || !ta.same_shape(tb) {
        return Err(GsnError::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        });
    }
    Ok((ta.rows(), ta.cols()))
}

/// Per-row log density of `x` under `d`, shape `[n]`.
///
/// Each row contributes Σ_j [−½ ln 2π − ½ lv_j − (x_j − μ_j)² / (2 e^{lv_j})].
pub fn gauss_log_prob(tape: &mut Tape, x: Var, d: &DiagGaussian) -> Result<Var> {
    let (_, k) = check_pair("gauss_log_prob", tape, d.mean, d.logvar)?;
    let (_, kx) = check_pair("gauss_log_prob", tape, x, d.mean)?;
    debug_assert_eq!(k, kx);

    let diff = tape.sub(x, d.mean)?;
    let sq = tape.square(diff)?;
    let neg_lv = tape.neg(d.logvar)?;
    let inv_var = tape.exp(neg_lv)?;
    let mahal = tape.mul(sq, inv_var)?;
    let mahal_sum = tape.row_sum(mahal)?;
    let lv_sum = tape.row_sum(d.logvar)?;
    let quad = tape.add(mahal_sum, lv_sum)?;
    let half = tape.mul_scalar(quad, -0.5)?;
    tape.add_scalar(half, -0.5 * k as f64 * LN_2PI)
}

/// Draw `μ + e^{logvar/2} ⊙ noise`; differentiable in the parameters.
pub fn gauss_sample_reparam(tape: &mut Tape, d: &DiagGaussian, noise: Var) -> Result<Var> {
    check_pair("gauss_sample_reparam", tape, d.mean, d.logvar)?;
    check_pair("gauss_sample_reparam", tape, noise, d.mean)?;
    let half_lv = tape.mul_scalar(d.logvar, 0.5)?;
    let std = tape.exp(half_lv)?;
    let scaled = tape.mul(std, noise)?;
    tape.add(d.mean, scaled)
}

/// Per-row KL(d ‖ N(0, I)), shape `[n]`: ½ Σ_j (μ_j² + e^{lv_j} − 1 − lv_j).
pub fn kl_gauss_to_std(tape: &mut Tape, d: &DiagGaussian) -> Result<Var> {
    check_pair("kl_gauss_to_std", tape, d.mean, d.logvar)?;
    let mu2 = tape.square(d.mean)?;
    let var = tape.exp(d.logvar)?;
    let sum = tape.add(mu2, var)?;
    let minus_lv = tape.sub(sum, d.logvar)?;
    let shifted = tape.add_scalar(minus_lv, -1.0)?;
    let rows = tape.row_sum(shifted)?;
    tape.mul_scalar(rows, 0.5)
}

/// Per-row Bernoulli log likelihood of `x ∈ {0,1}^k`, shape `[n]`.
///
/// Uses the softplus form −Σ_j [x_j·sp(−l_j) + (1−x_j)·sp(l_j)], which never
/// overflows however saturated the logits.
pub fn bern_log_prob(tape: &mut Tape, x: Var, d: &BernoulliVec) -> Result<Var> {
    check_pair("bern_log_prob", tape, x, d.logits)?;
    if let Some(&bad) = tape
        .value(x)
        .data()
        .iter()
        .find(|&&v| v != 0.0 && v != 1.0)
    {
        return Err(GsnError::invalid(
            "bern_log_prob",
            format!("observations must be 0 or 1, found {bad}"),
        ));
    }
    let neg_l = tape.neg(d.logits)?;
    let sp_neg = tape.softplus(neg_l)?; // −log σ(l)
    let sp_pos = tape.softplus(d.logits)?; // −log(1−σ(l))
    let on = tape.mul(x, sp_neg)?;
    let ones = tape.leaf(Tensor::ones(tape.value(x).shape()));
    let x_off = tape.sub(ones, x)?;
    let off = tape.mul(x_off, sp_pos)?;
    let both = tape.add(on, off)?;
    let rows = tape.row_sum(both)?;
    tape.neg(rows)
}
