//! Variational free energy: the reconstruction + divergence objective that
//! upper-bounds the negative log marginal likelihood.
//!
//! Two routes compute it. The Monte Carlo route ([`vfe_mc`],
//! [`vfe_transcode`]) runs on the tape with reparameterized latent draws and
//! is fully differentiable; it is the per-step training loss of the unrolled
//! chain. The exact route ([`vfe_exact_discrete`], [`marginal_exact`],
//! [`tightness_gap`]) sums over finite tables and is the oracle the bound
//! and identity checks are verified against.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dists::{
    bern_log_prob, gauss_log_prob, gauss_sample_reparam, kl_gauss_to_std, DiagGaussian,
};
use crate::error::{GsnError, Result};
use crate::exact::{CondTable, Dist};
use crate::sgsn::{DecoderDist, GsnVars, SimpleGsn};

/// The two terms of the free energy and their sum, as plain numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VfeBreakdown {
    /// −E_q log p(x|z)
    pub reconstruction: f64,
    /// KL(q ‖ prior), always ≥ 0
    pub kl: f64,
    pub total: f64,
}

/// The same decomposition as scalar nodes on a live tape.
#[derive(Clone, Copy, Debug)]
pub struct VfeTerms {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

impl VfeTerms {
    pub fn snapshot(&self, tape: &Tape) -> VfeBreakdown {
        VfeBreakdown {
            reconstruction: tape.value(self.recon).item(),
            kl: tape.value(self.kl).item(),
            total: tape.value(self.total).item(),
        }
    }
}

fn decoder_log_prob(tape: &mut Tape, x: Var, dist: &DecoderDist) -> Result<Var> {
    match dist {
        DecoderDist::Gaussian(d) => gauss_log_prob(tape, x, d),
        DecoderDist::Bernoulli(b) => bern_log_prob(tape, x, b),
    }
}

/// Free energy of reconstructing `x` from an inference conditional over an
/// arbitrary input `y` (the transcoder form); `y = x` is plain auto-encoding.
///
/// One latent draw per noise tensor; the reconstruction term averages over
/// draws and over the batch, the divergence term is closed-form. Everything
/// stays differentiable, including through `x` and `y` when they are
/// mid-graph chain states.
pub fn vfe_transcode(
    tape: &mut Tape,
    gsn: &SimpleGsn,
    vars: &GsnVars,
    x: Var,
    y: Var,
    noises: &[Tensor],
) -> Result<VfeTerms> {
    if noises.is_empty() {
        return Err(GsnError::invalid("vfe_transcode", "need at least one latent draw"));
    }
    let enc = gsn.encode(tape, vars, y)?;
    let kl_rows = kl_gauss_to_std(tape, &enc)?;
    let kl = tape.mean(kl_rows)?;

    let mut lp_acc: Option<Var> = None;
    for noise in noises {
        let nv = tape.leaf(noise.clone());
        let z = gauss_sample_reparam(tape, &enc, nv)?;
        let dist = gsn.decode(tape, vars, z)?;
        let lp_rows = decoder_log_prob(tape, x, &dist)?;
        let lp = tape.mean(lp_rows)?;
        lp_acc = Some(match lp_acc {
            None => lp,
            Some(acc) => tape.add(acc, lp)?,
        });
    }
    let lp_mean = tape.mul_scalar(lp_acc.expect("nonempty noises"), 1.0 / noises.len() as f64)?;
    let recon = tape.neg(lp_mean)?;
    let total = tape.add(recon, kl)?;
    Ok(VfeTerms { recon, kl, total })
}

/// Auto-encoding free energy of a batch, with `n_samples` fresh latent draws.
pub fn vfe_mc(
    tape: &mut Tape,
    gsn: &SimpleGsn,
    vars: &GsnVars,
    x: Var,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VfeTerms> {
    if n_samples == 0 {
        return Err(GsnError::invalid("vfe_mc", "need at least one latent draw"));
    }
    let n = tape.value(x).rows();
    let noises: Vec<Tensor> = (0..n_samples)
        .map(|_| Tensor::standard_normal(&[n, gsn.k_z()], rng))
        .collect();
    vfe_transcode(tape, gsn, vars, x, x, &noises)
}

/// Free-energy terms of one already-sampled chain transition: the cached
/// corruption conditional q(z|x) and reconstruction conditional p(·|z) of a
/// step, evaluated at the step's input state. This is the single-draw
/// transcoder loss the unrolled chain trains on, with no recomputation.
pub fn vfe_pair_terms(
    tape: &mut Tape,
    x: Var,
    enc: &DiagGaussian,
    dec: &DiagGaussian,
) -> Result<VfeTerms> {
    let lp_rows = gauss_log_prob(tape, x, dec)?;
    let lp = tape.mean(lp_rows)?;
    let recon = tape.neg(lp)?;
    let kl_rows = kl_gauss_to_std(tape, enc)?;
    let kl = tape.mean(kl_rows)?;
    let total = tape.add(recon, kl)?;
    Ok(VfeTerms { recon, kl, total })
}

fn check_discrete_dims(q: &CondTable, p: &CondTable, prior: &Dist) -> Result<()> {
    let ok = q.out_dim() == prior.len()
        && p.cond_dim() == prior.len()
        && p.out_dim() == q.cond_dim();
    if !ok {
        return Err(GsnError::ShapeMismatch {
            op: "vfe_exact_discrete",
            lhs: vec![q.out_dim(), q.cond_dim()],
            rhs: vec![p.out_dim(), p.cond_dim()],
        });
    }
    Ok(())
}

/// Exact free energy of observable state `x` under finite tables:
/// reconstruction = −Σ_z Q(z|x) log P(x|z), divergence = Σ_z Q(z|x)
/// log(Q(z|x)/prior(z)), with 0·log 0 := 0.
pub fn vfe_exact_discrete(
    x: usize,
    q: &CondTable,
    p: &CondTable,
    prior: &Dist,
) -> Result<VfeBreakdown> {
    check_discrete_dims(q, p, prior)?;
    if x >= q.cond_dim() {
        return Err(GsnError::invalid(
            "vfe_exact_discrete",
            format!("state {x} out of range for {} states", q.cond_dim()),
        ));
    }
    let mut reconstruction = 0.0;
    let mut kl = 0.0;
    for z in 0..prior.len() {
        let qzx = q.get(z, x);
        if qzx == 0.0 {
            continue;
        }
        let pxz = p.get(x, z);
        if pxz == 0.0 {
            return Err(GsnError::SupportViolation {
                msg: format!("q({z}|{x}) > 0 but p({x}|{z}) = 0"),
            });
        }
        let pz = prior.probs()[z];
        if pz == 0.0 {
            return Err(GsnError::SupportViolation {
                msg: format!("q({z}|{x}) > 0 but prior({z}) = 0"),
            });
        }
        reconstruction -= qzx * pxz.ln();
        kl += qzx * (qzx / pz).ln();
    }
    Ok(VfeBreakdown {
        reconstruction,
        kl,
        total: reconstruction + kl,
    })
}

/// The derived marginal p(x) = Σ_z P(x|z) prior(z).
pub fn marginal_exact(p: &CondTable, prior: &Dist) -> Result<Dist> {
    if p.cond_dim() != prior.len() {
        return Err(GsnError::ShapeMismatch {
            op: "marginal_exact",
            lhs: vec![p.out_dim(), p.cond_dim()],
            rhs: vec![prior.len()],
        });
    }
    let probs: Vec<f64> = (0..p.out_dim())
        .map(|x| {
            (0..prior.len())
                .map(|z| p.get(x, z) * prior.probs()[z])
                .sum()
        })
        .collect();
    Dist::new(probs)
}

/// How far the bound is from tight: KL(Q(·|x) ‖ derived posterior p(z|x)).
///
/// Equals `vfe_exact_discrete(x).total + ln marginal(x)` — the slack identity
/// — but is computed here by the direct divergence sum, so the two routes
/// check each other.
pub fn tightness_gap(x: usize, q: &CondTable, p: &CondTable, prior: &Dist) -> Result<f64> {
    check_discrete_dims(q, p, prior)?;
    if x >= q.cond_dim() {
        return Err(GsnError::invalid(
            "tightness_gap",
            format!("state {x} out of range for {} states", q.cond_dim()),
        ));
    }
    let marginal = marginal_exact(p, prior)?;
    let mx = marginal.probs()[x];
    if mx == 0.0 {
        return Err(GsnError::SupportViolation {
            msg: format!("state {x} has zero marginal probability"),
        });
    }
    let mut gap = 0.0;
    for z in 0..prior.len() {
        let qzx = q.get(z, x);
        if qzx == 0.0 {
            continue;
        }
        let posterior = p.get(x, z) * prior.probs()[z] / mx;
        if posterior == 0.0 {
            return Err(GsnError::SupportViolation {
                msg: format!("q({z}|{x}) > 0 but the derived posterior is 0 at z = {z}"),
            });
        }
        gap += qzx * (qzx / posterior).ln();
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Mlp;
    use crate::rng::stream_rng;
    use crate::sgsn::DecoderHead;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn zeroed_gsn() -> SimpleGsn {
        let mut gsn = SimpleGsn::new(1, 1, &[2], &[2], DecoderHead::Gaussian, 0).unwrap();
        for net in [true, false] {
            let target: &mut Mlp = if net {
                gsn.encoder_mut()
            } else {
                gsn.decoder_mut()
            };
            let zeros: Vec<Tensor> = target
                .leaf_tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            target.set_from_tensors(&zeros).unwrap();
        }
        gsn
    }

    fn random_dist(m: usize, rng: &mut ChaCha8Rng) -> Dist {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Dist::new(raw.into_iter().map(|v| v / total).collect()).unwrap()
    }

    fn random_table(out_dim: usize, cond_dim: usize, rng: &mut ChaCha8Rng) -> CondTable {
        let cols: Vec<Dist> = (0..cond_dim).map(|_| random_dist(out_dim, rng)).collect();
        CondTable::from_columns(&cols).unwrap()
    }

    #[test]
    fn zero_model_zero_noise_gives_half_log_two_pi() {
        let gsn = zeroed_gsn();
        let mut tape = Tape::new();
        let vars = gsn.register(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[1, 1]));
        let terms =
            vfe_transcode(&mut tape, &gsn, &vars, x, x, &[Tensor::zeros(&[1, 1])]).unwrap();
        let b = terms.snapshot(&tape);
        assert_abs_diff_eq!(b.reconstruction, 0.9189385, epsilon = 1e-7);
        assert_abs_diff_eq!(b.kl, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.total, 0.9189385, epsilon = 1e-7);
    }

    #[test]
    fn breakdown_total_is_exactly_the_sum() {
        let gsn = SimpleGsn::new(2, 2, &[4], &[4], DecoderHead::Gaussian, 3).unwrap();
        let mut tape = Tape::new();
        let vars = gsn.register(&mut tape);
        let mut rng = stream_rng(1, 0);
        let x = tape.leaf(Tensor::standard_normal(&[5, 2], &mut rng));
        let terms = vfe_mc(&mut tape, &gsn, &vars, x, 3, &mut rng).unwrap();
        let b = terms.snapshot(&tape);
        assert!((b.total - (b.reconstruction + b.kl)).abs() < 1e-12);
        assert!(b.kl >= 0.0);
    }

    #[test]
    fn kl_term_ignores_sample_count() {
        let gsn = SimpleGsn::new(2, 2, &[4], &[4], DecoderHead::Gaussian, 5).unwrap();
        let x_t = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.5, 0.7, 1.1, -0.2]).unwrap();
        let kl_for = |n_samples: usize| {
            let mut tape = Tape::new();
            let vars = gsn.register(&mut tape);
            let mut rng = stream_rng(2, 0);
            let x = tape.leaf(x_t.clone());
            let terms = vfe_mc(&mut tape, &gsn, &vars, x, n_samples, &mut rng).unwrap();
            terms.snapshot(&tape).kl
        };
        assert_eq!(kl_for(1), kl_for(7));
    }

    #[test]
    fn transcode_with_y_equal_x_is_plain_autoencoding() {
        let gsn = SimpleGsn::new(2, 3, &[4], &[4], DecoderHead::Gaussian, 9).unwrap();
        let mut rng = stream_rng(3, 0);
        let x_t = Tensor::standard_normal(&[4, 2], &mut rng);
        let noises = vec![
            Tensor::standard_normal(&[4, 3], &mut rng),
            Tensor::standard_normal(&[4, 3], &mut rng),
        ];

        let mut tape = Tape::new();
        let vars = gsn.register(&mut tape);
        let x = tape.leaf(x_t.clone());
        let a = vfe_transcode(&mut tape, &gsn, &vars, x, x, &noises)
            .unwrap()
            .snapshot(&tape);

        let mut tape2 = Tape::new();
        let vars2 = gsn.register(&mut tape2);
        let x2 = tape2.leaf(x_t.clone());
        let y2 = tape2.leaf(x_t);
        let b = vfe_transcode(&mut tape2, &gsn, &vars2, x2, y2, &noises)
            .unwrap()
            .snapshot(&tape2);
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_estimates_are_self_consistent() {
        // Two independent batches of iid single-draw estimates must agree
        // within 3 combined standard errors.
        let gsn = SimpleGsn::new(2, 2, &[6], &[6], DecoderHead::Gaussian, 11).unwrap();
        let row = [0.3, -0.6];
        let estimate = |n: usize, seed: u64| {
            let mut tape = Tape::new();
            let vars = gsn.register(&mut tape);
            let mut rng = stream_rng(seed, 0);
            let x = tape.leaf(
                Tensor::from_vec(vec![n, 2], row.iter().copied().cycle().take(2 * n).collect())
                    .unwrap(),
            );
            let enc = gsn.encode(&mut tape, &vars, x).unwrap();
            let noise = tape.leaf(Tensor::standard_normal(&[n, 2], &mut rng));
            let z = gauss_sample_reparam(&mut tape, &enc, noise).unwrap();
            let dec = match gsn.decode(&mut tape, &vars, z).unwrap() {
                DecoderDist::Gaussian(d) => d,
                DecoderDist::Bernoulli(_) => unreachable!(),
            };
            let lp = gauss_log_prob(&mut tape, x, &dec).unwrap();
            let rows = tape.value(lp).data();
            let mean = rows.iter().sum::<f64>() / n as f64;
            let var = rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (mean, (var / n as f64).sqrt())
        };
        let (m1, se1) = estimate(10_000, 100);
        let (m2, se2) = estimate(100_000, 200);
        let spread = 3.0 * (se1 * se1 + se2 * se2).sqrt();
        assert!((m1 - m2).abs() < spread, "{m1} vs {m2}, allowed {spread}");
    }

    #[test]
    fn bernoulli_decoder_is_supported_by_the_mc_route() {
        let gsn = SimpleGsn::new(3, 2, &[4], &[4], DecoderHead::Bernoulli, 13).unwrap();
        let mut tape = Tape::new();
        let vars = gsn.register(&mut tape);
        let mut rng = stream_rng(5, 0);
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let terms = vfe_mc(&mut tape, &gsn, &vars, x, 2, &mut rng).unwrap();
        let b = terms.snapshot(&tape);
        assert!(b.reconstruction > 0.0 && b.total.is_finite());
    }

    #[test]
    fn exact_deterministic_tables_make_the_bound_tight() {
        // P = identity, uniform prior, Q routes each x to z = x.
        let p = CondTable::identity(2).unwrap();
        let prior = Dist::uniform(2).unwrap();
        let q = CondTable::identity(2).unwrap();
        let b = vfe_exact_discrete(0, &q, &p, &prior).unwrap();
        assert_abs_diff_eq!(b.reconstruction, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.kl, 2.0_f64.ln(), epsilon = 1e-15);
        let marginal = marginal_exact(&p, &prior).unwrap();
        assert_abs_diff_eq!(
            b.total,
            -marginal.probs()[0].ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(tightness_gap(0, &q, &p, &prior).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_prior_inference_with_uniform_decoder() {
        // Q ignores x (equals the prior); P uniform over m states.
        let m = 3;
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let prior = random_dist(n, &mut rng);
        let q = CondTable::from_columns(&vec![prior.clone(); m]).unwrap();
        let p = CondTable::uniform(m, n).unwrap();
        let b = vfe_exact_discrete(1, &q, &p, &prior).unwrap();
        assert_abs_diff_eq!(b.reconstruction, (m as f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.kl, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bound_and_identity_hold_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..25 {
            let (m, n) = (4, 3);
            let prior = random_dist(n, &mut rng);
            let q = random_table(n, m, &mut rng);
            let p = random_table(m, n, &mut rng);
            let marginal = marginal_exact(&p, &prior).unwrap();
            for x in 0..m {
                let b = vfe_exact_discrete(x, &q, &p, &prior).unwrap();
                let neg_log_marginal = -marginal.probs()[x].ln();
                assert!(b.total - neg_log_marginal >= -1e-12, "bound violated");
                let gap = tightness_gap(x, &q, &p, &prior).unwrap();
                assert!(gap >= -1e-15);
                let identity = b.total + marginal.probs()[x].ln();
                assert!((gap - identity).abs() < 1e-12, "gap {gap} vs identity {identity}");
            }
        }
    }

    #[test]
    fn gap_vanishes_exactly_at_the_derived_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (m, n) = (4, 3);
        let prior = random_dist(n, &mut rng);
        let p = random_table(m, n, &mut rng);
        let marginal = marginal_exact(&p, &prior).unwrap();
        // build Q as the exact derived posterior q(z|x) = p(x|z) prior(z) / p(x)
        let mut cols = Vec::with_capacity(m);
        for x in 0..m {
            let col: Vec<f64> = (0..n)
                .map(|z| p.get(x, z) * prior.probs()[z] / marginal.probs()[x])
                .collect();
            cols.push(Dist::new(col).unwrap());
        }
        let q = CondTable::from_columns(&cols).unwrap();
        for x in 0..m {
            let gap = tightness_gap(x, &q, &p, &prior).unwrap();
            assert!(gap.abs() < 1e-12, "gap {gap} at x = {x}");
            let b = vfe_exact_discrete(x, &q, &p, &prior).unwrap();
            assert!((b.total + marginal.probs()[x].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn support_violations_are_rejected() {
        let prior = Dist::uniform(2).unwrap();
        // Q sends x = 0 to z = 1 with positive probability…
        let q = CondTable::new(2, 2, vec![0.5, 1.0, 0.5, 0.0]).unwrap();
        // …but P can never produce x = 0 from z = 1.
        let p = CondTable::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            vfe_exact_discrete(0, &q, &p, &prior),
            Err(GsnError::SupportViolation { .. })
        ));

        let zero_prior = Dist::new(vec![1.0, 0.0]).unwrap();
        let q_full = CondTable::uniform(2, 2).unwrap();
        let p_full = CondTable::uniform(2, 2).unwrap();
        assert!(matches!(
            vfe_exact_discrete(0, &q_full, &p_full, &zero_prior),
            Err(GsnError::SupportViolation { .. })
        ));
    }

    #[test]
    fn marginal_special_cases_and_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let prior = random_dist(3, &mut rng);
        let eye = CondTable::identity(3).unwrap();
        assert_eq!(marginal_exact(&eye, &prior).unwrap().probs(), prior.probs());

        let uni = CondTable::uniform(4, 3).unwrap();
        for &v in marginal_exact(&uni, &prior).unwrap().probs() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }

        let p = random_table(4, 3, &mut rng);
        let marg = marginal_exact(&p, &prior).unwrap();
        for x in 0..4 {
            let direct: f64 = (0..3).map(|z| p.get(x, z) * prior.probs()[z]).sum();
            assert!((marg.probs()[x] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_at_the_clamp_limit_matches_closed_form() {
        // A corruption conditional pinned at the log-variance clamp floor is
        // the nearest thing to a deterministic encoder this family allows;
        // its divergence from the prior is ½ Σ_j (μ_j² + e⁻⁸ + 8 − 1).
        let mut tape = Tape::new();
        let mu = [0.7, -1.2];
        let enc = DiagGaussian {
            mean: tape.leaf(Tensor::matrix(1, 2, mu.to_vec()).unwrap()),
            logvar: tape.leaf(Tensor::filled(&[1, 2], -8.0)),
        };
        let kl = kl_gauss_to_std(&mut tape, &enc).unwrap();
        let expect: f64 = mu
            .iter()
            .map(|m| 0.5 * (m * m + (-8.0_f64).exp() + 8.0 - 1.0))
            .sum();
        assert_abs_diff_eq!(tape.value(kl).data()[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let gsn = SimpleGsn::new(2, 2, &[3], &[3], DecoderHead::Gaussian, 19).unwrap();
        let mut rng = stream_rng(23, 0);
        let x_t = Tensor::standard_normal(&[3, 2], &mut rng);
        let noises = vec![Tensor::standard_normal(&[3, 2], &mut rng)];
        let n_enc = gsn.encoder().leaf_tensors().len();
        let mut leaves = gsn.encoder().leaf_tensors();
        leaves.extend(gsn.decoder().leaf_tensors());
        let f = {
            let gsn = gsn.clone();
            let x_t = x_t.clone();
            let noises = noises.clone();
            move |tape: &mut Tape, vars: &[Var]| {
                let gv = GsnVars {
                    enc: gsn.encoder().bind(&vars[..n_enc])?,
                    dec: gsn.decoder().bind(&vars[n_enc..])?,
                };
                let x = tape.leaf(x_t.clone());
                let terms = vfe_transcode(tape, &gsn, &gv, x, x, &noises)?;
                Ok(terms.total)
            }
        };
        let err = crate::autodiff::grad_check(&f, &leaves, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
