//! Named verification suites: fixed desk-scale check batteries over the
//! exact oracles, the autodiff engine, and the chain procedures. The CLI
//! `verify` command and the acceptance tests both run these, so a suite is
//! the single source of truth for what "passing" means.

use std::fs;
use std::path::Path;

use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::data::random_discrete_target;
use crate::error::{GsnError, Result};
use crate::exact::{
    is_ergodic, stationarity_residual, CondTable, Dist, ErgodicityVerdict, TransitionMatrix,
};
use crate::iofmt::{csv_row, fmt_f64};
use crate::nets::Mlp;
use crate::rng::stream_rng;
use crate::sgsn::{DecoderHead, SimpleGsn};
use crate::shaping::{
    deviance, fixed_point_gradient, loss_f, loss_g, loss_g_exact, minimize_loss_f,
    optimal_guide_discrete, verify_collaborative, Guide,
};
use crate::train::{draw_chain_noises, generator_loss, TrainConfig};
use crate::vfe::{marginal_exact, tightness_gap, vfe_exact_discrete};

/// One check: a measured value against its tolerance, with a witness string.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub case: String,
    /// What `value` measures (residual, max_rel_err, verdict, …).
    pub metric: String,
    /// Measured number; NaN when the check is textual (verdict match).
    pub value: f64,
    /// Upper bound for a pass; NaN when the check is textual.
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl CheckRow {
    fn bounded(case: impl Into<String>, metric: &str, value: f64, threshold: f64) -> Self {
        CheckRow {
            case: case.into(),
            metric: metric.into(),
            value,
            threshold,
            pass: value.is_finite() && value < threshold,
            detail: String::new(),
        }
    }

    fn textual(case: impl Into<String>, metric: &str, pass: bool, detail: String) -> Self {
        CheckRow {
            case: case.into(),
            metric: metric.into(),
            value: f64::NAN,
            threshold: f64::NAN,
            pass,
            detail,
        }
    }

    fn with_detail(mut self, detail: String) -> Self {
        self.detail = detail;
        self
    }
}

/// All rows of one named suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    /// CSV rendering: one row per check, stable column order, lossless floats.
    pub fn to_csv(&self) -> String {
        let mut out = csv_row(&[
            "suite", "case", "metric", "value", "threshold", "pass", "detail",
        ]);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_row(&[
                self.suite.clone(),
                r.case.clone(),
                r.metric.clone(),
                fmt_f64(r.value),
                fmt_f64(r.threshold),
                r.pass.to_string(),
                r.detail.clone(),
            ]));
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| GsnError::io(path.display().to_string(), e))
    }
}

/// Salted sub-seed so each case of a suite draws independent tables.
fn case_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

/// A random full-support corruption table Q(z|x): one Dirichlet column per
/// conditioning state.
fn random_cond_table(out_dim: usize, cond_dim: usize, seed: u64) -> Result<CondTable> {
    let cols: Vec<Dist> = (0..cond_dim)
        .map(|x| random_discrete_target(out_dim, 1.0, case_seed(seed, x as u64)))
        .collect::<Result<_>>()?;
    CondTable::from_columns(&cols)
}

/// Stationary-distribution oracle: for 20 seeded full-support (D, Q) pairs
/// with 5 observable and 4 latent states, the chain built from the exact
/// posterior has D as its stationary distribution, max residual < 1e-10.
pub fn run_theorem1(seed: u64) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for i in 0..20u64 {
        let s = case_seed(seed, 1000 + i);
        let d = random_discrete_target(5, 1.0, s)?;
        let q = random_cond_table(4, 5, case_seed(s, 7))?;
        let residual = stationarity_residual(&d, &q)?;
        rows.push(CheckRow::bounded(
            format!("pair_{i:02}"),
            "stationary_residual",
            residual,
            1e-10,
        ));
    }
    Ok(SuiteReport {
        suite: "theorem1".into(),
        rows,
    })
}

/// The bundled 4-state identity chain: every state is absorbing.
pub fn bundled_identity_matrix() -> TransitionMatrix {
    let m = 4;
    let mut p = vec![0.0; m * m];
    for i in 0..m {
        p[i * m + i] = 1.0;
    }
    TransitionMatrix::new(m, p).expect("identity is stochastic")
}

/// The bundled deterministic 2-cycle 0 ↔ 1.
pub fn bundled_two_cycle_matrix() -> TransitionMatrix {
    TransitionMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).expect("cycle is stochastic")
}

/// A seeded full-support random chain (every transition probability > 0).
pub fn bundled_random_matrix(seed: u64) -> Result<TransitionMatrix> {
    let m = 5;
    let cols: Vec<Dist> = (0..m)
        .map(|from| random_discrete_target(m, 1.0, case_seed(seed, 2000 + from as u64)))
        .collect::<Result<_>>()?;
    let mut p = vec![0.0; m * m];
    for (from, col) in cols.iter().enumerate() {
        for to in 0..m {
            p[to * m + from] = col.probs()[to];
        }
    }
    TransitionMatrix::new(m, p)
}

/// Ergodicity classification: the three bundled chains must produce the
/// expected verdicts with witnesses.
pub fn run_corollary2(seed: u64) -> Result<SuiteReport> {
    let expect_reducible = |v: &ErgodicityVerdict| matches!(v, ErgodicityVerdict::Reducible { .. });
    let expect_period2 =
        |v: &ErgodicityVerdict| matches!(v, ErgodicityVerdict::Periodic { period: 2 });
    let expect_ergodic = |v: &ErgodicityVerdict| matches!(v, ErgodicityVerdict::Ergodic);
    let cases: Vec<(&str, TransitionMatrix, &dyn Fn(&ErgodicityVerdict) -> bool, &str)> = vec![
        ("identity", bundled_identity_matrix(), &expect_reducible, "reducible"),
        ("two_cycle", bundled_two_cycle_matrix(), &expect_period2, "periodic, period 2"),
        ("random_full_support", bundled_random_matrix(seed)?, &expect_ergodic, "ergodic"),
    ];
    let rows = cases
        .into_iter()
        .map(|(name, t, expect, want)| {
            let verdict = is_ergodic(&t);
            CheckRow::textual(
                name,
                "verdict",
                expect(&verdict),
                format!("got \"{verdict}\", expected {want}"),
            )
        })
        .collect();
    Ok(SuiteReport {
        suite: "corollary2".into(),
        rows,
    })
}

/// Free-energy bound oracle on 50 seeded (Q, P, prior) triples with 5
/// observable and 4 latent states: the bound never goes below −1e-12, is
/// tight exactly at the derived posterior, and the gap identity
/// gap = F + log marginal holds to 1e-12.
pub fn run_vfe_bound(seed: u64) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    let (m, n) = (5usize, 4usize);
    for i in 0..50u64 {
        let s = case_seed(seed, 3000 + i);
        let q = random_cond_table(n, m, s)?;
        let p = random_cond_table(m, n, case_seed(s, 11))?;
        let prior = random_discrete_target(n, 1.0, case_seed(s, 13))?;
        let marginal = marginal_exact(&p, &prior)?;

        let mut worst_bound = f64::INFINITY;
        let mut worst_identity = 0.0f64;
        for x in 0..m {
            let f = vfe_exact_discrete(x, &q, &p, &prior)?;
            let log_px = marginal.probs()[x].ln();
            worst_bound = worst_bound.min(f.total + log_px);
            let gap = tightness_gap(x, &q, &p, &prior)?;
            worst_identity = worst_identity.max((gap - (f.total + log_px)).abs());
        }
        rows.push(
            CheckRow::bounded(format!("triple_{i:02}"), "neg_bound_slack", -worst_bound, 1e-12)
                .with_detail(format!("min_x F(x) + log p(x) = {worst_bound:.3e}")),
        );
        rows.push(CheckRow::bounded(
            format!("triple_{i:02}"),
            "gap_identity_err",
            worst_identity,
            1e-12,
        ));

        // swap Q for the posterior the bound derives from (P, prior): the
        // gap must vanish and the bound must be tight, both to 1e-12
        let q_star = {
            let cols: Vec<Dist> = (0..m)
                .map(|x| {
                    Dist::new(
                        (0..n)
                            .map(|z| p.get(x, z) * prior.probs()[z] / marginal.probs()[x])
                            .collect(),
                    )
                })
                .collect::<Result<_>>()?;
            CondTable::from_columns(&cols)?
        };
        let mut worst_gap = 0.0f64;
        let mut worst_tight = 0.0f64;
        for x in 0..m {
            worst_gap = worst_gap.max(tightness_gap(x, &q_star, &p, &prior)?.abs());
            let f = vfe_exact_discrete(x, &q_star, &p, &prior)?;
            worst_tight = worst_tight.max((f.total + marginal.probs()[x].ln()).abs());
        }
        rows.push(CheckRow::bounded(
            format!("triple_{i:02}"),
            "posterior_gap",
            worst_gap,
            1e-12,
        ));
        rows.push(CheckRow::bounded(
            format!("triple_{i:02}"),
            "posterior_bound_slack",
            worst_tight,
            1e-12,
        ));
    }
    Ok(SuiteReport {
        suite: "vfe-bound".into(),
        rows,
    })
}

/// Joint-optimum characterization on 8-state spaces: convex minimization
/// recovers the log-ratio guide, the generator objective vanishes exactly
/// when G = D and not otherwise, G = D is an exact fixed point, and the
/// alternating scheme empirically converges in total variation.
pub fn run_theorem3(seed: u64) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    let m = 8;
    for i in 0..8u64 {
        let s = case_seed(seed, 4000 + i);
        let d = random_discrete_target(m, 1.0, s)?;
        let g = random_discrete_target(m, 1.0, case_seed(s, 17))?;
        let f_star = optimal_guide_discrete(&d, &g)?;
        let f_hat = minimize_loss_f(&d, &g, 200)?;
        let err = f_star
            .iter()
            .zip(&f_hat)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rows.push(CheckRow::bounded(
            format!("recover_{i}"),
            "guide_max_err",
            err,
            1e-6,
        ));
    }

    let d = random_discrete_target(m, 1.0, case_seed(seed, 23))?;
    let f_at_d = optimal_guide_discrete(&d, &d)?;
    let lg_equal = loss_g_exact(&f_at_d, &d)?;
    rows.push(
        CheckRow::textual(
            "objective_zero_at_match",
            "loss_g",
            lg_equal == 0.0,
            format!("loss_g(f*, G=D) = {lg_equal:e}, expected exactly 0"),
        ),
    );
    let g_off = {
        let mut p = d.probs().to_vec();
        p[0] += 0.05;
        p[1] -= 0.05;
        Dist::new(p)?
    };
    let f_off = optimal_guide_discrete(&d, &g_off)?;
    let lg_off = loss_g_exact(&f_off, &g_off)?;
    rows.push(CheckRow::textual(
        "objective_positive_off_match",
        "loss_g",
        lg_off > 1e-12,
        format!("loss_g at max|G−D| = 0.05 is {lg_off:.3e}, expected > 0"),
    ));
    let fp = fixed_point_gradient(&d)?;
    rows.push(CheckRow::textual(
        "fixed_point",
        "max_abs_logit_grad",
        fp == 0.0,
        format!("gradient at G = D is {fp:e}, expected exactly 0"),
    ));

    let target = random_discrete_target(m, 2.0, seed)?;
    let run = verify_collaborative(&target, 5000, 0.05, seed)?;
    rows.push(
        CheckRow::bounded("alternating_5000", "final_tv", run.final_tv, 0.05)
            .with_detail(format!("tv after 100 iters {:.4}", run.tv_trace[99])),
    );
    Ok(SuiteReport {
        suite: "theorem3".into(),
        rows,
    })
}

/// Logistic-deviance identities: value at zero, the reflection identity on
/// [−30, 30], and saturation without overflow at |f| = 10⁶.
pub fn run_deviance() -> Result<SuiteReport> {
    let b0 = deviance(0.0);
    let mut rows = vec![CheckRow::bounded(
        "value_at_zero",
        "abs_err_vs_ln2",
        (b0 - std::f64::consts::LN_2).abs(),
        1e-15,
    )
    .with_detail(format!("b(0) = {b0:.7}"))];

    let mut worst = 0.0f64;
    for i in 0..=600 {
        let f = -30.0 + i as f64 * 0.1;
        worst = worst.max((deviance(-f) - deviance(f) - f).abs());
    }
    rows.push(CheckRow::bounded(
        "reflection_identity",
        "max_err_on_[-30,30]",
        worst,
        1e-12,
    ));

    let big = 1e6;
    let sat_err = (deviance(-big) - big).abs().max(deviance(big).abs());
    rows.push(
        CheckRow::bounded("saturation_1e6", "abs_err", sat_err, 1e-12).with_detail(format!(
            "b(-1e6) = {:e}, b(1e6) = {:e}",
            deviance(-big),
            deviance(big)
        )),
    );
    Ok(SuiteReport {
        suite: "deviance".into(),
        rows,
    })
}

/// Reverse-mode gradients against central finite differences at step 1e-5:
/// a plain network scalar loss, the full two-step chain objective, and both
/// shaping losses. Max relative error < 1e-4 everywhere.
pub fn run_gradcheck(seed: u64) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    let step = 1e-5;
    let tol = 1e-4;

    // (a) plain network: mean squared output over a fixed batch
    {
        let mlp = Mlp::new(&[3, 8, 2], case_seed(seed, 31))?;
        let mut rng = stream_rng(case_seed(seed, 37), 0);
        let batch = Tensor::standard_normal(&[5, 3], &mut rng);
        let leaves = mlp.leaf_tensors();
        let f = {
            let mlp = mlp.clone();
            move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
                let mv = mlp.bind(vars)?;
                let x = tape.leaf(batch.clone());
                let y = mlp.forward(tape, &mv, x)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            }
        };
        let err = grad_check(&f, &leaves, step)?;
        rows.push(CheckRow::bounded("mlp_scalar_loss", "max_rel_err", err, tol));
    }

    // (b) the full T = 2 chain objective, all three terms active
    {
        let cfg = TrainConfig {
            t_unroll: 2,
            lambda_vfe: 1.0,
            lambda_shape: 1.0,
            lambda_mm: 0.5,
            ..TrainConfig::default()
        };
        let gsn = SimpleGsn::new(2, 2, &[4], &[4], DecoderHead::Gaussian, case_seed(seed, 41))?;
        let guide = Guide::new(2, &[4], case_seed(seed, 43))?;
        let mut rng = stream_rng(case_seed(seed, 47), 0);
        let batch = Tensor::standard_normal(&[3, 2], &mut rng);
        let mean = Tensor::zeros(&[2]);
        let cov = {
            let mut t = Tensor::zeros(&[2, 2]);
            t.data_mut()[0] = 1.0;
            t.data_mut()[3] = 1.0;
            t
        };
        let noises = draw_chain_noises(3, 2, 2, 2, &mut rng);
        let leaves = gsn.leaf_tensors();
        let f = {
            let gsn = gsn.clone();
            let guide = guide.clone();
            move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
                let gvars = gsn.bind_vars(vars)?;
                let gv = guide.register(tape);
                let x0 = tape.leaf(batch.clone());
                let graph =
                    generator_loss(tape, &gsn, &gvars, &guide, &gv, x0, &noises, &mean, &cov, &cfg)?;
                Ok(graph.total)
            }
        };
        let err = grad_check(&f, &leaves, step)?;
        rows.push(CheckRow::bounded("bptt_t2_chain", "max_rel_err", err, tol));
    }

    // (c) both shaping losses through the guide's parameters; batches are
    // scaled away from the hinge kink so the difference quotient is clean
    {
        let guide = Guide::new(2, &[6], case_seed(seed, 53))?;
        let mut rng = stream_rng(case_seed(seed, 59), 0);
        let scale = |mut t: Tensor| {
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            t
        };
        let data = scale(Tensor::standard_normal(&[6, 2], &mut rng));
        let gen = scale(Tensor::standard_normal(&[6, 2], &mut rng));
        let leaves = guide.net().leaf_tensors();
        let f_lf = {
            let guide = guide.clone();
            let (data, gen) = (data.clone(), gen.clone());
            move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
                let gv = guide.net().bind(vars)?;
                let d = tape.leaf(data.clone());
                let g = tape.leaf(gen.clone());
                loss_f(tape, &guide, &gv, d, g)
            }
        };
        let err = grad_check(&f_lf, &leaves, step)?;
        rows.push(CheckRow::bounded("guide_loss", "max_rel_err", err, tol));

        let f_lg = {
            let guide = guide.clone();
            let gen = gen.clone();
            move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
                let gv = guide.net().bind(vars)?;
                let g = tape.leaf(gen.clone());
                loss_g(tape, &guide, &gv, g)
            }
        };
        let err = grad_check(&f_lg, &leaves, step)?;
        rows.push(CheckRow::bounded("generator_shaping_loss", "max_rel_err", err, tol));
    }

    Ok(SuiteReport {
        suite: "gradcheck".into(),
        rows,
    })
}

/// Walkback procedure semantics: pair counts, anchoring to the input,
/// burn-in-independent streams, and single-step latent moments matching the
/// corruption conditional.
pub fn run_walkback(seed: u64) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    let gsn = SimpleGsn::new(2, 2, &[8], &[8], DecoderHead::Gaussian, case_seed(seed, 61))?;
    let mut rng = stream_rng(case_seed(seed, 67), 0);
    let x = Tensor::standard_normal(&[4, 2], &mut rng);

    let empty = gsn.walkback_pairs(&x, 2, 0, &mut stream_rng(seed, 1))?;
    rows.push(CheckRow::textual(
        "roll_out_zero",
        "pair_count",
        empty.is_empty(),
        format!("{} pairs, expected 0", empty.len()),
    ));

    let three = gsn.walkback_pairs(&x, 2, 3, &mut stream_rng(seed, 1))?;
    let anchored = three.pairs().iter().all(|(px, _)| px == &x);
    rows.push(CheckRow::textual(
        "roll_out_three",
        "pairs_anchored_to_input",
        three.len() == 3 && anchored,
        format!("{} pairs, all anchored: {anchored}", three.len()),
    ));

    let mut burn_identical = true;
    let baseline = gsn.walkback_pairs(&x, 0, 3, &mut stream_rng(seed, 1))?;
    for k_burn in [1usize, 2, 7] {
        let run = gsn.walkback_pairs(&x, k_burn, 3, &mut stream_rng(seed, 1))?;
        burn_identical &= run == baseline;
    }
    rows.push(CheckRow::textual(
        "burn_in_invariance",
        "pair_streams_bitwise_equal",
        burn_identical,
        "k_burn_in ∈ {0, 1, 2, 7} from one generator state".into(),
    ));

    // one roll-out step from 10⁵ copies of one point: the collected latents
    // are draws from the corruption conditional at that point
    let n = 100_000;
    let point = [0.3, -0.7];
    let big = Tensor::from_vec(vec![n, 2], point.iter().cycle().take(2 * n).copied().collect())?;
    let pairs = gsn.walkback_pairs(&big, 0, 1, &mut stream_rng(seed, 2))?;
    let z = &pairs.pairs()[0].1;
    let (mu, var) = {
        let mut tape = Tape::new();
        let vars = gsn.register(&mut tape);
        let xv = tape.leaf(Tensor::from_vec(vec![1, 2], point.to_vec())?);
        let enc = gsn.encode(&mut tape, &vars, xv)?;
        let mu = tape.value(enc.mean).clone();
        let var: Vec<f64> = tape.value(enc.logvar).data().iter().map(|lv| lv.exp()).collect();
        (mu, var)
    };
    let mut worst = 0.0f64;
    for j in 0..2 {
        let col: Vec<f64> = (0..n).map(|i| z.get2(i, j)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max((mean - mu.data()[j]).abs());
        worst = worst.max((v.sqrt() - var[j].sqrt()).abs());
    }
    rows.push(
        CheckRow::bounded("latent_moments_1e5", "max_moment_err", worst, 0.02)
            .with_detail("mean and std of ẑ vs the corruption conditional".into()),
    );

    Ok(SuiteReport {
        suite: "walkback".into(),
        rows,
    })
}

/// Run a suite by its command-line name.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "theorem1" => run_theorem1(seed),
        "corollary2" => run_corollary2(seed),
        "theorem3" => run_theorem3(seed),
        "vfe-bound" => run_vfe_bound(seed),
        "gradcheck" => run_gradcheck(seed),
        "deviance" => run_deviance(),
        "walkback" => run_walkback(seed),
        other => Err(GsnError::invalid(
            "run_suite",
            format!(
                "unknown suite {other:?} (theorem1|corollary2|theorem3|vfe-bound|gradcheck|deviance|walkback)"
            ),
        )),
    }
}

pub const SUITE_NAMES: [&str; 7] = [
    "theorem1",
    "corollary2",
    "theorem3",
    "vfe-bound",
    "gradcheck",
    "deviance",
    "walkback",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_at_seed_zero() {
        for name in SUITE_NAMES {
            let report = run_suite(name, 0).unwrap();
            for row in &report.rows {
                assert!(row.pass, "{name}/{}: {:?}", row.case, row);
            }
            assert!(report.passed());
        }
    }

    #[test]
    fn reports_render_as_csv_with_header_and_one_line_per_row() {
        let report = run_deviance().unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "suite,case,metric,value,threshold,pass,detail"
        );
        assert_eq!(lines.count(), report.rows.len());
        assert!(csv.contains("b(0) = 0.6931472"));
    }

    #[test]
    fn suites_are_deterministic_given_seed() {
        assert_eq!(run_theorem1(3).unwrap(), run_theorem1(3).unwrap());
        assert_eq!(run_gradcheck(5).unwrap(), run_gradcheck(5).unwrap());
    }

    #[test]
    fn corollary2_verdict_details_name_the_witness() {
        let report = run_corollary2(0).unwrap();
        let detail: Vec<&str> = report.rows.iter().map(|r| r.detail.as_str()).collect();
        assert!(detail[0].contains("reducible"), "{}", detail[0]);
        assert!(detail[1].contains("periodic, period 2"), "{}", detail[1]);
        assert!(detail[2].contains("ergodic"), "{}", detail[2]);
    }

    #[test]
    fn unknown_suite_is_rejected_naming_the_options() {
        let err = run_suite("theorem9", 0).unwrap_err().to_string();
        assert!(err.contains("theorem9") && err.contains("walkback"), "{err}");
    }

    #[test]
    fn a_failing_check_fails_its_report() {
        let mut report = run_deviance().unwrap();
        report.rows[0].pass = false;
        assert!(!report.passed());
    }
}
