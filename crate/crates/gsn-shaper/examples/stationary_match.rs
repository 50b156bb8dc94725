//! Exact finite-space check that a chain built from a data distribution's own
//! posterior has that distribution as its stationary law.

use gsn_shaper::data::random_discrete_target;
use gsn_shaper::exact::{
    exact_posterior, stationary, transition_matrix, stationarity_residual, CondTable, Dist,
};

fn main() -> gsn_shaper::Result<()> {
    let m = 5; // observable states
    let n = 4; // latent states

    // Random data distribution D over X and corruption table Q(z|x).
    let d = random_discrete_target(m, 1.0, 7)?;
    let cols: Vec<Dist> = (0..m)
        .map(|x| random_discrete_target(n, 1.0, 100 + x as u64))
        .collect::<gsn_shaper::Result<_>>()?;
    let q = CondTable::from_columns(&cols)?;

    // The ideal reconstruction is the posterior P*(x|z) under the joint D·Q.
    let p_star = exact_posterior(&d, &q)?;

    // Chain kernel T(x'|x) = Σ_z P*(x'|z) Q(z|x); its stationary law is D.
    let t = transition_matrix(&p_star, &q)?;
    let pi = stationary(&t)?;

    println!("data distribution D : {:?}", rounded(d.probs()));
    println!("stationary law of T : {:?}", rounded(pi.probs()));
    println!("total variation     : {:.3e}", pi.tv(&d)?);

    // The bundled one-call verifier reports the max elementwise residual.
    let residual = stationarity_residual(&d, &q)?;
    println!("max residual        : {:.3e}", residual);
    assert!(residual < 1e-10);
    println!("stationary law matches the data distribution.");
    Ok(())
}

fn rounded(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| (v * 1e4).round() / 1e4).collect()
}
