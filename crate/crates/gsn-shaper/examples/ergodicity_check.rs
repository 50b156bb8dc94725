//! Classify transition kernels as ergodic, reducible, or periodic, with a
//! witness for each failure mode.

use gsn_shaper::exact::{is_ergodic, stationary, TransitionMatrix};

fn main() -> gsn_shaper::Result<()> {
    // Identity kernel: every state is absorbing, so nothing can move.
    let identity = TransitionMatrix::new(
        3,
        vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ],
    )?;

    // Deterministic swap: the chain alternates forever between two states.
    let swap = TransitionMatrix::new(
        2,
        vec![
            0.0, 1.0, //
            1.0, 0.0,
        ],
    )?;

    // Strictly positive kernel: aperiodic and irreducible. Row-major [to][from],
    // so each column (a "from" state) sums to one.
    let mixing = TransitionMatrix::new(
        3,
        vec![
            0.5, 0.2, 0.3, //
            0.3, 0.5, 0.3, //
            0.2, 0.3, 0.4,
        ],
    )?;

    for (name, t) in [("identity", &identity), ("swap", &swap), ("mixing", &mixing)] {
        println!("{name:8} -> {}", is_ergodic(t));
    }

    // Only the ergodic kernel has a unique stationary law to converge to.
    let pi = stationary(&mixing)?;
    println!("\nstationary law of the mixing kernel: {:?}", pi.probs());
    let moved = mixing.apply(pi.probs());
    let drift = pi
        .probs()
        .iter()
        .zip(&moved)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    println!("fixed-point residual after one step: {drift:.3e}");
    Ok(())
}
