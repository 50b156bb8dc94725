//! Collect walkback training pairs: repeated corrupt-reconstruct rounds that
//! all anchor to the same input, dispersing the effective corruption while
//! each latent draw stays faithful to the one-step conditional.

use gsn_shaper::autodiff::{Tape, Tensor};
use gsn_shaper::rng::stream_rng;
use gsn_shaper::sgsn::{DecoderHead, SimpleGsn};

fn main() -> gsn_shaper::Result<()> {
    let gsn = SimpleGsn::new(2, 2, &[16], &[16], DecoderHead::Gaussian, 0)?;
    let x = Tensor::from_vec(vec![3, 2], vec![0.5, -0.5, 1.0, 0.0, -1.0, 1.0])?;

    // Zero rollouts collect nothing; k rollouts collect k pairs, every one
    // anchored to the untouched input batch.
    let empty = gsn.walkback_pairs(&x, 2, 0, &mut stream_rng(0, 0))?;
    println!("k_roll_out = 0: {} pairs", empty.len());

    let pairs = gsn.walkback_pairs(&x, 2, 3, &mut stream_rng(0, 0))?;
    println!("k_roll_out = 3: {} pairs, all anchored:", pairs.len());
    for (i, (anchor, zhat)) in pairs.pairs().iter().enumerate() {
        println!(
            "  round {i}: anchor == input: {}, latent batch {:?}",
            anchor == &x,
            zhat.shape()
        );
    }

    // Burn-in wanders the chain before collection starts, but the collected
    // latent stream itself is seed-identical for any burn-in length.
    let base = gsn.walkback_pairs(&x, 0, 3, &mut stream_rng(0, 1))?;
    for k_burn in [1, 5, 9] {
        let other = gsn.walkback_pairs(&x, k_burn, 3, &mut stream_rng(0, 1))?;
        println!(
            "burn-in {k_burn}: collected pairs bitwise equal to burn-in 0: {}",
            other == base
        );
    }

    // With one rollout, the latent draws are plain samples of q(z|x): their
    // empirical moments must match the encoder's conditional.
    let n = 100_000;
    let point = [0.3, -0.7];
    let big = Tensor::from_vec(vec![n, 2], point.iter().cycle().take(2 * n).copied().collect())?;
    let drawn = gsn.walkback_pairs(&big, 0, 1, &mut stream_rng(0, 2))?;
    let z = &drawn.pairs()[0].1;

    let mut tape = Tape::new();
    let vars = gsn.register(&mut tape);
    let xv = tape.leaf(Tensor::from_vec(vec![1, 2], point.to_vec())?);
    let cond = gsn.encode(&mut tape, &vars, xv)?;
    let mu = tape.value(cond.mean).data().to_vec();
    let sigma: Vec<f64> = tape
        .value(cond.logvar)
        .data()
        .iter()
        .map(|lv| (0.5 * lv).exp())
        .collect();

    println!("\n{n} one-rollout draws at x = {point:?}:");
    for j in 0..2 {
        let col: Vec<f64> = (0..n).map(|i| z.data()[i * 2 + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        println!(
            "  dim {j}: sample mean {:+.4} vs conditional {:+.4}, sample std {:.4} vs {:.4}",
            mean,
            mu[j],
            var.sqrt(),
            sigma[j]
        );
    }
    Ok(())
}
