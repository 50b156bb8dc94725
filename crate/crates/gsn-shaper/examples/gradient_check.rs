//! Check reverse-mode gradients against central finite differences, from a
//! plain network loss up to the full two-step unrolled chain objective.

use gsn_shaper::autodiff::{grad_check, Tensor};
use gsn_shaper::data::Dataset;
use gsn_shaper::nets::Mlp;
use gsn_shaper::rng::stream_rng;
use gsn_shaper::sgsn::{DecoderHead, SimpleGsn};
use gsn_shaper::shaping::{loss_f, loss_g, Guide};
use gsn_shaper::train::{draw_chain_noises, generator_loss, TrainConfig};

fn main() -> gsn_shaper::Result<()> {
    let step = 1e-5;
    let mut rng = stream_rng(42, 0);

    // Plain network: mean squared output of a [3, 8, 2] net.
    let mlp = Mlp::new(&[3, 8, 2], 1)?;
    let x = Tensor::standard_normal(&[5, 3], &mut rng);
    let err = grad_check(
        &|tape, vars| {
            let mvars = mlp.bind(vars)?;
            let xv = tape.leaf(x.clone());
            let y = mlp.forward(tape, &mvars, xv)?;
            let sq = tape.mul(y, y)?;
            tape.mean(sq)
        },
        &mlp.leaf_tensors(),
        step,
    )?;
    println!("network loss      max relative error {err:.2e}");

    // Full chain objective, two transitions, every term switched on. The
    // injected noises are fixed so the objective is deterministic in the
    // parameters being perturbed.
    let cfg = TrainConfig {
        t_unroll: 2,
        lambda_mm: 0.5,
        ..TrainConfig::default()
    };
    let gsn = SimpleGsn::new(2, 2, &[5], &[5], DecoderHead::Gaussian, 3)?;
    let guide = Guide::new(2, &[5], 4)?;
    let batch = Tensor::standard_normal(&[4, 2], &mut rng);
    let noises = draw_chain_noises(4, 2, 2, 2, &mut rng);
    let stats = Dataset::new(Tensor::standard_normal(&[32, 2], &mut rng))?;

    let mut leaves = gsn.leaf_tensors();
    let n_gsn = leaves.len();
    leaves.extend(guide.net().leaf_tensors());
    let err = grad_check(
        &|tape, vars| {
            let gvars = gsn.bind_vars(&vars[..n_gsn])?;
            let guide_vars = guide.net().bind(&vars[n_gsn..])?;
            let x0 = tape.leaf(batch.clone());
            let graph = generator_loss(
                tape,
                &gsn,
                &gvars,
                &guide,
                &guide_vars,
                x0,
                &noises,
                stats.mean(),
                stats.cov(),
                &cfg,
            )?;
            Ok(graph.total)
        },
        &leaves,
        step,
    )?;
    println!("chain objective   max relative error {err:.2e}");

    // Both guide-side losses, with the batches entering as constants.
    let data_batch = Tensor::standard_normal(&[6, 2], &mut rng);
    let gen_batch = Tensor::standard_normal(&[6, 2], &mut rng);
    let err = grad_check(
        &|tape, vars| {
            let gv = guide.net().bind(vars)?;
            let d = tape.leaf(data_batch.clone());
            let g = tape.leaf(gen_batch.clone());
            loss_f(tape, &guide, &gv, d, g)
        },
        &guide.net().leaf_tensors(),
        step,
    )?;
    println!("guide objective   max relative error {err:.2e}");

    let err = grad_check(
        &|tape, vars| {
            let gv = guide.net().bind(vars)?;
            let g = tape.leaf(gen_batch.clone());
            loss_g(tape, &guide, &gv, g)
        },
        &guide.net().leaf_tensors(),
        step,
    )?;
    println!("shaping penalty   max relative error {err:.2e}");
    Ok(())
}
