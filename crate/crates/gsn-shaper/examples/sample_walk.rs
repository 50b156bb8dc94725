//! Walk the learned Markov chain: train briefly, unroll a few chains from
//! data starts, print one trajectory, and render a scatter image.

use gsn_shaper::autodiff::Tape;
use gsn_shaper::ppm;
use gsn_shaper::rng::stream_rng;
use gsn_shaper::train::{train_loop, TrainConfig};

fn main() -> gsn_shaper::Result<()> {
    let cfg = TrainConfig {
        steps: 800,
        ..TrainConfig::default()
    };
    let dataset = cfg.build_dataset()?;
    println!("training {} steps ...", cfg.steps);
    let (trainer, _) = train_loop(&cfg, &dataset, None)?;

    // Unroll 64 chains for 20 transitions, starting from dataset rows.
    let n_chains = 64;
    let t_steps = 20;
    let mut rng = stream_rng(cfg.seed, u64::MAX - 2);
    let starts = dataset.gather_rows(&(0..n_chains).collect::<Vec<_>>())?;

    let mut tape = Tape::new();
    let vars = trainer.gsn.register(&mut tape);
    let x0 = tape.leaf(starts);
    let traj = trainer
        .gsn
        .unroll_chain(&mut tape, &vars, x0, t_steps, &mut rng)?;

    println!("\nchain 0 trajectory (x_0 .. x_{t_steps}):");
    for (t, state) in traj.states().iter().enumerate() {
        let row = tape.value(*state);
        println!("  t={:2}  ({:+.3}, {:+.3})", t, row.data()[0], row.data()[1]);
    }

    // Final states of all chains over the data cloud.
    let finals = tape.value(traj.steps.last().unwrap().x_next).clone();
    std::fs::create_dir_all("gsn-out").map_err(|e| gsn_shaper::GsnError::Io {
        path: "gsn-out".into(),
        source: e,
    })?;
    let raster = ppm::scatter(Some(dataset.samples()), &finals)?;
    raster.save(std::path::Path::new("gsn-out/walk.ppm"))?;
    println!("\nwrote gsn-out/walk.ppm ({} final states over the dataset)", n_chains);
    Ok(())
}
