//! Train the default model on a ring of eight Gaussians and report how
//! closely the chain's long-run samples match the data statistics.

use gsn_shaper::train::{evaluate, train_loop, TrainConfig};

fn main() -> gsn_shaper::Result<()> {
    let cfg = TrainConfig::default();
    let dataset = cfg.build_dataset()?;
    println!(
        "training {} steps on `{}` ({} points, {} dims), unroll T={} ...",
        cfg.steps,
        cfg.dataset,
        dataset.n(),
        dataset.dim(),
        cfg.t_unroll
    );

    let (trainer, history) = train_loop(&cfg, &dataset, None)?;
    for rec in history.records.iter().filter(|r| r.step % 250 == 0) {
        println!(
            "  step {:4}  guide {:.4}  shape penalty {:.4}  f(data) {:+.3}  f(chain) {:+.3}",
            rec.step, rec.loss_f, rec.loss_g, rec.guide_on_data, rec.guide_on_chain
        );
    }

    let rep = evaluate(&trainer.gsn, &trainer.guide, &dataset, 512, 20, 0)?;
    println!("\npooled {} chain states vs data:", rep.n_samples);
    println!("  mean error            {:.4}", rep.mean_error_norm);
    println!("  cov relative error    {:.4}", rep.cov_rel_frobenius);
    println!("  combined stats error  {:.4}", rep.stats_rel_frobenius);
    println!("  mean |f| on data      {:.4}", rep.guide_mean_abs_data);
    println!("  mean step distance    {:.4}", rep.mean_step_displacement);
    Ok(())
}
