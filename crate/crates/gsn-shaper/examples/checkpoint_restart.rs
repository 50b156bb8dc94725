//! Checkpoint a run midway, restart from the saved state, and confirm the
//! resumed loss sequence is exactly the one the uninterrupted run recorded.

use gsn_shaper::train::{resume_loop, train_loop, Checkpoint, TrainConfig};

fn main() -> gsn_shaper::Result<()> {
    let dir = std::env::temp_dir().join("gsn-restart-demo");
    std::fs::create_dir_all(&dir).map_err(|e| gsn_shaper::GsnError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;

    let cfg = TrainConfig {
        steps: 40,
        dataset_n: 256,
        batch_size: 16,
        checkpoint_interval: 20,
        ..TrainConfig::default()
    };
    let dataset = cfg.build_dataset()?;

    println!("uninterrupted run: {} steps, checkpoint every {} ...", cfg.steps, cfg.checkpoint_interval);
    let (_, full_history) = train_loop(&cfg, &dataset, Some(&dir))?;

    let midway = dir.join("ckpt_00000020.gsnc");
    println!("restarting from {} ...", midway.display());
    let ck = Checkpoint::load(&midway)?;
    let (_, resumed) = resume_loop(&cfg, &dataset, &ck, None)?;

    let full_csv = full_history.to_csv();
    let tail: Vec<&str> = full_csv.lines().skip(1 + 20).collect();
    let resumed_csv = resumed.to_csv();
    let resumed_lines: Vec<&str> = resumed_csv.lines().skip(1).collect();

    println!("resumed steps recorded : {}", resumed_lines.len());
    println!("byte-identical suffix  : {}", tail == resumed_lines);
    assert_eq!(tail, resumed_lines);

    println!("last line, both runs   : {}", resumed_lines.last().unwrap());
    Ok(())
}
