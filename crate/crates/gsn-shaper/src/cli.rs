//! The `gsn-shaper` command line: `train`, `sample`, `verify`, and `export`.
//!
//! Exit codes are part of the interface: 0 success (all checks pass),
//! 1 verification failure, 2 usage or config error, 3 missing input,
//! 4 corrupt artifact. Every command is deterministic given `--seed`; all
//! outputs land under `--out`, falling back to `$GSN_SHAPER_OUT`, then
//! `./gsn-out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{save_csv, Dataset};
use crate::error::{GsnError, Result};
use crate::iofmt::{csv_row, fmt_f64};
use crate::ppm::scatter;
use crate::rng::stream_rng;
use crate::sgsn::SimpleGsn;
use crate::suites::{run_suite, SUITE_NAMES};
use crate::train::{
    models_from_checkpoint, train_loop, Checkpoint, TrainConfig, ARTIFACT_VERSION,
};

pub const OUT_ENV_VAR: &str = "GSN_SHAPER_OUT";
pub const DEFAULT_OUT_DIR: &str = "gsn-out";

/// Stream id for the sampling command (distinct from every training stream).
const STREAM_SAMPLE: u64 = u64::MAX - 2;

#[derive(Parser, Debug)]
#[command(
    name = "gsn-shaper",
    version,
    about = "Train, sample, verify, and export generative stochastic networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the alternating training loop and write history + checkpoints.
    Train(TrainArgs),
    /// Roll chains from a checkpoint and write a trajectory CSV + scatter PPM.
    Sample(SampleArgs),
    /// Run a named verification suite and write its CSV report.
    Verify(VerifyArgs),
    /// Export a dataset or a checkpoint's samples as CSV or PPM.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config file; defaults apply for every key left unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set steps=100; repeatable, wins over
    /// the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (else $GSN_SHAPER_OUT, else ./gsn-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of chains, each started at a dataset point.
    #[arg(long, default_value_t = 64)]
    n_chains: usize,
    /// Transitions per chain; 0 records only the starting points.
    #[arg(long, default_value_t = 50)]
    t_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset config for chain starts and the scatter overlay.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// One of: theorem1, corollary2, theorem3, vfe-bound, gradcheck,
    /// deviance, walkback.
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ExportSource {
    Dataset,
    Checkpoint,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Csv,
    Ppm,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// What to export: the configured dataset, or samples drawn from a
    /// checkpointed model.
    source: ExportSource,
    #[arg(long)]
    format: ExportFormat,
    /// Required when source = checkpoint.
    #[arg(long, required_if_eq("source", "checkpoint"))]
    checkpoint: Option<PathBuf>,
    /// Chains drawn when sampling from a checkpoint.
    #[arg(long, default_value_t = 1024)]
    n_chains: usize,
    /// Burn-in transitions before the exported states are read off.
    #[arg(long, default_value_t = 20)]
    t_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset config (source = dataset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// What a run was, where it wrote, and when — serialized as
/// `manifest.json` before the long computation starts and rewritten with
/// the end timestamp when it finishes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub start_unix_s: u64,
    pub end_unix_s: Option<u64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn start(command: &str, seed: u64, config: &TrainConfig, outputs: Vec<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            artifact_version: ARTIFACT_VERSION,
            seed,
            config: config.clone(),
            start_unix_s: unix_now(),
            end_unix_s: None,
            outputs,
        }
    }

    fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self).map_err(|e| {
            GsnError::invalid("manifest", e.to_string())
        })?;
        fs::write(&path, body).map_err(|e| GsnError::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// --out wins, then $GSN_SHAPER_OUT, then ./gsn-out; the directory is created.
fn resolve_out_dir(flag: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir).map_err(|e| GsnError::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if overrides.is_empty() {
        base.validate()?;
        Ok(base)
    } else {
        base.apply_overrides(overrides)
    }
}

/// Map an error to its documented exit code.
pub fn exit_code_for(e: &GsnError) -> i32 {
    match e {
        GsnError::Config { .. } | GsnError::InvalidArgument { .. } => 2,
        GsnError::Io { .. } => 3,
        GsnError::Parse { .. } | GsnError::CorruptCheckpoint { .. } => 4,
        _ => 1,
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version, 2 for usage errors
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Export(a) => cmd_export(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cfg = load_config(&args.config, &args.set)?;
    let out = resolve_out_dir(&args.out)?;
    let dataset = cfg.build_dataset()?;

    let history_path = out.join("history.csv");
    let mut expected: Vec<String> = vec![
        out.join("manifest.json").display().to_string(),
        history_path.display().to_string(),
    ];
    let mut ckpt_steps = vec![0u64];
    if cfg.checkpoint_interval > 0 {
        let mut s = cfg.checkpoint_interval;
        while s < cfg.steps {
            ckpt_steps.push(s);
            s += cfg.checkpoint_interval;
        }
    }
    if cfg.steps > 0 {
        ckpt_steps.push(cfg.steps);
    }
    for s in ckpt_steps {
        expected.push(out.join(format!("ckpt_{s:08}.gsnc")).display().to_string());
    }
    let mut manifest = RunManifest::start("train", cfg.seed, &cfg, expected);
    manifest.save(&out)?;

    let (trainer, history) = train_loop(&cfg, &dataset, Some(&out))?;
    history.save_csv(&history_path)?;

    manifest.end_unix_s = Some(unix_now());
    manifest.save(&out)?;

    println!(
        "trained {} steps on {} ({} points, dim {})",
        trainer.step,
        cfg.dataset,
        dataset.n(),
        dataset.dim()
    );
    if let Some(last) = history.records.last() {
        println!(
            "final losses: guide {:.4}, shaping {:.4}, free energy {:.4}",
            last.loss_f,
            last.loss_g,
            last.vfe_per_step.iter().sum::<f64>() / last.vfe_per_step.len().max(1) as f64
        );
    }
    for e in &history.events {
        println!("event at step {}: {}", e.step, e.what);
    }
    println!("artifacts in {}", out.display());
    Ok(0)
}

/// Render chain states as `chain,t,x0,…` rows, chain-major, losslessly.
fn trajectory_csv(states: &[Tensor]) -> String {
    let d = states[0].cols();
    let mut header = vec!["chain".to_string(), "t".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    let mut csv = csv_row(&header);
    csv.push('\n');
    for chain in 0..states[0].rows() {
        for (t, s) in states.iter().enumerate() {
            let mut fields = vec![chain.to_string(), t.to_string()];
            fields.extend(s.row_slice(chain).iter().map(|&v| fmt_f64(v)));
            csv.push_str(&csv_row(&fields));
            csv.push('\n');
        }
    }
    csv
}

/// Materialized chain states x_0..x_T for `n_chains` starts drawn from the
/// dataset (with replacement).
fn roll_states(
    gsn: &SimpleGsn,
    dataset: &Dataset,
    n_chains: usize,
    t_steps: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if n_chains == 0 {
        return Err(GsnError::invalid("sample", "n_chains must be ≥ 1"));
    }
    if gsn.d_x() != dataset.dim() {
        return Err(GsnError::invalid(
            "sample",
            format!(
                "checkpoint models {}-dimensional data, dataset has dimension {}",
                gsn.d_x(),
                dataset.dim()
            ),
        ));
    }
    let mut rng = stream_rng(seed, STREAM_SAMPLE);
    let starts: Vec<usize> = (0..n_chains)
        .map(|_| rng.random_range(0..dataset.n()))
        .collect();
    let x0 = dataset.gather_rows(&starts)?;
    if t_steps == 0 {
        return Ok(vec![x0]);
    }
    let mut tape = Tape::new();
    let vars = gsn.register(&mut tape);
    let x0v = tape.leaf(x0);
    let traj = gsn.unroll_chain(&mut tape, &vars, x0v, t_steps, &mut rng)?;
    Ok(traj
        .states()
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}

fn cmd_sample(args: &SampleArgs) -> Result<i32> {
    let cfg = load_config(&args.config, &args.set)?;
    let out = resolve_out_dir(&args.out)?;
    let dataset = cfg.build_dataset()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (gsn, _) = models_from_checkpoint(&ck)?;

    let traj_path = out.join("trajectories.csv");
    let ppm_path = out.join("scatter.ppm");
    let mut manifest = RunManifest::start(
        "sample",
        args.seed,
        &cfg,
        vec![
            out.join("manifest.json").display().to_string(),
            traj_path.display().to_string(),
            ppm_path.display().to_string(),
        ],
    );
    manifest.save(&out)?;

    let states = roll_states(&gsn, &dataset, args.n_chains, args.t_steps, args.seed)?;
    fs::write(&traj_path, trajectory_csv(&states))
        .map_err(|e| GsnError::io(traj_path.display().to_string(), e))?;
    let final_state = states.last().expect("at least x0");
    if dataset.dim() == 2 {
        scatter(Some(dataset.samples()), final_state)?.save(&ppm_path)?;
    }

    manifest.end_unix_s = Some(unix_now());
    manifest.save(&out)?;

    println!(
        "rolled {} chains for {} transitions from checkpoint step {}",
        args.n_chains, args.t_steps, ck.step
    );
    println!("artifacts in {}", out.display());
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    if !SUITE_NAMES.contains(&args.suite.as_str()) {
        return Err(GsnError::invalid(
            "verify",
            format!(
                "unknown suite {:?}; expected one of {}",
                args.suite,
                SUITE_NAMES.join("|")
            ),
        ));
    }
    let out = resolve_out_dir(&args.out)?;
    let cfg = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    let report_path = out.join(format!("report_{}.csv", args.suite));
    let mut manifest = RunManifest::start(
        "verify",
        args.seed,
        &cfg,
        vec![
            out.join("manifest.json").display().to_string(),
            report_path.display().to_string(),
        ],
    );
    manifest.save(&out)?;

    let report = run_suite(&args.suite, args.seed)?;
    report.save_csv(&report_path)?;

    manifest.end_unix_s = Some(unix_now());
    manifest.save(&out)?;

    for row in &report.rows {
        let status = if row.pass { "PASS" } else { "FAIL" };
        if row.value.is_nan() {
            println!("{status} {}/{}: {}", report.suite, row.case, row.detail);
        } else {
            println!(
                "{status} {}/{}: {} = {:.3e} (< {:.0e}){}{}",
                report.suite,
                row.case,
                row.metric,
                row.value,
                row.threshold,
                if row.detail.is_empty() { "" } else { " — " },
                row.detail
            );
        }
    }
    let n_pass = report.rows.iter().filter(|r| r.pass).count();
    println!(
        "suite {}: {}/{} checks passed; report at {}",
        report.suite,
        n_pass,
        report.rows.len(),
        report_path.display()
    );
    Ok(if report.passed() { 0 } else { 1 })
}

fn cmd_export(args: &ExportArgs) -> Result<i32> {
    let out = resolve_out_dir(&args.out)?;
    let cfg = load_config(&args.config, &args.set)?;
    let (stem, points, overlay): (&str, Tensor, Option<Dataset>) = match args.source {
        ExportSource::Dataset => {
            let ds = cfg.build_dataset()?;
            ("dataset", ds.samples().clone(), None)
        }
        ExportSource::Checkpoint => {
            let path = args.checkpoint.as_ref().expect("required_if_eq");
            let ck = Checkpoint::load(path)?;
            let (gsn, _) = models_from_checkpoint(&ck)?;
            // chain starts drawn from unit noise: the export depends only
            // on the checkpoint, not on any dataset
            let mut rng = stream_rng(args.seed, STREAM_SAMPLE);
            let n = args.n_chains.max(1);
            let x0 = Tensor::standard_normal(&[n, gsn.d_x()], &mut rng);
            let last = if args.t_steps == 0 {
                x0
            } else {
                let mut tape = Tape::new();
                let vars = gsn.register(&mut tape);
                let x0v = tape.leaf(x0);
                let traj = gsn.unroll_chain(&mut tape, &vars, x0v, args.t_steps, &mut rng)?;
                tape.value(*traj.states().last().expect("t ≥ 1")).clone()
            };
            ("samples", last, None)
        }
    };

    let path = match args.format {
        ExportFormat::Csv => {
            let p = out.join(format!("{stem}.csv"));
            save_csv(&points, &p)?;
            p
        }
        ExportFormat::Ppm => {
            let p = out.join(format!("{stem}.ppm"));
            scatter(overlay.as_ref().map(|d| d.samples()), &points)?.save(&p)?;
            p
        }
    };

    let mut manifest = RunManifest::start(
        "export",
        args.seed,
        &cfg,
        vec![
            out.join("manifest.json").display().to_string(),
            path.display().to_string(),
        ],
    );
    manifest.end_unix_s = Some(unix_now());
    manifest.save(&out)?;

    println!("exported {} rows to {}", points.rows(), path.display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("gsn-shaper").chain(args.iter().copied()))
    }

    #[test]
    fn exit_codes_follow_the_error_taxonomy() {
        let config = GsnError::Config {
            key: "k".into(),
            msg: "m".into(),
        };
        assert_eq!(exit_code_for(&config), 2);
        let invalid = GsnError::invalid("op", "m");
        assert_eq!(exit_code_for(&invalid), 2);
        let io = GsnError::io("p", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code_for(&io), 3);
        let corrupt = GsnError::CorruptCheckpoint {
            record: "r".into(),
            msg: "m".into(),
        };
        assert_eq!(exit_code_for(&corrupt), 4);
        let parse = GsnError::Parse {
            path: "p".into(),
            line: 1,
            msg: "m".into(),
        };
        assert_eq!(exit_code_for(&parse), 4);
        let nonfinite = GsnError::NonFinite { op: "op" };
        assert_eq!(exit_code_for(&nonfinite), 1);
    }

    #[test]
    fn unknown_subcommand_and_bad_flags_are_usage_errors() {
        assert_eq!(run_args(&["frobnicate"]), 2);
        assert_eq!(run_args(&["train", "--no-such-flag"]), 2);
        assert_eq!(run_args(&["export", "dataset"]), 2, "--format is required");
        assert_eq!(
            run_args(&["export", "checkpoint", "--format", "csv"]),
            2,
            "--checkpoint is required for checkpoint exports"
        );
    }

    #[test]
    fn unknown_verify_suite_is_a_usage_error_naming_the_options() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_args(&[
            "verify",
            "theorem42",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn out_dir_resolution_prefers_the_flag() {
        let dir = tempfile::tempdir().unwrap();
        let flagged = resolve_out_dir(&Some(dir.path().join("sub"))).unwrap();
        assert_eq!(flagged, dir.path().join("sub"));
        assert!(flagged.is_dir());
    }

    #[test]
    fn trajectory_csv_is_chain_major_with_a_t_column() {
        let s0 = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let s1 = Tensor::matrix(2, 2, vec![0.5, 0.5, 1.5, 1.5]).unwrap();
        let csv = trajectory_csv(&[s0, s1]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "chain,t,x0,x1");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[2].starts_with("0,1,"));
        assert!(lines[3].starts_with("1,0,"));
        assert!(lines[4].starts_with("1,1,"));
    }
}
