//! The full training loop: unroll the chain from data starts, charge each
//! transition its variational free energy on the pair (x_{t−1}, z_t), shape
//! the emitted states with the guide through backpropagation through time,
//! and alternately fit the guide by logistic regression.
//!
//! Everything is deterministic given the config seed: every step derives its
//! batch, guide, and generator noise from separate counter-based streams
//! keyed by (seed, step), so a run restarted from a checkpoint at step s
//! continues with exactly the draws the uninterrupted run would have made.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{self, Dataset};
use crate::error::{GsnError, Result};
use crate::iofmt::{csv_row, fmt_f64};
use crate::nets::MlpVars;
use crate::rng::stream_rng;
use crate::sgsn::{DecoderHead, GsnVars, SimpleGsn, StepNoise};
use crate::shaping::{loss_f, loss_g, moment_match_loss, Guide};
use crate::vfe::{vfe_pair_terms, VfeTerms};

/// Decorrelates the guide's initialization from the generator's.
const GUIDE_SEED_SALT: u64 = 0xc2b2_ae3d_27d4_eb4f;
/// Stream ids: each training step s uses streams 4s+1..4s+3; evaluation and
/// sampling use fixed high streams that no step index reaches in practice.
const STREAM_EVAL: u64 = u64::MAX - 1;

fn batch_stream(step: u64) -> u64 {
    step.wrapping_mul(4).wrapping_add(1)
}

fn guide_stream(step: u64) -> u64 {
    step.wrapping_mul(4).wrapping_add(2)
}

fn gen_stream(step: u64) -> u64 {
    step.wrapping_mul(4).wrapping_add(3)
}

/// Every knob of a run, serializable as flat TOML `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total alternating steps (one guide update + one generator update each).
    pub steps: u64,
    /// Chain unroll length T.
    pub t_unroll: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub guide_lr: f64,
    pub lambda_vfe: f64,
    pub lambda_shape: f64,
    pub lambda_mm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    /// Periodic checkpoint cadence in steps; 0 disables periodic checkpoints
    /// (the initial and final ones are always written).
    pub checkpoint_interval: u64,
    pub k_z: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub guide_hidden: Vec<usize>,
    /// Decoder family: "gaussian" (required for chain training) or "bernoulli".
    pub head: String,
    /// Dataset kind: "ring", "two_circles", "spiral", or "csv".
    pub dataset: String,
    pub dataset_n: usize,
    pub ring_k: usize,
    pub ring_radius: f64,
    /// Component noise scale shared by the synthetic datasets.
    pub data_std: f64,
    pub circle_r1: f64,
    pub circle_r2: f64,
    pub spiral_turns: f64,
    pub csv_path: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            t_unroll: 5,
            batch_size: 64,
            gen_lr: 1e-3,
            guide_lr: 2e-3,
            lambda_vfe: 1.0,
            lambda_shape: 1.0,
            lambda_mm: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            checkpoint_interval: 500,
            k_z: 2,
            enc_hidden: vec![32],
            dec_hidden: vec![32],
            guide_hidden: vec![32],
            head: "gaussian".into(),
            dataset: "ring".into(),
            dataset_n: 2048,
            ring_k: 8,
            ring_radius: 1.0,
            data_std: 0.1,
            circle_r1: 1.0,
            circle_r2: 2.0,
            spiral_turns: 3.0,
            csv_path: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(GsnError::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.t_unroll < 1 {
            return bad("t_unroll", "must be ≥ 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be ≥ 2");
        }
        if !(self.gen_lr > 0.0) || !(self.guide_lr > 0.0) {
            return bad("gen_lr/guide_lr", "learning rates must be > 0");
        }
        for (key, v) in [
            ("lambda_vfe", self.lambda_vfe),
            ("lambda_shape", self.lambda_shape),
            ("lambda_mm", self.lambda_mm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(key, "loss weights must be finite and ≥ 0");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "moment coefficients must lie in [0, 1)");
        }
        if !(self.eps_adam > 0.0) {
            return bad("eps_adam", "must be > 0");
        }
        if self.k_z < 1 {
            return bad("k_z", "must be ≥ 1");
        }
        self.decoder_head()?;
        match self.dataset.as_str() {
            "ring" | "two_circles" | "spiral" | "csv" => {}
            other => {
                return Err(GsnError::Config {
                    key: "dataset".into(),
                    msg: format!("unknown kind {other:?} (ring|two_circles|spiral|csv)"),
                })
            }
        }
        if self.dataset != "csv" && self.dataset_n < 2 {
            return bad("dataset_n", "must be ≥ 2");
        }
        Ok(())
    }

    pub fn decoder_head(&self) -> Result<DecoderHead> {
        match self.head.as_str() {
            "gaussian" => Ok(DecoderHead::Gaussian),
            "bernoulli" => Ok(DecoderHead::Bernoulli),
            other => Err(GsnError::Config {
                key: "head".into(),
                msg: format!("unknown decoder head {other:?} (gaussian|bernoulli)"),
            }),
        }
    }

    /// Materialize the configured dataset. Synthetic kinds derive their draw
    /// stream from the run seed; "csv" loads from `csv_path`.
    pub fn build_dataset(&self) -> Result<Dataset> {
        match self.dataset.as_str() {
            "ring" => data::make_ring_of_gaussians(
                self.ring_k,
                self.ring_radius,
                self.data_std,
                self.dataset_n,
                self.seed,
            ),
            "two_circles" => data::make_two_circles(
                self.dataset_n,
                (self.circle_r1, self.circle_r2),
                self.data_std,
                self.seed,
            ),
            "spiral" => {
                data::make_spiral(self.dataset_n, self.spiral_turns, self.data_std, self.seed)
            }
            "csv" => data::load_csv(Path::new(&self.csv_path)),
            other => Err(GsnError::Config {
                key: "dataset".into(),
                msg: format!("unknown kind {other:?}"),
            }),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| GsnError::Config {
            key: "config".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| GsnError::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `key=value` overrides on top of this config; overrides win.
    /// Unknown keys and unparseable values are rejected naming the key.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| GsnError::Config {
            key: "config".into(),
            msg: e.to_string(),
        })?;
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| GsnError::Config {
                key: item.clone(),
                msg: "override must look like key=value".into(),
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if !table.contains_key(key) {
                return Err(GsnError::Config {
                    key: key.into(),
                    msg: "unknown config key".into(),
                });
            }
            let value = parse_override_value(key, raw, &table[key])?;
            table.insert(key.into(), value);
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| {
            GsnError::Config {
                key: "config".into(),
                msg: e.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Interpret an override string in the type of the field it replaces, so
/// `--set head=bernoulli` works without shell-hostile quoting.
fn parse_override_value(key: &str, raw: &str, current: &toml::Value) -> Result<toml::Value> {
    let err = |msg: String| GsnError::Config {
        key: key.into(),
        msg,
    };
    match current {
        toml::Value::String(_) => Ok(toml::Value::String(raw.to_string())),
        toml::Value::Integer(_) => raw
            .parse::<i64>()
            .map(toml::Value::Integer)
            .map_err(|e| err(format!("expected integer, got {raw:?}: {e}"))),
        toml::Value::Float(_) => raw
            .parse::<f64>()
            .map(toml::Value::Float)
            .map_err(|e| err(format!("expected number, got {raw:?}: {e}"))),
        toml::Value::Boolean(_) => raw
            .parse::<bool>()
            .map(toml::Value::Boolean)
            .map_err(|e| err(format!("expected bool, got {raw:?}: {e}"))),
        _ => {
            let doc: toml::Table = toml::from_str(&format!("v = {raw}"))
                .map_err(|e| err(format!("cannot parse {raw:?}: {e}")))?;
            Ok(doc["v"].clone())
        }
    }
}

/// Adaptive-moment gradient descent with bias correction, one moment pair
/// per parameter tensor, keyed by position.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_state(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update in place. Moment accumulators are created lazily on first
    /// use and must mirror parameter shapes thereafter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GsnError::invalid(
                "Adam::step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(GsnError::invalid(
                "Adam::step",
                format!("{} accumulators vs {} params", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if params[i].shape() != grads[i].shape() || params[i].shape() != self.m[i].shape() {
                return Err(GsnError::ShapeMismatch {
                    op: "Adam::step",
                    lhs: params[i].shape().to_vec(),
                    rhs: grads[i].shape().to_vec(),
                });
            }
            let (m, v, p, g) = (
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                params[i].data_mut(),
                grads[i].data(),
            );
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Draw the per-step injected noise exactly as the chain unroller would:
/// for each step, first the latent draw, then the observable draw.
pub fn draw_chain_noises(
    n: usize,
    k_z: usize,
    d_x: usize,
    t_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<StepNoise> {
    (0..t_steps)
        .map(|_| StepNoise {
            z: Tensor::standard_normal(&[n, k_z], rng),
            x: Tensor::standard_normal(&[n, d_x], rng),
        })
        .collect()
}

/// The generator's full objective as one live graph.
pub struct GenLossGraph {
    pub total: Var,
    /// Free-energy decomposition per chain step.
    pub vfe_steps: Vec<VfeTerms>,
    pub shape: Var,
    pub mm: Var,
    /// Emitted states x_1..x_T pooled into one `[n·T, d_x]` batch.
    pub pooled: Var,
}

/// Build the generator objective on `tape` from fixed noises:
/// λ_vfe · (Σ_t free_energy(x_{t−1} | z_t)) / T + λ_shape · one-sided guide
/// penalty on pooled emitted states + λ_mm · moment matching to data stats.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    tape: &mut Tape,
    gsn: &SimpleGsn,
    gvars: &GsnVars,
    guide: &Guide,
    guide_vars: &MlpVars,
    x0: Var,
    noises: &[StepNoise],
    data_mean: &Tensor,
    data_cov: &Tensor,
    cfg: &TrainConfig,
) -> Result<GenLossGraph> {
    let traj = gsn.unroll_with_noises(tape, gvars, x0, noises)?;
    let states = traj.states();
    let mut vfe_steps = Vec::with_capacity(traj.len());
    let mut vfe_sum: Option<Var> = None;
    for (t, step) in traj.steps.iter().enumerate() {
        let terms = vfe_pair_terms(tape, states[t], &step.enc, &step.dec)?;
        vfe_sum = Some(match vfe_sum {
            None => terms.total,
            Some(acc) => tape.add(acc, terms.total)?,
        });
        vfe_steps.push(terms);
    }
    let vfe_avg = tape.mul_scalar(vfe_sum.expect("T ≥ 1"), 1.0 / traj.len() as f64)?;

    let mut pooled = traj.steps[0].x_next;
    for step in &traj.steps[1..] {
        pooled = tape.concat_rows(pooled, step.x_next)?;
    }
    let shape = loss_g(tape, guide, guide_vars, pooled)?;
    let mm = moment_match_loss(tape, pooled, data_mean, data_cov)?;

    let vfe_term = tape.mul_scalar(vfe_avg, cfg.lambda_vfe)?;
    let shape_term = tape.mul_scalar(shape, cfg.lambda_shape)?;
    let mm_term = tape.mul_scalar(mm, cfg.lambda_mm)?;
    let partial = tape.add(vfe_term, shape_term)?;
    let total = tape.add(partial, mm_term)?;
    Ok(GenLossGraph {
        total,
        vfe_steps,
        shape,
        mm,
        pooled,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenStepStats {
    pub total: f64,
    pub vfe_per_step: Vec<f64>,
    pub shape_term: f64,
    pub mm_term: f64,
}

/// One generator update: unroll from the data batch, backpropagate the full
/// objective through time, and apply one optimizer step to encoder and
/// decoder. The guide is read-only here.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    gsn: &mut SimpleGsn,
    guide: &Guide,
    adam: &mut Adam,
    data_batch: &Tensor,
    data_mean: &Tensor,
    data_cov: &Tensor,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GenStepStats> {
    let mut tape = Tape::new();
    let gvars = gsn.register(&mut tape);
    let guide_vars = guide.register(&mut tape);
    let x0 = tape.leaf(data_batch.clone());
    let noises = draw_chain_noises(
        data_batch.rows(),
        gsn.k_z(),
        gsn.d_x(),
        cfg.t_unroll,
        rng,
    );
    let graph = generator_loss(
        &mut tape, gsn, &gvars, guide, &guide_vars, x0, &noises, data_mean, data_cov, cfg,
    )?;
    let grads = tape.backward(graph.total)?;
    let mut grad_tensors = gsn.encoder().collect_grads(&grads, &gvars.enc);
    grad_tensors.extend(gsn.decoder().collect_grads(&grads, &gvars.dec));
    let mut params = gsn.leaf_tensors();
    adam.step(&mut params, &grad_tensors)?;
    gsn.set_from_tensors(&params)?;
    Ok(GenStepStats {
        total: tape.value(graph.total).item(),
        vfe_per_step: graph
            .vfe_steps
            .iter()
            .map(|t| t.snapshot(&tape).total)
            .collect(),
        shape_term: tape.value(graph.shape).item(),
        mm_term: tape.value(graph.mm).item(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuideStepStats {
    pub loss_f: f64,
    pub mean_score_data: f64,
    pub mean_score_chain: f64,
}

/// First `k` indices of a seeded partial shuffle of `0..total`: a uniform
/// subsample without replacement.
fn subsample_indices(total: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    let take = k.min(total);
    for i in 0..take {
        let j = i + rng.random_range(0..total - i);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// One guide update: generate a chain batch the same size as the data batch
/// (emitted states of chains started at the data points, uniformly
/// subsampled), then one logistic-regression step. The generator is
/// read-only here and the chain batch enters as a constant.
pub fn guide_step(
    guide: &mut Guide,
    gsn: &SimpleGsn,
    adam: &mut Adam,
    data_batch: &Tensor,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GuideStepStats> {
    let n = data_batch.rows();
    let chain_batch = {
        let mut scratch = Tape::new();
        let gvars = gsn.register(&mut scratch);
        let x0 = scratch.leaf(data_batch.clone());
        let traj = gsn.unroll_chain(&mut scratch, &gvars, x0, cfg.t_unroll, rng)?;
        let emitted: Vec<&Tensor> = traj
            .steps
            .iter()
            .map(|s| scratch.value(s.x_next))
            .collect();
        let picks = subsample_indices(n * traj.len(), n, rng);
        let mut rows = Vec::with_capacity(n * gsn.d_x());
        for pick in picks {
            rows.extend_from_slice(emitted[pick / n].row_slice(pick % n));
        }
        Tensor::from_vec(vec![n, gsn.d_x()], rows)?
    };

    let mut tape = Tape::new();
    let gv = guide.register(&mut tape);
    let data = tape.leaf(data_batch.clone());
    let gen = tape.leaf(chain_batch);
    let lf = loss_f(&mut tape, guide, &gv, data, gen)?;
    let f_data = guide.score(&mut tape, &gv, data)?;
    let f_data_mean = tape.mean(f_data)?;
    let f_gen = guide.score(&mut tape, &gv, gen)?;
    let f_gen_mean = tape.mean(f_gen)?;

    let grads = tape.backward(lf)?;
    let grad_tensors = guide.net().collect_grads(&grads, &gv);
    let mut params = guide.net().leaf_tensors();
    adam.step(&mut params, &grad_tensors)?;
    guide.net_mut().set_from_tensors(&params)?;
    Ok(GuideStepStats {
        loss_f: tape.value(lf).item(),
        mean_score_data: tape.value(f_data_mean).item(),
        mean_score_chain: tape.value(f_gen_mean).item(),
    })
}

/// Everything recorded about one completed alternating step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_f: f64,
    pub loss_g: f64,
    pub vfe_per_step: Vec<f64>,
    pub mm_term: f64,
    pub guide_on_data: f64,
    pub guide_on_chain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainEvent {
    pub step: u64,
    pub what: String,
}

/// Per-step records plus out-of-band events (aborted steps).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    t_unroll: usize,
    pub records: Vec<StepRecord>,
    pub events: Vec<TrainEvent>,
}

impl TrainHistory {
    pub fn new(t_unroll: usize) -> Self {
        TrainHistory {
            t_unroll,
            records: Vec::new(),
            events: Vec::new(),
        }
    }

    /// One row per step with named columns; floats rendered losslessly so
    /// identical runs write identical bytes.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["step".to_string(), "loss_f".into(), "loss_g".into()];
        for t in 1..=self.t_unroll {
            header.push(format!("vfe_t{t}"));
        }
        header.extend([
            "mm_term".to_string(),
            "guide_on_data".into(),
            "guide_on_chain".into(),
        ]);
        let mut out = csv_row(&header);
        out.push('\n');
        for r in &self.records {
            let mut fields = vec![r.step.to_string(), fmt_f64(r.loss_f), fmt_f64(r.loss_g)];
            for t in 0..self.t_unroll {
                fields.push(fmt_f64(r.vfe_per_step.get(t).copied().unwrap_or(f64::NAN)));
            }
            fields.push(fmt_f64(r.mm_term));
            fields.push(fmt_f64(r.guide_on_data));
            fields.push(fmt_f64(r.guide_on_chain));
            out.push_str(&csv_row(&fields));
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| GsnError::io(path.display().to_string(), e))
    }

    /// True when every recorded metric is finite.
    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| {
            r.loss_f.is_finite()
                && r.loss_g.is_finite()
                && r.mm_term.is_finite()
                && r.guide_on_data.is_finite()
                && r.guide_on_chain.is_finite()
                && r.vfe_per_step.iter().all(|v| v.is_finite())
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSNC";
/// Version stamped into every checkpoint and run manifest.
pub const ARTIFACT_VERSION: u32 = 1;
const CHECKPOINT_VERSION: u32 = ARTIFACT_VERSION;

/// A self-describing container of named f64 tensors plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    records: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(step: u64) -> Self {
        Checkpoint {
            step,
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.records.insert(name.to_string(), t).is_some() {
            return Err(GsnError::invalid(
                "Checkpoint::insert",
                format!("duplicate record {name:?}"),
            ));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.records.get(name).ok_or_else(|| GsnError::CorruptCheckpoint {
            record: name.to_string(),
            msg: "record missing".into(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(|s| s.as_str())
    }

    /// Binary layout: magic "GSNC", version u32, step u64, record count u32,
    /// then per record: name length u32 + UTF-8 name, rank u32, extents u32
    /// each, payload f64s. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |record: &str, msg: String| GsnError::CorruptCheckpoint {
            record: record.to_string(),
            msg,
        };
        let mut pos = 0usize;
        let mut take = |n: usize, record: &str| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(corrupt(record, format!("truncated at byte {pos}")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(corrupt("magic", "bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt("version", format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(take(8, "step")?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4, "count")?.try_into().unwrap());
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4, "name")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len, "name")?.to_vec())
                .map_err(|e| corrupt("name", e.to_string()))?;
            let rank = u32::from_le_bytes(take(4, &name)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4, &name)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(numel * 8, &name)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::from_vec(shape, data)
                .map_err(|e| corrupt(&name, e.to_string()))?;
            if records.insert(name.clone(), tensor).is_some() {
                return Err(corrupt(&name, "duplicate record".into()));
            }
        }
        if pos != bytes.len() {
            return Err(corrupt("trailer", format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { step, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| GsnError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GsnError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn usizes_to_tensor(values: &[usize]) -> Tensor {
    Tensor::from_vec(vec![values.len()], values.iter().map(|&v| v as f64).collect())
        .expect("non-empty usize list")
}

fn tensor_to_usizes(t: &Tensor, record: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && v < 2f64.powi(53) {
                Ok(v as usize)
            } else {
                Err(GsnError::CorruptCheckpoint {
                    record: record.to_string(),
                    msg: format!("{v} is not a valid extent"),
                })
            }
        })
        .collect()
}

fn param_names(prefix: &str, count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            let layer = i / 2;
            let kind = if i % 2 == 0 { "w" } else { "b" };
            format!("{prefix}.{kind}{layer}")
        })
        .collect()
}

/// Mutable training state: models, optimizers, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gsn: SimpleGsn,
    pub guide: Guide,
    pub adam_gen: Adam,
    pub adam_guide: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, d_x: usize) -> Result<Self> {
        cfg.validate()?;
        let gsn = SimpleGsn::new(
            d_x,
            cfg.k_z,
            &cfg.enc_hidden,
            &cfg.dec_hidden,
            cfg.decoder_head()?,
            cfg.seed,
        )?;
        let guide = Guide::new(d_x, &cfg.guide_hidden, cfg.seed ^ GUIDE_SEED_SALT)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            gsn,
            guide,
            adam_gen: Adam::new(cfg.gen_lr, cfg.beta1, cfg.beta2, cfg.eps_adam),
            adam_guide: Adam::new(cfg.guide_lr, cfg.beta1, cfg.beta2, cfg.eps_adam),
            step: 0,
        })
    }

    /// One alternating step: guide first, then generator, each on the same
    /// freshly drawn data batch. A non-finite loss aborts that half-step
    /// without touching parameters and logs an event; metrics that were
    /// never computed are recorded as NaN.
    pub fn train_step(&mut self, dataset: &Dataset, history: &mut TrainHistory) -> Result<()> {
        let s = self.step;
        let mut batch_rng = stream_rng(self.cfg.seed, batch_stream(s));
        let mut guide_rng = stream_rng(self.cfg.seed, guide_stream(s));
        let mut gen_rng = stream_rng(self.cfg.seed, gen_stream(s));

        let indices: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| batch_rng.random_range(0..dataset.n()))
            .collect();
        let batch = dataset.gather_rows(&indices)?;

        let guide_stats = match guide_step(
            &mut self.guide,
            &self.gsn,
            &mut self.adam_guide,
            &batch,
            &self.cfg,
            &mut guide_rng,
        ) {
            Ok(stats) => stats,
            Err(GsnError::NonFinite { op }) => {
                history.events.push(TrainEvent {
                    step: s,
                    what: format!("guide step aborted: non-finite value in {op}"),
                });
                GuideStepStats {
                    loss_f: f64::NAN,
                    mean_score_data: f64::NAN,
                    mean_score_chain: f64::NAN,
                }
            }
            Err(e) => return Err(e),
        };

        let gen_stats = match generator_step(
            &mut self.gsn,
            &self.guide,
            &mut self.adam_gen,
            &batch,
            dataset.mean(),
            dataset.cov(),
            &self.cfg,
            &mut gen_rng,
        ) {
            Ok(stats) => stats,
            Err(GsnError::NonFinite { op }) => {
                history.events.push(TrainEvent {
                    step: s,
                    what: format!("generator step aborted: non-finite value in {op}"),
                });
                GenStepStats {
                    total: f64::NAN,
                    vfe_per_step: vec![f64::NAN; self.cfg.t_unroll],
                    shape_term: f64::NAN,
                    mm_term: f64::NAN,
                }
            }
            Err(e) => return Err(e),
        };

        history.records.push(StepRecord {
            step: s,
            loss_f: guide_stats.loss_f,
            loss_g: gen_stats.shape_term,
            vfe_per_step: gen_stats.vfe_per_step,
            mm_term: gen_stats.mm_term,
            guide_on_data: guide_stats.mean_score_data,
            guide_on_chain: guide_stats.mean_score_chain,
        });
        self.step = s + 1;
        Ok(())
    }

    /// Serialize models, optimizer state, step counter, and enough
    /// architecture metadata to rebuild the models without a config.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.step);
        let gen_params = self.gsn.leaf_tensors();
        let n_enc = self.gsn.encoder().leaf_tensors().len();
        let mut names = param_names("gen.enc", n_enc);
        names.extend(param_names("gen.dec", gen_params.len() - n_enc));
        for (name, t) in names.iter().zip(&gen_params) {
            ck.insert(name, t.clone())?;
        }
        let guide_params = self.guide.net().leaf_tensors();
        for (name, t) in param_names("guide", guide_params.len()).iter().zip(&guide_params) {
            ck.insert(name, t.clone())?;
        }
        for (tag, adam) in [("gen", &self.adam_gen), ("guide", &self.adam_guide)] {
            let (m, v) = adam.moments();
            for (i, t) in m.iter().enumerate() {
                ck.insert(&format!("adam_{tag}.m{i:02}"), t.clone())?;
            }
            for (i, t) in v.iter().enumerate() {
                ck.insert(&format!("adam_{tag}.v{i:02}"), t.clone())?;
            }
            ck.insert(&format!("adam_{tag}.t"), usizes_to_tensor(&[adam.t() as usize]))?;
        }
        ck.insert("meta.enc_widths", usizes_to_tensor(self.gsn.encoder().widths()))?;
        ck.insert("meta.dec_widths", usizes_to_tensor(self.gsn.decoder().widths()))?;
        ck.insert("meta.guide_widths", usizes_to_tensor(self.guide.net().widths()))?;
        let head_code = match self.gsn.head() {
            DecoderHead::Gaussian => 0,
            DecoderHead::Bernoulli => 1,
        };
        ck.insert(
            "meta.arch",
            usizes_to_tensor(&[self.gsn.d_x(), self.gsn.k_z(), head_code]),
        )?;
        Ok(ck)
    }

    /// Rebuild full training state from a checkpoint; `cfg` supplies the
    /// optimizer and loop hyperparameters, the checkpoint supplies
    /// architecture, parameters, moments, and the step counter.
    pub fn from_checkpoint(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let (gsn, guide) = models_from_checkpoint(ck)?;
        let load_adam = |tag: &str, lr: f64, count: usize| -> Result<Adam> {
            let t = tensor_to_usizes(ck.get(&format!("adam_{tag}.t"))?, "adam.t")?[0] as u64;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for i in 0..count {
                let mk = format!("adam_{tag}.m{i:02}");
                if ck.records.contains_key(&mk) {
                    m.push(ck.get(&mk)?.clone());
                    v.push(ck.get(&format!("adam_{tag}.v{i:02}"))?.clone());
                }
            }
            Ok(Adam::with_state(lr, cfg.beta1, cfg.beta2, cfg.eps_adam, t, m, v))
        };
        let adam_gen = load_adam("gen", cfg.gen_lr, gsn.leaf_tensors().len())?;
        let adam_guide = load_adam("guide", cfg.guide_lr, guide.net().leaf_tensors().len())?;
        Ok(Trainer {
            cfg: cfg.clone(),
            gsn,
            guide,
            adam_gen,
            adam_guide,
            step: ck.step,
        })
    }
}

/// Rebuild the generator and guide alone from a checkpoint (enough for
/// sampling and evaluation; no optimizer state needed).
pub fn models_from_checkpoint(ck: &Checkpoint) -> Result<(SimpleGsn, Guide)> {
    let arch = tensor_to_usizes(ck.get("meta.arch")?, "meta.arch")?;
    if arch.len() != 3 {
        return Err(GsnError::CorruptCheckpoint {
            record: "meta.arch".into(),
            msg: format!("expected 3 entries, found {}", arch.len()),
        });
    }
    let (d_x, k_z) = (arch[0], arch[1]);
    let head = match arch[2] {
        0 => DecoderHead::Gaussian,
        1 => DecoderHead::Bernoulli,
        other => {
            return Err(GsnError::CorruptCheckpoint {
                record: "meta.arch".into(),
                msg: format!("unknown head code {other}"),
            })
        }
    };
    let enc_widths = tensor_to_usizes(ck.get("meta.enc_widths")?, "meta.enc_widths")?;
    let dec_widths = tensor_to_usizes(ck.get("meta.dec_widths")?, "meta.dec_widths")?;
    let guide_widths = tensor_to_usizes(ck.get("meta.guide_widths")?, "meta.guide_widths")?;
    let hidden = |w: &[usize]| w[1..w.len() - 1].to_vec();
    if enc_widths.len() < 2 || dec_widths.len() < 2 || guide_widths.len() < 2 {
        return Err(GsnError::CorruptCheckpoint {
            record: "meta".into(),
            msg: "width lists too short".into(),
        });
    }
    let mut gsn = SimpleGsn::new(d_x, k_z, &hidden(&enc_widths), &hidden(&dec_widths), head, 0)?;
    let mut guide = Guide::new(d_x, &hidden(&guide_widths), 0)?;

    let n_enc = gsn.encoder().leaf_tensors().len();
    let n_dec = gsn.decoder().leaf_tensors().len();
    let mut names = param_names("gen.enc", n_enc);
    names.extend(param_names("gen.dec", n_dec));
    let mut gen_params = Vec::with_capacity(names.len());
    for name in &names {
        gen_params.push(ck.get(name)?.clone());
    }
    gsn.set_from_tensors(&gen_params)
        .map_err(|e| GsnError::CorruptCheckpoint {
            record: "gen".into(),
            msg: e.to_string(),
        })?;
    let mut guide_params = Vec::new();
    for name in param_names("guide", guide.net().leaf_tensors().len()) {
        guide_params.push(ck.get(&name)?.clone());
    }
    guide
        .net_mut()
        .set_from_tensors(&guide_params)
        .map_err(|e| GsnError::CorruptCheckpoint {
            record: "guide".into(),
            msg: e.to_string(),
        })?;
    Ok((gsn, guide))
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:08}.gsnc"))
}

fn run_loop(
    trainer: &mut Trainer,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainHistory> {
    let mut history = TrainHistory::new(trainer.cfg.t_unroll);
    let write_ckpt = |t: &Trainer| -> Result<Option<PathBuf>> {
        if let Some(dir) = out_dir {
            let path = checkpoint_path(dir, t.step);
            t.to_checkpoint()?.save(&path)?;
            return Ok(Some(path));
        }
        Ok(None)
    };
    write_ckpt(trainer)?;
    while trainer.step < trainer.cfg.steps {
        trainer.train_step(dataset, &mut history)?;
        let interval = trainer.cfg.checkpoint_interval;
        let at_interval = interval > 0 && trainer.step % interval == 0;
        if (at_interval || trainer.step == trainer.cfg.steps) && trainer.step > 0 {
            write_ckpt(trainer)?;
        }
    }
    Ok(history)
}

/// Train from scratch: alternating steps, checkpoints at step 0, every
/// `checkpoint_interval` steps, and at the end.
pub fn train_loop(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Trainer, TrainHistory)> {
    let mut trainer = Trainer::new(cfg, dataset.dim())?;
    let history = run_loop(&mut trainer, dataset, out_dir)?;
    Ok((trainer, history))
}

/// Continue a checkpointed run until `cfg.steps`; the produced history is
/// exactly the suffix the uninterrupted run would have recorded.
pub fn resume_loop(
    cfg: &TrainConfig,
    dataset: &Dataset,
    ck: &Checkpoint,
    out_dir: Option<&Path>,
) -> Result<(Trainer, TrainHistory)> {
    let mut trainer = Trainer::from_checkpoint(cfg, ck)?;
    if trainer.gsn.d_x() != dataset.dim() {
        return Err(GsnError::invalid(
            "resume_loop",
            format!(
                "checkpoint is for {}-dimensional data, dataset has {}",
                trainer.gsn.d_x(),
                dataset.dim()
            ),
        ));
    }
    let history = run_loop(&mut trainer, dataset, out_dir)?;
    Ok((trainer, history))
}

/// Summary statistics of chains rolled from data starts with frozen models.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub gen_mean: Tensor,
    pub gen_cov: Tensor,
    pub data_mean: Tensor,
    pub data_cov: Tensor,
    /// ‖gen_mean − data_mean‖₂.
    pub mean_error_norm: f64,
    /// ‖gen_cov − data_cov‖_F / ‖data_cov‖_F.
    pub cov_rel_frobenius: f64,
    /// Combined first+second moment error: √(‖Δμ‖² + ‖ΔΣ‖_F²) normalized by
    /// √(‖μ_D‖² + ‖Σ_D‖_F²).
    pub stats_rel_frobenius: f64,
    pub guide_mean_data: f64,
    pub guide_mean_abs_data: f64,
    pub guide_mean_chain: f64,
    pub guide_mean_abs_chain: f64,
    pub mean_step_displacement: f64,
    pub max_step_displacement: f64,
}

fn l2(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Roll `n_chains` trajectories of length `t_eval` from dataset starts and
/// compare the pooled emitted states against the data statistics; also
/// report guide scores on both sides and the per-transition step sizes.
pub fn evaluate(
    gsn: &SimpleGsn,
    guide: &Guide,
    dataset: &Dataset,
    n_chains: usize,
    t_eval: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_chains < 2 || t_eval < 1 {
        return Err(GsnError::invalid(
            "evaluate",
            "need at least two chains and one step",
        ));
    }
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let starts: Vec<usize> = (0..n_chains)
        .map(|_| rng.random_range(0..dataset.n()))
        .collect();
    let x0 = dataset.gather_rows(&starts)?;

    let mut tape = Tape::new();
    let gvars = gsn.register(&mut tape);
    let x0v = tape.leaf(x0);
    let traj = gsn.unroll_chain(&mut tape, &gvars, x0v, t_eval, &mut rng)?;

    let d = gsn.d_x();
    let mut pooled_rows = Vec::with_capacity(n_chains * t_eval * d);
    let mut mean_disp = 0.0;
    let mut max_disp: f64 = 0.0;
    let states = traj.states();
    for w in states.windows(2) {
        let prev = tape.value(w[0]).clone();
        let next = tape.value(w[1]).clone();
        for r in 0..n_chains {
            let (a, b) = (prev.row_slice(r), next.row_slice(r));
            let disp = l2(&a.iter().zip(b).map(|(x, y)| y - x).collect::<Vec<_>>());
            mean_disp += disp;
            max_disp = max_disp.max(disp);
        }
        pooled_rows.extend_from_slice(next.data());
    }
    mean_disp /= (n_chains * t_eval) as f64;
    let pooled = Tensor::from_vec(vec![n_chains * t_eval, d], pooled_rows)?;
    let pooled_stats = Dataset::new(pooled.clone())?;

    let mut score_tape = Tape::new();
    let gv = guide.register(&mut score_tape);
    let score_of = |tape: &mut Tape, gv: &MlpVars, batch: &Tensor| -> Result<(f64, f64)> {
        let b = tape.leaf(batch.clone());
        let f = guide.score(tape, gv, b)?;
        let vals = tape.value(f).data();
        let n = vals.len() as f64;
        Ok((
            vals.iter().sum::<f64>() / n,
            vals.iter().map(|v| v.abs()).sum::<f64>() / n,
        ))
    };
    let (guide_mean_data, guide_mean_abs_data) =
        score_of(&mut score_tape, &gv, dataset.samples())?;
    let (guide_mean_chain, guide_mean_abs_chain) = score_of(&mut score_tape, &gv, &pooled)?;

    let dmean = dataset.mean();
    let dcov = dataset.cov();
    let mean_err: Vec<f64> = pooled_stats
        .mean()
        .data()
        .iter()
        .zip(dmean.data())
        .map(|(a, b)| a - b)
        .collect();
    let cov_err: Vec<f64> = pooled_stats
        .cov()
        .data()
        .iter()
        .zip(dcov.data())
        .map(|(a, b)| a - b)
        .collect();
    let mean_error_norm = l2(&mean_err);
    let cov_rel_frobenius = l2(&cov_err) / l2(dcov.data());
    let stats_rel_frobenius = (mean_error_norm.powi(2) + l2(&cov_err).powi(2)).sqrt()
        / (l2(dmean.data()).powi(2) + l2(dcov.data()).powi(2)).sqrt();

    Ok(EvalReport {
        n_samples: n_chains * t_eval,
        gen_mean: pooled_stats.mean().clone(),
        gen_cov: pooled_stats.cov().clone(),
        data_mean: dmean.clone(),
        data_cov: dcov.clone(),
        mean_error_norm,
        cov_rel_frobenius,
        stats_rel_frobenius,
        guide_mean_data,
        guide_mean_abs_data,
        guide_mean_chain,
        guide_mean_abs_chain,
        mean_step_displacement: mean_disp,
        max_step_displacement: max_disp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vfe::vfe_mc;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 3,
            t_unroll: 2,
            batch_size: 4,
            enc_hidden: vec![6],
            dec_hidden: vec![6],
            guide_hidden: vec![6],
            dataset_n: 32,
            checkpoint_interval: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        data::make_ring_of_gaussians(2, 1.0, 0.1, 32, 5).unwrap()
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = tiny_cfg();
        let text = cfg.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let cfg = TrainConfig::default();
        let out = cfg
            .apply_overrides(&[
                "steps=7".into(),
                "gen_lr=0.5".into(),
                "head=bernoulli".into(),
                "enc_hidden=[8, 4]".into(),
            ])
            .unwrap();
        assert_eq!(out.steps, 7);
        assert_eq!(out.gen_lr, 0.5);
        assert_eq!(out.head, "bernoulli");
        assert_eq!(out.enc_hidden, vec![8, 4]);

        let err = cfg.apply_overrides(&["stepz=7".into()]).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(cfg.apply_overrides(&["steps=abc".into()]).is_err());
        assert!(cfg.apply_overrides(&["batch_size=1".into()]).is_err());
    }

    #[test]
    fn adam_moves_against_the_gradient_and_ignores_zero_gradients() {
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut params = vec![Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap()];
        let before = params[0].clone();
        adam.step(
            &mut params,
            &[Tensor::from_vec(vec![2], vec![0.5, -0.25]).unwrap()],
        )
        .unwrap();
        assert!(params[0].data()[0] < before.data()[0]);
        assert!(params[0].data()[1] > before.data()[1]);

        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut params = vec![Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap()];
        adam.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn generator_objective_reduces_to_plain_free_energy() {
        // T = 1 with the shaping and matching weights off must charge exactly
        // the single-draw free energy of the batch.
        let cfg = TrainConfig {
            t_unroll: 1,
            lambda_shape: 0.0,
            lambda_mm: 0.0,
            ..tiny_cfg()
        };
        let gsn = SimpleGsn::new(2, 2, &[6], &[6], DecoderHead::Gaussian, 3).unwrap();
        let guide = Guide::new(2, &[6], 4).unwrap();
        let ds = tiny_dataset();
        let batch = ds.gather_rows(&[0, 1, 2, 3]).unwrap();

        let mut rng_a = stream_rng(9, 0);
        let mut tape = Tape::new();
        let gvars = gsn.register(&mut tape);
        let gv = guide.register(&mut tape);
        let x0 = tape.leaf(batch.clone());
        let noises = draw_chain_noises(4, 2, 2, 1, &mut rng_a);
        let graph = generator_loss(
            &mut tape, &gsn, &gvars, &guide, &gv, x0, &noises, ds.mean(), ds.cov(), &cfg,
        )
        .unwrap();
        let total = tape.value(graph.total).item();

        let mut rng_b = stream_rng(9, 0);
        let mut tape_b = Tape::new();
        let gvars_b = gsn.register(&mut tape_b);
        let xb = tape_b.leaf(batch);
        let terms = vfe_mc(&mut tape_b, &gsn, &gvars_b, xb, 1, &mut rng_b).unwrap();
        let expected = tape_b.value(terms.total).item();
        assert!(
            (total - expected).abs() < 1e-12,
            "{total} vs {expected}"
        );
    }

    #[test]
    fn positive_guide_scores_leave_the_generator_unmoved() {
        // λ_vfe = 0 and a guide that outputs +1 everywhere: the one-sided
        // penalty sits in its zero-gradient region, so nothing changes.
        let cfg = TrainConfig {
            lambda_vfe: 0.0,
            lambda_mm: 0.0,
            ..tiny_cfg()
        };
        let mut gsn = SimpleGsn::new(2, 2, &[6], &[6], DecoderHead::Gaussian, 3).unwrap();
        let mut guide = Guide::new(2, &[], 4).unwrap();
        guide
            .net_mut()
            .set_from_tensors(&[
                Tensor::zeros(&[2, 1]),
                Tensor::from_vec(vec![1], vec![1.0]).unwrap(),
            ])
            .unwrap();
        let ds = tiny_dataset();
        let batch = ds.gather_rows(&[0, 1, 2, 3]).unwrap();
        let before = gsn.leaf_tensors();
        let mut adam = Adam::new(cfg.gen_lr, cfg.beta1, cfg.beta2, cfg.eps_adam);
        let mut rng = stream_rng(10, 0);
        generator_step(
            &mut gsn, &guide, &mut adam, &batch, ds.mean(), ds.cov(), &cfg, &mut rng,
        )
        .unwrap();
        for (a, b) in before.iter().zip(gsn.leaf_tensors()) {
            assert_eq!(a.data(), b.data(), "parameters must be bitwise unchanged");
        }
    }

    #[test]
    fn bptt_gradient_matches_finite_differences() {
        let cfg = TrainConfig {
            t_unroll: 2,
            lambda_mm: 0.5,
            ..tiny_cfg()
        };
        let gsn = SimpleGsn::new(2, 2, &[4], &[4], DecoderHead::Gaussian, 6).unwrap();
        let guide = Guide::new(2, &[4], 7).unwrap();
        let ds = tiny_dataset();
        let batch = ds.gather_rows(&[0, 1, 2]).unwrap();
        let mut rng = stream_rng(11, 0);
        let noises = draw_chain_noises(3, 2, 2, 2, &mut rng);
        let leaves = gsn.leaf_tensors();
        let (mean_t, cov_t) = (ds.mean().clone(), ds.cov().clone());
        let f = {
            let gsn = gsn.clone();
            let guide = guide.clone();
            move |tape: &mut Tape, vars: &[Var]| {
                let gvars = gsn.bind_vars(vars)?;
                let gv = guide.register(tape);
                let x0 = tape.leaf(batch.clone());
                let graph = generator_loss(
                    tape, &gsn, &gvars, &guide, &gv, x0, &noises, &mean_t, &cov_t, &cfg,
                )?;
                Ok(graph.total)
            }
        };
        let err = crate::autodiff::grad_check(&f, &leaves, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn freeze_discipline_is_bitwise() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset();
        let mut trainer = Trainer::new(&cfg, ds.dim()).unwrap();
        let batch = ds.gather_rows(&[0, 1, 2, 3]).unwrap();

        let guide_before = trainer.guide.net().leaf_tensors();
        let mut rng = stream_rng(12, 0);
        generator_step(
            &mut trainer.gsn,
            &trainer.guide,
            &mut trainer.adam_gen,
            &batch,
            ds.mean(),
            ds.cov(),
            &cfg,
            &mut rng,
        )
        .unwrap();
        for (a, b) in guide_before.iter().zip(trainer.guide.net().leaf_tensors()) {
            assert_eq!(a.data(), b.data());
        }

        let gen_before = trainer.gsn.leaf_tensors();
        let mut rng = stream_rng(13, 0);
        guide_step(
            &mut trainer.guide,
            &trainer.gsn,
            &mut trainer.adam_guide,
            &batch,
            &cfg,
            &mut rng,
        )
        .unwrap();
        for (a, b) in gen_before.iter().zip(trainer.gsn.leaf_tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn equal_batches_drive_guide_loss_toward_two_ln_two() {
        // With the generated batch literally equal to the data batch, the
        // logistic objective bottoms out at 2 ln 2 as f is pushed to 0.
        let cfg = TrainConfig {
            guide_lr: 5e-2,
            ..tiny_cfg()
        };
        let mut guide = Guide::new(2, &[6], 8).unwrap();
        let ds = tiny_dataset();
        let batch = ds.gather_rows(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let mut adam = Adam::new(cfg.guide_lr, cfg.beta1, cfg.beta2, cfg.eps_adam);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let mut tape = Tape::new();
            let gv = guide.register(&mut tape);
            let d = tape.leaf(batch.clone());
            let g = tape.leaf(batch.clone());
            let lf = loss_f(&mut tape, &guide, &gv, d, g).unwrap();
            last = tape.value(lf).item();
            let grads = tape.backward(lf).unwrap();
            let grad_tensors = guide.net().collect_grads(&grads, &gv);
            let mut params = guide.net().leaf_tensors();
            adam.step(&mut params, &grad_tensors).unwrap();
            guide.net_mut().set_from_tensors(&params).unwrap();
        }
        let floor = 2.0 * std::f64::consts::LN_2;
        assert!(last >= floor - 1e-9, "{last} below the convexity floor");
        assert!(last < floor + 1e-3, "{last} did not approach {floor}");
    }

    #[test]
    fn separable_clusters_let_the_guide_win() {
        let cfg = TrainConfig {
            t_unroll: 1,
            ..tiny_cfg()
        };
        let mut guide = Guide::new(2, &[8], 9).unwrap();
        let mut adam = Adam::new(5e-2, cfg.beta1, cfg.beta2, cfg.eps_adam);
        let mut rng = stream_rng(14, 0);
        let data = {
            let mut t = Tensor::standard_normal(&[16, 2], &mut rng);
            t.data_mut().iter_mut().for_each(|v| *v = *v * 0.1 + 3.0);
            t
        };
        let gen = {
            let mut t = Tensor::standard_normal(&[16, 2], &mut rng);
            t.data_mut().iter_mut().for_each(|v| *v = *v * 0.1 - 3.0);
            t
        };
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let mut tape = Tape::new();
            let gv = guide.register(&mut tape);
            let d = tape.leaf(data.clone());
            let g = tape.leaf(gen.clone());
            let lf = loss_f(&mut tape, &guide, &gv, d, g).unwrap();
            last = tape.value(lf).item();
            let grads = tape.backward(lf).unwrap();
            let grad_tensors = guide.net().collect_grads(&grads, &gv);
            let mut params = guide.net().leaf_tensors();
            adam.step(&mut params, &grad_tensors).unwrap();
            guide.net_mut().set_from_tensors(&params).unwrap();
        }
        assert!(last < 0.1, "separable loss stuck at {last}");
    }

    #[test]
    fn history_is_deterministic_given_seed() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset();
        let (_, h1) = train_loop(&cfg, &ds, None).unwrap();
        let (_, h2) = train_loop(&cfg, &ds, None).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.to_csv(), h2.to_csv());

        let other = TrainConfig {
            seed: 1,
            ..cfg
        };
        let (_, h3) = train_loop(&other, &ds, None).unwrap();
        assert_ne!(h1, h3);
    }

    #[test]
    fn zero_steps_leaves_only_the_initial_checkpoint() {
        let cfg = TrainConfig {
            steps: 0,
            ..tiny_cfg()
        };
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let (trainer, history) = train_loop(&cfg, &ds, Some(dir.path())).unwrap();
        assert!(history.records.is_empty());
        assert_eq!(trainer.step, 0);
        let entries: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(entries, vec!["ckpt_00000000.gsnc"]);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset();
        let (trainer, _) = train_loop(&cfg, &ds, None).unwrap();
        let ck = trainer.to_checkpoint().unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        assert_eq!(bytes, back.to_bytes());

        let restored = Trainer::from_checkpoint(&cfg, &back).unwrap();
        assert_eq!(restored.gsn, trainer.gsn);
        assert_eq!(restored.guide, trainer.guide);
        assert_eq!(restored.adam_gen, trainer.adam_gen);
        assert_eq!(restored.step, trainer.step);
    }

    #[test]
    fn corrupt_checkpoints_name_the_failing_record() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset();
        let (trainer, _) = train_loop(&cfg, &ds, None).unwrap();
        let mut bytes = trainer.to_checkpoint().unwrap().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let bytes = trainer.to_checkpoint().unwrap().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn restart_reproduces_the_uninterrupted_run_exactly() {
        let cfg = TrainConfig {
            steps: 6,
            checkpoint_interval: 3,
            ..tiny_cfg()
        };
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let (full_trainer, full_history) = train_loop(&cfg, &ds, Some(dir.path())).unwrap();

        let ck = Checkpoint::load(&checkpoint_path(dir.path(), 3)).unwrap();
        assert_eq!(ck.step, 3);
        let (resumed_trainer, suffix) = resume_loop(&cfg, &ds, &ck, None).unwrap();
        assert_eq!(resumed_trainer.gsn, full_trainer.gsn);
        assert_eq!(resumed_trainer.guide, full_trainer.guide);
        assert_eq!(suffix.records, full_history.records[3..].to_vec());
    }

    #[test]
    fn evaluation_of_the_zero_model_matches_unit_noise_around_origin() {
        // All-zero parameters: the decoder emits pure unit-variance noise at
        // the origin regardless of the latent draw.
        let mut gsn = SimpleGsn::new(2, 2, &[4], &[4], DecoderHead::Gaussian, 0).unwrap();
        let zeros: Vec<Tensor> = gsn
            .leaf_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        gsn.set_from_tensors(&zeros).unwrap();
        let guide = Guide::new(2, &[4], 1).unwrap();
        let ds = data::make_ring_of_gaussians(1, 0.0, 0.3, 64, 2).unwrap();
        let report = evaluate(&gsn, &guide, &ds, 500, 20, 7).unwrap();
        assert!(l2(report.gen_mean.data()) < 0.05, "{:?}", report.gen_mean);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (report.gen_cov.get2(i, j) - expect).abs() < 0.05,
                    "cov[{i}][{j}] = {}",
                    report.gen_cov.get2(i, j)
                );
            }
        }
        assert_eq!(report, evaluate(&gsn, &guide, &ds, 500, 20, 7).unwrap());
    }

    #[test]
    fn history_csv_has_named_columns_and_one_row_per_step() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset();
        let (_, history) = train_loop(&cfg, &ds, None).unwrap();
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,loss_f,loss_g,vfe_t1,vfe_t2,mm_term,guide_on_data,guide_on_chain"
        );
        assert_eq!(lines.count(), cfg.steps as usize);
        assert!(history.all_finite());
    }
}
