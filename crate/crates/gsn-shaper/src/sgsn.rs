//! The Simple GSN: a corruption conditional q_φ(z|x), a reconstruction
//! conditional p_θ(x|z), and a standard-normal prior, chained into a Markov
//! process over observables.
//!
//! "Simple" means the corruption of x_t never looks at z_t — each transition
//! is z ~ q_φ(z|x) followed by x' ~ p_θ(x|z). Chains are unrolled on a tape
//! with reparameterized draws so a loss on any state backpropagates through
//! every transition into the shared parameters.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dists::{
    gauss_sample_reparam, BernoulliVec, DiagGaussian, StdPrior,
};
use crate::error::{GsnError, Result};
use crate::nets::{gaussian_head, Mlp, MlpVars};

/// Family of the reconstruction conditional over X.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderHead {
    Gaussian,
    Bernoulli,
}

/// Decoder output: one conditional distribution per batch row.
#[derive(Clone, Copy, Debug)]
pub enum DecoderDist {
    Gaussian(DiagGaussian),
    Bernoulli(BernoulliVec),
}

/// Encoder, decoder, and prior of one Simple GSN.
#[derive(Clone, Debug, PartialEq)]
pub struct SimpleGsn {
    encoder: Mlp,
    decoder: Mlp,
    head: DecoderHead,
    d_x: usize,
    k_z: usize,
}

/// Tape handles for a registered [`SimpleGsn`].
#[derive(Clone, Debug)]
pub struct GsnVars {
    pub enc: MlpVars,
    pub dec: MlpVars,
}

/// One chain transition with its cached conditionals, all on the same tape.
///
/// `enc` is q_φ(z | x_prev) and `dec` is p_θ(x | z); keeping them lets the
/// per-step free energy reuse the exact conditionals the transition sampled
/// through, with no recomputation.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub z: Var,
    pub x_next: Var,
    pub enc: DiagGaussian,
    pub dec: DiagGaussian,
}

/// The injected standard-normal draws behind one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub z: Tensor,
    pub x: Tensor,
}

/// An unrolled chain x_0 → x_1 → … → x_T with its full compute graph and the
/// noise record needed to replay any suffix bitwise.
#[derive(Debug)]
pub struct Trajectory {
    pub x0: Var,
    pub steps: Vec<Step>,
    pub noises: Vec<StepNoise>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The emitted states x_1 .. x_T.
    pub fn emitted(&self) -> Vec<Var> {
        self.steps.iter().map(|s| s.x_next).collect()
    }

    /// All states x_0 .. x_T.
    pub fn states(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(self.x0);
        out.extend(self.emitted());
        out
    }
}

/// Training pairs collected by the walkback procedure; every pair anchors to
/// the same input sample x.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkbackPairs {
    pairs: Vec<(Tensor, Tensor)>,
}

impl WalkbackPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The (x, ẑ) pairs in collection order.
    pub fn pairs(&self) -> &[(Tensor, Tensor)] {
        &self.pairs
    }
}

/// Overwrite the last `tail` entries of a network's final-layer bias.
///
/// The affine output layer lays a Gaussian head out as [means, raw log
/// variances], so the bias tail is exactly the initial raw log-variance.
fn sharpen_final_bias(net: &mut Mlp, tail: usize, value: f64) -> Result<()> {
    let mut leaves = net.leaf_tensors();
    let bias = leaves
        .last_mut()
        .ok_or_else(|| GsnError::invalid("sharpen_final_bias", "network has no layers"))?;
    let data = bias.data_mut();
    let n = data.len();
    if tail > n {
        return Err(GsnError::invalid(
            "sharpen_final_bias",
            format!("tail {tail} exceeds final bias width {n}"),
        ));
    }
    for v in &mut data[n - tail..] {
        *v = value;
    }
    net.set_from_tensors(&leaves)
}

impl SimpleGsn {
    /// Build a Simple GSN with the given observable and latent dimensions and
    /// hidden widths. The encoder maps d_x → 2 k_z (mean and log-variance);
    /// the decoder maps k_z → 2 d_x for a Gaussian head or k_z → d_x for a
    /// Bernoulli head.
    pub fn new(
        d_x: usize,
        k_z: usize,
        enc_hidden: &[usize],
        dec_hidden: &[usize],
        head: DecoderHead,
        seed: u64,
    ) -> Result<Self> {
        if d_x == 0 || k_z == 0 {
            return Err(GsnError::invalid("SimpleGsn::new", "zero dimension"));
        }
        let mut enc_widths = vec![d_x];
        enc_widths.extend_from_slice(enc_hidden);
        enc_widths.push(2 * k_z);
        let mut dec_widths = vec![k_z];
        dec_widths.extend_from_slice(dec_hidden);
        dec_widths.push(match head {
            DecoderHead::Gaussian => 2 * d_x,
            DecoderHead::Bernoulli => d_x,
        });
        // separate parameter streams for the two networks
        let mut gsn = SimpleGsn {
            encoder: Mlp::new(&enc_widths, seed)?,
            decoder: Mlp::new(&dec_widths, seed.wrapping_add(0x9e3779b97f4a7c15))?,
            head,
            d_x,
            k_z,
        };
        // Start both conditionals sharp (σ ≈ 0.1) instead of unit-wide:
        // reconstruction gradients then dominate the divergence pull from
        // the first step, which keeps the unrolled chain anchored to its
        // data starts rather than collapsing to an uninformative blob.
        const INIT_RAW_LOGVAR: f64 = -5.0;
        sharpen_final_bias(&mut gsn.encoder, k_z, INIT_RAW_LOGVAR)?;
        if head == DecoderHead::Gaussian {
            sharpen_final_bias(&mut gsn.decoder, d_x, INIT_RAW_LOGVAR)?;
        }
        Ok(gsn)
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn k_z(&self) -> usize {
        self.k_z
    }

    pub fn head(&self) -> DecoderHead {
        self.head
    }

    pub fn prior(&self) -> StdPrior {
        StdPrior { dim: self.k_z }
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    /// Put all parameters on `tape` as leaves. Call once per tape.
    pub fn register(&self, tape: &mut Tape) -> GsnVars {
        GsnVars {
            enc: self.encoder.register(tape),
            dec: self.decoder.register(tape),
        }
    }

    /// All parameters in a fixed order: encoder layers then decoder layers.
    pub fn leaf_tensors(&self) -> Vec<Tensor> {
        let mut out = self.encoder.leaf_tensors();
        out.extend(self.decoder.leaf_tensors());
        out
    }

    /// Replace all parameters from the order of [`SimpleGsn::leaf_tensors`].
    pub fn set_from_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let n_enc = self.encoder.leaf_tensors().len();
        if tensors.len() != n_enc + self.decoder.leaf_tensors().len() {
            return Err(GsnError::invalid(
                "SimpleGsn::set_from_tensors",
                format!("expected {} tensors, got {}", n_enc * 2, tensors.len()),
            ));
        }
        self.encoder.set_from_tensors(&tensors[..n_enc])?;
        self.decoder.set_from_tensors(&tensors[n_enc..])
    }

    /// Attach externally created leaves (ordered as in
    /// [`SimpleGsn::leaf_tensors`]) — the hook gradient checks need.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<GsnVars> {
        let n_enc = self.encoder.leaf_tensors().len();
        if vars.len() < n_enc {
            return Err(GsnError::invalid(
                "SimpleGsn::bind_vars",
                format!("expected at least {n_enc} vars, got {}", vars.len()),
            ));
        }
        Ok(GsnVars {
            enc: self.encoder.bind(&vars[..n_enc])?,
            dec: self.decoder.bind(&vars[n_enc..])?,
        })
    }

    /// The corruption conditional q_φ(z | x) for a batch `x: [n, d_x]`.
    pub fn encode(&self, tape: &mut Tape, vars: &GsnVars, x: Var) -> Result<DiagGaussian> {
        let raw = self.encoder.forward(tape, &vars.enc, x)?;
        let (mean, logvar) = gaussian_head(tape, raw)?;
        Ok(DiagGaussian { mean, logvar })
    }

    /// The reconstruction conditional p_θ(x | z) for a batch `z: [n, k_z]`.
    pub fn decode(&self, tape: &mut Tape, vars: &GsnVars, z: Var) -> Result<DecoderDist> {
        let raw = self.decoder.forward(tape, &vars.dec, z)?;
        Ok(match self.head {
            DecoderHead::Gaussian => {
                let (mean, logvar) = gaussian_head(tape, raw)?;
                DecoderDist::Gaussian(DiagGaussian { mean, logvar })
            }
            DecoderHead::Bernoulli => DecoderDist::Bernoulli(BernoulliVec { logits: raw }),
        })
    }

    /// One transition x → z → x′ with injected noise, fully on-tape.
    ///
    /// Requires the Gaussian decoder head: binary draws have no
    /// reparameterization, so a Bernoulli chain cannot carry gradients and is
    /// rejected here rather than silently detached.
    pub fn transition_sample(
        &self,
        tape: &mut Tape,
        vars: &GsnVars,
        x: Var,
        noise_z: Var,
        noise_x: Var,
    ) -> Result<Step> {
        let enc = self.encode(tape, vars, x)?;
        let z = gauss_sample_reparam(tape, &enc, noise_z)?;
        let dec = match self.decode(tape, vars, z)? {
            DecoderDist::Gaussian(d) => d,
            DecoderDist::Bernoulli(_) => {
                return Err(GsnError::invalid(
                    "transition_sample",
                    "binary decoder draws are not reparameterizable; chain unrolling needs the Gaussian head",
                ))
            }
        };
        let x_next = gauss_sample_reparam(tape, &dec, noise_x)?;
        Ok(Step { z, x_next, enc, dec })
    }

    /// Unroll the chain with a caller-supplied noise record (exact replay).
    pub fn unroll_with_noises(
        &self,
        tape: &mut Tape,
        vars: &GsnVars,
        x0: Var,
        noises: &[StepNoise],
    ) -> Result<Trajectory> {
        if noises.is_empty() {
            return Err(GsnError::invalid("unroll_with_noises", "need at least one step"));
        }
        let mut steps = Vec::with_capacity(noises.len());
        let mut x = x0;
        for noise in noises {
            let nz = tape.leaf(noise.z.clone());
            let nx = tape.leaf(noise.x.clone());
            let step = self.transition_sample(tape, vars, x, nz, nx)?;
            x = step.x_next;
            steps.push(step);
        }
        Ok(Trajectory {
            x0,
            steps,
            noises: noises.to_vec(),
        })
    }

    /// Unroll `t_steps` transitions from `x0`, drawing fresh noise, keeping
    /// the whole compute graph for backpropagation through time.
    pub fn unroll_chain(
        &self,
        tape: &mut Tape,
        vars: &GsnVars,
        x0: Var,
        t_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        if t_steps == 0 {
            return Err(GsnError::invalid("unroll_chain", "need at least one step"));
        }
        let n = tape.value(x0).rows();
        let noises: Vec<StepNoise> = (0..t_steps)
            .map(|_| StepNoise {
                z: Tensor::standard_normal(&[n, self.k_z], rng),
                x: Tensor::standard_normal(&[n, self.d_x], rng),
            })
            .collect();
        self.unroll_with_noises(tape, vars, x0, &noises)
    }

    /// Collect walkback training pairs for a data batch `x: [n, d_x]`.
    ///
    /// Faithful to the general procedure: ẑ starts at the zero vector, a
    /// burn-in loop resamples it k_burn_in times, then each of k_roll_out
    /// iterations samples ž ~ q_φ(z | x̂), x̌ ~ p_θ(x | ẑ) and records (x, ẑ).
    /// For a Simple GSN the corruption ignores ẑ, so burn-in cannot change
    /// the pair distribution; the burn-in and roll-out loops draw from
    /// pre-split streams so the collected pairs are bitwise identical for
    /// any k_burn_in under the same incoming generator state.
    pub fn walkback_pairs(
        &self,
        x: &Tensor,
        k_burn_in: usize,
        k_roll_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<WalkbackPairs> {
        if x.shape().len() != 2 || x.cols() != self.d_x {
            return Err(GsnError::ShapeMismatch {
                op: "walkback_pairs",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d_x],
            });
        }
        let n = x.rows();
        let mut burn_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let mut roll_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());

        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(x.clone());

        let mut z_hat = Tensor::zeros(&[n, self.k_z]);
        for _ in 0..k_burn_in {
            let enc = self.encode(&mut tape, &vars, xv)?;
            let noise = tape.leaf(Tensor::standard_normal(&[n, self.k_z], &mut burn_rng));
            let z_check = gauss_sample_reparam(&mut tape, &enc, noise)?;
            z_hat = tape.value(z_check).clone();
        }
        let _ = z_hat; // q_φ never reads ẑ in a Simple GSN; kept for procedure fidelity

        let mut pairs = Vec::with_capacity(k_roll_out);
        let mut x_hat = xv;
        for _ in 0..k_roll_out {
            let enc = self.encode(&mut tape, &vars, x_hat)?;
            let noise_z = tape.leaf(Tensor::standard_normal(&[n, self.k_z], &mut roll_rng));
            let z_check = gauss_sample_reparam(&mut tape, &enc, noise_z)?;
            let z_hat = z_check;
            let x_check = match self.decode(&mut tape, &vars, z_hat)? {
                DecoderDist::Gaussian(d) => {
                    let noise_x =
                        tape.leaf(Tensor::standard_normal(&[n, self.d_x], &mut roll_rng));
                    gauss_sample_reparam(&mut tape, &d, noise_x)?
                }
                DecoderDist::Bernoulli(b) => {
                    let probs = tape.sigmoid(b.logits)?;
                    let draws: Vec<f64> = tape
                        .value(probs)
                        .data()
                        .iter()
                        .map(|&p| {
                            let u: f64 = roll_rng.next_u64() as f64 / u64::MAX as f64;
                            (u < p) as u8 as f64
                        })
                        .collect();
                    tape.leaf(Tensor::from_vec(vec![n, self.d_x], draws)?)
                }
            };
            x_hat = x_check;
            pairs.push((x.clone(), tape.value(z_hat).clone()));
        }
        Ok(WalkbackPairs { pairs })
    }
}
