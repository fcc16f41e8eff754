//! Skeleto-temporal variational autoencoder: joint-wise MLPs in and out,
//! residual STConv blocks with two pooling stages on the way down (and the
//! mirrored unpooling stack on the way up), a reparameterized latent, and the
//! four-term training loss.

use crate::motion::{position_channels, velocity_channels, MotionSequence};
use crate::nn::{sum_grads, AdamW, AdamWConfig, Bound, LrSchedule, ParamStore};
use crate::skeleton::{SkeletonTopology, ValidatedPlan};
use crate::st_ops::{st_conv, st_pool, st_unpool, STTensor};
use crate::tape::{Tape, Var};
use crate::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VaeConfig {
    /// Channel width of the latent and of every hidden layer.
    pub latent_dim: usize,
    /// Residual STConv blocks per pooling stage.
    pub blocks_per_stage: usize,
    pub loss: LossWeights,
    /// Parameter-init seed.
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { latent_dim: 32, blocks_per_stage: 2, loss: LossWeights::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub pos: f64,
    pub vel: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pos: 0.5, vel: 0.5, kl: 0.02 }
    }
}

/// Encoder output: all three tensors share the `N' x J' x D` latent shape.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub z: ArrayD<f64>,
    pub mu: ArrayD<f64>,
    pub logvar: ArrayD<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VaeLossBreakdown {
    pub l_m: f64,
    pub l_pos: f64,
    pub l_vel: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// Temporal compression factor: two stride-2 pooling stages.
pub const TEMPORAL_FACTOR: usize = 4;

pub struct Vae {
    pub config: VaeConfig,
    pub topology: SkeletonTopology,
    pub plan: ValidatedPlan,
    pub params: ParamStore,
}

fn init_weight(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| rng.gen_range(-bound..bound));
    params.insert(name, w);
}

/// One residual STConv block: two graph-conv maps, three temporal taps, and a
/// channel bias.
fn init_block(params: &mut ParamStore, prefix: &str, k: usize, rng: &mut ChaCha8Rng) {
    init_weight(params, &format!("{prefix}.skel1.w"), k, k, rng);
    init_weight(params, &format!("{prefix}.skel2.w"), k, k, rng);
    for t in 0..3 {
        init_weight(params, &format!("{prefix}.temp{t}.w"), k, k, rng);
    }
    params.insert(&format!("{prefix}.bias"), ArrayD::zeros(IxDyn(&[k])));
}

impl Vae {
    pub fn new(topology: SkeletonTopology, plan: ValidatedPlan, config: VaeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.latent_dim;
        let mut params = ParamStore::new();
        for (j, &d) in topology.feature_dim.iter().enumerate() {
            params.init_linear(&format!("enc.in.j{j}.0"), d, k, &mut rng);
            params.init_linear(&format!("enc.in.j{j}.1"), k, k, &mut rng);
        }
        for s in 0..plan.stages.len() {
            for b in 0..config.blocks_per_stage {
                init_block(&mut params, &format!("enc.s{s}.b{b}"), k, &mut rng);
            }
        }
        params.init_linear("enc.mu", k, k, &mut rng);
        params.init_linear("enc.logvar", k, k, &mut rng);
        params.init_linear("dec.in", k, k, &mut rng);
        for s in (0..plan.stages.len()).rev() {
            for b in 0..config.blocks_per_stage {
                init_block(&mut params, &format!("dec.s{s}.b{b}"), k, &mut rng);
            }
        }
        for (j, &d) in topology.feature_dim.iter().enumerate() {
            params.init_linear(&format!("dec.out.j{j}.0"), k, k, &mut rng);
            params.init_linear(&format!("dec.out.j{j}.1"), k, d, &mut rng);
        }
        Vae { config, topology, plan, params }
    }

    pub fn from_parts(
        topology: SkeletonTopology,
        plan: ValidatedPlan,
        config: VaeConfig,
        params: ParamStore,
    ) -> Self {
        Vae { config, topology, plan, params }
    }

    pub fn latent_joints(&self) -> usize {
        self.plan.atomic().n_joints()
    }

    /// Residual STConv block: `h + gelu(stconv(h) + bias)`.
    fn st_block(
        &self,
        tape: &Tape,
        bound: &Bound,
        h: STTensor,
        prefix: &str,
        topology: &SkeletonTopology,
    ) -> STTensor {
        let w = |n: &str| bound.var(tape, &format!("{prefix}.{n}"));
        let conv = st_conv(
            tape,
            h,
            w("skel1.w"),
            w("skel2.w"),
            [w("temp0.w"), w("temp1.w"), w("temp2.w")],
            topology,
        );
        let biased = tape.add_vec(conv.var, w("bias"));
        STTensor::new(tape.add(h.var, tape.gelu(biased)), h.stage)
    }

    /// Tape-level encoder: joint-wise MLP, STConv stacks with pooling, and
    /// the `mu` / `logvar` heads.
    pub fn encode_t(&self, tape: &Tape, bound: &Bound, m: &MotionSequence) -> Result<(Var, Var)> {
        m.validate_against(&self.topology)?;
        let n = m.frames();
        if n == 0 || n % TEMPORAL_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "frame count {n} not a positive multiple of {TEMPORAL_FACTOR}"
            )));
        }
        let k = self.config.latent_dim;
        let mut flat: Option<Var> = None;
        for (j, block) in m.blocks.iter().enumerate() {
            let x = tape.constant(block.clone().into_dyn());
            let h0 = tape.gelu(bound.linear(tape, x, &format!("enc.in.j{j}.0")));
            let h1 = bound.linear(tape, h0, &format!("enc.in.j{j}.1"));
            flat = Some(match flat {
                Some(f) => tape.concat_last(f, h1),
                None => h1,
            });
        }
        let j_total = self.topology.n_joints();
        let mut h = STTensor::new(tape.reshape(flat.unwrap(), &[n, j_total, k]), 0);
        for (s, stage) in self.plan.stages.iter().enumerate() {
            let topo = self.plan.topology_at(s);
            for b in 0..self.config.blocks_per_stage {
                h = self.st_block(tape, bound, h, &format!("enc.s{s}.b{b}"), topo);
            }
            h = st_pool(tape, h, stage);
        }
        let mu = bound.linear(tape, h.var, "enc.mu");
        let logvar = bound.linear(tape, h.var, "enc.logvar");
        Ok((mu, logvar))
    }

    /// `z = mu + exp(0.5 logvar) * noise` on the tape.
    pub fn reparam_t(&self, tape: &Tape, mu: Var, logvar: Var, noise: &ArrayD<f64>) -> Var {
        let std = tape.exp(tape.scale(logvar, 0.5));
        let n = tape.constant(noise.clone());
        tape.add(mu, tape.mul(std, n))
    }

    /// Tape-level decoder: mirrored STConv stacks with unpooling, then the
    /// joint-wise output MLPs; returns the flat `frames x sum(D_j)` tensor.
    pub fn decode_t(&self, tape: &Tape, bound: &Bound, z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        let jp = self.latent_joints();
        let k = self.config.latent_dim;
        if shape.len() != 3 || shape[1] != jp || shape[2] != k {
            return Err(Error::Shape(format!(
                "latent shape {shape:?}, expected [N', {jp}, {k}]"
            )));
        }
        let n_stages = self.plan.stages.len();
        let mut h = STTensor::new(bound.linear(tape, z, "dec.in"), n_stages);
        for s in (0..n_stages).rev() {
            let topo = self.plan.topology_at(s + 1);
            for b in 0..self.config.blocks_per_stage {
                h = self.st_block(tape, bound, h, &format!("dec.s{s}.b{b}"), topo);
            }
            h = st_unpool(tape, h, &self.plan.stages[s]);
        }
        let n = tape.shape(h.var)[0];
        let j_total = self.topology.n_joints();
        let flat_h = tape.reshape(h.var, &[n, j_total * k]);
        let mut out: Option<Var> = None;
        for j in 0..j_total {
            let hj = tape.slice_last(flat_h, j * k, (j + 1) * k);
            let y0 = tape.gelu(bound.linear(tape, hj, &format!("dec.out.j{j}.0")));
            let yj = bound.linear(tape, y0, &format!("dec.out.j{j}.1"));
            out = Some(match out {
                Some(o) => tape.concat_last(o, yj),
                None => yj,
            });
        }
        Ok(out.unwrap())
    }

    /// Deterministic encode; `noise = None` means `z = mu`.
    pub fn encode(&self, m: &MotionSequence, noise: Option<&ArrayD<f64>>) -> Result<LatentTensor> {
        let tape = Tape::no_grad();
        let bound = Bound::new(&self.params);
        let (mu, logvar) = self.encode_t(&tape, &bound, m)?;
        let mu_v = (*tape.value(mu)).clone();
        let logvar_v = (*tape.value(logvar)).clone();
        let z = match noise {
            Some(n) => {
                if n.shape() != mu_v.shape() {
                    return Err(Error::Shape(format!(
                        "noise shape {:?} vs latent {:?}",
                        n.shape(),
                        mu_v.shape()
                    )));
                }
                &mu_v + &(logvar_v.mapv(|l| (0.5 * l).exp()) * n)
            }
            None => mu_v.clone(),
        };
        Ok(LatentTensor { z, mu: mu_v, logvar: logvar_v })
    }

    pub fn decode(&self, z: &ArrayD<f64>, fps: f64) -> Result<MotionSequence> {
        let tape = Tape::no_grad();
        let bound = Bound::new(&self.params);
        let flat = self.decode_t(&tape, &bound, tape.constant(z.clone()))?;
        let v = tape.value(flat);
        let flat2 = v
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Shape(format!("decoder output: {e}")))?
            .to_owned();
        MotionSequence::decompose(&flat2, &self.topology, fps)
    }

    /// Full loss on the tape; returns the total plus the unweighted terms.
    pub fn loss_t(
        &self,
        tape: &Tape,
        bound: &Bound,
        m: &MotionSequence,
        noise: &ArrayD<f64>,
    ) -> Result<LossVars> {
        let (mu, logvar) = self.encode_t(tape, bound, m)?;
        let z = self.reparam_t(tape, mu, logvar, noise);
        let recon = self.decode_t(tape, bound, z)?;
        let target = tape.constant(m.compose().into_dyn());
        let diff = tape.abs(tape.sub(recon, target));
        let l_m = tape.mean_all(diff);
        let (pos_mask, pos_count) = channel_mask(&self.topology, MaskKind::Position);
        let (vel_mask, vel_count) = channel_mask(&self.topology, MaskKind::Velocity);
        let n = m.frames() as f64;
        let l_pos = masked_mean(tape, diff, &pos_mask, n * pos_count as f64);
        let l_vel = masked_mean(tape, diff, &vel_mask, n * vel_count as f64);
        // KL(q || N(0, I)) elementwise mean: (mu^2 + exp(logvar) - 1 - logvar) / 2
        let kl_inner = tape.sub(
            tape.add_scalar(tape.add(tape.mul(mu, mu), tape.exp(logvar)), -1.0),
            logvar,
        );
        let l_kl = tape.scale(tape.mean_all(kl_inner), 0.5);
        let w = self.config.loss;
        let mut total = l_m;
        if w.pos != 0.0 {
            total = tape.add(total, tape.scale(l_pos, w.pos));
        }
        if w.vel != 0.0 {
            total = tape.add(total, tape.scale(l_vel, w.vel));
        }
        if w.kl != 0.0 {
            total = tape.add(total, tape.scale(l_kl, w.kl));
        }
        Ok(LossVars { total, l_m, l_pos, l_vel, l_kl })
    }

    pub fn breakdown(&self, tape: &Tape, vars: &LossVars) -> VaeLossBreakdown {
        let g = |v: Var| *tape.value(v).first().unwrap();
        VaeLossBreakdown {
            l_m: g(vars.l_m),
            l_pos: g(vars.l_pos),
            l_vel: g(vars.l_vel),
            l_kl: g(vars.l_kl),
            total: g(vars.total),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l_m: Var,
    pub l_pos: Var,
    pub l_vel: Var,
    pub l_kl: Var,
}

enum MaskKind {
    Position,
    Velocity,
}

/// 0/1 mask over the flattened feature width plus the number of selected
/// channels.
fn channel_mask(topology: &SkeletonTopology, kind: MaskKind) -> (Array1<f64>, usize) {
    let mut mask = Array1::zeros(topology.flat_width());
    let mut count = 0;
    let mut offset = 0;
    for j in 0..topology.n_joints() {
        let range = match kind {
            MaskKind::Position => position_channels(topology, j),
            MaskKind::Velocity => Some(velocity_channels(topology, j)),
        };
        if let Some(r) = range {
            for c in r {
                mask[offset + c] = 1.0;
                count += 1;
            }
        }
        offset += topology.feature_dim[j];
    }
    (mask, count)
}

fn masked_mean(tape: &Tape, diff_abs: Var, mask: &Array1<f64>, denom: f64) -> Var {
    let m = tape.constant(mask.clone().into_dyn());
    tape.scale(tape.sum_all(tape.mul_vec(diff_abs, m)), 1.0 / denom)
}

/// Standalone loss on plain arrays (no tape); matches `loss_t` exactly.
pub fn vae_loss(
    m: &MotionSequence,
    m_hat: &MotionSequence,
    mu: &ArrayD<f64>,
    logvar: &ArrayD<f64>,
    topology: &SkeletonTopology,
    weights: LossWeights,
) -> Result<VaeLossBreakdown> {
    if m.widths() != m_hat.widths() || m.frames() != m_hat.frames() {
        return Err(Error::Shape("reconstruction shape differs from target".into()));
    }
    if mu.shape() != logvar.shape() {
        return Err(Error::Shape("mu/logvar shapes differ".into()));
    }
    let diff = (m_hat.compose() - m.compose()).mapv(f64::abs);
    let l_m = diff.mean().unwrap_or(0.0);
    let (pos_mask, pos_count) = channel_mask(topology, MaskKind::Position);
    let (vel_mask, vel_count) = channel_mask(topology, MaskKind::Velocity);
    let n = m.frames() as f64;
    let l_pos = (&diff * &pos_mask).sum() / (n * pos_count as f64);
    let l_vel = (&diff * &vel_mask).sum() / (n * vel_count as f64);
    let l_kl = ndarray::Zip::from(mu)
        .and(logvar)
        .fold(0.0, |acc, &m, &l| acc + 0.5 * (m * m + l.exp() - 1.0 - l))
        / mu.len() as f64;
    let total = l_m + weights.pos * l_pos + weights.vel * l_vel + weights.kl * l_kl;
    Ok(VaeLossBreakdown { l_m, l_pos, l_vel, l_kl, total })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VaeTrainConfig {
    pub model: VaeConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Training window length in frames (multiple of 4); clips are cropped
    /// or loop-padded to it.
    pub window: usize,
    pub lr: LrSchedule,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            model: VaeConfig::default(),
            steps: 1000,
            batch_size: 4,
            window: 48,
            lr: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            seed: 0,
            parallel: true,
        }
    }
}

/// Trains a VAE from scratch on the corpus. Batches walk the corpus
/// round-robin; per-sample gradients are computed independently (optionally
/// in parallel) and summed in index order, so results are seed-deterministic.
/// `progress` sees every step's loss breakdown.
pub fn train_vae(
    corpus: &[MotionSequence],
    topology: SkeletonTopology,
    plan: ValidatedPlan,
    cfg: &VaeTrainConfig,
    mut progress: impl FnMut(usize, &VaeLossBreakdown),
) -> Result<(Vae, Vec<VaeLossBreakdown>)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    if cfg.window == 0 || cfg.window % TEMPORAL_FACTOR != 0 {
        return Err(Error::Config(format!(
            "window {} must be a positive multiple of {TEMPORAL_FACTOR}",
            cfg.window
        )));
    }
    let mut vae = Vae::new(topology, plan, cfg.model.clone());
    let mut opt = AdamW::new(cfg.adamw.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent_shape = [
        cfg.window / TEMPORAL_FACTOR,
        vae.latent_joints(),
        cfg.model.latent_dim,
    ];
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Draw all stochastic inputs up front so parallelism cannot reorder
        // RNG consumption.
        let batch: Vec<(MotionSequence, ArrayD<f64>)> = (0..cfg.batch_size)
            .map(|i| {
                let clip = &corpus[(step * cfg.batch_size + i) % corpus.len()];
                let noise = ArrayD::from_shape_fn(IxDyn(&latent_shape), |_| {
                    StandardNormal.sample(&mut rng)
                });
                (clip.fit_to_window(cfg.window), noise)
            })
            .collect();
        let results = crate::par::indexed_map(cfg.batch_size, cfg.parallel, |i| {
            let (clip, noise) = &batch[i];
            let tape = Tape::new();
            let bound = Bound::new(&vae.params);
            let vars = vae.loss_t(&tape, &bound, clip, noise)?;
            let grads = tape.backward(vars.total);
            Ok::<_, Error>((vae.breakdown(&tape, &vars), bound.collect_grads(&grads)))
        });
        let mut step_loss = VaeLossBreakdown { l_m: 0.0, l_pos: 0.0, l_vel: 0.0, l_kl: 0.0, total: 0.0 };
        let mut grad_maps = Vec::with_capacity(cfg.batch_size);
        for r in results {
            let (bd, g) = r?;
            step_loss.l_m += bd.l_m;
            step_loss.l_pos += bd.l_pos;
            step_loss.l_vel += bd.l_vel;
            step_loss.l_kl += bd.l_kl;
            step_loss.total += bd.total;
            grad_maps.push(g);
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        step_loss.l_m *= inv_b;
        step_loss.l_pos *= inv_b;
        step_loss.l_vel *= inv_b;
        step_loss.l_kl *= inv_b;
        step_loss.total *= inv_b;
        if !step_loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let mut grads = sum_grads(grad_maps);
        for g in grads.values_mut() {
            *g *= inv_b;
        }
        opt.step(&mut vae.params, &grads, cfg.lr.lr(step + 1));
        progress(step, &step_loss);
        history.push(step_loss);
    }
    Ok((vae, history))
}
