//! Text-conditioned transformer denoiser over the skeleto-temporal latent:
//! sinusoidal positions, L layers of TempAttn -> SkelAttn -> CrossAttn -> FFN
//! (each residual + pre-LN + FiLM), U-Net-style skip pairing, velocity
//! prediction, and cross-attention capture for editing.

use crate::motion::MotionSequence;
use crate::nn::{sum_grads, AdamW, AdamWConfig, Bound, LrSchedule, ParamStore};
use crate::schedule::{cfg_combine, ddim_timesteps, GuidanceConfig, NoiseSchedule};
use crate::tape::{Tape, Var};
use crate::text::TextEmbedding;
use crate::vae::{Vae, TEMPORAL_FACTOR};
use crate::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    /// Transformer depth; must be even for U-Net pairing.
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the transformer stream.
    pub width: usize,
    pub ffn_hidden: usize,
    /// Channel width of the VAE latent the denoiser operates on.
    pub latent_dim: usize,
    /// Token-vector width of the (frozen) text encoder.
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 6,
            heads: 4,
            width: 256,
            ffn_hidden: 512,
            latent_dim: 32,
            text_dim: 64,
            seed: 0,
        }
    }
}

/// Cross-attention maps captured during sampling: one entry per DDIM
/// timestep, each holding one `heads x J' x N' x K` tensor per layer
/// (conditional pass only).
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub steps: Vec<StepMaps>,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct StepMaps {
    pub t: usize,
    pub layers: Vec<ArrayD<f64>>,
}

/// Per-layer cross-attention interception: receives the layer index and the
/// row-stochastic map about to be used; returning `Some` replaces it.
pub type AttnHook<'a> = dyn FnMut(usize, &ArrayD<f64>) -> Option<ArrayD<f64>> + 'a;

pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

const SUB_BLOCKS: [&str; 4] = ["temp", "skel", "cross", "ffn"];

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Self {
        assert!(config.layers % 2 == 0, "layer count must be even for U-Net pairing");
        assert!(config.width % config.heads == 0, "width must divide into heads");
        assert!(config.width % 2 == 0, "sinusoidal embedding needs even width");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (w, k, h) = (config.width, config.latent_dim, config.ffn_hidden);
        let mut params = ParamStore::new();
        params.init_linear("in.0", k, w, &mut rng);
        params.init_linear("in.1", w, w, &mut rng);
        params.init_linear("tmlp.0", w, w, &mut rng);
        params.init_linear("tmlp.1", w, w, &mut rng);
        for l in 0..config.layers {
            for attn in ["temp", "skel"] {
                for proj in ["q", "k", "v", "o"] {
                    params.init_linear(&format!("l{l}.{attn}.{proj}"), w, w, &mut rng);
                }
            }
            params.init_linear(&format!("l{l}.cross.q"), w, w, &mut rng);
            params.init_linear(&format!("l{l}.cross.k"), config.text_dim, w, &mut rng);
            params.init_linear(&format!("l{l}.cross.v"), config.text_dim, w, &mut rng);
            params.init_linear(&format!("l{l}.cross.o"), w, w, &mut rng);
            params.init_linear(&format!("l{l}.ffn.0"), w, h, &mut rng);
            params.init_linear(&format!("l{l}.ffn.1"), h, w, &mut rng);
            // FiLM projections start at zero so every sub-block begins as a
            // pure residual passthrough.
            for sb in SUB_BLOCKS {
                params.init_linear_zero(&format!("l{l}.{sb}.film"), w, 2 * w);
            }
            if l >= config.layers / 2 {
                params.init_linear(&format!("l{l}.skip"), 2 * w, w, &mut rng);
            }
        }
        params.init_linear("out.0", w, w, &mut rng);
        params.init_linear("out.1", w, k, &mut rng);
        Denoiser { config, params }
    }

    pub fn from_parts(config: DenoiserConfig, params: ParamStore) -> Self {
        Denoiser { config, params }
    }

    fn head_dim(&self) -> usize {
        self.config.width / self.config.heads
    }

    /// `[B, S, W] -> [B*heads, S, W/heads]`.
    fn split_heads(&self, tape: &Tape, x: Var) -> Var {
        let s = tape.shape(x);
        let (b, n, heads, hd) = (s[0], s[1], self.config.heads, self.head_dim());
        let r = tape.reshape(x, &[b, n, heads, hd]);
        let p = tape.permute(r, &[0, 2, 1, 3]);
        tape.reshape(p, &[b * heads, n, hd])
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    fn merge_heads(&self, tape: &Tape, x: Var, batch: usize) -> Var {
        let s = tape.shape(x);
        let (heads, n, hd) = (self.config.heads, s[1], s[2]);
        let r = tape.reshape(x, &[batch, heads, n, hd]);
        let p = tape.permute(r, &[0, 2, 1, 3]);
        tape.reshape(p, &[batch, n, heads * hd])
    }

    /// Multi-head self-attention over axis 1 of a `[B, S, W]` tensor.
    fn self_attention(&self, tape: &Tape, bound: &Bound, x: Var, prefix: &str) -> Var {
        let b = tape.shape(x)[0];
        let q = self.split_heads(tape, bound.linear(tape, x, &format!("{prefix}.q")));
        let k = self.split_heads(tape, bound.linear(tape, x, &format!("{prefix}.k")));
        let v = self.split_heads(tape, bound.linear(tape, x, &format!("{prefix}.v")));
        let kt = tape.permute(k, &[0, 2, 1]);
        let scores = tape.scale(tape.bmm(q, kt), 1.0 / (self.head_dim() as f64).sqrt());
        let attn = tape.softmax_last(scores);
        let ctx = self.merge_heads(tape, tape.bmm(attn, v), b);
        bound.linear(tape, ctx, &format!("{prefix}.o"))
    }

    /// Cross-attention of the flattened `(frame, joint)` queries against the
    /// text tokens; returns the context and the map actually used, shaped
    /// `heads x J' x N' x K`.
    fn cross_attention(
        &self,
        tape: &Tape,
        bound: &Bound,
        z: Var,
        text_tokens: Var,
        layer: usize,
        hook: &mut Option<&mut AttnHook>,
    ) -> Result<(Var, ArrayD<f64>)> {
        let s = tape.shape(z);
        let (n, j, w) = (s[0], s[1], s[2]);
        let prefix = format!("l{layer}.cross");
        let flat = tape.reshape(z, &[1, n * j, w]);
        let q = self.split_heads(tape, bound.linear(tape, flat, &format!("{prefix}.q")));
        let ktoks = bound.linear(tape, text_tokens, &format!("{prefix}.k"));
        let vtoks = bound.linear(tape, text_tokens, &format!("{prefix}.v"));
        let kk = tape.shape(ktoks)[0];
        let k = self.split_heads(tape, tape.reshape(ktoks, &[1, kk, w]));
        let v = self.split_heads(tape, tape.reshape(vtoks, &[1, kk, w]));
        let kt = tape.permute(k, &[0, 2, 1]);
        let scores = tape.scale(tape.bmm(q, kt), 1.0 / (self.head_dim() as f64).sqrt());
        let mut attn = tape.softmax_last(scores); // [heads, N*J, K]

        // Export layout: heads x J' x N' x K.
        let heads = self.config.heads;
        let as_map = |t: &Tape, a: Var| {
            let r = t.reshape(a, &[heads, n, j, kk]);
            t.permute(r, &[0, 2, 1, 3])
        };
        let mut map_value = (*tape.value(as_map(tape, attn))).clone();
        if let Some(h) = hook.as_mut() {
            if let Some(replacement) = h(layer, &map_value) {
                if replacement.shape() != map_value.shape() {
                    return Err(Error::Shape(format!(
                        "hook returned map of shape {:?}, expected {:?}",
                        replacement.shape(),
                        map_value.shape()
                    )));
                }
                // Re-enter the tape as a constant in query layout.
                let c = tape.constant(replacement.clone());
                let back = tape.permute(c, &[0, 2, 1, 3]);
                attn = tape.reshape(back, &[heads, n * j, kk]);
                map_value = replacement;
            }
        }
        let ctx = self.merge_heads(tape, tape.bmm(attn, v), 1);
        let ctx3 = tape.reshape(ctx, &[n, j, w]);
        let out = bound.linear(tape, ctx3, &format!("{prefix}.o"));
        Ok((out, map_value))
    }

    /// `FiLM(y) = (1 + g) * y + b` with `(g, b)` projected from the timestep
    /// embedding; the projection is zero-initialized, so FiLM starts as the
    /// identity.
    fn film(&self, tape: &Tape, bound: &Bound, y: Var, t_embed: Var, name: &str) -> Var {
        let gb = bound.linear(tape, t_embed, name);
        let w = self.config.width;
        let scale = tape.add_scalar(tape.slice_last(gb, 0, w), 1.0);
        let shift = tape.slice_last(gb, w, 2 * w);
        tape.add_vec(tape.mul_vec(y, scale), shift)
    }

    /// One transformer layer; returns the updated stream and the
    /// cross-attention map used.
    pub fn transformer_layer(
        &self,
        tape: &Tape,
        bound: &Bound,
        z: Var,
        t_embed: Var,
        text_tokens: Var,
        layer: usize,
        hook: &mut Option<&mut AttnHook>,
    ) -> Result<(Var, ArrayD<f64>)> {
        let film = |t: &Tape, y: Var, sb: &str| {
            self.film(t, bound, y, t_embed, &format!("l{layer}.{sb}.film"))
        };
        // TempAttn: frames attend within each joint.
        let y = tape.layernorm_last(z, 1e-5);
        let yt = tape.permute(y, &[1, 0, 2]);
        let at = self.self_attention(tape, bound, yt, &format!("l{layer}.temp"));
        let z = tape.add(z, film(tape, tape.permute(at, &[1, 0, 2]), "temp"));
        // SkelAttn: joints attend within each frame.
        let y = tape.layernorm_last(z, 1e-5);
        let aj = self.self_attention(tape, bound, y, &format!("l{layer}.skel"));
        let z = tape.add(z, film(tape, aj, "skel"));
        // CrossAttn against the text tokens.
        let y = tape.layernorm_last(z, 1e-5);
        let (ac, map) = self.cross_attention(tape, bound, y, text_tokens, layer, hook)?;
        let z = tape.add(z, film(tape, ac, "cross"));
        // FFN.
        let y = tape.layernorm_last(z, 1e-5);
        let h = tape.gelu(bound.linear(tape, y, &format!("l{layer}.ffn.0")));
        let f = bound.linear(tape, h, &format!("l{layer}.ffn.1"));
        let z = tape.add(z, film(tape, f, "ffn"));
        Ok((z, map))
    }

    /// Full denoiser pass on the tape: predicts the velocity for `z_t` and
    /// returns the per-layer cross-attention maps that were used.
    pub fn forward_t(
        &self,
        tape: &Tape,
        bound: &Bound,
        z_t: Var,
        t: usize,
        text: &TextEmbedding,
        schedule_steps: usize,
        mut hook: Option<&mut AttnHook>,
    ) -> Result<(Var, Vec<ArrayD<f64>>)> {
        if t == 0 || t > schedule_steps {
            return Err(Error::Schedule(format!("timestep {t} outside [1, {schedule_steps}]")));
        }
        if text.tokens.nrows() == 0 {
            return Err(Error::Text("empty token sequence".into()));
        }
        if text.tokens.ncols() != self.config.text_dim {
            return Err(Error::Shape(format!(
                "text width {} != configured {}",
                text.tokens.ncols(),
                self.config.text_dim
            )));
        }
        let shape = tape.shape(z_t);
        if shape.len() != 3 || shape[2] != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent shape {shape:?}, expected [N', J', {}]",
                self.config.latent_dim
            )));
        }
        let (n, j, w) = (shape[0], shape[1], self.config.width);
        let text_tokens = tape.constant(text.tokens.clone().into_dyn());
        let t_sin = tape.constant(sinusoid(t as f64, w).into_dyn());
        let t_embed = bound.linear(
            tape,
            tape.gelu(bound.linear(tape, t_sin, "tmlp.0")),
            "tmlp.1",
        );
        let h0 = bound.linear(tape, tape.gelu(bound.linear(tape, z_t, "in.0")), "in.1");
        let pos = tape.constant(positional_embedding(n, j, w));
        let mut z = tape.add(h0, pos);
        let half = self.config.layers / 2;
        let mut saved = Vec::with_capacity(half);
        let mut maps = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            if l >= half {
                let partner = saved[self.config.layers - 1 - l];
                let cat = tape.concat_last(z, partner);
                z = bound.linear(tape, cat, &format!("l{l}.skip"));
            } else {
                saved.push(z);
            }
            let (zn, map) = self.transformer_layer(tape, bound, z, t_embed, text_tokens, l, &mut hook)?;
            z = zn;
            maps.push(map);
        }
        let v = bound.linear(tape, tape.gelu(bound.linear(tape, z, "out.0")), "out.1");
        Ok((v, maps))
    }

    /// Inference-only forward pass on plain arrays.
    pub fn forward(
        &self,
        z_t: &ArrayD<f64>,
        t: usize,
        text: &TextEmbedding,
        schedule_steps: usize,
        hook: Option<&mut AttnHook>,
    ) -> Result<(ArrayD<f64>, Vec<ArrayD<f64>>)> {
        let tape = Tape::no_grad();
        let bound = Bound::new(&self.params);
        let z = tape.constant(z_t.clone());
        let (v, maps) = self.forward_t(&tape, &bound, z, t, text, schedule_steps, hook)?;
        Ok(((*tape.value(v)).clone(), maps))
    }
}

/// Interleaved sin/cos embedding of a scalar position: index `2i` is
/// `sin(p w_i)`, `2i+1` is `cos(p w_i)` with `w_i = 10000^(-2i/d)`.
pub fn sinusoid(pos: f64, dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

/// Sinusoidal table over the `N' * J'` flattened positions (frame-major),
/// reshaped to `N' x J' x D`.
pub fn positional_embedding(n: usize, j: usize, dim: usize) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[n, j, dim]));
    for f in 0..n {
        for q in 0..j {
            let pe = sinusoid((f * j + q) as f64, dim);
            for d in 0..dim {
                out[[f, q, d]] = pe[d];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserTrainConfig {
    pub model: DenoiserConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Training window length in frames (multiple of 4).
    pub window: usize,
    pub lr: LrSchedule,
    pub adamw: AdamWConfig,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            model: DenoiserConfig::default(),
            steps: 1000,
            batch_size: 4,
            window: 48,
            lr: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            guidance: GuidanceConfig::default(),
            seed: 0,
            parallel: true,
        }
    }
}

/// Trains the denoiser on posterior-mean latents from a frozen VAE.
/// `clips` pairs each motion with its already-encoded text embedding;
/// `null_text` is the embedding of the empty prompt. `progress` sees every
/// step's batch-mean velocity MSE.
pub fn train_denoiser(
    clips: &[(MotionSequence, TextEmbedding)],
    vae: &Vae,
    null_text: &TextEmbedding,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Denoiser, Vec<f64>)> {
    if clips.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    if cfg.window == 0 || cfg.window % TEMPORAL_FACTOR != 0 {
        return Err(Error::Config(format!(
            "window {} must be a positive multiple of {TEMPORAL_FACTOR}",
            cfg.window
        )));
    }
    cfg.guidance.validate()?;
    // Frozen VAE: encode every clip once to its posterior mean.
    let latents: Vec<(ArrayD<f64>, &TextEmbedding)> = clips
        .iter()
        .map(|(m, e)| Ok((vae.encode(&m.fit_to_window(cfg.window), None)?.mu, e)))
        .collect::<Result<_>>()?;
    let denoiser = Denoiser::new(cfg.model.clone());
    let mut denoiser = denoiser;
    let mut opt = AdamW::new(cfg.adamw.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Per-sample randomness drawn sequentially for determinism.
        struct Sample<'a> {
            idx: usize,
            t: usize,
            eps: ArrayD<f64>,
            text: &'a TextEmbedding,
        }
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|i| {
                let idx = (step * cfg.batch_size + i) % latents.len();
                let t = rng.gen_range(1..=schedule.steps);
                let eps = ArrayD::from_shape_fn(latents[idx].0.raw_dim(), |_| {
                    StandardNormal.sample(&mut rng)
                });
                let drop: f64 = rng.gen();
                let text = if drop < cfg.guidance.p_uncond { null_text } else { latents[idx].1 };
                Sample { idx, t, eps, text }
            })
            .collect();
        let results = crate::par::indexed_map(cfg.batch_size, cfg.parallel, |i| {
            let s = &batch[i];
            let x = &latents[s.idx].0;
            let z_t = schedule.q_sample(x, &s.eps, s.t)?;
            let v_target = schedule.velocity(x, &s.eps, s.t)?;
            let tape = Tape::new();
            let bound = Bound::new(&denoiser.params);
            let (v_hat, _) = denoiser.forward_t(
                &tape,
                &bound,
                tape.constant(z_t),
                s.t,
                s.text,
                schedule.steps,
                None,
            )?;
            let d = tape.sub(v_hat, tape.constant(v_target));
            let loss = tape.mean_all(tape.mul(d, d));
            let grads = tape.backward(loss);
            let lv = *tape.value(loss).first().unwrap();
            Ok::<_, Error>((lv, bound.collect_grads(&grads)))
        });
        let mut loss_sum = 0.0;
        let mut grad_maps = Vec::with_capacity(cfg.batch_size);
        for r in results {
            let (lv, g) = r?;
            loss_sum += lv;
            grad_maps.push(g);
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let mut grads = sum_grads(grad_maps);
        let inv_b = 1.0 / cfg.batch_size as f64;
        for g in grads.values_mut() {
            *g *= inv_b;
        }
        opt.step(&mut denoiser.params, &grads, cfg.lr.lr(step + 1));
        progress(step, loss);
        history.push(loss);
    }
    Ok((denoiser, history))
}

/// Deterministic text-to-motion sampling: seed-driven Gaussian start, DDIM
/// with classifier-free guidance, and attention capture from the conditional
/// passes.
pub fn generate(
    denoiser: &Denoiser,
    vae: &Vae,
    text: &TextEmbedding,
    null_text: &TextEmbedding,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    n_frames: usize,
    fps: f64,
    n_ddim_steps: usize,
    seed: u64,
) -> Result<(MotionSequence, AttentionRecord)> {
    if n_frames == 0 || n_frames % TEMPORAL_FACTOR != 0 {
        return Err(Error::Shape(format!(
            "frame count {n_frames} not a positive multiple of {TEMPORAL_FACTOR}"
        )));
    }
    guidance.validate()?;
    let shape = [n_frames / TEMPORAL_FACTOR, vae.latent_joints(), vae.config.latent_dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z =
        ArrayD::from_shape_fn(IxDyn(&shape), |_| StandardNormal.sample(&mut rng));
    let ts = ddim_timesteps(schedule.steps, n_ddim_steps)?;
    let mut record = AttentionRecord { steps: Vec::new(), tokens: text.token_strings.clone() };
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let (v_uncond, _) = denoiser.forward(&z, t, null_text, schedule.steps, None)?;
        let (v_cond, maps) = denoiser.forward(&z, t, text, schedule.steps, None)?;
        record.steps.push(StepMaps { t, layers: maps });
        let v_hat = cfg_combine(&v_uncond, &v_cond, guidance.w)?;
        z = schedule.ddim_step(&z, &v_hat, t, t_prev)?;
    }
    let motion = vae.decode(&z, fps)?;
    Ok((motion, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::generate_synthetic_corpus;
    use crate::skeleton::default_skeleton;
    use crate::text::{StubEncoder, TextEncoder};
    use crate::vae::{Vae, VaeConfig};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            heads: 2,
            width: 16,
            ffn_hidden: 32,
            latent_dim: 8,
            text_dim: 64,
            seed: 1,
        }
    }

    fn stub_text(s: &str) -> TextEmbedding {
        StubEncoder::default().encode(s).unwrap()
    }

    #[test]
    fn positional_embedding_properties() {
        let pe = positional_embedding(3, 4, 16);
        assert_eq!(pe.shape(), &[3, 4, 16]);
        // position 0 is the (0, 1, 0, 1, ...) phase pattern
        for i in 0..8 {
            assert_eq!(pe[[0, 0, 2 * i]], 0.0);
            assert_eq!(pe[[0, 0, 2 * i + 1]], 1.0);
        }
        // all flattened positions pairwise distinct
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for f in 0..3 {
            for q in 0..4 {
                let row: Vec<u64> =
                    (0..16).map(|d| pe[[f, q, d]].to_bits()).collect();
                assert!(!rows.contains(&row), "duplicate position embedding");
                rows.push(row);
            }
        }
        // deterministic
        assert_eq!(pe, positional_embedding(3, 4, 16));
    }

    #[test]
    fn forward_shapes_and_map_count() {
        let d = Denoiser::new(tiny_config());
        let text = stub_text("a person walks forward");
        let z = ArrayD::zeros(IxDyn(&[4, 3, 8]));
        let (v, maps) = d.forward(&z, 500, &text, 1000, None).unwrap();
        assert_eq!(v.shape(), z.shape());
        assert_eq!(maps.len(), 2);
        let k = text.tokens.nrows();
        assert_eq!(maps[0].shape(), &[2, 3, 4, k]);
        assert!(d.forward(&z, 0, &text, 1000, None).is_err());
        assert!(d.forward(&z, 1001, &text, 1000, None).is_err());
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let d = Denoiser::new(tiny_config());
        let text = stub_text("jump high then wave");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = ArrayD::from_shape_fn(IxDyn(&[4, 3, 8]), |_| rng.gen_range(-1.0..1.0));
        let (_, maps) = d.forward(&z, 321, &text, 1000, None).unwrap();
        for m in &maps {
            assert!(m.iter().all(|&v| v >= 0.0));
            let k = m.shape()[3];
            for h in 0..m.shape()[0] {
                for j in 0..m.shape()[1] {
                    for f in 0..m.shape()[2] {
                        let s: f64 = (0..k).map(|q| m[[h, j, f, q]]).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_hook_is_bit_exact() {
        let d = Denoiser::new(tiny_config());
        let text = stub_text("wave the left arm");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = ArrayD::from_shape_fn(IxDyn(&[2, 3, 8]), |_| rng.gen_range(-1.0..1.0));
        let (v_plain, maps_plain) = d.forward(&z, 77, &text, 1000, None).unwrap();
        let mut hook = |_l: usize, m: &ArrayD<f64>| Some(m.clone());
        let (v_hooked, maps_hooked) =
            d.forward(&z, 77, &text, 1000, Some(&mut hook)).unwrap();
        assert_eq!(v_plain, v_hooked);
        assert_eq!(maps_plain, maps_hooked);
        // wrong-shaped hook output is rejected
        let mut bad = |_l: usize, _m: &ArrayD<f64>| Some(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        assert!(d.forward(&z, 77, &text, 1000, Some(&mut bad)).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_layers_identity() {
        let mut d = Denoiser::new(tiny_config());
        for l in 0..d.config.layers {
            for name in ["temp.o", "skel.o", "cross.o", "ffn.1"] {
                d.params.get_mut(&format!("l{l}.{name}.w")).fill(0.0);
                d.params.get_mut(&format!("l{l}.{name}.b")).fill(0.0);
            }
        }
        let text = stub_text("still");
        let tape = Tape::no_grad();
        let bound = Bound::new(&d.params);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = ArrayD::from_shape_fn(IxDyn(&[2, 3, 16]), |_| rng.gen_range(-1.0..1.0));
        let z = tape.constant(z0.clone());
        let t_embed = tape.constant(sinusoid(5.0, 16).into_dyn());
        let toks = tape.constant(text.tokens.clone().into_dyn());
        let mut no_hook: Option<&mut AttnHook> = None;
        let (out, _) = d
            .transformer_layer(&tape, &bound, z, t_embed, toks, 0, &mut no_hook)
            .unwrap();
        let diff = (&*tape.value(out) - &z0).mapv(f64::abs);
        assert!(diff.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn bounded_output_at_init() {
        let d = Denoiser::new(tiny_config());
        let text = stub_text("spin");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = ArrayD::from_shape_fn(IxDyn(&[4, 3, 8]), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let (v, _) = d.forward(&z, 900, &text, 1000, None).unwrap();
        let var = v.mapv(|x| x * x).mean().unwrap();
        assert!(var.is_finite() && var < 100.0, "variance {var}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (topology, plan) = default_skeleton();
        let corpus = generate_synthetic_corpus(3, 2, &topology, false);
        let enc = StubEncoder::default();
        let vae = Vae::new(
            topology.clone(),
            plan.clone(),
            VaeConfig { latent_dim: 8, blocks_per_stage: 1, seed: 5, ..VaeConfig::default() },
        );
        let clips: Vec<(MotionSequence, TextEmbedding)> = corpus
            .iter()
            .map(|c| (c.motion.clone(), enc.encode(&c.caption_text).unwrap()))
            .collect();
        let null = enc.encode("").unwrap();
        let schedule = NoiseSchedule::default_schedule();
        let cfg = DenoiserTrainConfig {
            model: tiny_config(),
            steps: 40,
            batch_size: 1,
            window: 16,
            lr: LrSchedule { base_lr: 2e-3, warmup_steps: 5, milestones: vec![], decay: 0.1 },
            adamw: AdamWConfig::default(),
            guidance: GuidanceConfig::default(),
            seed: 13,
            parallel: false,
        };
        // Fixed (t, eps, text) probe: the per-step history is noisy because t
        // is resampled, so compare a deterministic loss before and after.
        let probe_loss = |d: &Denoiser| {
            let (m, e) = &clips[0];
            let x = vae.encode(&m.fit_to_window(16), None).unwrap().mu;
            let mut prng = ChaCha8Rng::seed_from_u64(99);
            let eps = ArrayD::from_shape_fn(x.raw_dim(), |_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut prng)
            });
            let t = 500;
            let z_t = schedule.q_sample(&x, &eps, t).unwrap();
            let v_target = schedule.velocity(&x, &eps, t).unwrap();
            let (v_hat, _) = d.forward(&z_t, t, e, schedule.steps, None).unwrap();
            (&v_hat - &v_target).mapv(|d| d * d).mean().unwrap()
        };
        let before = probe_loss(&Denoiser::new(cfg.model.clone()));
        let (trained, h1) =
            train_denoiser(&clips, &vae, &null, &schedule, &cfg, |_, _| {}).unwrap();
        let after = probe_loss(&trained);
        assert!(after < before, "before {before} after {after}");
        let (_, h2) = train_denoiser(&clips, &vae, &null, &schedule, &cfg, |_, _| {}).unwrap();
        assert_eq!(h1[20], h2[20]);
    }

    #[test]
    fn generation_is_deterministic_and_cfg_w0_ignores_text() {
        let (topology, plan) = default_skeleton();
        let vae = Vae::new(
            topology,
            plan,
            VaeConfig { latent_dim: 8, blocks_per_stage: 1, seed: 5, ..VaeConfig::default() },
        );
        let d = Denoiser::new(tiny_config());
        let enc = StubEncoder::default();
        let text = enc.encode("walk forward").unwrap();
        let other = enc.encode("jump in place").unwrap();
        let null = enc.encode("").unwrap();
        let schedule = NoiseSchedule::default_schedule();
        let g = GuidanceConfig::default();
        let (m1, rec) =
            generate(&d, &vae, &text, &null, &schedule, &g, 8, 20.0, 5, 42).unwrap();
        let (m2, _) = generate(&d, &vae, &text, &null, &schedule, &g, 8, 20.0, 5, 42).unwrap();
        assert_eq!(m1.blocks, m2.blocks);
        assert_eq!(rec.steps.len(), 5);
        assert!(rec.steps.iter().all(|s| s.layers.len() == 2));

        let g0 = GuidanceConfig { w: 0.0, p_uncond: 0.1 };
        let (a, _) = generate(&d, &vae, &text, &null, &schedule, &g0, 8, 20.0, 5, 7).unwrap();
        let (b, _) = generate(&d, &vae, &other, &null, &schedule, &g0, 8, 20.0, 5, 7).unwrap();
        assert_eq!(a.blocks, b.blocks);

        assert!(generate(&d, &vae, &text, &null, &schedule, &g, 9, 20.0, 5, 7).is_err());
    }
}
