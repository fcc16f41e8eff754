//! Zero-shot text-driven editing: paired source/target denoising trajectories
//! with shared initial noise, where the target pass's cross-attention maps are
//! replaced by modulated versions of the captured source/target maps.
//!
//! Maps are shaped `heads x J' x N' x K`: axis 1 is the skeletal index `i`,
//! axis 2 the temporal index `j`, axis 3 the token index `k`.

use crate::denoiser::{generate, AttentionRecord, Denoiser, StepMaps};
use crate::motion::MotionSequence;
use crate::schedule::{cfg_combine, ddim_timesteps, GuidanceConfig, NoiseSchedule};
use crate::skeleton::CounterpartMap;
use crate::text::TextEmbedding;
use crate::vae::{Vae, TEMPORAL_FACTOR};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Which modulation to apply at every layer and DDIM step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditSpec {
    /// Use the target maps below timestep `tau`, the source maps at or above
    /// it. Requires equal token counts.
    WordSwap { tau: usize },
    /// Per target token `k`: alignment `-1` keeps the target column, any
    /// other value copies source column `alignment[k]`.
    PromptRefine { alignment: Vec<i64> },
    /// Scale token column `k_star` of the source map by `s`; no
    /// renormalization.
    Reweight { k_star: usize, s: f64 },
    /// Permute skeletal rows of the source map by the left/right counterpart
    /// map.
    Mirror,
}

/// Default word-swap switchover: `0.8 T`.
pub fn default_tau(steps: usize) -> usize {
    steps * 8 / 10
}

impl EditSpec {
    pub fn parse_toml(text: &str) -> Result<EditSpec> {
        toml::from_str(text).map_err(|e| Error::EditSpec(format!("edit spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("edit spec serializes")
    }

    /// Checks the spec against the schedule length and both token counts.
    pub fn validate(&self, steps: usize, k_source: usize, k_target: usize) -> Result<()> {
        match self {
            EditSpec::WordSwap { tau } => {
                if *tau > steps {
                    return Err(Error::EditSpec(format!("tau {tau} > T = {steps}")));
                }
                if k_source != k_target {
                    return Err(Error::EditSpec(format!(
                        "word swap needs equal token counts, got {k_source} vs {k_target}"
                    )));
                }
            }
            EditSpec::PromptRefine { alignment } => {
                if alignment.len() != k_target {
                    return Err(Error::EditSpec(format!(
                        "alignment covers {} tokens, target has {k_target}",
                        alignment.len()
                    )));
                }
                for (k, &a) in alignment.iter().enumerate() {
                    if a < -1 || a >= k_source as i64 {
                        return Err(Error::EditSpec(format!(
                            "alignment[{k}] = {a} outside [-1, {})",
                            k_source
                        )));
                    }
                }
            }
            EditSpec::Reweight { k_star, s } => {
                if *k_star >= k_source {
                    return Err(Error::EditSpec(format!(
                        "k_star {k_star} >= source token count {k_source}"
                    )));
                }
                if !s.is_finite() {
                    return Err(Error::EditSpec("non-finite reweight scale".into()));
                }
                if k_source != k_target {
                    return Err(Error::EditSpec(
                        "reweight assumes an unchanged prompt (equal token counts)".into(),
                    ));
                }
            }
            EditSpec::Mirror => {
                if k_source != k_target {
                    return Err(Error::EditSpec(
                        "mirror assumes an unchanged prompt (equal token counts)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn check_same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: map shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `M_hat = M_tgt if t < tau else M_src`.
pub fn edit_word_swap(
    m_src: &ArrayD<f64>,
    m_tgt: &ArrayD<f64>,
    t: usize,
    tau: usize,
) -> Result<ArrayD<f64>> {
    check_same_shape(m_src, m_tgt, "word swap")?;
    Ok(if t < tau { m_tgt.clone() } else { m_src.clone() })
}

/// Per token `k`: keep the target column where `alignment[k] == -1`, else
/// copy source column `alignment[k]`.
pub fn edit_prompt_refine(
    m_src: &ArrayD<f64>,
    m_tgt: &ArrayD<f64>,
    alignment: &[i64],
) -> Result<ArrayD<f64>> {
    if m_src.ndim() != 4 || m_tgt.ndim() != 4 {
        return Err(Error::Shape("prompt refine: maps must be 4-D".into()));
    }
    if m_src.shape()[..3] != m_tgt.shape()[..3] {
        return Err(Error::Shape(format!(
            "prompt refine: query dims differ, {:?} vs {:?}",
            m_src.shape(),
            m_tgt.shape()
        )));
    }
    let k_src = m_src.shape()[3];
    let k_tgt = m_tgt.shape()[3];
    if alignment.len() != k_tgt {
        return Err(Error::EditSpec(format!(
            "alignment covers {} tokens, map has {k_tgt}",
            alignment.len()
        )));
    }
    let mut out = m_tgt.clone();
    for (k, &a) in alignment.iter().enumerate() {
        if a == -1 {
            continue;
        }
        if a < 0 || a as usize >= k_src {
            return Err(Error::EditSpec(format!("alignment[{k}] = {a} out of source range")));
        }
        let src_col = m_src.index_axis(ndarray::Axis(3), a as usize).to_owned();
        out.index_axis_mut(ndarray::Axis(3), k).assign(&src_col);
    }
    Ok(out)
}

/// Scales token column `k_star` by `s`; all other columns are bit-equal.
pub fn edit_reweight(m: &ArrayD<f64>, k_star: usize, s: f64) -> Result<ArrayD<f64>> {
    if m.ndim() != 4 {
        return Err(Error::Shape("reweight: map must be 4-D".into()));
    }
    if k_star >= m.shape()[3] {
        return Err(Error::EditSpec(format!(
            "k_star {k_star} >= token count {}",
            m.shape()[3]
        )));
    }
    let mut out = m.clone();
    out.index_axis_mut(ndarray::Axis(3), k_star).mapv_inplace(|v| v * s);
    Ok(out)
}

/// `M_hat[i, j, k] = M[C(i), j, k]` over the skeletal axis.
pub fn edit_mirror(m: &ArrayD<f64>, counterpart: &CounterpartMap) -> Result<ArrayD<f64>> {
    if m.ndim() != 4 {
        return Err(Error::Shape("mirror: map must be 4-D".into()));
    }
    let j = m.shape()[1];
    if counterpart.mapping.len() != j {
        return Err(Error::Counterpart(format!(
            "counterpart map covers {} joints, map has {j}",
            counterpart.mapping.len()
        )));
    }
    let out = ArrayD::from_shape_fn(IxDyn(m.shape()), |ix| {
        m[[ix[0], counterpart.mapping[ix[1]], ix[2], ix[3]]]
    });
    Ok(out)
}

/// Applies the spec to one layer's captured maps.
fn modulate(
    spec: &EditSpec,
    m_src: &ArrayD<f64>,
    m_tgt: &ArrayD<f64>,
    t: usize,
    counterpart: &CounterpartMap,
) -> Result<ArrayD<f64>> {
    match spec {
        EditSpec::WordSwap { tau } => edit_word_swap(m_src, m_tgt, t, *tau),
        EditSpec::PromptRefine { alignment } => edit_prompt_refine(m_src, m_tgt, alignment),
        EditSpec::Reweight { k_star, s } => edit_reweight(m_src, *k_star, *s),
        EditSpec::Mirror => edit_mirror(m_src, counterpart),
    }
}

/// Paired trajectories plus the captured and modulated attention.
pub struct EditOutcome {
    pub source: MotionSequence,
    pub edited: MotionSequence,
    pub trace: EditTrace,
}

/// Step-aligned attention records: `source.steps[i].layers[l]` is the map the
/// source pass produced where `modulated.steps[i].layers[l]` is what the edit
/// pass consumed. `latent_divergence[i]` is the mean absolute difference
/// between the two latents after step `i`.
pub struct EditTrace {
    pub source: AttentionRecord,
    pub modulated: AttentionRecord,
    pub latent_divergence: Vec<f64>,
}

/// Algorithm: share `z_T` across both trajectories; per DDIM step capture the
/// source maps `M_t` and the plain target maps `M_t*`, compute
/// `M_hat = Edit(M_t, M_t*, t)`, then re-run the target conditional pass with
/// `M_hat` injected (values still derive from the target prompt) before both
/// trajectories take their DDIM step.
#[allow(clippy::too_many_arguments)]
pub fn edit_generate(
    denoiser: &Denoiser,
    vae: &Vae,
    source_text: &TextEmbedding,
    target_text: &TextEmbedding,
    null_text: &TextEmbedding,
    spec: &EditSpec,
    counterpart: &CounterpartMap,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    n_frames: usize,
    fps: f64,
    n_ddim_steps: usize,
    seed: u64,
) -> Result<EditOutcome> {
    if n_frames == 0 || n_frames % TEMPORAL_FACTOR != 0 {
        return Err(Error::Shape(format!(
            "frame count {n_frames} not a positive multiple of {TEMPORAL_FACTOR}"
        )));
    }
    guidance.validate()?;
    spec.validate(schedule.steps, source_text.tokens.nrows(), target_text.tokens.nrows())?;
    let shape = [n_frames / TEMPORAL_FACTOR, vae.latent_joints(), vae.config.latent_dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_init: ArrayD<f64> =
        ArrayD::from_shape_fn(IxDyn(&shape), |_| StandardNormal.sample(&mut rng));
    let mut z_src = z_init.clone();
    let mut z_tgt = z_init;
    let ts = ddim_timesteps(schedule.steps, n_ddim_steps)?;
    let mut trace = EditTrace {
        source: AttentionRecord { steps: Vec::new(), tokens: source_text.token_strings.clone() },
        modulated: AttentionRecord { steps: Vec::new(), tokens: target_text.token_strings.clone() },
        latent_divergence: Vec::with_capacity(ts.len()),
    };
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        // Source pass with capture.
        let (vu_src, _) = denoiser.forward(&z_src, t, null_text, schedule.steps, None)?;
        let (vc_src, m_src) = denoiser.forward(&z_src, t, source_text, schedule.steps, None)?;
        // Plain target pass with capture.
        let (vu_tgt, _) = denoiser.forward(&z_tgt, t, null_text, schedule.steps, None)?;
        let (_, m_tgt) = denoiser.forward(&z_tgt, t, target_text, schedule.steps, None)?;
        // Modulate and replay the target conditional pass.
        let m_hat: Vec<ArrayD<f64>> = m_src
            .iter()
            .zip(&m_tgt)
            .map(|(s, g)| modulate(spec, s, g, t, counterpart))
            .collect::<Result<_>>()?;
        let mut hook = |layer: usize, _m: &ArrayD<f64>| Some(m_hat[layer].clone());
        let (vc_edit, used) =
            denoiser.forward(&z_tgt, t, target_text, schedule.steps, Some(&mut hook))?;
        trace.source.steps.push(StepMaps { t, layers: m_src });
        trace.modulated.steps.push(StepMaps { t, layers: used });
        let v_src = cfg_combine(&vu_src, &vc_src, guidance.w)?;
        let v_tgt = cfg_combine(&vu_tgt, &vc_edit, guidance.w)?;
        z_src = schedule.ddim_step(&z_src, &v_src, t, t_prev)?;
        z_tgt = schedule.ddim_step(&z_tgt, &v_tgt, t, t_prev)?;
        trace
            .latent_divergence
            .push((&z_src - &z_tgt).mapv(f64::abs).mean().unwrap_or(0.0));
    }
    let source = vae.decode(&z_src, fps)?;
    let edited = vae.decode(&z_tgt, fps)?;
    Ok(EditOutcome { source, edited, trace })
}

/// Runs the plain pipeline for the source prompt with the same seed; used to
/// verify that a no-op edit reproduces `generate` exactly.
#[allow(clippy::too_many_arguments)]
pub fn plain_generate(
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
    generate(denoiser, vae, text, null_text, schedule, guidance, n_frames, fps, n_ddim_steps, seed)
}
