//! Scaled-linear noise schedule, forward noising, v-parametrization algebra,
//! deterministic DDIM stepping, and classifier-free guidance combination.

use crate::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Variance-preserving schedule: `alpha[t] = sqrt(abar_t)`,
/// `sigma[t] = sqrt(1 - abar_t)` with `abar_t = prod_{s<=t}(1 - beta_s)`.
/// Arrays have length `T + 1`; index 0 is the clean-data convention
/// (`beta=0`, `alpha=1`, `sigma=0`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GuidanceConfig {
    /// CFG weight in `v = v_uncond + w (v_cond - v_uncond)`.
    pub w: f64,
    /// Probability of dropping the text condition during training.
    pub p_uncond: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w: 7.5, p_uncond: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w < 0.0 {
            return Err(Error::Schedule(format!("guidance weight {} < 0", self.w)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Schedule(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        Ok(())
    }
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 0.00085;
pub const DEFAULT_BETA_T: f64 = 0.012;
pub const DEFAULT_DDIM_STEPS: usize = 50;

/// Scaled-linear schedule: `beta_t = (sqrt(b1) + (t-1)/(T-1) (sqrt(bT) - sqrt(b1)))^2`.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_1 > 0.0 && beta_1 < beta_t && beta_t < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_1 < beta_T < 1, got {beta_1} and {beta_t}"
        )));
    }
    let (s1, st) = (beta_1.sqrt(), beta_t.sqrt());
    let mut beta = vec![0.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut sigma = vec![0.0; steps + 1];
    let mut abar = 1.0;
    for t in 1..=steps {
        let frac = (t - 1) as f64 / (steps - 1) as f64;
        let b = (s1 + frac * (st - s1)).powi(2);
        abar *= 1.0 - b;
        beta[t] = b;
        alpha[t] = abar.sqrt();
        sigma[t] = (1.0 - abar).sqrt();
    }
    Ok(NoiseSchedule { steps, beta, alpha, sigma })
}

impl NoiseSchedule {
    pub fn default_schedule() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_1, DEFAULT_BETA_T).expect("valid defaults")
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Schedule(format!("timestep {t} > T = {}", self.steps)));
        }
        Ok(())
    }

    /// Forward noising `z_t = alpha_t x + sigma_t eps`.
    pub fn q_sample(&self, x: &ArrayD<f64>, eps: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>> {
        self.check_t(t)?;
        Ok(x * self.alpha[t] + eps * self.sigma[t])
    }

    /// Velocity target `v_t = alpha_t eps - sigma_t x`.
    pub fn velocity(&self, x: &ArrayD<f64>, eps: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>> {
        self.check_t(t)?;
        Ok(eps * self.alpha[t] - x * self.sigma[t])
    }

    /// Inverts the (q_sample, velocity) pair:
    /// `x = alpha_t z - sigma_t v`, `eps = sigma_t z + alpha_t v`.
    pub fn recover(
        &self,
        z: &ArrayD<f64>,
        v: &ArrayD<f64>,
        t: usize,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        self.check_t(t)?;
        let x = z * self.alpha[t] - v * self.sigma[t];
        let eps = z * self.sigma[t] + v * self.alpha[t];
        Ok((x, eps))
    }

    /// Deterministic DDIM step: recover `(x, eps)` from the predicted
    /// velocity at `t`, then re-noise to `t_prev`. `t_prev = 0` returns the
    /// clean estimate.
    pub fn ddim_step(
        &self,
        z: &ArrayD<f64>,
        v_hat: &ArrayD<f64>,
        t: usize,
        t_prev: usize,
    ) -> Result<ArrayD<f64>> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::Schedule(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
        }
        let (x, eps) = self.recover(z, v_hat, t)?;
        self.q_sample(&x, &eps, t_prev)
    }
}

/// `v = v_uncond + w (v_cond - v_uncond)`.
pub fn cfg_combine(v_uncond: &ArrayD<f64>, v_cond: &ArrayD<f64>, w: f64) -> Result<ArrayD<f64>> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(Error::Shape(format!(
            "cfg_combine shapes differ: {:?} vs {:?}",
            v_uncond.shape(),
            v_cond.shape()
        )));
    }
    // The endpoints return their operand bit-exactly; the interpolated form
    // would reintroduce rounding there.
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    Ok(v_uncond + &((v_cond - v_uncond) * w))
}

/// Uniformly strided descending timesteps `[T, T - s, ..., s]` with
/// `s = T / n_steps`; the sampler's final hop goes from the last entry to 0.
pub fn ddim_timesteps(steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > steps {
        return Err(Error::Schedule(format!("n_steps {n_steps} outside [1, {steps}]")));
    }
    let stride = steps / n_steps;
    Ok((0..n_steps).map(|k| steps - k * stride).collect())
}
