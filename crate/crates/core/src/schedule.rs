//! The sqrt noise schedule, its closed-form posterior coefficients, and step respacing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHA_BAR_FLOOR: f64 = 1e-5;
pub const BETA_CAP: f64 = 0.999;
pub const DEFAULT_STEPS: usize = 2000;
pub const DEFAULT_OFFSET: f64 = 1e-4;

/// Parameters that fully determine a sqrt schedule. Stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub offset: f64,
    pub floor: f64,
    pub beta_cap: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: DEFAULT_STEPS,
            offset: DEFAULT_OFFSET,
            floor: ALPHA_BAR_FLOOR,
            beta_cap: BETA_CAP,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.offset, self.floor, self.beta_cap)
    }
}

/// Precomputed per-step quantities, indexed by `t = 0..=steps`.
///
/// Index 0 carries the anchor `ᾱ_0` of the embedding transition; `beta[0] = 1 − ᾱ_0` is its
/// variance. `timesteps[k]` is the step index of the trained schedule that position `k`
/// corresponds to (the identity unless the schedule was respaced).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    timesteps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_zt: f64,
    pub coef_z0: f64,
    pub variance: f64,
}

/// Builds `ᾱ_t = 1 − √(t/T + s)` clamped to the default floor and beta cap.
pub fn build_sqrt_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    build_schedule(steps, offset, ALPHA_BAR_FLOOR, BETA_CAP)
}

fn build_schedule(steps: usize, offset: f64, floor: f64, beta_cap: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion steps must be >= 2, got {steps}")));
    }
    if !(offset > 0.0 && offset < 0.01) {
        return Err(Error::Config(format!("schedule offset must be in (0, 0.01), got {offset}")));
    }
    if !(floor > 0.0 && floor < 1.0) || !(beta_cap > 0.0 && beta_cap < 1.0) {
        return Err(Error::Config("schedule floor and beta cap must lie in (0, 1)".into()));
    }
    let raw: Vec<f64> = (0..=steps)
        .map(|t| (1.0 - (t as f64 / steps as f64 + offset).sqrt()).max(floor))
        .collect();
    NoiseSchedule::from_alpha_bar_capped(raw, beta_cap)
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit `ᾱ_0..ᾱ_T` table.
    ///
    /// Entries must be in `(0, 1]` and strictly decreasing.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        Self::from_alpha_bar_capped(alpha_bar, 1.0)
    }

    fn from_alpha_bar_capped(mut alpha_bar: Vec<f64>, beta_cap: f64) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::Config("schedule needs at least two steps".into()));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("alpha_bar entries must lie in (0, 1]".into()));
        }
        let steps = alpha_bar.len() - 1;
        let mut beta = vec![0.0; steps + 1];
        beta[0] = 1.0 - alpha_bar[0];
        for t in 1..=steps {
            let b = 1.0 - alpha_bar[t] / alpha_bar[t - 1];
            if b <= 0.0 {
                return Err(Error::Config(format!("alpha_bar not strictly decreasing at t={t}")));
            }
            if b > beta_cap {
                // keep the chain ᾱ_t = α_t·ᾱ_{t−1} exact when the cap binds
                beta[t] = beta_cap;
                alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta_cap);
            } else {
                beta[t] = b;
            }
        }
        let alpha = beta.iter().map(|b| 1.0 - b).collect();
        Ok(NoiseSchedule {
            steps,
            alpha_bar,
            beta,
            alpha,
            timesteps: (0..=steps).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Variance of the embedding transition `q(z_0 | w)`.
    pub fn beta0(&self) -> f64 {
        self.beta[0]
    }

    /// Model timestep that schedule position `t` corresponds to.
    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t]
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Coefficients of the Gaussian posterior `q(z_{t−1} | z_t, z_0)`.
    ///
    /// Panics if `t` is outside `1..=steps`.
    pub fn posterior(&self, t: usize) -> PosteriorCoeffs {
        assert!(
            (1..=self.steps).contains(&t),
            "posterior step {t} outside 1..={}",
            self.steps
        );
        let ab_t = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let denom = 1.0 - ab_t;
        PosteriorCoeffs {
            coef_zt: self.alpha[t].sqrt() * (1.0 - ab_prev) / denom,
            coef_z0: ab_prev.sqrt() * self.beta[t] / denom,
            variance: self.beta[t] * (1.0 - ab_prev) / denom,
        }
    }

    /// Keeps `k` evenly spaced steps ending at the final one.
    pub fn respace(&self, k: usize) -> Result<NoiseSchedule> {
        if k < 2 || k > self.steps {
            return Err(Error::Config(format!(
                "respaced step count must be in 2..={}, got {k}",
                self.steps
            )));
        }
        let idx: Vec<usize> = std::iter::once(0)
            .chain((1..=k).map(|i| ((i as f64) * self.steps as f64 / k as f64).round() as usize))
            .collect();
        let alpha_bar = idx.iter().map(|&i| self.alpha_bar[i]).collect();
        let mut out = NoiseSchedule::from_alpha_bar(alpha_bar)?;
        out.timesteps = idx.iter().map(|&i| self.timesteps[i]).collect();
        Ok(out)
    }
}
