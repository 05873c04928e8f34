//! Cumulative noise schedules.
//!
//! A schedule stores the cumulative signal retention `alpha_bar[t]` for
//! `t = 0..=steps`, with `alpha_bar[0] = 1` (clean data) and a terminal
//! value close to zero (pure noise). The forward process perturbs a clean
//! grid `x0` to `x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * z`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest admissible terminal `alpha_bar`: by the last step almost all
/// signal must be gone or the sampler would start from a poor noise prior.
const MAX_TERMINAL_ALPHA_BAR: f64 = 0.05;
/// Per-step retention floor, i.e. the classic cap `beta <= 0.999`.
const MAX_BETA: f64 = 0.999;
/// Offset in the cosine schedule that keeps the first steps well-behaved.
const COSINE_OFFSET: f64 = 0.008;
/// Step count the canonical linear beta range [1e-4, 0.02] is defined for;
/// other step counts rescale the betas to preserve the total noise budget.
const LINEAR_REFERENCE_STEPS: f64 = 1000.0;

/// Available schedule shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Cosine => write!(f, "cosine"),
            ScheduleKind::Linear => write!(f, "linear"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::param(format!(
                "unknown schedule kind '{other}' (expected cosine or linear)"
            ))),
        }
    }
}

/// Cumulative retention values `alpha_bar[0..=steps]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Validates and wraps a raw `alpha_bar` sequence.
    ///
    /// Requirements: at least one step, `alpha_bar[0] == 1`, strictly
    /// decreasing, every value in `(0, 1]`, and a terminal value below 0.05.
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::param(
                "schedule needs at least one step (two alpha_bar entries)",
            ));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::param(format!(
                "alpha_bar[0] must be 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            if !pair[1].is_finite() || pair[1] <= 0.0 || pair[1] >= pair[0] {
                return Err(Error::param(format!(
                    "alpha_bar must be strictly decreasing within (0, 1]; \
                     alpha_bar[{}] = {}, alpha_bar[{}] = {}",
                    t,
                    pair[0],
                    t + 1,
                    pair[1]
                )));
            }
        }
        let terminal = *alpha_bar.last().expect("non-empty by construction");
        if terminal >= MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::param(format!(
                "terminal alpha_bar {terminal} leaves too much signal \
                 (must be below {MAX_TERMINAL_ALPHA_BAR})"
            )));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `alpha_bar[t]` for `t in 0..=steps`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::param(format!("timestep {t} out of range 0..={}", self.steps())))
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Builds a schedule of the given kind over `steps` steps.
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("schedule needs at least one step"));
    }
    let betas = match kind {
        ScheduleKind::Cosine => cosine_betas(steps),
        ScheduleKind::Linear => linear_betas(steps),
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for beta in betas {
        let prev = *alpha_bar.last().expect("seeded with 1.0");
        alpha_bar.push(prev * (1.0 - beta));
    }
    NoiseSchedule::new(alpha_bar)
}

/// Squared-cosine retention curve, expressed as per-step betas with the
/// usual cap so the terminal retention stays positive.
fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0).cos().powi(2);
    let f0 = f(0.0);
    let curve = |t: usize| f(t as f64 / steps as f64) / f0;
    (1..=steps)
        .map(|t| (1.0 - curve(t) / curve(t.saturating_sub(1)).min(1.0)).clamp(0.0, MAX_BETA))
        .collect()
}

/// Linearly spaced betas over the canonical [1e-4, 0.02] range, rescaled
/// from the 1000-step convention to `steps` so the cumulative product lands
/// in the same place, then capped per step.
fn linear_betas(steps: usize) -> Vec<f64> {
    let (lo, hi) = (1e-4, 0.02);
    let scale = LINEAR_REFERENCE_STEPS / steps as f64;
    (1..=steps)
        .map(|t| {
            let frac = if steps == 1 {
                0.5
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            ((lo + (hi - lo) * frac) * scale).min(MAX_BETA)
        })
        .collect()
}
