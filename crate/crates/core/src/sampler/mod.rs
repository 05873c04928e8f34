//! Deterministic reverse-process sampling.
//!
//! [`sample`] runs the DDIM reverse process from seeded Gaussian noise down
//! to a clean grid, combining the predictions of a base model (and, when
//! present, a personalized model) according to a [`GuidanceMode`]:
//!
//! * `Cfg` — classifier-free guidance from the base model alone.
//! * `Cg` — CFG plus a consistency term toward the personalized model.
//! * `Pr` — CFG plus the parallel-rescaled consistency term.
//!
//! Every step also records guidance diagnostics into a
//! [`SamplerTrace`]. The personalized model is evaluated whenever it is
//! supplied, in *every* mode, so traces of different modes under the same
//! configuration are comparable: the mode decides only how the final noise
//! estimate is combined, never which diagnostics exist. In particular, with
//! a consistency weight of zero all three modes produce bit-identical
//! latents and traces.
//!
//! Randomness is confined to two places: the seeded draw of the initial
//! latent, and — only for `eta > 0` — the per-step DDIM noise injection.
//! Model evaluation never touches the RNG, so runs are reproducible
//! bit-for-bit from the seed alone.

mod schedule;
mod trace;

pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use trace::{SamplerTrace, StepRecord};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::HistogramSpec;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::guidance::{
    cfg_prediction, cg_prediction, consistency_guidance, pr_prediction, text_guidance,
    GuidanceDecomposition, GuidanceScales, RescaleConstants,
};
use crate::models::{Condition, NoisePredictor};

/// How the per-step noise predictions are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuidanceMode {
    /// Classifier-free guidance; uses the base model only.
    Cfg,
    /// Consistency guidance: CFG plus the raw consistency term.
    Cg,
    /// Parallel-rescaled consistency guidance.
    Pr,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 3] = [GuidanceMode::Cfg, GuidanceMode::Cg, GuidanceMode::Pr];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Cg => "cg",
            GuidanceMode::Pr => "pr",
        }
    }

    /// Whether this mode cannot run without a personalized model.
    pub fn needs_personalized(self) -> bool {
        matches!(self, GuidanceMode::Cg | GuidanceMode::Pr)
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfg" => Ok(GuidanceMode::Cfg),
            "cg" => Ok(GuidanceMode::Cg),
            "pr" => Ok(GuidanceMode::Pr),
            other => Err(Error::param(format!(
                "unknown guidance mode '{other}' (expected cfg, cg or pr)"
            ))),
        }
    }
}

/// Everything one sampling run needs besides the models and the condition.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub mode: GuidanceMode,
    pub scales: GuidanceScales,
    pub consts: RescaleConstants,
    /// Number of reverse steps (and schedule length).
    pub steps: usize,
    /// DDIM stochasticity in `[0, 1]`; `0` is the deterministic sampler.
    pub eta: f64,
    /// Seeds the initial latent and any `eta > 0` noise.
    pub seed: u64,
    pub schedule_kind: ScheduleKind,
    /// Binning of the per-step `cp` histograms.
    pub hist: HistogramSpec,
    /// Record the latent after every step (memory-heavy; off by default).
    pub snapshot_latents: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: GuidanceMode::Pr,
            scales: GuidanceScales::default(),
            consts: RescaleConstants::default(),
            steps: 50,
            eta: 0.0,
            seed: 0,
            schedule_kind: ScheduleKind::default(),
            hist: HistogramSpec::default(),
            snapshot_latents: false,
        }
    }
}

impl SamplerConfig {
    /// Validates the configuration against the models that will be used.
    pub fn validate(&self, has_personalized: bool) -> Result<()> {
        self.scales.validate()?;
        self.consts.validate()?;
        self.hist.validate()?;
        if self.steps == 0 {
            return Err(Error::param("sampler needs at least one step"));
        }
        if !self.eta.is_finite() || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if self.mode.needs_personalized() && !has_personalized {
            return Err(Error::MissingPersonalizedModel {
                mode: self.mode.name(),
            });
        }
        if self.mode == GuidanceMode::Pr && self.scales.omega_text == 0.0 {
            return Err(Error::InvalidScales(
                "pr mode requires omega_text > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One DDIM update from `x_t` to `x_{t-1}`.
///
/// With `ab = alpha_bar`, the step first forms the clean estimate
///
/// ```text
/// x0_hat = (x_t - sqrt(1 - ab[t]) * eps) / sqrt(ab[t])
/// ```
///
/// and then re-noises it to level `t - 1`:
///
/// ```text
/// sigma   = eta * sqrt((1 - ab[t-1]) / (1 - ab[t])) * sqrt(1 - ab[t] / ab[t-1])
/// x_{t-1} = sqrt(ab[t-1]) * x0_hat + sqrt(1 - ab[t-1] - sigma^2) * eps + sigma * z
/// ```
///
/// For `eta == 0` (and always at `t == 1`, where `ab[0] = 1`) no noise is
/// drawn and `rng` is untouched. A non-finite result — the arithmetic can
/// overflow when predictions blow up — is reported as a numerical
/// divergence at `t` rather than a panic.
pub fn ddim_step(
    x_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<LatentGrid> {
    if x_t.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            left: x_t.shape(),
            right: eps.shape(),
        });
    }
    if !eta.is_finite() || !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("eta must lie in [0, 1], got {eta}")));
    }
    if t == 0 {
        return Err(Error::param("ddim steps from t to t-1, so t must be >= 1"));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t - 1)?;
    let sqrt_ab_t = ab_t.sqrt();
    let sqrt_ab_prev = ab_prev.sqrt();
    let noise_t = (1.0 - ab_t).sqrt();
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    // Rounding can push the reduced-direction radicand a hair below zero.
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();

    let mut data = Vec::with_capacity(x_t.shape().len());
    for (x, e) in x_t.data().iter().zip(eps.data()) {
        let x0_hat = (x - noise_t * e) / sqrt_ab_t;
        let mut v = sqrt_ab_prev * x0_hat + dir * e;
        if sigma > 0.0 {
            v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        data.push(v);
    }
    LatentGrid::from_vec(x_t.shape(), data).map_err(|_| Error::NumericalDivergence { t })
}

/// Runs the full reverse process and returns the final grid with its trace.
///
/// The initial latent is drawn from a ChaCha stream seeded with
/// `config.seed`, so two runs differing only in guidance mode start from
/// the same noise. The personalized model, when supplied, must share the
/// base model's grid shape and is evaluated every step regardless of mode;
/// per-location diagnostics are recorded whenever it is present and
/// `omega_text > 0`, and are zero (with the histogram mass in the zero bin)
/// otherwise.
pub fn sample(
    config: &SamplerConfig,
    base: &dyn NoisePredictor,
    personalized: Option<&dyn NoisePredictor>,
    cond: &Condition,
) -> Result<(LatentGrid, SamplerTrace)> {
    config.validate(personalized.is_some())?;
    let shape = base.shape();
    if let Some(p) = personalized {
        if p.shape() != shape {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: p.shape(),
            });
        }
    }
    let schedule = make_schedule(config.steps, config.schedule_kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = LatentGrid::standard_normal(shape, &mut rng);
    let mut records = Vec::with_capacity(config.steps);

    for t in (1..=config.steps).rev() {
        let eps_cond = base.epsilon(&x, t, cond, &schedule)?;
        let eps_uncond = base.epsilon(&x, t, &Condition::Unconditional, &schedule)?;
        let eps_pers = match personalized {
            Some(model) => Some(model.epsilon(&x, t, cond, &schedule)?),
            None => None,
        };

        let text = text_guidance(&eps_cond, &eps_uncond)?;
        let decomp = match &eps_pers {
            Some(eps_p) if config.scales.omega_text > 0.0 => {
                let consistency = consistency_guidance(eps_p, &eps_cond)?;
                Some(GuidanceDecomposition::new(
                    text.clone(),
                    consistency,
                    &config.scales,
                    &config.consts,
                )?)
            }
            _ => None,
        };

        let eps = match (config.mode, &decomp) {
            (GuidanceMode::Cfg, _) => cfg_prediction(&eps_uncond, &text, &config.scales)?,
            (GuidanceMode::Cg, Some(d)) => {
                cg_prediction(&eps_uncond, &d.text, &d.consistency, &config.scales)?
            }
            (GuidanceMode::Cg, None) => {
                // Personalized model present (validated) but omega_text == 0,
                // so no decomposition was built; combine directly.
                let eps_p = eps_pers
                    .as_ref()
                    .ok_or(Error::MissingPersonalizedModel { mode: "cg" })?;
                let consistency = consistency_guidance(eps_p, &eps_cond)?;
                cg_prediction(&eps_uncond, &text, &consistency, &config.scales)?
            }
            (GuidanceMode::Pr, Some(d)) => {
                pr_prediction(&eps_uncond, d, &config.scales, &config.consts)?
            }
            (GuidanceMode::Pr, None) => {
                // validate() requires a personalized model and omega_text > 0.
                return Err(Error::MissingPersonalizedModel { mode: "pr" });
            }
        };

        let mut record = step_record(t, &text, decomp.as_ref(), &config.hist, shape.locations());
        x = ddim_step(&x, &eps, t, &schedule, config.eta, &mut rng)?;
        if config.snapshot_latents {
            record.latent = Some(x.clone());
        }
        records.push(record);
    }
    Ok((x, SamplerTrace { records }))
}

/// Builds the diagnostics record for one step.
fn step_record(
    t: usize,
    text: &LatentGrid,
    decomp: Option<&GuidanceDecomposition>,
    hist: &HistogramSpec,
    locations: usize,
) -> StepRecord {
    match decomp {
        Some(d) => StepRecord {
            t,
            cp_mean: d.cp_mean,
            cp_std: d.cp_std,
            g_text_norm: d.text.norm(),
            g_par_norm: d.parallel.norm(),
            g_perp_norm: d.orthogonal.norm(),
            hist: hist.count(d.cp.data()),
            latent: None,
        },
        None => {
            // No consistency signal: the cp field is identically zero. Keep
            // the histogram mass so per-step counts always sum to the number
            // of locations.
            let mut counts = vec![0u64; hist.total_bins()];
            counts[hist.bin(0.0)] = locations as u64;
            StepRecord {
                t,
                cp_mean: 0.0,
                cp_std: 0.0,
                g_text_norm: text.norm(),
                g_par_norm: 0.0,
                g_perp_norm: 0.0,
                hist: counts,
                latent: None,
            }
        }
    }
}
