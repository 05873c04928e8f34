//! Noise predictors and conditioning.
//!
//! Two predictor families implement [`NoisePredictor`]:
//!
//! * [`GaussianMixtureModel`] — an analytic predictor whose noise estimate
//!   is the exact score of a Gaussian mixture diffused to timestep `t`.
//!   Because everything about it is closed-form, it serves as ground truth
//!   for the guidance algebra.
//! * [`MlpDenoiser`] — a small trainable network, the stand-in for a real
//!   denoiser. It exists so the personalization workflow (train a base
//!   model, fine-tune it on a handful of subject grids) can be exercised
//!   end to end.
//!
//! A [`Condition`] selects what the predictor is asked to denoise toward:
//! nothing, a label ("prompt"), or a label plus a named subject (the toy
//! analogue of a personalized token inside a prompt).

mod gmm;
mod io;
mod mlp;

pub use gmm::{GaussianMixtureModel, MixtureComponent};
pub use io::Model;
pub use mlp::{
    denoising_loss, finetune_subject, train_denoiser, FinetuneConfig, MlpConfig, MlpDenoiser,
    TrainConfig,
};

use std::fmt;

use crate::error::Result;
use crate::grid::{GridShape, LatentGrid};
use crate::sampler::NoiseSchedule;

/// What a prediction is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    /// No conditioning: the model's full data distribution.
    Unconditional,
    /// A label id registered with the model.
    Prompt(u32),
    /// A label plus a named subject. Models that know the subject narrow
    /// their prediction to it; models that do not (the base model) fall
    /// back to the plain label, mirroring how a raw placeholder token reads
    /// to a model that was never taught it.
    SubjectPrompt { label: u32, subject: u32 },
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Unconditional => write!(f, "unconditional"),
            Condition::Prompt(label) => write!(f, "prompt({label})"),
            Condition::SubjectPrompt { label, subject } => {
                write!(f, "subject_prompt({label}, {subject})")
            }
        }
    }
}

/// A conditional noise predictor over latent grids.
pub trait NoisePredictor {
    /// The grid shape this predictor operates on.
    fn shape(&self) -> GridShape;

    /// Predicts the noise in `x_t` at timestep `t` under `cond`.
    ///
    /// `t` indexes into `schedule`; implementations reject out-of-range
    /// timesteps, mismatched shapes, and conditions they do not know.
    fn epsilon(
        &self,
        x_t: &LatentGrid,
        t: usize,
        cond: &Condition,
        schedule: &NoiseSchedule,
    ) -> Result<LatentGrid>;
}
