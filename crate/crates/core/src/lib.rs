//! A desk-scale laboratory for guided diffusion sampling.
//!
//! The crate samples latent grids with a DDIM reverse process whose noise
//! prediction is assembled from up to three model evaluations per step: a
//! base model's conditional and unconditional predictions, and — when a
//! personalized model is available — its conditional prediction. Three
//! combination rules are implemented (see [`guidance`]): classifier-free
//! guidance, consistency guidance, and parallel-rescaled consistency
//! guidance, which standardizes the per-location strength of the
//! consistency term along the text-guidance direction before applying it.
//!
//! Everything is built to be *checkable*. The workhorse predictor is an
//! analytic Gaussian mixture whose exact noise estimate is available in
//! closed form, so guidance identities can be asserted to tight tolerances;
//! a small trainable MLP denoiser covers the train/fine-tune workflow; and
//! every sampling run is reproducible bit-for-bit from its seed. Per-step
//! diagnostics stream into traces ([`sampler::SamplerTrace`]) that
//! aggregate into CSV tables and histogram images ([`diagnostics`]).

pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod models;
pub mod sampler;

pub use diagnostics::{
    identity_score, prompt_alignment_score, render_histogram_image, ConsistencyStats,
    HistogramSpec, StatsRow,
};
pub use error::{Error, Result};
pub use grid::{field_mean_std, GridShape, LatentGrid, ScalarField};
pub use guidance::{GuidanceDecomposition, GuidanceScales, RescaleConstants};
pub use models::{
    denoising_loss, finetune_subject, train_denoiser, Condition, FinetuneConfig,
    GaussianMixtureModel, MixtureComponent, MlpConfig, MlpDenoiser, Model, NoisePredictor,
    TrainConfig,
};
pub use sampler::{
    ddim_step, make_schedule, sample, GuidanceMode, NoiseSchedule, SamplerConfig, SamplerTrace,
    ScheduleKind, StepRecord,
};
