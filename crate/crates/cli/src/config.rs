//! Experiment configuration: the TOML schema, its validation, and the
//! construction of the models it describes.
//!
//! A configuration names a *scenario* — either an analytic Gaussian-mixture
//! description or a pair of serialized model files — plus the condition to
//! sample under, the run matrix (modes × seeds), guidance scales, histogram
//! binning, and optional reference/training sections. `Experiment::build`
//! turns a parsed [`ExperimentConfig`] into ready predictors and validated
//! sampler settings; command-line overrides are applied to the parsed
//! config *before* building, so the manifest written next to each run
//! records exactly what ran.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use prguide_core::{
    Condition, GaussianMixtureModel, GridShape, GuidanceMode, GuidanceScales, HistogramSpec,
    LatentGrid, MixtureComponent, Model, NoisePredictor, RescaleConstants, SamplerConfig,
    ScheduleKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

/// Environment variable consulted for the output root when neither the
/// `--out` flag nor the config's `run.out` is set.
pub const OUT_ENV_VAR: &str = "PRGUIDE_OUT";

/// Top-level experiment file. Exactly one of `scenario` and `models` must
/// be present.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Analytic mixture scenario: grid, components, optional subject.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    /// Serialized predictors, as an alternative to `scenario`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<ModelsSection>,
    /// Sampling condition.
    pub condition: ConditionSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub histogram: HistogramSection,
    /// Reference grids for the identity metric (and fine-tuning).
    #[serde(default)]
    pub references: ReferencesSection,
    /// Settings for `train-toy`; ignored by the other commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub grid: GridSection,
    /// Mixture components of the base (unpersonalized) model.
    pub components: Vec<ComponentSection>,
    /// When present, the personalized model is the base mixture with this
    /// subject component injected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<SubjectSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub label: u32,
    pub weight: f64,
    pub variance: f64,
    pub mean: MeanSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSection {
    /// Label the subject attaches to; must exist in `components`.
    pub label: u32,
    /// Subject identifier used in `subject_prompt` conditions.
    pub id: u32,
    /// Mixture weight given to the subject component.
    pub weight: f64,
    pub variance: f64,
    pub mean: MeanSpec,
}

/// How a component mean grid is produced. Entries follow the grid's
/// location-major layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanSpec {
    /// Every entry equals `value`.
    Constant { value: f64 },
    /// Entries given literally; the length must match the grid.
    Values { values: Vec<f64> },
    /// `offset + scale * z` with `z` drawn from a seeded standard normal
    /// stream, so the grid is reproducible from the config alone.
    Seeded {
        seed: u64,
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl MeanSpec {
    pub fn build(&self, shape: GridShape) -> Result<LatentGrid, ConfigError> {
        match self {
            MeanSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(ConfigError::new(format!(
                        "mean value must be finite, got {value}"
                    )));
                }
                Ok(LatentGrid::from_fn(shape, |_, _, _| *value))
            }
            MeanSpec::Values { values } => {
                if values.len() != shape.len() {
                    return Err(ConfigError::new(format!(
                        "mean needs {} values for a {}x{}x{} grid, got {}",
                        shape.len(),
                        shape.channels,
                        shape.width,
                        shape.height,
                        values.len()
                    )));
                }
                LatentGrid::from_vec(shape, values.clone())
                    .map_err(|e| ConfigError::new(format!("mean values: {e}")))
            }
            MeanSpec::Seeded {
                seed,
                scale,
                offset,
            } => {
                if !scale.is_finite() || !offset.is_finite() {
                    return Err(ConfigError::new(
                        "seeded mean scale and offset must be finite".to_string(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(LatentGrid::standard_normal(shape, &mut rng)
                    .scale(*scale)
                    .map(|v| v + offset))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    /// Path to the base model file, relative to the config file.
    pub base: String,
    /// Path to the personalized model file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalized: Option<String>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionSection {
    Unconditional,
    Prompt { label: u32 },
    SubjectPrompt { label: u32, subject: u32 },
}

impl ConditionSection {
    pub fn to_condition(self) -> Condition {
        match self {
            ConditionSection::Unconditional => Condition::Unconditional,
            ConditionSection::Prompt { label } => Condition::Prompt(label),
            ConditionSection::SubjectPrompt { label, subject } => {
                Condition::SubjectPrompt { label, subject }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Guidance modes to run: any of "cfg", "cg", "pr".
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    /// "cosine" or "linear".
    #[serde(default = "default_schedule")]
    pub schedule: String,
    /// Output root; `--out` and `PRGUIDE_OUT` take precedence / fall back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Store the latent after every step under `latents/`.
    #[serde(default)]
    pub snapshot_latents: bool,
}

fn default_modes() -> Vec<String> {
    vec!["cfg".into(), "cg".into(), "pr".into()]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_steps() -> usize {
    50
}

fn default_schedule() -> String {
    "cosine".into()
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            modes: default_modes(),
            seeds: default_seeds(),
            steps: default_steps(),
            eta: 0.0,
            schedule: default_schedule(),
            out: None,
            snapshot_latents: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default = "default_omega_text")]
    pub omega_text: f64,
    #[serde(default = "default_omega_cons")]
    pub omega_cons: f64,
    #[serde(default = "default_eps_std")]
    pub eps_std: f64,
    #[serde(default = "default_eps_proj")]
    pub eps_proj: f64,
}

fn default_omega_text() -> f64 {
    7.5
}

fn default_omega_cons() -> f64 {
    3.0
}

fn default_eps_std() -> f64 {
    3e-8
}

fn default_eps_proj() -> f64 {
    1e-12
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            omega_text: default_omega_text(),
            omega_cons: default_omega_cons(),
            eps_std: default_eps_std(),
            eps_proj: default_eps_proj(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSection {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramSection {
    fn default() -> Self {
        let spec = HistogramSpec::default();
        HistogramSection {
            lo: spec.lo,
            hi: spec.hi,
            bins: spec.bins,
        }
    }
}

/// Reference grids for the identity metric and subject fine-tuning: the
/// scenario's subject mean plus seeded jitter. The default is the subject
/// mean itself, exactly.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencesSection {
    #[serde(default = "default_ref_count")]
    pub count: usize,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ref_count() -> usize {
    1
}

impl Default for ReferencesSection {
    fn default() -> Self {
        ReferencesSection {
            count: default_ref_count(),
            jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Number of clean draws from the scenario mixture used as the base
    /// training set; labels cycle through the scenario's labels.
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    #[serde(default)]
    pub dataset_seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed")]
    pub time_embed: usize,
    #[serde(default = "default_embed")]
    pub label_embed: usize,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub finetune: FinetuneSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    #[serde(default = "default_finetune_batch")]
    pub batch: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dataset_size() -> usize {
    64
}

fn default_hidden() -> Vec<usize> {
    vec![48]
}

fn default_embed() -> usize {
    8
}

fn default_batch() -> usize {
    16
}

fn default_finetune_batch() -> usize {
    4
}

/// Command-line overrides applied on top of the parsed file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub modes: Option<Vec<String>>,
    pub omega_text: Option<f64>,
    pub omega_cons: Option<f64>,
    pub steps: Option<usize>,
}

impl ExperimentConfig {
    /// Parses a config file. Syntax errors carry the file name and the
    /// parser's line/column diagnostics.
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(out) = &ov.out {
            self.run.out = Some(out.display().to_string());
        }
        if let Some(seeds) = &ov.seeds {
            self.run.seeds = seeds.clone();
        }
        if let Some(modes) = &ov.modes {
            self.run.modes = modes.clone();
        }
        if let Some(v) = ov.omega_text {
            self.guidance.omega_text = v;
        }
        if let Some(v) = ov.omega_cons {
            self.guidance.omega_cons = v;
        }
        if let Some(v) = ov.steps {
            self.run.steps = v;
        }
    }

    /// The output root: config value, then the `PRGUIDE_OUT` environment
    /// variable. (`--out` was already folded into the config by
    /// `apply_overrides`.)
    pub fn out_root(&self) -> Result<PathBuf, ConfigError> {
        if let Some(out) = &self.run.out {
            return Ok(PathBuf::from(out));
        }
        if let Ok(out) = std::env::var(OUT_ENV_VAR) {
            if !out.is_empty() {
                return Ok(PathBuf::from(out));
            }
        }
        Err(ConfigError::new(format!(
            "no output directory: pass --out, set run.out in the config, or export {OUT_ENV_VAR}"
        )))
    }
}

/// A validated experiment: models built, enums parsed, sampler settings
/// checked. Construction fails with a [`ConfigError`] on any inconsistency
/// so the binary can report it as a usage problem rather than a crash.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base: Model,
    pub personalized: Option<Model>,
    pub condition: Condition,
    pub modes: Vec<GuidanceMode>,
    pub schedule: ScheduleKind,
}

impl Experiment {
    /// Builds and validates. `config_dir` anchors relative model paths.
    pub fn build(config: ExperimentConfig, config_dir: &Path) -> Result<Experiment, ConfigError> {
        let (base, personalized) = match (&config.scenario, &config.models) {
            (Some(scenario), None) => build_scenario(scenario)?,
            (None, Some(models)) => load_models(models, config_dir)?,
            (Some(_), Some(_)) => {
                return Err(ConfigError::new(
                    "config defines both [scenario] and [models]; pick one",
                ))
            }
            (None, None) => {
                return Err(ConfigError::new(
                    "config needs a [scenario] or a [models] section",
                ))
            }
        };

        let condition = config.condition.to_condition();
        check_condition(&base, &condition)?;

        if config.run.seeds.is_empty() {
            return Err(ConfigError::new("run.seeds must not be empty"));
        }
        if config.run.modes.is_empty() {
            return Err(ConfigError::new("run.modes must not be empty"));
        }
        let mut modes = Vec::with_capacity(config.run.modes.len());
        for name in &config.run.modes {
            modes.push(
                GuidanceMode::from_str(name)
                    .map_err(|e| ConfigError::new(format!("run.modes: {e}")))?,
            );
        }
        let schedule = ScheduleKind::from_str(&config.run.schedule)
            .map_err(|e| ConfigError::new(format!("run.schedule: {e}")))?;

        let experiment = Experiment {
            config,
            base,
            personalized,
            condition,
            modes,
            schedule,
        };

        // Dry-validate one sampler config per mode so scale/step/eta
        // problems surface as config errors, not mid-run failures.
        for mode in &experiment.modes {
            experiment
                .sampler_config(*mode, experiment.config.run.seeds[0])
                .validate(experiment.personalized.is_some())
                .map_err(|e| ConfigError::new(e.to_string()))?;
        }
        Ok(experiment)
    }

    pub fn sampler_config(&self, mode: GuidanceMode, seed: u64) -> SamplerConfig {
        SamplerConfig {
            mode,
            scales: GuidanceScales {
                omega_text: self.config.guidance.omega_text,
                omega_cons: self.config.guidance.omega_cons,
            },
            consts: RescaleConstants {
                eps_std: self.config.guidance.eps_std,
                eps_proj: self.config.guidance.eps_proj,
            },
            steps: self.config.run.steps,
            eta: self.config.run.eta,
            seed,
            schedule_kind: self.schedule,
            hist: HistogramSpec {
                lo: self.config.histogram.lo,
                hi: self.config.histogram.hi,
                bins: self.config.histogram.bins,
            },
            snapshot_latents: self.config.run.snapshot_latents,
        }
    }

    /// The analytic base mixture, when the scenario provides one. The
    /// likelihood metrics need it; sampling does not.
    pub fn analytic_base(&self) -> Option<&GaussianMixtureModel> {
        self.base.as_gmm()
    }

    /// Reference grids: the scenario subject's mean plus seeded jitter,
    /// per the `[references]` section.
    pub fn references(&self) -> Result<Vec<LatentGrid>, ConfigError> {
        let scenario = self.config.scenario.as_ref().ok_or_else(|| {
            ConfigError::new("references require an analytic [scenario] with a subject")
        })?;
        let subject = scenario.subject.as_ref().ok_or_else(|| {
            ConfigError::new("references require a [scenario.subject] section")
        })?;
        let section = &self.config.references;
        if section.count == 0 {
            return Err(ConfigError::new("references.count must be at least 1"));
        }
        if !section.jitter.is_finite() || section.jitter < 0.0 {
            return Err(ConfigError::new(format!(
                "references.jitter must be finite and >= 0, got {}",
                section.jitter
            )));
        }
        let shape = grid_shape(&scenario.grid)?;
        let mean = subject.mean.build(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(section.seed);
        Ok((0..section.count)
            .map(|_| {
                if section.jitter == 0.0 {
                    mean.clone()
                } else {
                    let noise = LatentGrid::standard_normal(shape, &mut rng);
                    noise.axpy(section.jitter, &mean).expect("shapes match")
                }
            })
            .collect())
    }

    /// A copy with the guidance scales replaced — the sweep's workhorse.
    pub fn with_guidance(
        &self,
        omega_text: f64,
        omega_cons: f64,
    ) -> Result<Experiment, ConfigError> {
        let mut config = self.config.clone();
        config.guidance.omega_text = omega_text;
        config.guidance.omega_cons = omega_cons;
        let exp = Experiment {
            config,
            base: self.base.clone(),
            personalized: self.personalized.clone(),
            condition: self.condition,
            modes: self.modes.clone(),
            schedule: self.schedule,
        };
        for mode in &exp.modes {
            exp.sampler_config(*mode, exp.config.run.seeds[0])
                .validate(exp.personalized.is_some())
                .map_err(|e| ConfigError::new(e.to_string()))?;
        }
        Ok(exp)
    }
}

pub fn grid_shape(grid: &GridSection) -> Result<GridShape, ConfigError> {
    GridShape::new(grid.channels, grid.width, grid.height)
        .map_err(|e| ConfigError::new(format!("scenario.grid: {e}")))
}

fn build_scenario(scenario: &ScenarioSection) -> Result<(Model, Option<Model>), ConfigError> {
    if scenario.components.is_empty() {
        return Err(ConfigError::new("scenario.components must not be empty"));
    }
    let shape = grid_shape(&scenario.grid)?;
    let mut components = Vec::with_capacity(scenario.components.len());
    for (i, section) in scenario.components.iter().enumerate() {
        components.push(MixtureComponent {
            weight: section.weight,
            mean: section
                .mean
                .build(shape)
                .map_err(|e| ConfigError::new(format!("components[{i}]: {e}")))?,
            variance: section.variance,
            label: section.label,
            subject: None,
        });
    }
    let base = GaussianMixtureModel::new(components)
        .map_err(|e| ConfigError::new(format!("scenario.components: {e}")))?;

    let personalized = match &scenario.subject {
        Some(subject) => {
            let mean = subject
                .mean
                .build(shape)
                .map_err(|e| ConfigError::new(format!("scenario.subject: {e}")))?;
            let theta = base
                .make_personalized(mean, subject.variance, subject.weight, subject.label, subject.id)
                .map_err(|e| ConfigError::new(format!("scenario.subject: {e}")))?;
            Some(Model::Gmm(theta))
        }
        None => None,
    };
    Ok((Model::Gmm(base), personalized))
}

fn load_models(
    models: &ModelsSection,
    config_dir: &Path,
) -> Result<(Model, Option<Model>), ConfigError> {
    let base_path = config_dir.join(&models.base);
    let base = Model::load(&base_path)
        .map_err(|e| ConfigError::new(format!("models.base {}: {e}", base_path.display())))?;
    let personalized = match &models.personalized {
        Some(p) => {
            let path = config_dir.join(p);
            let model = Model::load(&path).map_err(|e| {
                ConfigError::new(format!("models.personalized {}: {e}", path.display()))
            })?;
            if model.shape() != base.shape() {
                return Err(ConfigError::new(format!(
                    "personalized model shape {:?} does not match base {:?}",
                    model.shape(),
                    base.shape()
                )));
            }
            Some(model)
        }
        None => None,
    };
    Ok((base, personalized))
}

/// Rejects conditions the base model cannot satisfy, so label typos fail
/// before any sampling starts.
fn check_condition(base: &Model, cond: &Condition) -> Result<(), ConfigError> {
    match base {
        Model::Gmm(gmm) => {
            let labels = gmm.labels();
            let label = match cond {
                Condition::Unconditional => return Ok(()),
                Condition::Prompt(label) => label,
                Condition::SubjectPrompt { label, .. } => label,
            };
            if !labels.contains(label) {
                return Err(ConfigError::new(format!(
                    "condition label {label} not in the scenario (labels: {labels:?})"
                )));
            }
        }
        Model::Mlp(mlp) => {
            let cfg = mlp.config();
            match cond {
                Condition::Unconditional => {}
                Condition::Prompt(label) => {
                    if *label >= cfg.n_labels {
                        return Err(ConfigError::new(format!(
                            "condition label {label} out of range (model has {} labels)",
                            cfg.n_labels
                        )));
                    }
                }
                Condition::SubjectPrompt { label, subject } => {
                    if *label >= cfg.n_labels {
                        return Err(ConfigError::new(format!(
                            "condition label {label} out of range (model has {} labels)",
                            cfg.n_labels
                        )));
                    }
                    if *subject >= cfg.n_subjects {
                        return Err(ConfigError::new(format!(
                            "condition subject {subject} out of range (model has {} subjects)",
                            cfg.n_subjects
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}
