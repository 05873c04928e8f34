//! A small trainable denoiser.
//!
//! The network is a plain fully connected MLP over the flattened grid, with
//! a sinusoidal timestep embedding and learned label/subject embeddings
//! concatenated to the input. It is trained on the standard noise-prediction
//! objective: perturb a clean grid to a random timestep and regress the
//! injected noise. Everything — initialization, batch order, noise draws —
//! runs off one seeded generator, so a rerun with the same inputs produces
//! bit-identical weights.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{GridShape, LatentGrid};
use crate::models::{Condition, NoisePredictor};
use crate::sampler::NoiseSchedule;

/// Negative-side slope of the hidden activation. A leaky rectifier keeps a
/// linear path open in both directions, which matters because the target
/// map is close to linear in the grid at every fixed timestep.
const LEAKY_SLOPE: f64 = 0.1;
/// Most references a fine-tune will accept; personalization is supposed to
/// work from a handful of examples.
const MAX_REFERENCES: usize = 10;

/// Architecture of an [`MlpDenoiser`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    /// Hidden layer widths; may be empty for a purely linear model.
    pub hidden: Vec<usize>,
    /// Sinusoidal timestep embedding width (even, at least 2).
    pub time_embed: usize,
    /// Width of the learned label/subject embeddings.
    pub label_embed: usize,
    /// Number of label embedding rows.
    pub n_labels: u32,
    /// Number of subject embedding rows (0 if subjects are never used).
    pub n_subjects: u32,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![64],
            time_embed: 8,
            label_embed: 8,
            n_labels: 2,
            n_subjects: 1,
        }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<()> {
        if self.time_embed < 2 || !self.time_embed.is_multiple_of(2) {
            return Err(Error::param(format!(
                "time_embed must be even and >= 2, got {}",
                self.time_embed
            )));
        }
        if self.label_embed == 0 {
            return Err(Error::param("label_embed must be positive"));
        }
        if self.n_labels == 0 {
            return Err(Error::param("the model needs at least one label"));
        }
        Ok(())
    }
}

/// One dense layer, weights stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Dense {
    pub(crate) w: Array2<f64>,
    pub(crate) b: Array1<f64>,
}

/// The trainable noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    pub(crate) shape: GridShape,
    pub(crate) config: MlpConfig,
    pub(crate) layers: Vec<Dense>,
    pub(crate) label_table: Array2<f64>,
    pub(crate) subject_table: Array2<f64>,
}

impl MlpDenoiser {
    /// Layer widths from input to output for this shape and config.
    fn layer_dims(shape: GridShape, config: &MlpConfig) -> Vec<usize> {
        let input = shape.len() + config.time_embed + config.label_embed;
        let mut dims = vec![input];
        dims.extend_from_slice(&config.hidden);
        dims.push(shape.len());
        dims
    }

    /// Fresh network with Xavier-uniform weights drawn from `seed`.
    pub fn random(shape: GridShape, config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Self::layer_dims(shape, &config);
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        rng.random_range(-limit..limit)
                    }),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        let mut table = |rows: u32| {
            Array2::from_shape_fn((rows as usize, config.label_embed), |_| {
                rng.random_range(-0.5..0.5)
            })
        };
        let label_table = table(config.n_labels);
        let subject_table = table(config.n_subjects);
        Ok(MlpDenoiser {
            shape,
            config,
            layers,
            label_table,
            subject_table,
        })
    }

    /// All-zero network; predicts zero noise for every input.
    pub fn zeroed(shape: GridShape, config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let dims = Self::layer_dims(shape, &config);
        let layers = dims
            .windows(2)
            .map(|pair| Dense {
                w: Array2::zeros((pair[1], pair[0])),
                b: Array1::zeros(pair[1]),
            })
            .collect();
        let label_table = Array2::zeros((config.n_labels as usize, config.label_embed));
        let subject_table = Array2::zeros((config.n_subjects as usize, config.label_embed));
        Ok(MlpDenoiser {
            shape,
            config,
            layers,
            label_table,
            subject_table,
        })
    }

    /// Rebuilds a network from stored tensors, validating all dimensions.
    pub(crate) fn from_parts(
        shape: GridShape,
        config: MlpConfig,
        layers: Vec<Dense>,
        label_table: Array2<f64>,
        subject_table: Array2<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let dims = Self::layer_dims(shape, &config);
        if layers.len() + 1 != dims.len() {
            return Err(Error::param(format!(
                "expected {} layers, got {}",
                dims.len() - 1,
                layers.len()
            )));
        }
        for (l, (layer, pair)) in layers.iter().zip(dims.windows(2)).enumerate() {
            if layer.w.dim() != (pair[1], pair[0]) || layer.b.len() != pair[1] {
                return Err(Error::param(format!("layer {l} has inconsistent dimensions")));
            }
        }
        if label_table.dim() != (config.n_labels as usize, config.label_embed)
            || subject_table.dim() != (config.n_subjects as usize, config.label_embed)
        {
            return Err(Error::param("embedding table dimensions are inconsistent"));
        }
        Ok(MlpDenoiser {
            shape,
            config,
            layers,
            label_table,
            subject_table,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    fn time_embedding(&self, t: usize, out: &mut Vec<f64>) {
        let half = self.config.time_embed / 2;
        for i in 0..half {
            let freq = 10_000f64.powf(-(i as f64) / half as f64);
            let angle = t as f64 * freq;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }

    fn condition_embedding(&self, cond: &Condition, out: &mut Vec<f64>) -> Result<()> {
        let start = out.len();
        out.resize(start + self.config.label_embed, 0.0);
        let mut add_row = |table: &Array2<f64>, row: u32, what: &str| -> Result<()> {
            if row as usize >= table.nrows() {
                return Err(Error::UnknownCondition(format!(
                    "{what} {row} not registered (have {})",
                    table.nrows()
                )));
            }
            for (o, v) in out[start..].iter_mut().zip(table.row(row as usize)) {
                *o += v;
            }
            Ok(())
        };
        match cond {
            Condition::Unconditional => Ok(()),
            Condition::Prompt(label) => add_row(&self.label_table, *label, "label"),
            Condition::SubjectPrompt { label, subject } => {
                add_row(&self.label_table, *label, "label")?;
                add_row(&self.subject_table, *subject, "subject")
            }
        }
    }

    fn build_input(&self, x_t: &LatentGrid, t: usize, cond: &Condition) -> Result<Array1<f64>> {
        let mut input = Vec::with_capacity(
            self.shape.len() + self.config.time_embed + self.config.label_embed,
        );
        input.extend_from_slice(x_t.data());
        self.time_embedding(t, &mut input);
        self.condition_embedding(cond, &mut input)?;
        Ok(Array1::from_vec(input))
    }

    /// Forward pass returning pre-activations and activations per layer.
    fn forward(&self, input: Array1<f64>) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len() + 1);
        act.push(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.w.dot(act.last().expect("seeded")) + &layer.b;
            let a = if l + 1 < self.layers.len() {
                z.mapv(leaky)
            } else {
                z.clone()
            };
            pre.push(z);
            act.push(a);
        }
        (pre, act)
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl NoisePredictor for MlpDenoiser {
    fn shape(&self) -> GridShape {
        self.shape
    }

    fn epsilon(
        &self,
        x_t: &LatentGrid,
        t: usize,
        cond: &Condition,
        schedule: &NoiseSchedule,
    ) -> Result<LatentGrid> {
        if x_t.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: x_t.shape(),
            });
        }
        // The network only embeds t, but an out-of-range t is still a
        // caller bug worth surfacing.
        schedule.alpha_bar(t)?;
        let (_, act) = self.forward(self.build_input(x_t, t, cond)?);
        let out = act.last().expect("at least the input activation");
        LatentGrid::from_vec(self.shape, out.to_vec())
    }
}

/// Mirror of the trainable tensors, used for gradients and optimizer state.
#[derive(Clone)]
struct TensorSet {
    layers: Vec<Dense>,
    label_table: Array2<f64>,
    subject_table: Array2<f64>,
}

impl TensorSet {
    fn zeros_like(model: &MlpDenoiser) -> Self {
        TensorSet {
            layers: model
                .layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
            label_table: Array2::zeros(model.label_table.dim()),
            subject_table: Array2::zeros(model.subject_table.dim()),
        }
    }

    fn fill(&mut self, v: f64) {
        for l in &mut self.layers {
            l.w.fill(v);
            l.b.fill(v);
        }
        self.label_table.fill(v);
        self.subject_table.fill(v);
    }
}

/// Adam state plus step counter.
struct Adam {
    m: TensorSet,
    v: TensorSet,
    step: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &MlpDenoiser, lr: f64) -> Self {
        Adam {
            m: TensorSet::zeros_like(model),
            v: TensorSet::zeros_like(model),
            step: 0,
            lr,
        }
    }

    fn update_slice(step: usize, lr: f64, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
        let bc1 = 1.0 - Self::BETA1.powi(step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(step as i32);
        for i in 0..p.len() {
            m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
            v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }

    fn apply(&mut self, model: &mut MlpDenoiser, grads: &TensorSet) {
        self.step += 1;
        let (step, lr) = (self.step, self.lr);
        for ((layer, grad), (m, v)) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(&mut self.v.layers))
        {
            Self::update_slice(
                step,
                lr,
                layer.w.as_slice_mut().expect("contiguous"),
                grad.w.as_slice().expect("contiguous"),
                m.w.as_slice_mut().expect("contiguous"),
                v.w.as_slice_mut().expect("contiguous"),
            );
            Self::update_slice(
                step,
                lr,
                layer.b.as_slice_mut().expect("contiguous"),
                grad.b.as_slice().expect("contiguous"),
                m.b.as_slice_mut().expect("contiguous"),
                v.b.as_slice_mut().expect("contiguous"),
            );
        }
        for (table, (grad, (m, v))) in [
            (&mut model.label_table, (&grads.label_table, (&mut self.m.label_table, &mut self.v.label_table))),
            (&mut model.subject_table, (&grads.subject_table, (&mut self.m.subject_table, &mut self.v.subject_table))),
        ] {
            if table.is_empty() {
                continue;
            }
            Self::update_slice(
                step,
                lr,
                table.as_slice_mut().expect("contiguous"),
                grad.as_slice().expect("contiguous"),
                m.as_slice_mut().expect("contiguous"),
                v.as_slice_mut().expect("contiguous"),
            );
        }
    }
}

/// Training hyperparameters for [`train_denoiser`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub arch: MlpConfig,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: MlpConfig::default(),
            steps: 2000,
            batch: 8,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Hyperparameters for [`finetune_subject`].
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    /// Label the subject is taught under.
    pub label: u32,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            label: 0,
            steps: 400,
            batch: 4,
            learning_rate: 1e-3,
            seed: 1,
        }
    }
}

fn validate_dataset(
    dataset: &[(LatentGrid, Condition)],
    shape: GridShape,
    config: &MlpConfig,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::param("training dataset is empty"));
    }
    for (grid, cond) in dataset {
        if grid.shape() != shape {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: grid.shape(),
            });
        }
        let (label, subject) = match cond {
            Condition::Unconditional => continue,
            Condition::Prompt(l) => (*l, None),
            Condition::SubjectPrompt { label, subject } => (*label, Some(*subject)),
        };
        if label >= config.n_labels {
            return Err(Error::UnknownCondition(format!(
                "dataset references label {label}, model has {}",
                config.n_labels
            )));
        }
        if let Some(s) = subject {
            if s >= config.n_subjects {
                return Err(Error::UnknownCondition(format!(
                    "dataset references subject {s}, model has {}",
                    config.n_subjects
                )));
            }
        }
    }
    Ok(())
}

/// One gradient step over a batch; returns the batch loss.
fn train_step(
    model: &mut MlpDenoiser,
    grads: &mut TensorSet,
    adam: &mut Adam,
    dataset: &[(LatentGrid, Condition)],
    schedule: &NoiseSchedule,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let dim = model.shape.len() as f64;
    grads.fill(0.0);
    let mut batch_loss = 0.0;
    for _ in 0..batch {
        let (x0, cond) = &dataset[rng.random_range(0..dataset.len())];
        let t = rng.random_range(1..=schedule.steps());
        let ab = schedule.alpha_bar(t)?;
        let mut noise = vec![0.0f64; model.shape.len()];
        for n in &mut noise {
            *n = rng.sample::<f64, _>(StandardNormal);
        }
        let x_t_data: Vec<f64> = x0
            .data()
            .iter()
            .zip(&noise)
            .map(|(x, n)| ab.sqrt() * x + (1.0 - ab).sqrt() * n)
            .collect();
        let x_t = LatentGrid::from_vec(model.shape, x_t_data)?;

        let input = model.build_input(&x_t, t, cond)?;
        let (pre, act) = model.forward(input);
        let out = act.last().expect("output activation");
        let residual = Array1::from_shape_fn(out.len(), |i| out[i] - noise[i]);
        batch_loss += residual.iter().map(|r| r * r).sum::<f64>() / dim;

        // Backward pass.
        let mut delta = residual.mapv(|r| 2.0 * r / dim);
        for l in (0..model.layers.len()).rev() {
            let a_prev = &act[l];
            grads.layers[l].w += &delta
                .view()
                .insert_axis(Axis(1))
                .dot(&a_prev.view().insert_axis(Axis(0)));
            grads.layers[l].b += &delta;
            if l > 0 {
                delta = model.layers[l].w.t().dot(&delta)
                    * pre[l - 1].mapv(leaky_grad);
            } else {
                // Gradient w.r.t. the input: only the condition embedding
                // slice is trainable.
                let input_grad = model.layers[0].w.t().dot(&delta);
                let start = model.shape.len() + model.config.time_embed;
                let slice = input_grad.slice(ndarray::s![start..]);
                match cond {
                    Condition::Unconditional => {}
                    Condition::Prompt(label) => {
                        let mut row = grads.label_table.row_mut(*label as usize);
                        row += &slice;
                    }
                    Condition::SubjectPrompt { label, subject } => {
                        let mut row = grads.label_table.row_mut(*label as usize);
                        row += &slice;
                        let mut row = grads.subject_table.row_mut(*subject as usize);
                        row += &slice;
                    }
                }
            }
        }
    }

    let scale = 1.0 / batch as f64;
    for l in &mut grads.layers {
        l.w *= scale;
        l.b *= scale;
    }
    grads.label_table *= scale;
    grads.subject_table *= scale;
    adam.apply(model, grads);
    Ok(batch_loss * scale)
}

/// Trains a fresh denoiser on `(clean grid, condition)` pairs.
///
/// Returns the trained model and the per-step batch loss curve. Fully
/// deterministic for a fixed config: the seed drives initialization, batch
/// selection, timestep draws and noise draws.
pub fn train_denoiser(
    dataset: &[(LatentGrid, Condition)],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(MlpDenoiser, Vec<(usize, f64)>)> {
    let shape = dataset
        .first()
        .ok_or_else(|| Error::param("training dataset is empty"))?
        .0
        .shape();
    validate_dataset(dataset, shape, &cfg.arch)?;
    if cfg.batch == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::param("learning rate must be positive"));
    }
    let mut model = MlpDenoiser::random(shape, cfg.arch.clone(), cfg.seed)?;
    let mut grads = TensorSet::zeros_like(&model);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let loss = train_step(
            &mut model,
            &mut grads,
            &mut adam,
            dataset,
            schedule,
            cfg.batch,
            &mut rng,
        )?;
        log.push((step, loss));
    }
    Ok((model, log))
}

/// Fine-tunes a copy of `base` so that `SubjectPrompt { label, subject }`
/// denoises toward the reference grids.
///
/// Accepts 1 to 10 references. With zero steps the returned model is an
/// exact copy of `base`.
pub fn finetune_subject(
    base: &MlpDenoiser,
    references: &[LatentGrid],
    subject: u32,
    schedule: &NoiseSchedule,
    cfg: &FinetuneConfig,
) -> Result<(MlpDenoiser, Vec<(usize, f64)>)> {
    if references.is_empty() || references.len() > MAX_REFERENCES {
        return Err(Error::param(format!(
            "fine-tuning takes 1 to {MAX_REFERENCES} references, got {}",
            references.len()
        )));
    }
    if subject >= base.config.n_subjects {
        return Err(Error::UnknownCondition(format!(
            "subject {subject} not registered (model has {})",
            base.config.n_subjects
        )));
    }
    if cfg.label >= base.config.n_labels {
        return Err(Error::UnknownCondition(format!(
            "label {} not registered (model has {})",
            cfg.label, base.config.n_labels
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let cond = Condition::SubjectPrompt {
        label: cfg.label,
        subject,
    };
    let dataset: Vec<(LatentGrid, Condition)> =
        references.iter().map(|r| (r.clone(), cond)).collect();
    let schedule_probe = dataset[0].0.shape();
    if schedule_probe != base.shape {
        return Err(Error::ShapeMismatch {
            left: base.shape,
            right: schedule_probe,
        });
    }
    validate_dataset(&dataset, base.shape, &base.config)?;

    let mut model = base.clone();
    let mut grads = TensorSet::zeros_like(&model);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let loss = train_step(
            &mut model,
            &mut grads,
            &mut adam,
            &dataset,
            schedule,
            cfg.batch,
            &mut rng,
        )?;
        log.push((step, loss));
    }
    Ok((model, log))
}

/// Mean noise-prediction loss of `model` over `dataset`, with `passes`
/// fresh perturbations per item drawn from `seed`.
pub fn denoising_loss(
    model: &MlpDenoiser,
    dataset: &[(LatentGrid, Condition)],
    schedule: &NoiseSchedule,
    passes: usize,
    seed: u64,
) -> Result<f64> {
    validate_dataset(dataset, model.shape, &model.config)?;
    if passes == 0 {
        return Err(Error::param("need at least one evaluation pass"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.shape.len() as f64;
    let mut total = 0.0;
    for (x0, cond) in dataset {
        for _ in 0..passes {
            let t = rng.random_range(1..=schedule.steps());
            let ab = schedule.alpha_bar(t)?;
            let noise: Vec<f64> = (0..model.shape.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let x_t_data: Vec<f64> = x0
                .data()
                .iter()
                .zip(&noise)
                .map(|(x, n)| ab.sqrt() * x + (1.0 - ab).sqrt() * n)
                .collect();
            let x_t = LatentGrid::from_vec(model.shape, x_t_data)?;
            let pred = model.epsilon(&x_t, t, cond, schedule)?;
            total += pred
                .data()
                .iter()
                .zip(&noise)
                .map(|(p, n)| (p - n) * (p - n))
                .sum::<f64>()
                / dim;
        }
    }
    Ok(total / (dataset.len() * passes) as f64)
}
