//! Analytic noise prediction from Gaussian mixtures.
//!
//! The clean data distribution under a condition is a Gaussian mixture with
//! isotropic components. Diffusing it to timestep `t` keeps it a mixture —
//! component `k` becomes `N(sqrt(ab) * mean_k, (ab * var_k + 1 - ab) * I)`
//! with `ab = alpha_bar[t]` — so the marginal score, and from it the exact
//! noise estimate
//!
//! ```text
//! eps(x, t) = -sqrt(1 - ab) * grad_x log p_t(x)
//! ```
//!
//! is available in closed form. Responsibilities are evaluated through
//! log-sum-exp, so well-separated components far from `x` underflow to zero
//! weight instead of poisoning the result.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{GridShape, LatentGrid};
use crate::models::{Condition, NoisePredictor};
use crate::sampler::NoiseSchedule;

/// How far the component weights may stray from summing to one.
const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// One isotropic Gaussian component of a mixture.
#[derive(Clone, Debug)]
pub struct MixtureComponent {
    /// Mixture weight; all weights in a model sum to one.
    pub weight: f64,
    /// Component mean, one value per grid entry.
    pub mean: LatentGrid,
    /// Isotropic variance of the clean component.
    pub variance: f64,
    /// Label this component belongs to.
    pub label: u32,
    /// Set when the component represents a named subject injected by
    /// personalization; `None` for ordinary class components.
    pub subject: Option<u32>,
}

/// An exact, closed-form noise predictor backed by a Gaussian mixture.
#[derive(Clone, Debug)]
pub struct GaussianMixtureModel {
    shape: GridShape,
    components: Vec<MixtureComponent>,
}

impl GaussianMixtureModel {
    /// Validates and builds a mixture model.
    ///
    /// Components must be non-empty, share one grid shape, carry positive
    /// finite weights summing to one (within 1e-12), and positive finite
    /// variances.
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::param("mixture needs at least one component"))?;
        let shape = first.mean.shape();
        let mut weight_sum = 0.0;
        for (k, comp) in components.iter().enumerate() {
            if comp.mean.shape() != shape {
                return Err(Error::ShapeMismatch {
                    left: shape,
                    right: comp.mean.shape(),
                });
            }
            if !comp.weight.is_finite() || comp.weight <= 0.0 {
                return Err(Error::param(format!(
                    "component {k} weight must be positive and finite, got {}",
                    comp.weight
                )));
            }
            if !comp.variance.is_finite() || comp.variance <= 0.0 {
                return Err(Error::param(format!(
                    "component {k} variance must be positive and finite, got {}",
                    comp.variance
                )));
            }
            weight_sum += comp.weight;
        }
        if (weight_sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::param(format!(
                "component weights must sum to 1, got {weight_sum}"
            )));
        }
        Ok(GaussianMixtureModel { shape, components })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Sorted, deduplicated labels present in the mixture.
    pub fn labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self.components.iter().map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Indices of the components selected by `cond`, or an unknown-condition
    /// error if nothing matches.
    fn select(&self, cond: &Condition) -> Result<Vec<usize>> {
        let selected: Vec<usize> = self
            .components
            .iter()
            .enumerate()
            .filter(|(_, c)| match cond {
                Condition::Unconditional => true,
                Condition::Prompt(label) => c.label == *label,
                Condition::SubjectPrompt { label, subject } => {
                    c.label == *label && c.subject.is_none_or(|s| s == *subject)
                }
            })
            .map(|(k, _)| k)
            .collect();
        if selected.is_empty() {
            return Err(Error::UnknownCondition(format!(
                "{cond} selects no components"
            )));
        }
        Ok(selected)
    }

    /// Selected components with their weights renormalized to sum to one.
    fn conditional(&self, cond: &Condition) -> Result<Vec<(f64, &MixtureComponent)>> {
        let idx = self.select(cond)?;
        let total: f64 = idx.iter().map(|&k| self.components[k].weight).sum();
        Ok(idx
            .into_iter()
            .map(|k| (self.components[k].weight / total, &self.components[k]))
            .collect())
    }

    /// Log-density of the *clean* conditional mixture at `x`.
    pub fn log_density(&self, x: &LatentGrid, cond: &Condition) -> Result<f64> {
        if x.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: x.shape(),
            });
        }
        let comps = self.conditional(cond)?;
        let dim = self.shape.len() as f64;
        let log_terms: Vec<f64> = comps
            .iter()
            .map(|(pi, comp)| {
                let sq_dist: f64 = x
                    .data()
                    .iter()
                    .zip(comp.mean.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                pi.ln() - 0.5 * dim * (2.0 * std::f64::consts::PI * comp.variance).ln()
                    - sq_dist / (2.0 * comp.variance)
            })
            .collect();
        Ok(log_sum_exp(&log_terms))
    }

    /// Draws one grid from the clean conditional mixture.
    pub fn sample_clean(&self, cond: &Condition, rng: &mut impl Rng) -> Result<LatentGrid> {
        let comps = self.conditional(cond)?;
        let u: f64 = rng.random::<f64>();
        let mut acc = 0.0;
        let mut chosen = comps.len() - 1;
        for (k, (pi, _)) in comps.iter().enumerate() {
            acc += pi;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let comp = comps[chosen].1;
        let std = comp.variance.sqrt();
        let data = comp
            .mean
            .data()
            .iter()
            .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        LatentGrid::from_vec(self.shape, data)
    }

    /// Derives a personalized copy of this mixture.
    ///
    /// A new subject component with the given mean, variance and weight is
    /// appended under `attach_label`, carrying `subject_id`; all existing
    /// weights are scaled by `1 - subject_weight` so the total stays one.
    /// The label must already exist in the base mixture — a subject
    /// personalizes a known class, it does not introduce a new one.
    pub fn make_personalized(
        &self,
        subject_mean: LatentGrid,
        subject_variance: f64,
        subject_weight: f64,
        attach_label: u32,
        subject_id: u32,
    ) -> Result<Self> {
        if !subject_weight.is_finite() || subject_weight <= 0.0 || subject_weight >= 1.0 {
            return Err(Error::param(format!(
                "subject weight must lie strictly between 0 and 1, got {subject_weight}"
            )));
        }
        if !self.components.iter().any(|c| c.label == attach_label) {
            return Err(Error::param(format!(
                "label {attach_label} is not present in the base mixture"
            )));
        }
        let mut components: Vec<MixtureComponent> = self
            .components
            .iter()
            .map(|c| MixtureComponent {
                weight: c.weight * (1.0 - subject_weight),
                ..c.clone()
            })
            .collect();
        components.push(MixtureComponent {
            weight: subject_weight,
            mean: subject_mean,
            variance: subject_variance,
            label: attach_label,
            subject: Some(subject_id),
        });
        // Scaling by (1 - w) can nudge the sum off by an ulp; renormalize so
        // the constructor's exact-sum check stays meaningful.
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= total;
        }
        GaussianMixtureModel::new(components)
    }
}

impl NoisePredictor for GaussianMixtureModel {
    fn shape(&self) -> GridShape {
        self.shape
    }

    /// Exact noise estimate of the diffused conditional mixture.
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
        let ab = schedule.alpha_bar(t)?;
        let sqrt_ab = ab.sqrt();
        let noise_var = 1.0 - ab;
        let comps = self.conditional(cond)?;
        let dim = self.shape.len() as f64;

        // First pass: log posterior weight of each diffused component at x_t.
        let mut log_w = Vec::with_capacity(comps.len());
        let mut marginal_var = Vec::with_capacity(comps.len());
        for (pi, comp) in &comps {
            let v = ab * comp.variance + noise_var;
            let sq_dist: f64 = x_t
                .data()
                .iter()
                .zip(comp.mean.data())
                .map(|(a, b)| {
                    let d = a - sqrt_ab * b;
                    d * d
                })
                .sum();
            log_w.push(
                pi.ln() - 0.5 * dim * (2.0 * std::f64::consts::PI * v).ln()
                    - sq_dist / (2.0 * v),
            );
            marginal_var.push(v);
        }
        let max_log = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_w.iter().map(|lw| (lw - max_log).exp()).collect();
        let total: f64 = weights.iter().sum();

        // Second pass: eps = sqrt(1 - ab) * sum_k r_k * (x - sqrt(ab) mu_k) / v_k.
        let sqrt_noise = noise_var.sqrt();
        let mut data = vec![0.0f64; self.shape.len()];
        for ((w, v), (_, comp)) in weights.iter().zip(&marginal_var).zip(&comps) {
            let coef = sqrt_noise * w / (total * v);
            if coef == 0.0 {
                continue;
            }
            for (out, (a, b)) in data
                .iter_mut()
                .zip(x_t.data().iter().zip(comp.mean.data()))
            {
                *out += coef * (a - sqrt_ab * b);
            }
        }
        LatentGrid::from_vec(self.shape, data)
    }
}

/// Numerically stable `ln(sum(exp(terms)))`.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{make_schedule, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(c: usize, w: usize, h: usize) -> GridShape {
        GridShape::new(c, w, h).unwrap()
    }

    fn constant_grid(s: GridShape, v: f64) -> LatentGrid {
        LatentGrid::from_fn(s, |_, _, _| v)
    }

    fn component(mean: LatentGrid, weight: f64, variance: f64, label: u32) -> MixtureComponent {
        MixtureComponent {
            weight,
            mean,
            variance,
            label,
            subject: None,
        }
    }

    fn single_gaussian(s: GridShape, mean: f64) -> GaussianMixtureModel {
        GaussianMixtureModel::new(vec![component(constant_grid(s, mean), 1.0, 1.0, 0)]).unwrap()
    }

    #[test]
    fn unit_variance_gaussian_has_linear_epsilon() {
        // With variance 1 the diffused marginal keeps unit covariance, so
        // eps(x) = sqrt(1 - ab) * (x - sqrt(ab) * mu) exactly.
        let s = shape(2, 2, 2);
        let model = single_gaussian(s, 1.5);
        let schedule = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in [1, 10, 25, 50] {
            let ab = schedule.alpha_bar(t).unwrap();
            let x = LatentGrid::standard_normal(s, &mut rng);
            let eps = model
                .epsilon(&x, t, &Condition::Unconditional, &schedule)
                .unwrap();
            for (e, xv) in eps.data().iter().zip(x.data()) {
                let want = (1.0 - ab).sqrt() * (xv - ab.sqrt() * 1.5);
                assert!((e - want).abs() < 1e-12, "t={t}: {e} vs {want}");
            }
        }
    }

    #[test]
    fn epsilon_vanishes_at_the_scaled_mean() {
        let s = shape(1, 3, 3);
        let model = single_gaussian(s, -0.7);
        let schedule = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let t = 20;
        let ab = schedule.alpha_bar(t).unwrap();
        let x = constant_grid(s, -0.7 * ab.sqrt());
        let eps = model
            .epsilon(&x, t, &Condition::Unconditional, &schedule)
            .unwrap();
        assert!(eps.max_abs() < 1e-12);
    }

    #[test]
    fn epsilon_at_time_zero_is_zero() {
        // alpha_bar(0) = 1: no noise to predict.
        let s = shape(1, 2, 2);
        let model = single_gaussian(s, 0.3);
        let schedule = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = LatentGrid::standard_normal(s, &mut rng);
        let eps = model
            .epsilon(&x, 0, &Condition::Unconditional, &schedule)
            .unwrap();
        assert_eq!(eps.max_abs(), 0.0);
    }

    #[test]
    fn label_owning_all_components_matches_unconditional() {
        let s = shape(2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = GaussianMixtureModel::new(vec![
            component(LatentGrid::standard_normal(s, &mut rng), 0.4, 1.0, 7),
            component(LatentGrid::standard_normal(s, &mut rng), 0.6, 0.5, 7),
        ])
        .unwrap();
        let schedule = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let x = LatentGrid::standard_normal(s, &mut rng);
        let uncond = model
            .epsilon(&x, 30, &Condition::Unconditional, &schedule)
            .unwrap();
        let prompt = model.epsilon(&x, 30, &Condition::Prompt(7), &schedule).unwrap();
        assert!(uncond.sub(&prompt).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let s = shape(1, 2, 2);
        let model = single_gaussian(s, 0.0);
        let schedule = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let x = constant_grid(s, 0.1);
        assert!(matches!(
            model.epsilon(&x, 5, &Condition::Prompt(3), &schedule),
            Err(Error::UnknownCondition(_))
        ));
        assert!(model.log_density(&x, &Condition::Prompt(3)).is_err());
    }

    #[test]
    fn subject_prompt_falls_back_to_the_label_for_base_models() {
        // The base model has no subject components, so the subject prompt
        // reads as the plain label.
        let s = shape(1, 2, 2);
        let model = single_gaussian(s, 0.2);
        let schedule = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let x = constant_grid(s, 0.5);
        let cond = Condition::SubjectPrompt {
            label: 0,
            subject: 4,
        };
        let a = model.epsilon(&x, 5, &cond, &schedule).unwrap();
        let b = model.epsilon(&x, 5, &Condition::Prompt(0), &schedule).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let s = shape(1, 1, 1);
        let result = GaussianMixtureModel::new(vec![
            component(constant_grid(s, 0.0), 0.5, 1.0, 0),
            component(constant_grid(s, 1.0), 0.6, 1.0, 0),
        ]);
        assert!(result.is_err());
    }

    #[test]
    fn personalization_preserves_normalization_and_adds_subject() {
        let s = shape(2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = GaussianMixtureModel::new(vec![
            component(LatentGrid::standard_normal(s, &mut rng), 0.3, 1.0, 0),
            component(LatentGrid::standard_normal(s, &mut rng), 0.7, 1.0, 1),
        ])
        .unwrap();
        let theta = base
            .make_personalized(LatentGrid::standard_normal(s, &mut rng), 0.25, 0.35, 0, 0)
            .unwrap();
        let total: f64 = theta.components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(theta.components().len(), 3);
        assert_eq!(theta.components()[2].subject, Some(0));

        // The subject narrows the subject-prompt selection for theta.
        let selected = theta
            .select(&Condition::SubjectPrompt {
                label: 0,
                subject: 0,
            })
            .unwrap();
        assert_eq!(selected, vec![0, 2]);
    }

    #[test]
    fn personalization_rejects_bad_weights_and_unknown_labels() {
        let s = shape(1, 2, 2);
        let base = GaussianMixtureModel::new(vec![
            component(constant_grid(s, 0.0), 0.5, 1.0, 0),
            component(constant_grid(s, 1.0), 0.5, 1.0, 1),
        ])
        .unwrap();
        for w in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(base
                .make_personalized(constant_grid(s, 2.0), 0.5, w, 0, 0)
                .is_err());
        }
        let err = base
            .make_personalized(constant_grid(s, 2.0), 0.5, 0.3, 7, 0)
            .unwrap_err();
        assert!(err.to_string().contains("label 7"), "{err}");
    }

    #[test]
    fn duplicate_subject_component_leaves_predictions_unchanged() {
        // Attach a subject that exactly copies the only component of its
        // label: the conditional mixture is unchanged, so theta and phi
        // agree wherever that label is concerned.
        let s = shape(2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mean0 = LatentGrid::standard_normal(s, &mut rng);
        let base = GaussianMixtureModel::new(vec![
            component(mean0.clone(), 0.6, 0.8, 0),
            component(LatentGrid::standard_normal(s, &mut rng), 0.4, 1.0, 1),
        ])
        .unwrap();
        let theta = base
            .make_personalized(mean0, 0.8, 0.5, 0, 0)
            .unwrap();
        let schedule = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let x = LatentGrid::standard_normal(s, &mut rng);
        for cond in [
            Condition::Prompt(0),
            Condition::SubjectPrompt {
                label: 0,
                subject: 0,
            },
        ] {
            let base_eps = base.epsilon(&x, 25, &Condition::Prompt(0), &schedule).unwrap();
            let theta_eps = theta.epsilon(&x, 25, &cond, &schedule).unwrap();
            let diff = base_eps.sub(&theta_eps).unwrap().max_abs();
            assert!(diff <= 1e-12, "{cond}: diff {diff}");
        }
    }

    #[test]
    fn vanishing_subject_weight_barely_moves_predictions() {
        let s = shape(2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let base = GaussianMixtureModel::new(vec![
            component(LatentGrid::standard_normal(s, &mut rng), 0.5, 1.0, 0),
            component(LatentGrid::standard_normal(s, &mut rng), 0.5, 1.0, 1),
        ])
        .unwrap();
        let theta = base
            .make_personalized(LatentGrid::standard_normal(s, &mut rng), 0.5, 1e-6, 0, 0)
            .unwrap();
        let schedule = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let cond = Condition::SubjectPrompt {
            label: 0,
            subject: 0,
        };
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let mut xr = ChaCha8Rng::seed_from_u64(seed);
            let x = LatentGrid::standard_normal(s, &mut xr);
            let a = theta.epsilon(&x, 25, &cond, &schedule).unwrap();
            let b = base.epsilon(&x, 25, &cond, &schedule).unwrap();
            worst = worst.max(a.sub(&b).unwrap().norm());
        }
        assert!(worst < 1e-3, "worst consistency norm {worst}");
    }

    #[test]
    fn log_density_matches_single_gaussian_closed_form() {
        let s = shape(1, 2, 1);
        let model = single_gaussian(s, 0.0);
        let x = LatentGrid::from_vec(s, vec![1.0, -2.0]).unwrap();
        // Two standard normal dimensions: -0.5 * (1 + 4) - ln(2 pi).
        let want = -2.5 - (2.0 * std::f64::consts::PI).ln();
        let got = model.log_density(&x, &Condition::Unconditional).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn clean_samples_follow_component_statistics() {
        let s = shape(1, 4, 4);
        let model = single_gaussian(s, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 2000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = model.sample_clean(&Condition::Unconditional, &mut rng).unwrap();
            sum += x.data().iter().sum::<f64>() / x.data().len() as f64;
        }
        let mean = sum / n as f64;
        assert!((mean - 2.0).abs() < 0.05, "sample mean {mean}");
    }
}
