//! Guidance algebra for noise predictions.
//!
//! Sampling with two predictors — a base model and a personalized variant of
//! it — yields three predictions per step: the base conditional, the base
//! unconditional, and the personalized conditional. This module turns those
//! into a final noise estimate in one of three ways:
//!
//! * **CFG** ([`cfg_prediction`]): the classic classifier-free combination
//!   of the base model's conditional and unconditional outputs.
//! * **CG** ([`cg_prediction`]): CFG plus a consistency term that pulls the
//!   trajectory toward the personalized model's prediction.
//! * **PR** ([`pr_prediction`]): CFG plus a *parallel-rescaled* consistency
//!   term. The consistency direction is split, per spatial location, into a
//!   component parallel to the text-guidance direction and an orthogonal
//!   remainder. The per-location parallel strength (the `cp` field) is
//!   standardized to zero mean and unit deviation across the grid before it
//!   is re-applied, which removes any systematic push along or against the
//!   text direction while keeping the orthogonal, identity-carrying part
//!   untouched.
//!
//! All per-location work happens on channel vectors, so the math below reads
//! location by location: for location `(w, h)` with text direction `u` and
//! consistency direction `v`,
//!
//! ```text
//! alpha = <v, u> / (|u|^2 + eps_proj)      // projection coefficient
//! v_par = alpha * u                        // parallel part
//! v_perp = v - v_par                       // orthogonal part
//! cp = (omega_cons / omega_text) * alpha   // parallel strength ratio
//! ```
//!
//! `eps_proj` keeps locations with a vanishing text direction well-defined:
//! there the projection (and `cp`) is zero and the whole consistency vector
//! counts as orthogonal.

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, ScalarField};

/// Strengths of the text-guidance and consistency-guidance terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceScales {
    pub omega_text: f64,
    pub omega_cons: f64,
}

impl Default for GuidanceScales {
    /// The defaults used throughout: text guidance 7.5, consistency 3.0.
    fn default() -> Self {
        GuidanceScales {
            omega_text: 7.5,
            omega_cons: 3.0,
        }
    }
}

impl GuidanceScales {
    pub fn new(omega_text: f64, omega_cons: f64) -> Result<Self> {
        let scales = GuidanceScales {
            omega_text,
            omega_cons,
        };
        scales.validate()?;
        Ok(scales)
    }

    /// Scales must be finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("omega_text", self.omega_text), ("omega_cons", self.omega_cons)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidScales(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Numerical guards for the rescaling pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescaleConstants {
    /// Added to the deviation when standardizing the `cp` field, so constant
    /// fields standardize to zero instead of dividing by zero.
    pub eps_std: f64,
    /// Added to `|u|^2` in the projection denominator, so locations with a
    /// vanishing text direction project to zero.
    pub eps_proj: f64,
}

impl Default for RescaleConstants {
    fn default() -> Self {
        RescaleConstants {
            eps_std: 3e-8,
            eps_proj: 1e-12,
        }
    }
}

impl RescaleConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_std", self.eps_std), ("eps_proj", self.eps_proj)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidScales(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Text-guidance direction: conditional minus unconditional base prediction.
pub fn text_guidance(eps_cond: &LatentGrid, eps_uncond: &LatentGrid) -> Result<LatentGrid> {
    eps_cond.sub(eps_uncond)
}

/// Classifier-free guided prediction:
/// `eps_uncond + omega_text * text`.
pub fn cfg_prediction(
    eps_uncond: &LatentGrid,
    text: &LatentGrid,
    scales: &GuidanceScales,
) -> Result<LatentGrid> {
    scales.validate()?;
    text.axpy(scales.omega_text, eps_uncond)
}

/// Consistency direction: personalized conditional minus base conditional.
pub fn consistency_guidance(
    eps_personalized_cond: &LatentGrid,
    eps_base_cond: &LatentGrid,
) -> Result<LatentGrid> {
    eps_personalized_cond.sub(eps_base_cond)
}

/// Consistency-guided prediction:
/// `eps_uncond + omega_text * text + omega_cons * consistency`.
pub fn cg_prediction(
    eps_uncond: &LatentGrid,
    text: &LatentGrid,
    consistency: &LatentGrid,
    scales: &GuidanceScales,
) -> Result<LatentGrid> {
    scales.validate()?;
    let cfg = text.axpy(scales.omega_text, eps_uncond)?;
    consistency.axpy(scales.omega_cons, &cfg)
}

/// Per-location projection coefficients of `consistency` onto `text`.
fn projection_coefficients(
    consistency: &LatentGrid,
    text: &LatentGrid,
    eps_proj: f64,
) -> Result<Vec<f64>> {
    if consistency.shape() != text.shape() {
        return Err(Error::ShapeMismatch {
            left: consistency.shape(),
            right: text.shape(),
        });
    }
    Ok(consistency
        .locations()
        .zip(text.locations())
        .map(|(v, u)| {
            let num: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            let den: f64 = u.iter().map(|b| b * b).sum::<f64>() + eps_proj;
            num / den
        })
        .collect())
}

/// Splits the consistency direction, per spatial location, into a component
/// parallel to the text direction and the orthogonal remainder.
///
/// Returns `(parallel, orthogonal)` with `parallel + orthogonal`
/// reconstructing `consistency` exactly up to rounding. Locations where the
/// text direction vanishes contribute a zero parallel part; the guard
/// `eps_proj` in the denominator makes that case ordinary arithmetic rather
/// than a special branch.
pub fn decompose(
    consistency: &LatentGrid,
    text: &LatentGrid,
    consts: &RescaleConstants,
) -> Result<(LatentGrid, LatentGrid)> {
    consts.validate()?;
    let alphas = projection_coefficients(consistency, text, consts.eps_proj)?;
    let shape = text.shape();
    let field = ScalarField::from_vec(shape.width, shape.height, alphas)?;
    let parallel = text.mul_field(&field)?;
    let orthogonal = consistency.sub(&parallel)?;
    Ok((parallel, orthogonal))
}

/// The per-location parallel strength ratio `cp`.
///
/// `cp(w, h)` measures how strongly the consistency term, at its working
/// scale `omega_cons`, pushes along the text-guidance term at its working
/// scale `omega_text`:
///
/// ```text
/// cp(w, h) = (omega_cons / omega_text) * alpha(w, h)
/// ```
///
/// where `alpha` is the projection coefficient of the consistency direction
/// onto the text direction. For locations where every text channel is
/// nonzero this equals the channel-wise mean of the elementwise ratio
/// `(omega_cons * parallel) / (omega_text * text)`.
///
/// # Errors
///
/// `omega_text` must be positive: the ratio is relative to the text term, so
/// it is undefined when text guidance is off.
pub fn consistency_p(
    consistency: &LatentGrid,
    text: &LatentGrid,
    scales: &GuidanceScales,
    consts: &RescaleConstants,
) -> Result<ScalarField> {
    scales.validate()?;
    consts.validate()?;
    if scales.omega_text == 0.0 {
        return Err(Error::InvalidScales(
            "consistency_p requires omega_text > 0".into(),
        ));
    }
    let ratio = scales.omega_cons / scales.omega_text;
    let alphas = projection_coefficients(consistency, text, consts.eps_proj)?;
    let shape = text.shape();
    ScalarField::from_vec(
        shape.width,
        shape.height,
        alphas.into_iter().map(|a| ratio * a).collect(),
    )
}

/// Shifts and scales a field to zero mean and unit deviation.
///
/// Uses population statistics over all locations; the guarded denominator
/// `sigma + eps_std` sends constant fields (including single-location
/// fields, whose deviation is zero) to all-zero output instead of NaN.
pub fn standardize_field(field: &ScalarField, eps_std: f64) -> ScalarField {
    // Exactly constant inputs short-circuit: summing n equal values need
    // not round back to n times the value, and the all-zero promise for
    // constant fields should not hinge on that.
    if field.data().windows(2).all(|w| w[0] == w[1]) {
        return field.map(|_| 0.0);
    }
    let (mean, std) = field.mean_std();
    let den = std + eps_std;
    field.map(|v| (v - mean) / den)
}

/// A fully worked guidance decomposition for one sampling step.
///
/// Bundles the two guidance directions with their per-location split and the
/// `cp` statistics, so the prediction combiners and the trace writer agree
/// on one set of numbers.
#[derive(Clone, Debug)]
pub struct GuidanceDecomposition {
    /// Text-guidance direction (base conditional minus base unconditional).
    pub text: LatentGrid,
    /// Consistency direction (personalized minus base, both conditional).
    pub consistency: LatentGrid,
    /// Component of `consistency` parallel to `text`, per location.
    pub parallel: LatentGrid,
    /// `consistency - parallel`.
    pub orthogonal: LatentGrid,
    /// Per-location parallel strength ratio.
    pub cp: ScalarField,
    /// Population mean of `cp`.
    pub cp_mean: f64,
    /// Population deviation of `cp`.
    pub cp_std: f64,
}

impl GuidanceDecomposition {
    /// Decomposes a (text, consistency) pair under the given scales.
    ///
    /// # Errors
    ///
    /// Shape mismatches, invalid scales or constants, and `omega_text == 0`
    /// (the `cp` ratio is relative to the text term) are rejected.
    pub fn new(
        text: LatentGrid,
        consistency: LatentGrid,
        scales: &GuidanceScales,
        consts: &RescaleConstants,
    ) -> Result<Self> {
        let (parallel, orthogonal) = decompose(&consistency, &text, consts)?;
        let cp = consistency_p(&consistency, &text, scales, consts)?;
        let (cp_mean, cp_std) = cp.mean_std();
        Ok(GuidanceDecomposition {
            text,
            consistency,
            parallel,
            orthogonal,
            cp,
            cp_mean,
            cp_std,
        })
    }
}

/// The parallel-rescaled consistency direction.
///
/// Replaces the raw parallel component with the standardized `cp` field
/// re-applied along the text direction:
///
/// ```text
/// rescaled = orthogonal
///          + (omega_text / omega_cons) * standardize(cp) .* text
/// ```
///
/// (`.*` multiplies each location's channel vector by the field value
/// there.) For `omega_cons == 0` the consistency term is inert and the
/// function returns the orthogonal part unchanged; the prediction path never
/// forms the `omega_text / omega_cons` quotient, so zero is a valid scale
/// there.
///
/// # Errors
///
/// `omega_text == 0` is rejected, as are invalid scales or constants.
pub fn parallel_rescale(
    decomp: &GuidanceDecomposition,
    scales: &GuidanceScales,
    consts: &RescaleConstants,
) -> Result<LatentGrid> {
    scales.validate()?;
    consts.validate()?;
    if scales.omega_text == 0.0 {
        return Err(Error::InvalidScales(
            "parallel_rescale requires omega_text > 0".into(),
        ));
    }
    if scales.omega_cons == 0.0 {
        return Ok(decomp.orthogonal.clone());
    }
    let standardized = standardize_field(&decomp.cp, consts.eps_std);
    let along_text = decomp.text.mul_field(&standardized)?;
    along_text.axpy(scales.omega_text / scales.omega_cons, &decomp.orthogonal)
}

/// Final noise prediction with parallel-rescaled consistency guidance.
///
/// Algebraically this is `eps_uncond + omega_text * text + omega_cons *
/// rescaled`, but it is evaluated in expanded form,
///
/// ```text
/// eps_uncond + omega_text * text
///            + omega_cons * orthogonal
///            + omega_text * (standardize(cp) .* text)
/// ```
///
/// which never divides by `omega_cons`. At `omega_cons == 0` the `cp` field
/// is identically zero and the result reduces exactly to [`cfg_prediction`].
///
/// # Arguments
///
/// * `eps_uncond` - unconditional base prediction for this step.
/// * `decomp` - the step's guidance decomposition; its `text` grid is the
///   text-guidance direction the combination uses.
/// * `scales`, `consts` - working scales and numerical guards; they should
///   be the ones the decomposition was built with.
///
/// # Errors
///
/// Shape mismatches and scale domain errors, including `omega_text == 0`.
pub fn pr_prediction(
    eps_uncond: &LatentGrid,
    decomp: &GuidanceDecomposition,
    scales: &GuidanceScales,
    consts: &RescaleConstants,
) -> Result<LatentGrid> {
    scales.validate()?;
    consts.validate()?;
    if scales.omega_text == 0.0 {
        return Err(Error::InvalidScales(
            "pr_prediction requires omega_text > 0".into(),
        ));
    }
    let standardized = standardize_field(&decomp.cp, consts.eps_std);
    let with_text = decomp.text.axpy(scales.omega_text, eps_uncond)?;
    let with_orthogonal = decomp.orthogonal.axpy(scales.omega_cons, &with_text)?;
    decomp
        .text
        .mul_field(&standardized)?
        .axpy(scales.omega_text, &with_orthogonal)
}
