//! Image completion round trip: fold the observed image and its mask,
//! standardize the working scale, fit, and unfold the reconstruction.
//!
//! The standardization step matters. The posterior starts from unit
//! per-element variances, so the folded data must be scaled until the
//! balanced initial cores carry per-element magnitudes comfortably above
//! that unit noise; otherwise the first sweep of a deep chain shrinks
//! every core toward zero and the fit settles at the empty model. The
//! scale is computed from the folding geometry and the observed energy,
//! applied before the fit, and divided back out of the reconstruction.

use thiserror::Error;

use crate::augment::{augment, augment_mask, deaugment, AugmentError, AugmentPlan};
use crate::engine::{fit, reconstruct, FitError, FitOptions, FitReport};
use crate::harness::HarnessError;
use crate::image::ImageBuf;
use crate::model::{ModelState, PriorValues};
use crate::tensor::{DenseTensor, MaskTensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("observed image has no energy")]
    EmptyImage,
}

pub struct ImageFitOutcome {
    pub image: ImageBuf,
    pub report: FitReport,
    pub state: ModelState,
    /// Multiplier applied to the folded data before the fit.
    pub working_scale: f64,
}

/// Per-element magnitude the balanced initial cores should reach.
const TARGET_CORE_SCALE: f64 = 3.0;

/// Feasibility- and cap-clamped interface ranks for a mode-size list,
/// mirroring the initializer's rank rule for a generic (full-rank) fill.
fn capped_ranks(dims: &[usize], multiplier: usize) -> Vec<usize> {
    let d = dims.len();
    let mut ranks = vec![1usize; d + 1];
    for i in 1..d {
        ranks[i] = multiplier * dims[i];
    }
    for i in 1..d {
        let tail: usize = dims[i..].iter().product();
        ranks[i] = ranks[i].min(ranks[i - 1] * dims[i - 1]).min(tail);
    }
    for i in (1..d).rev() {
        ranks[i] = ranks[i].min(ranks[i + 1] * dims[i]);
    }
    ranks
}

/// Scale that brings the geometric-mean per-element magnitude of the
/// balanced initial cores to [`TARGET_CORE_SCALE`].
pub fn working_scale(dims: &[usize], multiplier: usize, observed: &DenseTensor, mask: &MaskTensor) -> f64 {
    let d = dims.len() as f64;
    let ranks = capped_ranks(dims, multiplier);
    let log_prod_sqrt_counts: f64 = (0..dims.len())
        .map(|i| 0.5 * ((ranks[i] * ranks[i + 1] * dims[i]) as f64).ln())
        .sum();
    // norm of the filled tensor: observed energy plus unit-variance fill
    let obs_energy: f64 = observed
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &b)| b == 1)
        .map(|(&v, _)| v * v)
        .sum();
    let missing = (mask.len() - mask.observed_count()) as f64;
    let norm = (obs_energy + missing).sqrt().max(1e-12);
    (d * TARGET_CORE_SCALE.ln() + log_prod_sqrt_counts - norm.ln()).exp()
}

/// Complete a partially observed image through a folding plan.
pub fn complete_image(
    observed: &ImageBuf,
    mask: Option<&ImageBuf>,
    plan: &AugmentPlan,
    prior: PriorValues,
    opts: &FitOptions,
) -> Result<ImageFitOutcome, PipelineError> {
    let tensor = augment(observed, plan)?;
    let mask_t = match mask {
        Some(m) => augment_mask(m, plan)?,
        None => MaskTensor::all_observed(tensor.dims().to_vec())?,
    };
    if tensor.data().iter().zip(mask_t.bits()).all(|(&v, &b)| b == 0 || v == 0.0) {
        return Err(PipelineError::EmptyImage);
    }

    let scale = working_scale(tensor.dims(), opts.init.rank_cap_multiplier, &tensor, &mask_t);
    let scaled = DenseTensor::new(
        tensor.dims().to_vec(),
        tensor.data().iter().map(|v| v * scale).collect(),
    )?;
    // deep chains need the initial core magnitudes spread evenly
    let mut opts = opts.clone();
    opts.init.balance_cores = true;
    let outcome = fit(&scaled, &mask_t, prior, &opts)?;

    let mut recon = reconstruct(&outcome.state);
    recon.data_mut().iter_mut().for_each(|v| *v /= scale);
    let image = deaugment(&recon, plan)?;
    Ok(ImageFitOutcome {
        image,
        report: outcome.report,
        state: outcome.state,
        working_scale: scale,
    })
}
