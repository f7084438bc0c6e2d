//! Synthetic data generation, noise injection, missing-data masks, and
//! the evaluation metrics (RSE, PSNR, SSIM and their per-band means).
//!
//! All randomness flows through seeded ChaCha8 streams, so every value
//! here is reproducible across platforms given the seed.

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DenseTensor, MaskTensor, TTCores, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("ranks {0:?} are not valid interface ranks")]
    BadRanks(Vec<usize>),
    #[error("missing rate {0} out of range [0, 1)")]
    BadMissingRate(f64),
    #[error("mask has no observed entries")]
    EmptyMask,
    #[error("signal tensor has zero norm")]
    ZeroSignal,
    #[error("reference has empty dynamic range")]
    ZeroRange,
    #[error("metric needs 2-D or 3-D (bands last) inputs, got order {0}")]
    BadMetricOrder(usize),
    #[error("stripe masks need order >= 2, got {0}")]
    BadStripeOrder(usize),
}

/// Recipe for a synthetic low-rank tensor: cores drawn elementwise from
/// the standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), HarnessError> {
        let d = self.dims.len();
        let ok = d >= 1
            && self.ranks.len() == d + 1
            && self.ranks[0] == 1
            && self.ranks[d] == 1
            && self.ranks.iter().all(|&r| r >= 1);
        if !ok {
            return Err(HarnessError::BadRanks(self.ranks.clone()));
        }
        Ok(())
    }
}

/// Draw the cores and contract them into the ground-truth tensor.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(DenseTensor, TTCores), HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cores = Vec::with_capacity(spec.dims.len());
    for (i, &j_dim) in spec.dims.iter().enumerate() {
        let (la, lb) = (spec.ranks[i], spec.ranks[i + 1]);
        let mut core = Array3::zeros((la, lb, j_dim));
        for k in 0..la {
            for l in 0..lb {
                for j in 0..j_dim {
                    core[[k, l, j]] = StandardNormal.sample(&mut rng);
                }
            }
        }
        cores.push(core);
    }
    let cores = TTCores::new(cores)?;
    Ok((cores.contract(), cores))
}

/// Add white Gaussian noise scaled so the realized
/// `20 log10(||signal|| / ||noise||)` equals `snr_db` exactly.
/// `snr_db = f64::INFINITY` adds no noise.
pub fn add_noise(
    t: &DenseTensor,
    snr_db: f64,
    seed: u64,
) -> Result<(DenseTensor, DenseTensor), HarnessError> {
    if snr_db == f64::INFINITY {
        let zero = DenseTensor::zeros(t.dims().to_vec())?;
        return Ok((t.clone(), zero));
    }
    let signal_norm = t.frobenius_norm();
    if signal_norm == 0.0 {
        return Err(HarnessError::ZeroSignal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<f64> = (0..t.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let raw_norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target_norm = signal_norm / 10f64.powf(snr_db / 20.0);
    let scale = target_norm / raw_norm;
    noise.iter_mut().for_each(|x| *x *= scale);
    let noisy: Vec<f64> = t.data().iter().zip(&noise).map(|(a, w)| a + w).collect();
    Ok((
        DenseTensor::new(t.dims().to_vec(), noisy)?,
        DenseTensor::new(t.dims().to_vec(), noise)?,
    ))
}

/// Add white Gaussian noise with a fixed per-element variance.
pub fn add_noise_with_variance(
    t: &DenseTensor,
    variance: f64,
    seed: u64,
) -> Result<(DenseTensor, DenseTensor), HarnessError> {
    let sd = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..t.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    let noisy: Vec<f64> = t.data().iter().zip(&noise).map(|(a, w)| a + w).collect();
    Ok((
        DenseTensor::new(t.dims().to_vec(), noisy)?,
        DenseTensor::new(t.dims().to_vec(), noise)?,
    ))
}

/// Independent Bernoulli mask: each entry observed with probability
/// `1 - missing_rate`. Errors when nothing ends up observed.
pub fn random_mask(dims: &[usize], missing_rate: f64, seed: u64) -> Result<MaskTensor, HarnessError> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(HarnessError::BadMissingRate(missing_rate));
    }
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = Bernoulli::new(1.0 - missing_rate).expect("rate validated");
    let bits: Vec<u8> = (0..n).map(|_| u8::from(keep.sample(&mut rng))).collect();
    let m = MaskTensor::new(dims.to_vec(), bits)?;
    if m.observed_count() == 0 {
        return Err(HarnessError::EmptyMask);
    }
    Ok(m)
}

/// Vertical stripe pattern: column `c` is missing (in every row and band)
/// when `(c - offset) mod period < width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripeSpec {
    pub period: usize,
    pub width: usize,
    /// `None` derives the offset from the seed.
    pub offset: Option<usize>,
}

pub fn stripe_mask(dims: &[usize], spec: &StripeSpec, seed: u64) -> Result<MaskTensor, HarnessError> {
    if dims.len() < 2 {
        return Err(HarnessError::BadStripeOrder(dims.len()));
    }
    if spec.period == 0 || spec.width >= spec.period {
        return Err(HarnessError::BadMissingRate(spec.width as f64));
    }
    let offset = spec
        .offset
        .unwrap_or_else(|| ChaCha8Rng::seed_from_u64(seed).random_range(0..spec.period));
    let rows = dims[0];
    let n: usize = dims.iter().product();
    let mut bits = vec![1u8; n];
    for (flat, bit) in bits.iter_mut().enumerate() {
        let c = (flat / rows) % dims[1];
        if (c + spec.period - offset % spec.period) % spec.period < spec.width {
            *bit = 0;
        }
    }
    let m = MaskTensor::new(dims.to_vec(), bits)?;
    if m.observed_count() == 0 {
        return Err(HarnessError::EmptyMask);
    }
    Ok(m)
}

/// `||truth - estimate||_F / ||truth||_F`.
pub fn rse(truth: &DenseTensor, estimate: &DenseTensor) -> Result<f64, HarnessError> {
    truth.same_dims(estimate)?;
    let denom = truth.frobenius_norm();
    if denom == 0.0 {
        return Err(HarnessError::ZeroSignal);
    }
    let num: f64 = truth
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Peak signal-to-noise ratio in dB:
/// `20 log10(max(reference) * sqrt(numel) / ||reference - estimate||_F)`.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(reference: &DenseTensor, estimate: &DenseTensor) -> Result<f64, HarnessError> {
    reference.same_dims(estimate)?;
    let peak = reference.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(HarnessError::ZeroRange);
    }
    let err: f64 = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak * (reference.len() as f64).sqrt() / err).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let (h, w) = img.dim();
    let vh = h + 1 - SSIM_WINDOW;
    let vw = w + 1 - SSIM_WINDOW;
    let mut rows = Array2::zeros((h, vw));
    for r in 0..h {
        for c in 0..vw {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[r, c + i]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((vh, vw));
    for r in 0..vh {
        for c in 0..vw {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[[r + i, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

fn ssim_band(a: &Array2<f64>, b: &Array2<f64>, range: f64) -> f64 {
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mu_a = filter_valid(a);
    let mu_b = filter_valid(b);
    let aa = filter_valid(&(a * a));
    let bb = filter_valid(&(b * b));
    let ab = filter_valid(&(a * b));
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&ma, &mb), ((&saa, &sbb), &sab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
        count += 1;
    }
    total / count as f64
}

fn bands_of(t: &DenseTensor) -> Result<Vec<Array2<f64>>, HarnessError> {
    let dims = t.dims();
    let (h, w, nb) = match dims.len() {
        2 => (dims[0], dims[1], 1),
        3 => (dims[0], dims[1], dims[2]),
        other => return Err(HarnessError::BadMetricOrder(other)),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(HarnessError::BadMetricOrder(dims.len()));
    }
    let mut out = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut band = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let idx: Vec<usize> = if dims.len() == 2 { vec![r, c] } else { vec![r, c, b] };
                band[[r, c]] = t.get(&idx);
            }
        }
        out.push(band);
    }
    Ok(out)
}

/// Mean structural similarity over an 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03), averaged over bands. The dynamic
/// range is the maximum over both inputs, which keeps the measure
/// symmetric in its arguments.
pub fn ssim(a: &DenseTensor, b: &DenseTensor) -> Result<f64, HarnessError> {
    a.same_dims(b)?;
    let range = a
        .data()
        .iter()
        .chain(b.data())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(range > 0.0) {
        return Err(HarnessError::ZeroRange);
    }
    let ba = bands_of(a)?;
    let bb = bands_of(b)?;
    let mean = ba
        .iter()
        .zip(&bb)
        .map(|(x, y)| ssim_band(x, y, range))
        .sum::<f64>()
        / ba.len() as f64;
    Ok(mean)
}

/// Metric bundle for a reconstruction against its reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_bands: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_bands: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpsnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mssim: Option<f64>,
}

impl MetricReport {
    /// RSE always; image metrics when the inputs are 2-D or 3-D with
    /// bands last (per-band PSNR/SSIM use each band's own peak/range).
    pub fn compute(truth: &DenseTensor, estimate: &DenseTensor) -> Result<Self, HarnessError> {
        let rse_val = rse(truth, estimate)?;
        let mut report = MetricReport {
            rse: rse_val,
            psnr: None,
            ssim: None,
            psnr_bands: None,
            ssim_bands: None,
            mpsnr: None,
            mssim: None,
        };
        let order = truth.dims().len();
        if order == 2 || order == 3 {
            if let (Ok(pa), Ok(sa)) = (psnr(truth, estimate), ssim(truth, estimate)) {
                report.psnr = Some(pa);
                report.ssim = Some(sa);
            }
            if order == 3 {
                if let (Ok(ta), Ok(tb)) = (bands_of(truth), bands_of(estimate)) {
                    let mut psnrs = Vec::with_capacity(ta.len());
                    let mut ssims = Vec::with_capacity(ta.len());
                    let mut ok = true;
                    for (x, y) in ta.iter().zip(&tb) {
                        let tx = band_tensor(x);
                        let ty = band_tensor(y);
                        match (psnr(&tx, &ty), ssim(&tx, &ty)) {
                            (Ok(p), Ok(s)) => {
                                psnrs.push(p);
                                ssims.push(s);
                            }
                            _ => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if ok {
                        report.mpsnr = Some(psnrs.iter().sum::<f64>() / psnrs.len() as f64);
                        report.mssim = Some(ssims.iter().sum::<f64>() / ssims.len() as f64);
                        report.psnr_bands = Some(psnrs);
                        report.ssim_bands = Some(ssims);
                    }
                }
            }
        }
        Ok(report)
    }
}

fn band_tensor(band: &Array2<f64>) -> DenseTensor {
    let (h, w) = band.dim();
    let mut t = DenseTensor::zeros(vec![h, w]).expect("band dims positive");
    for c in 0..w {
        for r in 0..h {
            t.data_mut()[r + h * c] = band[[r, c]];
        }
    }
    t
}
