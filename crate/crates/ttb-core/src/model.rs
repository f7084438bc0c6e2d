//! Hierarchical model state: Gaussian core posteriors, Gamma precision
//! posteriors for the slice-sparsity variables and the noise, plus the
//! Monte-Carlo conjugacy check for the product-precision prior.
//!
//! Gamma distributions use the shape-rate parameterization throughout
//! (density `rate^shape * x^(shape-1) * exp(-rate*x) / Gamma(shape)`),
//! so `E[x] = shape / rate`.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist};
use thiserror::Error;

use crate::tensor::TTCores;

/// Floor applied to rates and variances before division, so that extreme
/// pruning regimes cannot produce infinities.
pub const RATE_FLOOR: f64 = 1e-12;

#[inline]
pub(crate) fn floored(x: f64) -> f64 {
    x.max(RATE_FLOOR)
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hyperparameters must be strictly positive")]
    BadHyper,
    #[error("state shape inconsistency: {0}")]
    Inconsistent(String),
}

/// Prior hyperparameters: one Gamma (shape, rate) pair per precision
/// variable at each interface, plus the noise pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorHyper {
    /// Shapes for interfaces `d = 2..=D`; entry `d-2` has length `L_d`.
    pub alpha: Vec<Vec<f64>>,
    /// Rates, same layout as `alpha`.
    pub beta: Vec<Vec<f64>>,
    pub alpha_tau: f64,
    pub beta_tau: f64,
}

impl PriorHyper {
    /// Non-informative prior: every hyperparameter `1e-6`.
    pub fn noninformative(ranks: &[usize]) -> Self {
        Self::uniform(ranks, 1e-6, 1e-6, 1e-6, 1e-6)
    }

    pub fn uniform(ranks: &[usize], alpha: f64, beta: f64, alpha_tau: f64, beta_tau: f64) -> Self {
        let inner = &ranks[1..ranks.len() - 1];
        Self {
            alpha: inner.iter().map(|&l| vec![alpha; l]).collect(),
            beta: inner.iter().map(|&l| vec![beta; l]).collect(),
            alpha_tau,
            beta_tau,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = |v: &f64| *v > 0.0;
        if !pos(&self.alpha_tau) || !pos(&self.beta_tau) {
            return Err(ModelError::BadHyper);
        }
        for v in self.alpha.iter().chain(self.beta.iter()) {
            if !v.iter().all(pos) {
                return Err(ModelError::BadHyper);
            }
        }
        Ok(())
    }
}

/// Scalar values used to materialize a [`PriorHyper`] once initial ranks
/// are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorValues {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_tau: f64,
    pub beta_tau: f64,
}

impl Default for PriorValues {
    fn default() -> Self {
        Self { alpha: 1e-6, beta: 1e-6, alpha_tau: 1e-6, beta_tau: 1e-6 }
    }
}

/// Elementwise Gaussian posterior over one core: means and variances with
/// the core's `(L_d, L_{d+1}, J_d)` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CorePosterior {
    pub mean: Array3<f64>,
    pub var: Array3<f64>,
}

impl CorePosterior {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.mean.dim()
    }

    pub fn mean_slice(&self, j: usize) -> ArrayView2<'_, f64> {
        self.mean.slice(s![.., .., j])
    }

    pub fn var_slice(&self, j: usize) -> ArrayView2<'_, f64> {
        self.var.slice(s![.., .., j])
    }

    /// `E[g^2] = mean^2 + var` for one element.
    pub fn second_moment(&self, k: usize, l: usize, j: usize) -> f64 {
        let m = self.mean[[k, l, j]];
        m * m + self.var[[k, l, j]]
    }
}

/// Expected Kronecker square of one frontal slice:
/// `E[g (x) g] = E[g] (x) E[g] + v`, where `v` is block sparse with the
/// variance of element `(k, l)` at row `k*L + k`, column `l*L' + l`.
pub fn expected_kron_slice(core: &CorePosterior, j: usize) -> Array2<f64> {
    let (l_left, l_right, _) = core.shape();
    let mean = core.mean_slice(j);
    let mut out = crate::tensor::kron(mean, mean);
    for k in 0..l_left {
        for l in 0..l_right {
            out[[k * l_left + k, l * l_right + l]] += core.var[[k, l, j]];
        }
    }
    out
}

/// Independent Gamma posteriors for the precision variables at one
/// interface.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPosterior {
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
}

impl LambdaPosterior {
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn expected(&self) -> Vec<f64> {
        self.shape
            .iter()
            .zip(&self.rate)
            .map(|(&a, &b)| a / floored(b))
            .collect()
    }
}

/// Gamma posterior for the noise precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl TauPosterior {
    pub fn expected(&self) -> f64 {
        self.shape / floored(self.rate)
    }
}

/// Full variational state of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub cores: Vec<CorePosterior>,
    /// One posterior per interface `d = 2..=D` (index `d-2`). The boundary
    /// precisions at interfaces `1` and `D+1` are the constant `1` and are
    /// never stored or updated.
    pub lambdas: Vec<LambdaPosterior>,
    pub tau: TauPosterior,
    pub prior: PriorHyper,
}

impl ModelState {
    pub fn order(&self) -> usize {
        self.cores.len()
    }

    /// Mode sizes `J_1..J_D`.
    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape().2).collect()
    }

    /// Interface ranks `L_1..L_{D+1}`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cores.iter().map(|c| c.shape().0).collect();
        r.push(self.cores.last().map_or(1, |c| c.shape().1));
        r
    }

    /// `E[lambda]` at interface `d` (1-based, `1..=D+1`); the boundary
    /// interfaces are the constant 1.
    pub fn expected_lambda(&self, d: usize) -> Vec<f64> {
        if d == 1 || d == self.order() + 1 {
            vec![1.0]
        } else {
            self.lambdas[d - 2].expected()
        }
    }

    /// Posterior-mean cores as a deterministic tensor train.
    pub fn mean_cores(&self) -> TTCores {
        TTCores::new(self.cores.iter().map(|c| c.mean.clone()).collect())
            .expect("state cores are shape consistent")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.prior.validate()?;
        let d = self.order();
        if self.lambdas.len() + 1 != d.max(1) {
            return Err(ModelError::Inconsistent(format!(
                "expected {} lambda interfaces, got {}",
                d.saturating_sub(1),
                self.lambdas.len()
            )));
        }
        let ranks = self.ranks();
        if ranks[0] != 1 || ranks[d] != 1 {
            return Err(ModelError::Inconsistent("boundary ranks must be 1".into()));
        }
        for (i, c) in self.cores.iter().enumerate() {
            if c.mean.dim() != c.var.dim() {
                return Err(ModelError::Inconsistent(format!("core {i} mean/var shape")));
            }
            if i + 1 < d && c.shape().1 != self.cores[i + 1].shape().0 {
                return Err(ModelError::Inconsistent(format!("core {i} interface rank")));
            }
            if !c.var.iter().all(|&v| v > 0.0) {
                return Err(ModelError::Inconsistent(format!("core {i} variance <= 0")));
            }
            if !c.mean.iter().all(|v| v.is_finite()) {
                return Err(ModelError::Inconsistent(format!("core {i} non-finite mean")));
            }
        }
        for (i, lam) in self.lambdas.iter().enumerate() {
            let want = ranks[i + 1];
            if lam.len() != want {
                return Err(ModelError::Inconsistent(format!("lambda {i} length")));
            }
            if !lam.shape.iter().chain(&lam.rate).all(|&x| x > 0.0) {
                return Err(ModelError::Inconsistent(format!("lambda {i} nonpositive")));
            }
        }
        if self.tau.shape <= 0.0 || self.tau.rate <= 0.0 {
            return Err(ModelError::Inconsistent("tau nonpositive".into()));
        }
        Ok(())
    }
}

/// Outcome of the importance-sampling check of the conditional-conjugacy
/// identity for the product-precision prior.
#[derive(Debug, Clone, Copy)]
pub struct ConjugacyCheck {
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub analytic_mean: f64,
    pub analytic_var: f64,
    /// Monte-Carlo standard error of the weighted mean estimate.
    pub stderr_mean: f64,
    /// Monte-Carlo standard error of the weighted variance estimate.
    pub stderr_var: f64,
}

/// Check that `p(l1 | x, l2)` is the Gamma with shape `a1 + 1/2` and rate
/// `l2 x^2 / 2 + b1`.
///
/// Draws from that analytic Gamma as a proposal and importance-weights the
/// samples by the joint density of `(x, l1, l2)`, so the weighted moments
/// estimate the moments of the true conditional regardless of whether the
/// analytic claim holds. Under the claim the weights are constant and the
/// estimates collapse to plain Monte-Carlo moments of the proposal.
pub fn conjugacy_oracle(
    x: f64,
    lambda2: f64,
    hyper: [f64; 4],
    n_samples: usize,
    seed: u64,
) -> Result<ConjugacyCheck, ModelError> {
    let [a1, b1, _a2, _b2] = hyper;
    if a1 <= 0.0 || b1 <= 0.0 || lambda2 <= 0.0 {
        return Err(ModelError::BadHyper);
    }
    let shape = a1 + 0.5;
    let rate = lambda2 * x * x / 2.0 + b1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // rand_distr parameterizes Gamma by (shape, scale); scale = 1 / rate.
    let proposal = GammaDist::new(shape, 1.0 / rate).map_err(|_| ModelError::BadHyper)?;

    // log joint in l1 up to terms constant in l1:
    //   (a1 - 1/2) ln l1 - (l1 l2 x^2 / 2 + b1 l1)
    // log proposal density up to constants:
    //   (shape - 1) ln l1 - rate l1
    // Under the claim these differ by a constant, so weights are flat.
    let log_w = |l1: f64| -> f64 {
        let joint = (a1 - 0.5) * l1.ln() - (l1 * lambda2 * x * x / 2.0 + b1 * l1);
        let prop = (shape - 1.0) * l1.ln() - rate * l1;
        joint - prop
    };

    let mut samples = Vec::with_capacity(n_samples);
    let mut logs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let l1: f64 = proposal.sample(&mut rng);
        samples.push(l1);
        logs.push(log_w(l1));
    }
    let max_log = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max_log).exp()).collect();
    let wsum: f64 = weights.iter().sum();

    let mean: f64 = samples.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>() / wsum;
    let var: f64 = samples
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * (s - mean) * (s - mean))
        .sum::<f64>()
        / wsum;

    // Effective sample size accounts for weight spread.
    let w2sum: f64 = weights.iter().map(|w| w * w).sum();
    let ess = wsum * wsum / w2sum;
    let stderr_mean = (var / ess).sqrt();
    // Var of the variance estimate via the fourth central moment.
    let m4: f64 = samples
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * (s - mean).powi(4))
        .sum::<f64>()
        / wsum;
    let stderr_var = ((m4 - var * var).max(0.0) / ess).sqrt();

    Ok(ConjugacyCheck {
        empirical_mean: mean,
        empirical_var: var,
        analytic_mean: shape / rate,
        analytic_var: shape / (rate * rate),
        stderr_mean,
        stderr_var,
    })
}

/// Unnormalized log density of a horizontal core slice under the
/// limiting sparsity prior: each length-`j_dim` fiber contributes
/// `-(j_dim/2) * ln(sum of squares)`. Rows of `slice` index the fibers.
/// A fiber with zero energy makes the density singular and returns
/// negative infinity.
pub fn slice_prior_log_density(slice: ArrayView2<f64>, j_dim: usize) -> f64 {
    let mut total = 0.0;
    for row in slice.rows() {
        let energy: f64 = row.iter().map(|x| x * x).sum();
        if energy <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total -= j_dim as f64 / 2.0 * energy.ln();
    }
    total
}
