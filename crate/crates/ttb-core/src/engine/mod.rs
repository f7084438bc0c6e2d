//! Mean-field coordinate-ascent loop: per-core Gaussian updates, Gamma
//! updates for the interface precisions and the noise precision, rank
//! pruning, and convergence control.
//!
//! A core update assembles, per frontal-slice index, the normal equations
//! of the expected quadratic likelihood restricted to that slice. The
//! diagonal of the system gives the closed-form posterior variances; the
//! solved means are the joint fixed point of the per-fiber coordinate
//! updates, so applying the same update twice is a no-op and every fiber
//! factor is optimal given all other factors.

mod chains;
mod solve;

use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::init::{self, InitConfig, InitError};
use crate::model::{floored, ModelState, PriorValues};
use crate::tensor::{DenseTensor, MaskTensor, TensorError};

use chains::{accumulate_rhs_only, accumulate_slice_systems, ChainTable, EntrySet, SumChain};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error("invalid options: {0}")]
    BadOptions(String),
    #[error("mask has no observed entries")]
    EmptyMask,
    #[error("non-finite value in {context} at iteration {iteration}")]
    NonFinite { iteration: usize, context: String },
    #[error("noise precision update produced a nonpositive rate")]
    NonpositiveRate,
    #[error("observed fraction {got:.4} below fast-path threshold {want:.4}")]
    FastPathUnavailable { got: f64, want: f64 },
    #[error("slice solve failed: {0}")]
    Solve(String),
}

/// Knobs for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Convergence threshold on the relative change of the masked
    /// reconstruction between sweeps.
    pub rel_tol: f64,
    /// An interface index is pruned when its expected precision exceeds
    /// `prune_ratio` times the smallest one at that interface.
    pub prune_ratio: f64,
    /// Observed fraction at or above which the product-of-sums evaluation
    /// of the quadratic weights is used; values above 1 disable it.
    pub fast_path_observed_fraction: f64,
    /// Seed for the standard-normal fill of missing entries.
    pub seed: u64,
    /// Worker threads for the data-parallel parts; results are
    /// bit-identical for any thread count.
    pub threads: usize,
    /// Initial-decomposition options; `fill_seed` is overridden by `seed`.
    pub init: InitConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-6,
            prune_ratio: 100.0,
            fast_path_observed_fraction: 0.9,
            seed: 0,
            threads: 1,
            init: InitConfig::default(),
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.max_iters == 0 {
            return Err(FitError::BadOptions("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(FitError::BadOptions("rel_tol must be positive".into()));
        }
        if !(self.prune_ratio > 1.0) {
            return Err(FitError::BadOptions("prune_ratio must exceed 1".into()));
        }
        if self.init.rank_cap_multiplier == 0 {
            return Err(FitError::BadOptions("rank_cap_multiplier must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Interface ranks after each iteration; non-increasing componentwise.
    pub ranks_history: Vec<Vec<usize>>,
    /// Relative residual on the observed entries after each iteration.
    pub rse_history: Vec<f64>,
    /// Expected noise precision after each iteration.
    pub e_tau_history: Vec<f64>,
    /// Final expected noise precision.
    pub e_tau: f64,
    pub iterations: usize,
    pub wall_time_ms: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// A fitted state plus its report.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: ModelState,
    pub report: FitReport,
}

#[derive(Clone, Copy, PartialEq)]
enum PathMode {
    Slow,
    FastFull,
    FastSub,
}

fn choose_path(fraction: f64, threshold: f64) -> PathMode {
    if fraction >= threshold {
        if fraction >= 1.0 {
            PathMode::FastFull
        } else {
            PathMode::FastSub
        }
    } else {
        PathMode::Slow
    }
}

/// One iteration's worth of contraction caches. Suffix tables are built
/// from the state at sweep start (cores to the right of the current one
/// are not touched until their own update); prefix tables are extended
/// with each freshly updated core.
struct Sweep {
    obs: EntrySet,
    mis: Option<EntrySet>,
    suffix_obs: Vec<ChainTable>,
    suffix_mis: Option<Vec<ChainTable>>,
    sum_suffix: Option<Vec<SumChain>>,
    prefix_obs: ChainTable,
    prefix_mis: Option<ChainTable>,
    sum_prefix: Option<SumChain>,
    path: PathMode,
}

impl Sweep {
    fn new(state: &ModelState, a: &DenseTensor, o: &MaskTensor, path: PathMode) -> Self {
        let d = state.order();
        let obs = EntrySet::observed(a, o);
        let slow = path == PathMode::Slow;

        let mut suffix_obs = Vec::with_capacity(d);
        suffix_obs.push(ChainTable::trivial(obs.n, slow));
        for i in (0..d - 1).rev() {
            let next = suffix_obs.last().unwrap().advanced_suffix(&obs, i + 1, &state.cores[i + 1]);
            suffix_obs.push(next);
        }
        suffix_obs.reverse();

        let (mis, suffix_mis) = if path == PathMode::FastSub {
            let mis = EntrySet::missing(o);
            let mut tables = Vec::with_capacity(d);
            tables.push(ChainTable::trivial(mis.n, true));
            for i in (0..d - 1).rev() {
                let next = tables.last().unwrap().advanced_suffix(&mis, i + 1, &state.cores[i + 1]);
                tables.push(next);
            }
            tables.reverse();
            (Some(mis), Some(tables))
        } else {
            (None, None)
        };

        let sum_suffix = (path != PathMode::Slow).then(|| {
            let mut sums = Vec::with_capacity(d);
            sums.push(SumChain::trivial());
            for i in (0..d - 1).rev() {
                let next = sums.last().unwrap().advanced_suffix(&state.cores[i + 1]);
                sums.push(next);
            }
            sums.reverse();
            sums
        });

        let prefix_obs = ChainTable::trivial(obs.n, slow);
        let prefix_mis = mis.as_ref().map(|m| ChainTable::trivial(m.n, true));
        let sum_prefix = (path != PathMode::Slow).then(SumChain::trivial);

        Sweep {
            obs,
            mis,
            suffix_obs,
            suffix_mis,
            sum_suffix,
            prefix_obs,
            prefix_mis,
            sum_prefix,
            path,
        }
    }

    /// Quadratic-weight matrices (`La^2 x Lb^2`, layout `[(k,k'),(l,l')]`)
    /// and data-weighted first moments per slice index of core `d0`.
    fn slice_systems(&self, state: &ModelState, d0: usize) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let j_dim = state.dims()[d0];
        match self.path {
            PathMode::Slow => {
                let sys = accumulate_slice_systems(
                    &self.obs,
                    d0,
                    j_dim,
                    &self.prefix_obs,
                    &self.suffix_obs[d0],
                    true,
                );
                (sys.h4, sys.r)
            }
            PathMode::FastFull | PathMode::FastSub => {
                let pre = self.sum_prefix.as_ref().unwrap();
                let suf = &self.sum_suffix.as_ref().unwrap()[d0];
                let la2 = pre.rank * pre.rank;
                let lb2 = suf.rank * suf.rank;
                let mut shared = Array2::zeros((la2, lb2));
                for p in 0..la2 {
                    for q in 0..lb2 {
                        shared[[p, q]] = pre.second[p] * suf.second[q];
                    }
                }
                let r = accumulate_rhs_only(&self.obs, d0, j_dim, &self.prefix_obs, &self.suffix_obs[d0]);
                let h4 = if self.path == PathMode::FastSub {
                    let sys = accumulate_slice_systems(
                        self.mis.as_ref().unwrap(),
                        d0,
                        j_dim,
                        self.prefix_mis.as_ref().unwrap(),
                        &self.suffix_mis.as_ref().unwrap()[d0],
                        false,
                    );
                    sys.h4.into_iter().map(|h| &shared - &h).collect()
                } else {
                    vec![shared; j_dim]
                };
                (h4, r)
            }
        }
    }

    /// Replace the posterior of core `d0` with the joint fixed point of
    /// its per-fiber updates given every other factor.
    fn update_core(&self, state: &mut ModelState, d0: usize) -> Result<(), FitError> {
        let (h4, r) = self.slice_systems(state, d0);
        let (la, lb, j_dim) = state.cores[d0].shape();
        let e_tau = state.tau.expected();
        let lam_left = state.expected_lambda(d0 + 1);
        let lam_right = state.expected_lambda(d0 + 2);
        let n = la * lb;
        let mut lam_diag = vec![0.0; n];
        for k in 0..la {
            for l in 0..lb {
                lam_diag[k * lb + l] = lam_left[k] * lam_right[l];
            }
        }

        let core = &state.cores[d0];
        let warm: Vec<Vec<f64>> = (0..j_dim)
            .map(|j| {
                let mut w = vec![0.0; n];
                for k in 0..la {
                    for l in 0..lb {
                        w[k * lb + l] = core.mean[[k, l, j]];
                    }
                }
                w
            })
            .collect();

        use rayon::prelude::*;
        let solved: Result<Vec<(Vec<f64>, Vec<f64>)>, FitError> = (0..j_dim)
            .into_par_iter()
            .map(|j| {
                let h = &h4[j];
                let mut var = vec![0.0; n];
                let mut rhs = vec![0.0; n];
                for k in 0..la {
                    for l in 0..lb {
                        let s = k * lb + l;
                        let diag = e_tau * h[[k * la + k, l * lb + l]] + lam_diag[s];
                        var[s] = 1.0 / floored(diag);
                        rhs[s] = e_tau * r[j][[k, l]];
                    }
                }
                let mean = solve_slice(h, e_tau, &lam_diag, &rhs, &warm[j], la, lb)
                    .map_err(FitError::Solve)?;
                if mean.iter().chain(var.iter()).any(|x| !x.is_finite()) {
                    return Err(FitError::NonFinite { iteration: 0, context: format!("core {d0}") });
                }
                Ok((mean, var))
            })
            .collect();
        let solved = solved?;

        let core = &mut state.cores[d0];
        for (j, (mean, var)) in solved.into_iter().enumerate() {
            for k in 0..la {
                for l in 0..lb {
                    core.mean[[k, l, j]] = mean[k * lb + l];
                    core.var[[k, l, j]] = var[k * lb + l];
                }
            }
        }
        Ok(())
    }

    /// Fold the (just updated) core `d0` into the running prefix chains.
    fn advance_prefix(&mut self, state: &ModelState, d0: usize) {
        self.prefix_obs = self.prefix_obs.advanced_prefix(&self.obs, d0, &state.cores[d0]);
        if let (Some(mis), Some(pre)) = (&self.mis, &mut self.prefix_mis) {
            *pre = pre.advanced_prefix(mis, d0, &state.cores[d0]);
        }
        if let Some(sum) = &mut self.sum_prefix {
            *sum = sum.advanced_prefix(&state.cores[d0]);
        }
    }

    /// Expected reconstruction on the observed entries. Valid once the
    /// prefix has been advanced through every core.
    fn predicted_means(&self) -> Vec<f64> {
        self.prefix_obs.per_entry_scalars(&self.obs).0
    }

    /// Expected squared residual on the observed entries:
    /// `sum_obs (a^2 - 2 a E[yhat] + E[yhat^2])`.
    fn expected_sq_residual(&self) -> f64 {
        let (means, seconds) = self.prefix_obs.per_entry_scalars(&self.obs);
        let second_sum = match self.path {
            PathMode::Slow => seconds.expect("slow path keeps second moments").iter().sum(),
            PathMode::FastFull => self.sum_prefix.as_ref().unwrap().second[0],
            PathMode::FastSub => {
                let all = self.sum_prefix.as_ref().unwrap().second[0];
                let (_, mis_second) = self
                    .prefix_mis
                    .as_ref()
                    .unwrap()
                    .per_entry_scalars(self.mis.as_ref().unwrap());
                all - mis_second.expect("missing chains keep second moments").iter().sum::<f64>()
            }
        };
        let mut acc = second_sum;
        for (e, &m) in means.iter().enumerate() {
            let a = self.obs.values[e];
            acc += a * a - 2.0 * a * m;
        }
        acc
    }

    fn update_tau(&self, state: &mut ModelState) -> Result<(), FitError> {
        let n_obs = self.obs.n as f64;
        let mut resid = self.expected_sq_residual();
        if resid < 0.0 {
            // fp cancellation on a near-exact fit
            if resid > -1e-6 * self.obs.values.iter().map(|v| v * v).sum::<f64>().max(1.0) {
                resid = 0.0;
            } else {
                return Err(FitError::NonpositiveRate);
            }
        }
        let shape = n_obs / 2.0 + state.prior.alpha_tau;
        let rate = 0.5 * resid + state.prior.beta_tau;
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(FitError::NonpositiveRate);
        }
        state.tau.shape = shape;
        state.tau.rate = rate;
        Ok(())
    }
}

fn solve_slice(
    h4: &Array2<f64>,
    e_tau: f64,
    lam_diag: &[f64],
    rhs: &[f64],
    warm: &[f64],
    la: usize,
    lb: usize,
) -> Result<Vec<f64>, String> {
    let n = la * lb;
    if n <= 256 {
        let mut s = Array2::zeros((n, n));
        for k in 0..la {
            for l in 0..lb {
                let row = k * lb + l;
                for kp in 0..la {
                    let h_row = h4.row(k * la + kp);
                    for lp in 0..lb {
                        s[[row, kp * lb + lp]] = e_tau * h_row[l * lb + lp];
                    }
                }
                s[[row, row]] += lam_diag[row];
            }
        }
        solve::solve_spd(&s, rhs, warm)
    } else {
        Ok(gauss_seidel_on_h4(h4, e_tau, lam_diag, rhs, warm, la, lb))
    }
}

/// Gauss-Seidel directly against the `[(k,k'),(l,l')]` weight layout, so
/// large systems never materialize the `(La Lb)^2` matrix.
fn gauss_seidel_on_h4(
    h4: &Array2<f64>,
    e_tau: f64,
    lam_diag: &[f64],
    rhs: &[f64],
    warm: &[f64],
    la: usize,
    lb: usize,
) -> Vec<f64> {
    let mut x = warm.to_vec();
    for _ in 0..4000 {
        let mut max_delta = 0.0f64;
        let mut max_x = 0.0f64;
        for k in 0..la {
            for l in 0..lb {
                let s = k * lb + l;
                let mut acc = rhs[s];
                for kp in 0..la {
                    let h_row = h4.row(k * la + kp);
                    let base = l * lb;
                    let xb = kp * lb;
                    for lp in 0..lb {
                        acc -= e_tau * h_row[base + lp] * x[xb + lp];
                    }
                }
                let diag = e_tau * h4[[k * la + k, l * lb + l]] + lam_diag[s];
                // the diagonal term was subtracted above; add it back
                acc += (e_tau * h4[[k * la + k, l * lb + l]]) * x[s];
                let new = acc / floored(diag);
                max_delta = max_delta.max((new - x[s]).abs());
                x[s] = new;
                max_x = max_x.max(new.abs());
            }
        }
        if max_delta <= 1e-14 * (max_x + 1e-300) {
            break;
        }
    }
    x
}

/// Closed-form Gamma update for the precision variables at interface `d`
/// (1-based, `2..=D`).
pub fn update_lambda(state: &mut ModelState, d: usize) {
    let ranks = state.ranks();
    let dims = state.dims();
    let l_d = ranks[d - 1];
    let j_right = dims[d - 1];
    let j_left = dims[d - 2];
    let l_after = ranks[d];
    let l_before = ranks[d - 2];
    let e_right = state.expected_lambda(d + 1);
    let e_left = state.expected_lambda(d - 1);

    let shape_base = (j_right * l_after + j_left * l_before) as f64 / 2.0;
    let mut shapes = vec![0.0; l_d];
    let mut rates = vec![0.0; l_d];
    for k in 0..l_d {
        let mut rate = state.prior.beta[d - 2][k];
        // horizontal slice k of the right core
        let right = &state.cores[d - 1];
        for j in 0..j_right {
            for l in 0..l_after {
                rate += 0.5 * right.second_moment(k, l, j) * e_right[l];
            }
        }
        // lateral slice k of the left core
        let left = &state.cores[d - 2];
        for j in 0..j_left {
            for kp in 0..l_before {
                rate += 0.5 * left.second_moment(kp, k, j) * e_left[kp];
            }
        }
        shapes[k] = shape_base + state.prior.alpha[d - 2][k];
        rates[k] = rate;
    }
    state.lambdas[d - 2].shape = shapes;
    state.lambdas[d - 2].rate = rates;
}

/// Outcome of one pruning pass: removed slice indices per interface
/// (`d = 2..=D`, entry `d-2`).
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub removed: Vec<Vec<usize>>,
}

impl PruneOutcome {
    pub fn any(&self) -> bool {
        self.removed.iter().any(|r| !r.is_empty())
    }
}

/// Drop interface indices whose expected precision exceeds `prune_ratio`
/// times the smallest at that interface. Removing index `k` at interface
/// `d` deletes the lateral slice `k` of core `d-1` and the horizontal
/// slice `k` of core `d` together; the index carrying the minimum always
/// survives, so ranks never drop below 1.
pub fn prune_ranks(state: &mut ModelState, prune_ratio: f64) -> PruneOutcome {
    let d = state.order();
    let mut removed = Vec::with_capacity(d.saturating_sub(1));
    for i in 0..d.saturating_sub(1) {
        let e = state.lambdas[i].expected();
        let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
        let keep: Vec<usize> = (0..e.len()).filter(|&k| e[k] <= prune_ratio * min).collect();
        let gone: Vec<usize> = (0..e.len()).filter(|&k| e[k] > prune_ratio * min).collect();
        if gone.is_empty() {
            removed.push(gone);
            continue;
        }
        let left = &mut state.cores[i];
        left.mean = left.mean.select(Axis(1), &keep);
        left.var = left.var.select(Axis(1), &keep);
        let right = &mut state.cores[i + 1];
        right.mean = right.mean.select(Axis(0), &keep);
        right.var = right.var.select(Axis(0), &keep);
        let lam = &mut state.lambdas[i];
        lam.shape = keep.iter().map(|&k| lam.shape[k]).collect();
        lam.rate = keep.iter().map(|&k| lam.rate[k]).collect();
        state.prior.alpha[i] = keep.iter().map(|&k| state.prior.alpha[i][k]).collect();
        state.prior.beta[i] = keep.iter().map(|&k| state.prior.beta[i][k]).collect();
        removed.push(gone);
    }
    PruneOutcome { removed }
}

/// Posterior-mean reconstruction: the chain product of the mean cores.
pub fn reconstruct(state: &ModelState) -> DenseTensor {
    state.mean_cores().contract()
}

/// Standalone core update against the current state: builds the caches,
/// walks the prefix up to core `d` (1-based), and applies the update.
pub fn update_core(
    state: &mut ModelState,
    a: &DenseTensor,
    o: &MaskTensor,
    opts: &FitOptions,
    d: usize,
) -> Result<(), FitError> {
    check_inputs(state, a, o)?;
    let path = choose_path(o.observed_fraction(), opts.fast_path_observed_fraction);
    let mut sweep = Sweep::new(state, a, o, path);
    for i in 0..d - 1 {
        sweep.advance_prefix(state, i);
    }
    sweep.update_core(state, d - 1)
}

/// Standalone noise-precision update against the current state.
pub fn update_tau(
    state: &mut ModelState,
    a: &DenseTensor,
    o: &MaskTensor,
    opts: &FitOptions,
) -> Result<(), FitError> {
    check_inputs(state, a, o)?;
    let path = choose_path(o.observed_fraction(), opts.fast_path_observed_fraction);
    let mut sweep = Sweep::new(state, a, o, path);
    for i in 0..state.order() {
        sweep.advance_prefix(state, i);
    }
    sweep.update_tau(state)
}

/// Per-slice quadratic weights `w[j][[k, l]]` of core `d` (1-based)
/// evaluated by the product-of-per-mode-sums route, with per-missing-entry
/// subtraction when the tensor is nearly fully observed. Errors when the
/// observed fraction is below `min_fraction`.
pub fn fast_obs_weights(
    state: &ModelState,
    o: &MaskTensor,
    d: usize,
    min_fraction: f64,
) -> Result<Vec<Array2<f64>>, FitError> {
    let frac = o.observed_fraction();
    if frac < min_fraction {
        return Err(FitError::FastPathUnavailable { got: frac, want: min_fraction });
    }
    let path = if frac >= 1.0 { PathMode::FastFull } else { PathMode::FastSub };
    let zero = DenseTensor::zeros(o.dims().to_vec())?;
    let mut sweep = Sweep::new(state, &zero, o, path);
    for i in 0..d - 1 {
        sweep.advance_prefix(state, i);
    }
    let (h4, _) = sweep.slice_systems(state, d - 1);
    let (la, lb, j_dim) = state.cores[d - 1].shape();
    let mut out = Vec::with_capacity(j_dim);
    for j in 0..j_dim {
        let mut w = Array2::zeros((la, lb));
        for k in 0..la {
            for l in 0..lb {
                w[[k, l]] = h4[j][[k * la + k, l * lb + l]];
            }
        }
        out.push(w);
    }
    Ok(out)
}

fn check_inputs(state: &ModelState, a: &DenseTensor, o: &MaskTensor) -> Result<(), FitError> {
    if a.dims() != o.dims() || a.dims() != state.dims().as_slice() {
        return Err(FitError::Tensor(TensorError::DimMismatch {
            left: a.dims().to_vec(),
            right: o.dims().to_vec(),
        }));
    }
    Ok(())
}

/// Run the full inference loop on observed data `a` with mask `o`.
pub fn fit(
    a: &DenseTensor,
    o: &MaskTensor,
    prior: PriorValues,
    opts: &FitOptions,
) -> Result<FitOutcome, FitError> {
    opts.validate()?;
    if a.dims() != o.dims() {
        return Err(FitError::Tensor(TensorError::DimMismatch {
            left: a.dims().to_vec(),
            right: o.dims().to_vec(),
        }));
    }
    if o.observed_count() == 0 {
        return Err(FitError::EmptyMask);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| FitError::Solve(e.to_string()))?;
    pool.install(|| fit_inner(a, o, prior, opts))
}

fn fit_inner(
    a: &DenseTensor,
    o: &MaskTensor,
    prior: PriorValues,
    opts: &FitOptions,
) -> Result<FitOutcome, FitError> {
    let start = Instant::now();
    let mut cfg = opts.init.clone();
    cfg.fill_seed = opts.seed;
    let mut state = init::init_state_with_prior(a, o, &cfg, prior)?;

    let d = state.order();
    let path = choose_path(o.observed_fraction(), opts.fast_path_observed_fraction);
    let obs_values: Vec<f64> = a
        .data()
        .iter()
        .zip(o.bits())
        .filter(|(_, &b)| b == 1)
        .map(|(&v, _)| v)
        .collect();
    let norm_obs: f64 = obs_values.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut report = FitReport {
        ranks_history: Vec::new(),
        rse_history: Vec::new(),
        e_tau_history: Vec::new(),
        e_tau: state.tau.expected(),
        iterations: 0,
        wall_time_ms: 0.0,
        converged: false,
        failure: None,
    };
    let mut last_good = state.clone();
    let mut prev_pred: Option<Vec<f64>> = None;

    for iter in 1..=opts.max_iters {
        let step = || -> Result<(Vec<f64>, ModelState), FitError> {
            let mut st = state.clone();
            let mut sweep = Sweep::new(&st, a, o, path);
            for d0 in 0..d {
                sweep.update_core(&mut st, d0).map_err(|e| at_iter(e, iter))?;
                sweep.advance_prefix(&st, d0);
            }
            for di in 2..=d {
                update_lambda(&mut st, di);
            }
            sweep.update_tau(&mut st).map_err(|e| at_iter(e, iter))?;
            let pred = sweep.predicted_means();
            if pred.iter().any(|x| !x.is_finite()) {
                return Err(FitError::NonFinite { iteration: iter, context: "reconstruction".into() });
            }
            Ok((pred, st))
        };
        let (pred, st) = match step() {
            Ok(v) => v,
            Err(e) => {
                report.failure = Some(e.to_string());
                report.iterations = iter - 1;
                report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
                report.e_tau = last_good.tau.expected();
                return Ok(FitOutcome { state: last_good, report });
            }
        };
        state = st;
        prune_ranks(&mut state, opts.prune_ratio);
        last_good = state.clone();

        let rse_obs = {
            let num: f64 = pred
                .iter()
                .zip(&obs_values)
                .map(|(p, v)| (p - v) * (p - v))
                .sum::<f64>()
                .sqrt();
            num / norm_obs.max(1e-300)
        };
        report.ranks_history.push(state.ranks());
        report.rse_history.push(rse_obs);
        report.e_tau_history.push(state.tau.expected());
        report.iterations = iter;

        let rel_change = prev_pred.as_ref().map(|prev| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (p, q) in pred.iter().zip(prev) {
                num += (p - q) * (p - q);
                den += q * q;
            }
            (num.sqrt()) / den.sqrt().max(1e-300)
        });
        prev_pred = Some(pred);
        if let Some(c) = rel_change {
            if c <= opts.rel_tol {
                report.converged = true;
                break;
            }
        }
    }
    report.e_tau = state.tau.expected();
    report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(FitOutcome { state, report })
}

fn at_iter(e: FitError, iter: usize) -> FitError {
    match e {
        FitError::NonFinite { context, .. } => FitError::NonFinite { iteration: iter, context },
        other => other,
    }
}
