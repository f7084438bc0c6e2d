//! Shared test oracles. Everything here recomputes model quantities from
//! first principles (explicit path enumeration over rank tuples, explicit
//! Kronecker matrices), independent of the engine's cached chain
//! machinery, so engine outputs can be checked against a second route.

#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ttb_core::model::{
    expected_kron_slice, CorePosterior, LambdaPosterior, ModelState, PriorHyper, TauPosterior,
};
use ttb_core::tensor::{multi_index, DenseTensor, MaskTensor};

/// One core element held at a fixed value during expectation.
#[derive(Debug, Clone, Copy)]
pub struct Pin {
    pub core: usize,
    pub k: usize,
    pub l: usize,
    pub j: usize,
    pub value: f64,
}

fn pinned(pin: Option<&Pin>, d: usize, k: usize, l: usize, j: usize) -> Option<f64> {
    pin.filter(|p| p.core == d && p.k == k && p.l == l && p.j == j)
        .map(|p| p.value)
}

fn mean_of(state: &ModelState, pin: Option<&Pin>, d: usize, k: usize, l: usize, j: usize) -> f64 {
    pinned(pin, d, k, l, j).unwrap_or(state.cores[d].mean[[k, l, j]])
}

fn var_of(state: &ModelState, pin: Option<&Pin>, d: usize, k: usize, l: usize, j: usize) -> f64 {
    if pinned(pin, d, k, l, j).is_some() {
        0.0
    } else {
        state.cores[d].var[[k, l, j]]
    }
}

fn paths(state: &ModelState) -> Vec<Vec<usize>> {
    // all rank tuples (r_1 .. r_{D+1}) with boundary ranks fixed at 0
    let ranks = state.ranks();
    let d = state.order();
    let mut all = vec![vec![0usize]];
    for interface in 1..d {
        let mut next = Vec::new();
        for p in &all {
            for r in 0..ranks[interface] {
                let mut q = p.clone();
                q.push(r);
                next.push(q);
            }
        }
        all = next;
    }
    for p in &mut all {
        p.push(0);
    }
    all
}

/// `E[reconstruction]` at one multi-index, by explicit path enumeration.
pub fn expected_recon(state: &ModelState, index: &[usize], pin: Option<&Pin>) -> f64 {
    let d = state.order();
    paths(state)
        .iter()
        .map(|p| {
            (0..d)
                .map(|dc| mean_of(state, pin, dc, p[dc], p[dc + 1], index[dc]))
                .product::<f64>()
        })
        .sum()
}

/// `E[reconstruction^2]` at one multi-index: a double sum over path pairs
/// using `E[g_a g_b] = m_a m_b + [a = b] v_a` inside each core.
pub fn expected_recon_sq(state: &ModelState, index: &[usize], pin: Option<&Pin>) -> f64 {
    let d = state.order();
    let all = paths(state);
    let mut total = 0.0;
    for p in &all {
        for q in &all {
            let mut prod = 1.0;
            for dc in 0..d {
                let j = index[dc];
                let (pk, pl) = (p[dc], p[dc + 1]);
                let (qk, ql) = (q[dc], q[dc + 1]);
                let mp = mean_of(state, pin, dc, pk, pl, j);
                let mq = mean_of(state, pin, dc, qk, ql, j);
                let mut e = mp * mq;
                if (pk, pl) == (qk, ql) {
                    e += var_of(state, pin, dc, pk, pl, j);
                }
                prod *= e;
            }
            total += prod;
        }
    }
    total
}

/// Expected squared residual over the observed entries.
pub fn expected_masked_residual_sq(
    state: &ModelState,
    a: &DenseTensor,
    o: &MaskTensor,
    pin: Option<&Pin>,
) -> f64 {
    let dims = a.dims();
    let mut total = 0.0;
    for flat in 0..a.len() {
        if !o.is_observed(flat) {
            continue;
        }
        let idx = multi_index(flat, dims);
        let v = a.data()[flat];
        let m = expected_recon(state, &idx, pin);
        let m2 = expected_recon_sq(state, &idx, pin);
        total += v * v - 2.0 * v * m + m2;
    }
    total
}

/// Numerically optimal Gaussian factor for one core element given every
/// other factor: the expected log joint is quadratic in the element, so
/// three evaluations pin it down exactly.
pub fn oracle_element_posterior(
    state: &ModelState,
    a: &DenseTensor,
    o: &MaskTensor,
    core: usize,
    k: usize,
    l: usize,
    j: usize,
) -> (f64, f64) {
    let e_tau = state.tau.expected();
    let lam = state.expected_lambda(core + 1)[k] * state.expected_lambda(core + 2)[l];
    let phi = |g: f64| -> f64 {
        let pin = Pin { core, k, l, j, value: g };
        -0.5 * e_tau * expected_masked_residual_sq(state, a, o, Some(&pin)) - 0.5 * lam * g * g
    };
    let (p0, p1, pm1) = (phi(0.0), phi(1.0), phi(-1.0));
    let a_coef = -(p1 + pm1 - 2.0 * p0);
    let b_coef = (p1 - pm1) / 2.0;
    (b_coef / a_coef, 1.0 / a_coef)
}

/// Numerically optimal Gamma factor for one interface precision: the
/// expected log joint is `c1 ln x - c2 x + const`, so three evaluations
/// recover (shape, rate) = (c1 + 1, c2).
pub fn oracle_lambda_posterior(state: &ModelState, d: usize, k: usize) -> (f64, f64) {
    let phi = |lam: f64| -> f64 {
        let mut acc = 0.0;
        // horizontal slice k of core d (1-based)
        let right = &state.cores[d - 1];
        let (_, l_after, j_right) = right.shape();
        let e_right = state.expected_lambda(d + 1);
        for j in 0..j_right {
            for l in 0..l_after {
                acc += 0.5 * lam.ln() - 0.5 * lam * e_right[l] * right.second_moment(k, l, j);
            }
        }
        // lateral slice k of core d-1
        let left = &state.cores[d - 2];
        let (l_before, _, j_left) = left.shape();
        let e_left = state.expected_lambda(d - 1);
        for j in 0..j_left {
            for kp in 0..l_before {
                acc += 0.5 * lam.ln() - 0.5 * lam * e_left[kp] * left.second_moment(kp, k, j);
            }
        }
        let alpha = state.prior.alpha[d - 2][k];
        let beta = state.prior.beta[d - 2][k];
        acc + (alpha - 1.0) * lam.ln() - beta * lam
    };
    fit_gamma_log_linear(phi)
}

/// Numerically optimal Gamma factor for the noise precision.
pub fn oracle_tau_posterior(state: &ModelState, a: &DenseTensor, o: &MaskTensor) -> (f64, f64) {
    let n_obs = o.observed_count() as f64;
    let resid = expected_masked_residual_sq(state, a, o, None);
    let phi = |tau: f64| -> f64 {
        (n_obs / 2.0) * tau.ln() - tau / 2.0 * resid + (state.prior.alpha_tau - 1.0) * tau.ln()
            - state.prior.beta_tau * tau
    };
    fit_gamma_log_linear(phi)
}

fn fit_gamma_log_linear(phi: impl Fn(f64) -> f64) -> (f64, f64) {
    let (p1, p2, p4) = (phi(1.0), phi(2.0), phi(4.0));
    let d1 = p2 - p1;
    let d2 = p4 - p2;
    let c2 = d1 - d2;
    let c1 = (d1 + c2) / 2f64.ln();
    (c1 + 1.0, c2)
}

/// Per-slice quadratic weights of core `d` (1-based) evaluated entry by
/// entry through explicit Kronecker matrices: the reference route for the
/// product-of-sums evaluation.
pub fn direct_obs_weights(state: &ModelState, o: &MaskTensor, d: usize) -> Vec<Array2<f64>> {
    let dims = state.dims();
    let ranks = state.ranks();
    let (la, lb) = (ranks[d - 1], ranks[d]);
    let j_dim = dims[d - 1];
    let mut out = vec![Array2::zeros((la, lb)); j_dim];
    for flat in 0..o.len() {
        if !o.is_observed(flat) {
            continue;
        }
        let idx = multi_index(flat, &dims);
        // prefix chain of expected Kronecker squares
        let mut pre = Array2::ones((1, 1));
        for dc in 0..d - 1 {
            pre = pre.dot(&expected_kron_slice(&state.cores[dc], idx[dc]));
        }
        let mut suf = Array2::ones((1, 1));
        for dc in (d..state.order()).rev() {
            suf = expected_kron_slice(&state.cores[dc], idx[dc]).dot(&suf);
        }
        let w = &mut out[idx[d - 1]];
        for k in 0..la {
            let bk = pre[[0, k * la + k]];
            for l in 0..lb {
                w[[k, l]] += bk * suf[[l * lb + l, 0]];
            }
        }
    }
    out
}

/// Random variational state with positive variances and positive Gamma
/// parameters, for oracle and property tests.
pub fn random_state(rng: &mut ChaCha8Rng, dims: &[usize], ranks: &[usize]) -> ModelState {
    let d = dims.len();
    let cores = (0..d)
        .map(|i| {
            let shape = (ranks[i], ranks[i + 1], dims[i]);
            CorePosterior {
                mean: Array3::from_shape_fn(shape, |_| StandardNormal.sample(rng)),
                var: Array3::from_shape_fn(shape, |_| 0.05 + 0.95 * rng.random::<f64>()),
            }
        })
        .collect();
    let lambdas = (2..=d)
        .map(|i| LambdaPosterior {
            shape: (0..ranks[i - 1]).map(|_| 0.5 + 2.0 * rng.random::<f64>()).collect(),
            rate: (0..ranks[i - 1]).map(|_| 0.5 + 2.0 * rng.random::<f64>()).collect(),
        })
        .collect();
    let state = ModelState {
        cores,
        lambdas,
        tau: TauPosterior { shape: 1.0 + rng.random::<f64>(), rate: 0.5 + rng.random::<f64>() },
        prior: PriorHyper::noninformative(ranks),
    };
    state.validate().expect("random state is valid");
    state
}

/// Random observed tensor plus a mask with at least one observed entry.
pub fn random_problem(
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    observe_prob: f64,
) -> (DenseTensor, MaskTensor) {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut bits: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < observe_prob)).collect();
    if bits.iter().all(|&b| b == 0) {
        bits[rng.random_range(0..n)] = 1;
    }
    (
        DenseTensor::new(dims.to_vec(), data).unwrap(),
        MaskTensor::new(dims.to_vec(), bits).unwrap(),
    )
}

/// Draw (dims, ranks) whose cores hold at most `max_elems` scalars.
pub fn tiny_instance(rng: &mut ChaCha8Rng, max_elems: usize) -> (Vec<usize>, Vec<usize>) {
    loop {
        let d = 1 + rng.random_range(0..3);
        let dims: Vec<usize> = (0..d).map(|_| 1 + rng.random_range(0..3)).collect();
        let mut ranks = vec![1usize];
        for _ in 1..d {
            ranks.push(1 + rng.random_range(0..2));
        }
        ranks.push(1);
        let total: usize = (0..d).map(|i| ranks[i] * ranks[i + 1] * dims[i]).sum();
        if total <= max_elems {
            return (dims, ranks);
        }
    }
}
