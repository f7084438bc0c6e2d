//! Every closed-form update must land on the numerically optimal single
//! factor: after an update, re-optimizing any one factor against the rest
//! (by brute-force expansion of the expected log joint) must change
//! nothing.

mod common;

use common::{
    oracle_element_posterior, oracle_lambda_posterior, oracle_tau_posterior, random_problem,
    random_state, tiny_instance,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use ttb_core::engine::{self, FitOptions};
use ttb_core::model::RATE_FLOOR;
use ttb_core::tensor::{DenseTensor, MaskTensor};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn core_updates_match_single_factor_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let opts = FitOptions::default();
    for trial in 0..20 {
        let (dims, ranks) = tiny_instance(&mut rng, 16);
        let mut state = random_state(&mut rng, &dims, &ranks);
        let observe = if trial % 3 == 0 { 1.0 } else { 0.7 };
        let (a, o) = random_problem(&mut rng, &dims, observe);
        let d = 1 + rng.random_range(0..dims.len());
        engine::update_core(&mut state, &a, &o, &opts, d).unwrap();

        let (la, lb, j_dim) = {
            let s = state.cores[d - 1].shape();
            (s.0, s.1, s.2)
        };
        for k in 0..la {
            for l in 0..lb {
                for j in 0..j_dim {
                    let (mean, var) = oracle_element_posterior(&state, &a, &o, d - 1, k, l, j);
                    let got_m = state.cores[d - 1].mean[[k, l, j]];
                    let got_v = state.cores[d - 1].var[[k, l, j]];
                    assert!(
                        (got_m - mean).abs() <= 1e-6 * mean.abs().max(1.0),
                        "trial {trial} core {d} ({k},{l},{j}): mean {got_m} vs oracle {mean}"
                    );
                    assert!(
                        rel_err(got_v, var) <= 1e-6,
                        "trial {trial} core {d} ({k},{l},{j}): var {got_v} vs oracle {var}"
                    );
                }
            }
        }
    }
}

#[test]
fn lambda_updates_match_single_factor_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..20 {
        let (dims, ranks) = loop {
            let (d, r) = tiny_instance(&mut rng, 16);
            if d.len() >= 2 {
                break (d, r);
            }
        };
        let mut state = random_state(&mut rng, &dims, &ranks);
        let d = 2 + rng.random_range(0..dims.len() - 1);
        engine::update_lambda(&mut state, d);
        for k in 0..state.ranks()[d - 1] {
            let (shape, rate) = oracle_lambda_posterior(&state, d, k);
            let got_s = state.lambdas[d - 2].shape[k];
            let got_r = state.lambdas[d - 2].rate[k];
            assert!(rel_err(got_s, shape) <= 1e-6, "trial {trial}: shape {got_s} vs {shape}");
            assert!(rel_err(got_r, rate) <= 1e-6, "trial {trial}: rate {got_r} vs {rate}");
        }
    }
}

#[test]
fn tau_update_matches_single_factor_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let opts = FitOptions::default();
    for trial in 0..20 {
        let (dims, ranks) = tiny_instance(&mut rng, 16);
        let mut state = random_state(&mut rng, &dims, &ranks);
        let observe = if trial % 4 == 0 { 1.0 } else { 0.6 };
        let (a, o) = random_problem(&mut rng, &dims, observe);
        engine::update_tau(&mut state, &a, &o, &opts).unwrap();
        let (shape, rate) = oracle_tau_posterior(&state, &a, &o);
        assert!(rel_err(state.tau.shape, shape) <= 1e-6, "trial {trial}: shape");
        assert!(rel_err(state.tau.rate, rate) <= 1e-6, "trial {trial}: rate");
    }
}

#[test]
fn zero_mask_core_update_reverts_to_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = vec![2, 3];
    let ranks = vec![1, 2, 1];
    let mut state = random_state(&mut rng, &dims, &ranks);
    let a = DenseTensor::zeros(dims.clone()).unwrap();
    let o = MaskTensor::new(dims, vec![0u8; 6]).unwrap();
    let opts = FitOptions::default();
    engine::update_core(&mut state, &a, &o, &opts, 1).unwrap();
    let lam_r = state.expected_lambda(2);
    let core = &state.cores[0];
    for l in 0..2 {
        for j in 0..2 {
            assert_eq!(core.mean[[0, l, j]], 0.0);
            let want = 1.0 / (1.0 * lam_r[l]).max(RATE_FLOOR);
            assert!((core.var[[0, l, j]] - want).abs() <= 1e-12 * want);
        }
    }
}

#[test]
fn order_one_core_update_is_scalar_conjugate_gaussian() {
    // D = 1, ranks [1, 1], full observation: the posterior for each mode
    // element is the textbook conjugate Gaussian with unit-precision
    // product prior.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = vec![5];
    let ranks = vec![1, 1];
    let mut state = random_state(&mut rng, &dims, &ranks);
    let (a, _) = random_problem(&mut rng, &dims, 1.0);
    let o = MaskTensor::all_observed(dims.clone()).unwrap();
    let e_tau = state.tau.expected();
    let opts = FitOptions::default();
    engine::update_core(&mut state, &a, &o, &opts, 1).unwrap();
    for j in 0..5 {
        let var_want = 1.0 / (e_tau + 1.0);
        let mean_want = var_want * e_tau * a.data()[j];
        assert!((state.cores[0].var[[0, 0, j]] - var_want).abs() <= 1e-12);
        assert!((state.cores[0].mean[[0, 0, j]] - mean_want).abs() <= 1e-12);
    }
}

#[test]
fn lambda_shape_counts_governed_elements() {
    // interface between two cores with J = 20 modes and outer ranks 5
    let dims = vec![20, 20];
    let ranks = vec![1, 5, 1];
    // outer interfaces are rank 1 with constant precision, so the shape
    // counts J_d * L_{d+1} / 2 + J_{d-1} * L_{d-1} / 2 = 10 + 10 over a
    // rank-5 interface with L_{d-1} = L_{d+1} = 1
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut state = random_state(&mut rng, &dims, &ranks);
    engine::update_lambda(&mut state, 2);
    for k in 0..5 {
        let got = state.lambdas[0].shape[k];
        assert!((got - (10.0 + 10.0 + 1e-6)).abs() < 1e-12, "{got}");
    }
}

#[test]
fn lambda_rate_collapses_to_prior_when_slices_vanish() {
    let dims = vec![2, 2];
    let ranks = vec![1, 2, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut state = random_state(&mut rng, &dims, &ranks);
    for c in &mut state.cores {
        c.mean.fill(0.0);
        c.var.fill(0.0);
    }
    engine::update_lambda(&mut state, 2);
    for k in 0..2 {
        assert!((state.lambdas[0].rate[k] - 1e-6).abs() < 1e-18);
        // expected precision explodes, flagging the slice for pruning
        assert!(state.lambdas[0].expected()[k] > 1e6);
    }
}

#[test]
fn tau_shape_is_half_observed_count_plus_prior() {
    let dims = vec![20, 20, 20];
    let ranks = vec![1, 2, 2, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut state = random_state(&mut rng, &dims, &ranks);
    let (a, _) = random_problem(&mut rng, &dims, 1.0);
    let o = MaskTensor::all_observed(dims.clone()).unwrap();
    let opts = FitOptions::default();
    engine::update_tau(&mut state, &a, &o, &opts).unwrap();
    assert!((state.tau.shape - 4000.000001).abs() < 1e-9, "{}", state.tau.shape);
}

#[test]
fn tau_rate_is_prior_when_fit_is_exact_and_certain() {
    let dims = vec![3, 2];
    let ranks = vec![1, 2, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut state = random_state(&mut rng, &dims, &ranks);
    for c in &mut state.cores {
        c.var.fill(1e-300);
    }
    let recon = engine::reconstruct(&state);
    let o = MaskTensor::all_observed(dims.clone()).unwrap();
    let opts = FitOptions::default();
    engine::update_tau(&mut state, &recon, &o, &opts).unwrap();
    assert!(
        (state.tau.rate - 1e-6).abs() <= 1e-12,
        "rate {} should collapse to the prior",
        state.tau.rate
    );
}

#[test]
fn tau_rate_matches_monte_carlo_sampling() {
    // E ||O o (A - Yhat)||^2 against direct sampling of the cores
    use rand_distr::{Distribution, Normal};
    let dims = vec![3, 2, 2];
    let ranks = vec![1, 2, 2, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut state = random_state(&mut rng, &dims, &ranks);
    let (a, o) = random_problem(&mut rng, &dims, 0.8);
    let opts = FitOptions::default();

    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    let n_samples = 60_000;
    for _ in 0..n_samples {
        let mut sampled = Vec::with_capacity(state.order());
        for c in &state.cores {
            let mut s = c.mean.clone();
            for (x, v) in s.iter_mut().zip(c.var.iter()) {
                let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
                *x += z * v.sqrt();
            }
            sampled.push(s);
        }
        let cores = ttb_core::tensor::TTCores::new(sampled).unwrap();
        let recon = cores.contract();
        let mut r = 0.0;
        for flat in 0..a.len() {
            if o.is_observed(flat) {
                let d = a.data()[flat] - recon.data()[flat];
                r += d * d;
            }
        }
        acc += r;
        acc_sq += r * r;
    }
    let mc_mean = acc / n_samples as f64;
    let mc_se = ((acc_sq / n_samples as f64 - mc_mean * mc_mean) / n_samples as f64).sqrt();

    engine::update_tau(&mut state, &a, &o, &opts).unwrap();
    let implied_resid = 2.0 * (state.tau.rate - state.prior.beta_tau);
    assert!(
        (implied_resid - mc_mean).abs() <= 3.0 * mc_se,
        "expected residual {implied_resid} vs MC {mc_mean} (se {mc_se})"
    );
}
