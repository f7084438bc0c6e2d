//! End-to-end behavior of the inference loop on small problems.

mod common;

use ttb_core::engine::{fit, reconstruct, FitOptions};
use ttb_core::harness::{add_noise, gen_synthetic, random_mask, rse, SynthSpec};
use ttb_core::model::PriorValues;
use ttb_core::tensor::MaskTensor;

#[test]
fn noiseless_exact_tt_is_recovered_with_exact_ranks() {
    let spec = SynthSpec { dims: vec![12, 12, 12], ranks: vec![1, 3, 3, 1], seed: 5 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let o = MaskTensor::all_observed(truth.dims().to_vec()).unwrap();
    let opts = FitOptions { seed: 1, ..Default::default() };
    let outcome = fit(&truth, &o, PriorValues::default(), &opts).unwrap();
    assert!(outcome.report.failure.is_none());
    let recon = reconstruct(&outcome.state);
    let err = rse(&truth, &recon).unwrap();
    assert!(err <= 1e-3, "rse {err}");
    assert_eq!(outcome.state.ranks(), vec![1, 3, 3, 1]);
    // reconstruct agrees with the contraction of the mean cores bit-exactly
    let direct = outcome.state.mean_cores().contract();
    assert_eq!(recon.data(), direct.data());
}

#[test]
fn noisy_fit_estimates_noise_precision() {
    let spec = SynthSpec { dims: vec![12, 12, 12], ranks: vec![1, 3, 3, 1], seed: 6 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let (noisy, noise) = add_noise(&truth, 20.0, 7).unwrap();
    let o = MaskTensor::all_observed(truth.dims().to_vec()).unwrap();
    let opts = FitOptions { seed: 2, ..Default::default() };
    let outcome = fit(&noisy, &o, PriorValues::default(), &opts).unwrap();
    let err = rse(&truth, &reconstruct(&outcome.state)).unwrap();
    // the estimation-noise floor for this size sits near 3.1e-2
    assert!(err <= 4.5e-2, "rse {err}");
    // expected precision should approximate the true noise precision
    let true_var = noise.data().iter().map(|x| x * x).sum::<f64>() / noise.len() as f64;
    let ratio = outcome.report.e_tau * true_var;
    assert!((0.5..2.0).contains(&ratio), "e_tau {} vs 1/var {}", outcome.report.e_tau, 1.0 / true_var);
}

#[test]
fn missing_data_fit_completes_the_tensor() {
    let spec = SynthSpec { dims: vec![10, 10, 10], ranks: vec![1, 2, 2, 1], seed: 8 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let (noisy, _) = add_noise(&truth, 25.0, 9).unwrap();
    let o = random_mask(truth.dims(), 0.4, 10).unwrap();
    let opts = FitOptions { seed: 3, ..Default::default() };
    let outcome = fit(&noisy, &o, PriorValues::default(), &opts).unwrap();
    let err = rse(&truth, &reconstruct(&outcome.state)).unwrap();
    assert!(err <= 5e-2, "rse {err}");
}

#[test]
fn ranks_never_increase_across_iterations() {
    let spec = SynthSpec { dims: vec![10, 10, 10], ranks: vec![1, 4, 4, 1], seed: 11 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let (noisy, _) = add_noise(&truth, 15.0, 12).unwrap();
    let o = random_mask(truth.dims(), 0.2, 13).unwrap();
    let opts = FitOptions { seed: 4, ..Default::default() };
    let outcome = fit(&noisy, &o, PriorValues::default(), &opts).unwrap();
    let hist = &outcome.report.ranks_history;
    assert!(!hist.is_empty());
    for w in hist.windows(2) {
        for (a, b) in w[1].iter().zip(&w[0]) {
            assert!(a <= b, "ranks increased: {:?} -> {:?}", w[0], w[1]);
        }
    }
    assert_eq!(outcome.report.rse_history.len(), outcome.report.iterations);
}

#[test]
fn empty_mask_is_rejected() {
    let spec = SynthSpec { dims: vec![4, 4], ranks: vec![1, 2, 1], seed: 14 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let o = MaskTensor::new(truth.dims().to_vec(), vec![0u8; truth.len()]).unwrap();
    let opts = FitOptions::default();
    assert!(fit(&truth, &o, PriorValues::default(), &opts).is_err());
}

#[test]
fn serial_and_threaded_fits_are_bit_identical() {
    let spec = SynthSpec { dims: vec![8, 8, 8], ranks: vec![1, 2, 2, 1], seed: 15 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let (noisy, _) = add_noise(&truth, 20.0, 16).unwrap();
    let o = random_mask(truth.dims(), 0.3, 17).unwrap();
    let serial = FitOptions { seed: 5, max_iters: 12, threads: 1, ..Default::default() };
    let threaded = FitOptions { seed: 5, max_iters: 12, threads: 2, ..Default::default() };
    let a = fit(&noisy, &o, PriorValues::default(), &serial).unwrap();
    let b = fit(&noisy, &o, PriorValues::default(), &threaded).unwrap();
    assert_eq!(a.state, b.state);
}

#[test]
fn fit_is_deterministic_given_seed() {
    let spec = SynthSpec { dims: vec![8, 8], ranks: vec![1, 2, 1], seed: 18 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let o = random_mask(truth.dims(), 0.5, 19).unwrap();
    let opts = FitOptions { seed: 6, max_iters: 10, ..Default::default() };
    let a = fit(&truth, &o, PriorValues::default(), &opts).unwrap();
    let b = fit(&truth, &o, PriorValues::default(), &opts).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.report.rse_history, b.report.rse_history);
}

#[test]
fn report_json_has_required_keys() {
    let spec = SynthSpec { dims: vec![6, 6], ranks: vec![1, 2, 1], seed: 20 };
    let (truth, _) = gen_synthetic(&spec).unwrap();
    let o = MaskTensor::all_observed(truth.dims().to_vec()).unwrap();
    let opts = FitOptions { max_iters: 5, ..Default::default() };
    let outcome = fit(&truth, &o, PriorValues::default(), &opts).unwrap();
    let json = serde_json::to_value(&outcome.report).unwrap();
    for key in ["ranks_history", "rse_history", "e_tau", "iterations", "wall_time_ms"] {
        assert!(json.get(key).is_some(), "missing key {key}");
    }
}
