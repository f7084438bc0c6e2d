use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ttb_core::augment::{deaugment as unfold_image, AugmentPlan};
use ttb_core::engine::{fit, reconstruct, FitOptions, FitReport};
use ttb_core::pipeline::complete_image;
use ttb_core::harness::{add_noise, add_noise_with_variance, gen_synthetic, random_mask, MetricReport, SynthSpec};
use ttb_core::image::{read_image, write_image};
use ttb_core::init::InitConfig;
use ttb_core::io;
use ttb_core::model::PriorValues;
use ttb_core::tensor::{DenseTensor, MaskTensor};

use crate::{AugmentArgs, CompleteArgs, DeaugmentArgs, MetricsArgs, SynthArgs};

#[derive(Debug, Serialize)]
struct SynthManifest {
    dims: Vec<usize>,
    ranks: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_var: Option<f64>,
    missing_rate: f64,
    seeds: Vec<u64>,
    realized_snr_db: Vec<Option<f64>>,
    runs: Vec<SynthRun>,
}

#[derive(Debug, Serialize)]
struct SynthRun {
    seed: u64,
    truth: String,
    noisy: String,
    mask: String,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    if args.repeat == 0 {
        bail!("--repeat must be at least 1");
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let base_seed = args.seed.unwrap_or_else(|| rand::random::<u64>() >> 1);

    let mut manifest = SynthManifest {
        dims: args.dims.clone(),
        ranks: args.ranks.clone(),
        snr_db: args.snr,
        noise_var: args.noise_var,
        missing_rate: args.missing,
        seeds: Vec::new(),
        realized_snr_db: Vec::new(),
        runs: Vec::new(),
    };

    for i in 0..args.repeat {
        let seed = base_seed + i;
        let spec = SynthSpec { dims: args.dims.clone(), ranks: args.ranks.clone(), seed };
        let (truth, _) = gen_synthetic(&spec)?;
        let (noisy, noise) = if let Some(var) = args.noise_var {
            add_noise_with_variance(&truth, var, seed ^ 0x5eed)?
        } else if let Some(snr) = args.snr {
            add_noise(&truth, snr, seed ^ 0x5eed)?
        } else {
            add_noise(&truth, f64::INFINITY, 0)?
        };
        let mask = if args.missing > 0.0 {
            random_mask(truth.dims(), args.missing, seed ^ 0xa5ca)?
        } else {
            MaskTensor::all_observed(truth.dims().to_vec())?
        };
        let realized = if noise.frobenius_norm() > 0.0 {
            Some(20.0 * (truth.frobenius_norm() / noise.frobenius_norm()).log10())
        } else {
            None
        };

        let suffix = if args.repeat == 1 { String::new() } else { format!("_s{seed}") };
        let truth_name = format!("truth{suffix}.ttn");
        let noisy_name = format!("noisy{suffix}.ttn");
        let mask_name = format!("mask{suffix}.ttm");
        io::write_tensor(&args.out.join(&truth_name), &truth)?;
        io::write_tensor(&args.out.join(&noisy_name), &noisy)?;
        io::write_mask(&args.out.join(&mask_name), &mask)?;

        manifest.seeds.push(seed);
        manifest.realized_snr_db.push(realized);
        manifest.runs.push(SynthRun {
            seed,
            truth: truth_name,
            noisy: noisy_name,
            mask: mask_name,
        });
    }

    let path = args.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} run(s) under {}", args.repeat, args.out.display());
    Ok(())
}

/// Subset of fit options accepted in a `--config` JSON file; command-line
/// flags override these, which override the built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    max_iters: Option<usize>,
    rel_tol: Option<f64>,
    prune_ratio: Option<f64>,
    fast_path_fraction: Option<f64>,
    rank_cap_multiplier: Option<usize>,
    balance_cores: Option<bool>,
    seed: Option<u64>,
    threads: Option<usize>,
}

fn resolve_options(args: &CompleteArgs) -> Result<FitOptions> {
    let file: ConfigFile = match &args.config {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => ConfigFile::default(),
    };
    let env_threads = std::env::var("TTB_THREADS").ok().and_then(|v| v.parse().ok());
    let defaults = FitOptions::default();
    let mut init = InitConfig::default();
    if let Some(m) = args.rank_cap_multiplier.or(file.rank_cap_multiplier) {
        init.rank_cap_multiplier = m;
    }
    init.balance_cores = args.balance_cores || file.balance_cores.unwrap_or(false);
    Ok(FitOptions {
        max_iters: args.max_iters.or(file.max_iters).unwrap_or(defaults.max_iters),
        rel_tol: args.rel_tol.or(file.rel_tol).unwrap_or(defaults.rel_tol),
        prune_ratio: args.prune_ratio.or(file.prune_ratio).unwrap_or(defaults.prune_ratio),
        fast_path_observed_fraction: args
            .fast_path_fraction
            .or(file.fast_path_fraction)
            .unwrap_or(defaults.fast_path_observed_fraction),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        threads: args.threads.or(file.threads).or(env_threads).unwrap_or(defaults.threads),
        init,
    })
}

fn load_plan(path: &Path) -> Result<AugmentPlan> {
    let plan: AugmentPlan = serde_json::from_str(
        &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
    )
    .with_context(|| format!("parsing {}", path.display()))?;
    plan.validate()?;
    Ok(plan)
}

fn write_csv(path: &Path, report: &FitReport) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "iter,ranks,rse,e_tau")?;
    for (i, ((ranks, rse), e_tau)) in report
        .ranks_history
        .iter()
        .zip(&report.rse_history)
        .zip(&report.e_tau_history)
        .enumerate()
    {
        let ranks_str: Vec<String> = ranks.iter().map(|r| r.to_string()).collect();
        writeln!(f, "{},{},{:.9e},{:.9e}", i + 1, ranks_str.join("x"), rse, e_tau)?;
    }
    Ok(())
}

pub fn complete(args: CompleteArgs) -> ExitCode {
    match complete_inner(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn complete_inner(args: &CompleteArgs) -> Result<ExitCode> {
    let opts = resolve_options(args)?;

    // image inputs run through the folding pipeline, which standardizes
    // the working scale before the fit and undoes it afterwards
    let (report, recon, image) = if let Some(image_path) = &args.image {
        let plan = load_plan(args.plan.as_ref().expect("clap enforces --plan"))?;
        let img = read_image(image_path)?;
        let mask = args.mask_image.as_ref().map(|p| read_image(p)).transpose()?;
        let out = complete_image(&img, mask.as_ref(), &plan, PriorValues::default(), &opts)?;
        eprintln!(
            "fit: {} iterations, ranks {:?}, working scale {:.3e}{}",
            out.report.iterations,
            out.state.ranks(),
            out.working_scale,
            if out.report.converged { ", converged" } else { "" }
        );
        let recon = args.output.is_some().then(|| {
            ttb_core::augment::augment(&out.image, &plan).expect("plan folded the input")
        });
        (out.report, recon, Some(out.image))
    } else {
        let input = args.input.as_ref().expect("clap enforces --input");
        let tensor = io::read_tensor(input)?;
        let mask = match &args.mask {
            Some(p) => io::read_mask(p)?,
            None => MaskTensor::all_observed(tensor.dims().to_vec())?,
        };
        if mask.observed_count() == 0 {
            bail!("mask has no observed entries");
        }
        let outcome = fit(&tensor, &mask, PriorValues::default(), &opts)?;
        eprintln!(
            "fit: {} iterations, ranks {:?}, e_tau {:.4e}{}",
            outcome.report.iterations,
            outcome.state.ranks(),
            outcome.report.e_tau,
            if outcome.report.converged { ", converged" } else { "" }
        );
        let recon = reconstruct(&outcome.state);
        (outcome.report, Some(recon), None)
    };

    if let Some(path) = &args.output {
        let recon = recon.as_ref().context("no tensor output for this input")?;
        io::write_tensor(path, recon)?;
    }
    if let Some(path) = &args.output_image {
        let image = image.as_ref().context("--output-image requires --image/--plan input")?;
        write_image(path, image)?;
    }
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(path) = &args.csv {
        write_csv(path, &report)?;
    }
    if args.stdout {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }

    if let Some(msg) = &report.failure {
        eprintln!("fit failed: {msg}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(if report.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn load_as_tensor(path: &Path) -> Result<DenseTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") => Ok(read_image(path)?.to_tensor()),
        _ => Ok(io::read_tensor(path)?),
    }
}

pub fn metrics(args: MetricsArgs) -> Result<()> {
    let truth = load_as_tensor(&args.truth)?;
    let estimate = load_as_tensor(&args.estimate)?;
    let report = MetricReport::compute(&truth, &estimate)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn augment(args: AugmentArgs) -> Result<()> {
    let plan = load_plan(&args.plan)?;
    let img = read_image(&args.image)?;
    let tensor = ttb_core::augment::augment(&img, &plan)?;
    io::write_tensor(&args.out, &tensor)?;
    eprintln!("wrote tensor {:?} to {}", tensor.dims(), args.out.display());
    Ok(())
}

pub fn deaugment(args: DeaugmentArgs) -> Result<()> {
    let plan = load_plan(&args.plan)?;
    let tensor = io::read_tensor(&args.input)?;
    let img = unfold_image(&tensor, &plan)?;
    write_image(&args.out, &img)?;
    eprintln!(
        "wrote {}x{}x{} image to {}",
        img.height,
        img.width,
        img.channels,
        args.out.display()
    );
    Ok(())
}
