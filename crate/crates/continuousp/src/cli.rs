//! Command-line surface. Every command is deterministic under a fixed
//! --seed; output files go through the atomic writer; usage errors exit 2
//! (clap), runtime failures exit 1, suite failures exit 1.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::composition::Composition;
use crate::config::RunConfig;
use crate::dataset::{self, DatasetRecord};
use crate::element;
use crate::error::{Error, Result};
use crate::evaluator::{displacement_energy_scan, evaluate_csp, AnnealedSampler};
use crate::grad::{finite_diff_check, FdTarget};
use crate::graph::GraphConfig;
use crate::matcher::MatchTolerances;
use crate::model::{ModelConfig, ModelParams, PenaltyKind};
use crate::sampler::{derive_seed, sample, AnnealSchedule};
use crate::suites::{self, SuiteReport};
use crate::trainer::{self, sample_expansion, MalaNegativeSampler, TrainState};
use crate::unit::PeriodicUnit;

#[derive(Parser)]
#[command(
    name = "continuousp",
    version,
    about = "Energy-based crystal structure prediction over periodic units"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Debug)]
struct SpeciesList(Vec<u8>);

fn parse_species(s: &str) -> std::result::Result<SpeciesList, String> {
    let mut out = Vec::new();
    for tok in s.split(',') {
        let sym = tok.trim();
        if sym.is_empty() {
            return Err("species list has an empty entry".into());
        }
        out.push(element::atomic_number(sym).map_err(|e| e.to_string())?);
    }
    if out.is_empty() {
        return Err("species list is empty".into());
    }
    Ok(SpeciesList(out))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteName {
    Invariance,
    Gradients,
    Sampler,
    Matcher,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a dataset; streams batch diagnostics as JSON lines on
    /// stdout and rewrites the checkpoint after every epoch.
    Train {
        /// Training dataset (one JSON record per line).
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset, reported per epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// TOML run configuration; omitted keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample crystals for a composition from a trained model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated element symbols, e.g. "Na,Cl". Each sample
        /// expands this composition by a geometric multiplier.
        #[arg(long, value_parser = parse_species)]
        species: SpeciesList,
        /// Number of samples to draw.
        #[arg(long, default_value_t = 20)]
        num: usize,
        /// Annealed chain length per sample.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample against a test set and report match rate and rmse.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Ground-truth dataset.
        #[arg(long)]
        test: PathBuf,
        /// Samples drawn per test crystal.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        /// Site tolerance in normalized cell units.
        #[arg(long, default_value_t = 0.5)]
        stol: f64,
        /// Relative lattice length tolerance.
        #[arg(long, default_value_t = 0.3)]
        ltol: f64,
        /// Lattice angle tolerance in degrees.
        #[arg(long = "angle-tol", default_value_t = 10.0)]
        angle_tol: f64,
        /// Annealed chain length per sample.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (id,matched,rms).
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan energy against random single-atom displacements of the first
    /// record in the input dataset.
    Perturb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Gaussian displacement scale in Angstrom.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (displacement_angstrom,energy).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a property suite against random parameters; exits nonzero when
    /// any check fails.
    Check {
        #[arg(long, value_enum)]
        suite: SuiteName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Emit the reports as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic gradients against central finite differences on
    /// every record of a dataset.
    Gradcheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Train {
            data,
            val,
            config,
            out,
            seed,
        } => cmd_train(&data, val.as_deref(), config.as_deref(), &out, seed),
        Cmd::Sample {
            ckpt,
            species,
            num,
            steps,
            seed,
            out,
        } => cmd_sample(&ckpt, &species.0, num, steps, seed, &out),
        Cmd::Evaluate {
            ckpt,
            test,
            samples,
            stol,
            ltol,
            angle_tol,
            steps,
            seed,
            out,
        } => cmd_evaluate(&ckpt, &test, samples, stol, ltol, angle_tol, steps, seed, &out),
        Cmd::Perturb {
            ckpt,
            input,
            sigma,
            trials,
            seed,
            out,
        } => cmd_perturb(&ckpt, &input, sigma, trials, seed, &out),
        Cmd::Check { suite, seed, json } => cmd_check(suite, seed, json),
        Cmd::Gradcheck { ckpt, data } => cmd_gradcheck(&ckpt, &data),
    }
}

fn load_model(path: &std::path::Path) -> Result<(Checkpoint, ModelParams, ModelConfig)> {
    let ckpt = load_checkpoint(path)?;
    let state = ckpt.training_state()?;
    let cfg = ckpt.model;
    Ok((ckpt, state.params, cfg))
}

fn cmd_train(
    data: &std::path::Path,
    val: Option<&std::path::Path>,
    config: Option<&std::path::Path>,
    out: &std::path::Path,
    seed: Option<u64>,
) -> Result<i32> {
    let mut run_cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        run_cfg.seed = s;
    }
    run_cfg.validate()?;
    let model_cfg = run_cfg.model();
    let train_cfg = run_cfg.trainer();

    let data_units = dataset::load_dataset(data)?;
    let val_units = match val {
        Some(p) => dataset::load_dataset(p)?,
        None => Vec::new(),
    };
    log::info!(
        "training on {} units ({} validation) for {} epochs",
        data_units.len(),
        val_units.len(),
        train_cfg.epochs
    );

    let negative = MalaNegativeSampler {
        sched: train_cfg.negative_schedule(),
    };
    let state = TrainState::fresh(&model_cfg, &train_cfg)?;
    trainer::train(
        &data_units,
        &val_units,
        &model_cfg,
        &train_cfg,
        &negative,
        state,
        |r| {
            let line = serde_json::json!({
                "epoch": r.epoch,
                "step": r.step,
                "e_data": r.data_energy,
                "e_sample": r.sample_energy,
                "accept_rate": r.acceptance,
                "grad_norm": r.grad_norm,
            });
            println!("{line}");
            Ok(())
        },
        |er, st| {
            match er.val_energy {
                Some(v) => log::info!(
                    "epoch {}: {} batches ({} failed), val energy {v:.6}",
                    er.epoch,
                    er.batches,
                    er.failed_batches
                ),
                None => log::info!(
                    "epoch {}: {} batches ({} failed)",
                    er.epoch,
                    er.batches,
                    er.failed_batches
                ),
            }
            let ckpt = Checkpoint::from_training(&model_cfg, &train_cfg, st);
            save_checkpoint(&ckpt, out)?;
            Ok(())
        },
    )?;
    log::info!("final checkpoint at {}", out.display());
    Ok(0)
}

fn cmd_sample(
    ckpt_path: &std::path::Path,
    species: &[u8],
    num: usize,
    steps: usize,
    seed: u64,
    out: &std::path::Path,
) -> Result<i32> {
    if num == 0 {
        return Err(Error::InvalidConfig("num must be >= 1".into()));
    }
    let (ckpt, params, cfg) = load_model(ckpt_path)?;
    let sched = AnnealSchedule {
        steps,
        ..AnnealSchedule::default()
    };
    sched.validate()?;
    let (reduced, _) = Composition::from_species(species)?.reduce();
    let j_cap = ckpt.train.j_cap_for(reduced.total() as usize);

    let records: Vec<DatasetRecord> = (0..num)
        .into_par_iter()
        .map(|i| -> Result<DatasetRecord> {
            let case_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(case_seed);
            let (expanded, j) = sample_expansion(species, ckpt.train.q, j_cap, &mut rng)?;
            let unit = sample(&expanded, &params, &cfg, &sched, derive_seed(case_seed, 1))?;
            log::info!("sample {i}: expansion j = {j}, {} atoms", unit.n());
            Ok(DatasetRecord::from_unit(format!("sample-{i:04}"), &unit))
        })
        .collect::<Result<Vec<_>>>()?;
    dataset::save_dataset(&records, out)?;
    println!("wrote {num} samples to {}", out.display());
    Ok(0)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .and_then(|_| rows.iter().try_for_each(|r| w.write_record(r)))
        .map_err(|e| Error::InvalidConfig(format!("csv encoding failed: {e}")))?;
    w.into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv encoding failed: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    ckpt_path: &std::path::Path,
    test: &std::path::Path,
    samples: usize,
    stol: f64,
    ltol: f64,
    angle_tol: f64,
    steps: usize,
    seed: u64,
    out: &std::path::Path,
) -> Result<i32> {
    let (_, params, cfg) = load_model(ckpt_path)?;
    let named = dataset::load_named(test)?;
    let units: Vec<PeriodicUnit> = named.iter().map(|(_, u)| u.clone()).collect();
    let tol = MatchTolerances {
        stol,
        ltol,
        angle_tol,
    };
    let sampler = AnnealedSampler {
        sched: AnnealSchedule {
            steps,
            ..AnnealSchedule::default()
        },
    };
    let report = evaluate_csp(&units, &params, &cfg, &sampler, &tol, samples, seed)?;

    let rows: Vec<Vec<String>> = named
        .iter()
        .zip(&report.outcomes)
        .map(|((id, _), o)| {
            vec![
                id.clone(),
                o.matched.to_string(),
                o.rms.map(|r| r.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    dataset::write_atomic(out, &csv_bytes(&["id", "matched", "rms"], &rows)?)?;
    println!("match_rate {}", report.match_rate);
    match report.mean_rms {
        Some(r) => println!("rmse {r}"),
        None => println!("rmse n/a"),
    }
    Ok(0)
}

fn cmd_perturb(
    ckpt_path: &std::path::Path,
    input: &std::path::Path,
    sigma: f64,
    trials: usize,
    seed: u64,
    out: &std::path::Path,
) -> Result<i32> {
    let (_, params, cfg) = load_model(ckpt_path)?;
    let named = dataset::load_named(input)?;
    let Some((id, unit)) = named.first() else {
        return Err(Error::InvalidConfig("input dataset is empty".into()));
    };
    if named.len() > 1 {
        log::info!("scanning first record '{id}'; {} more ignored", named.len() - 1);
    }
    let scan = displacement_energy_scan(unit, &params, &cfg, sigma, trials, seed)?;
    let rows: Vec<Vec<String>> = scan
        .iter()
        .map(|(d, e)| vec![d.to_string(), e.to_string()])
        .collect();
    dataset::write_atomic(out, &csv_bytes(&["displacement_angstrom", "energy"], &rows)?)?;
    println!("wrote {} rows to {}", scan.len(), out.display());
    Ok(0)
}

/// Small model for the suites that sweep finite differences; big enough to
/// exercise every layer kind, small enough to finish in seconds.
fn verification_cfg() -> ModelConfig {
    ModelConfig {
        node_dim: 4,
        conv_layers: 2,
        mlp_layers: 1,
        rho_ref: 0.05,
        penalty_weight: 1.0,
        penalty_kind: PenaltyKind::Squared,
        graph: GraphConfig::with_edge_dim(4),
    }
}

fn cmd_check(suite: SuiteName, seed: u64, json: bool) -> Result<i32> {
    let reports: Vec<SuiteReport> = match suite {
        SuiteName::Invariance => {
            let cfg = ModelConfig::small();
            let params = ModelParams::init(&cfg, derive_seed(seed, 1))?;
            let cases = suites::gen_invariance_cases(120, seed)?;
            vec![
                suites::run_invariance_suite(&params, &cfg, &cases)?,
                suites::run_continuity_suite(&params, &cfg, seed)?,
            ]
        }
        SuiteName::Gradients => {
            let cfg = verification_cfg();
            let params = ModelParams::init(&cfg, derive_seed(seed, 1))?;
            vec![suites::run_gradient_suite(&params, &cfg, seed)?]
        }
        SuiteName::Sampler => vec![suites::run_sampler_suite(seed)],
        SuiteName::Matcher => vec![suites::run_matcher_suite(seed)?],
    };
    if json {
        println!(
            "{}",
            serde_json::to_string(&reports)
                .map_err(|e| Error::InvalidConfig(format!("report encoding failed: {e}")))?
        );
    } else {
        for r in &reports {
            print!("{}", r.render_text());
        }
    }
    Ok(if reports.iter().all(|r| r.passed()) { 0 } else { 1 })
}

/// Finite-difference error for one target, re-measured at a smaller step when
/// the first reading exceeds the tolerance. Truncation error scales with h^2
/// and collapses under refinement; a wrong analytic gradient does not.
fn fd_error_refined(
    target: FdTarget,
    unit: &PeriodicUnit,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    let coarse = finite_diff_check(target, unit, params, cfg, 1e-4)?;
    if coarse <= suites::GRADIENT_TOL {
        return Ok(coarse);
    }
    let fine = finite_diff_check(target, unit, params, cfg, 3e-5)?;
    Ok(coarse.min(fine))
}

fn cmd_gradcheck(ckpt_path: &std::path::Path, data: &std::path::Path) -> Result<i32> {
    let (_, params, cfg) = load_model(ckpt_path)?;
    let named = dataset::load_named(data)?;
    if named.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    println!("id coords lattice params (worst relative error, h = 1e-4 refined to 3e-5)");
    let mut worst = 0.0f64;
    for (id, unit) in &named {
        let c = fd_error_refined(FdTarget::Coords, unit, &params, &cfg)?;
        let l = fd_error_refined(FdTarget::Lattice, unit, &params, &cfg)?;
        let p = fd_error_refined(FdTarget::Params, unit, &params, &cfg)?;
        println!("{id} {c:.3e} {l:.3e} {p:.3e}");
        worst = worst.max(c).max(l).max(p);
    }
    let ok = worst <= suites::GRADIENT_TOL;
    println!(
        "worst {worst:.3e} (tolerance {:.0e}): {}",
        suites::GRADIENT_TOL,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(if ok { 0 } else { 1 })
}
