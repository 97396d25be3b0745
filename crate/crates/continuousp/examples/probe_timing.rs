//! Scratch criterion-9 dry run, persistent-chain variant. Delete before
//! shipping.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use continuousp::evaluator::{evaluate_csp, AnnealedSampler};
use continuousp::grad::{energy_with_grads, GradTargets};
use continuousp::graph::GraphConfig;
use continuousp::matcher::MatchTolerances;
use continuousp::model::{ModelConfig, ModelParams, PenaltyKind};
use continuousp::sampler::{derive_seed, init_state, mala_step, AnnealSchedule, ChainState};
use continuousp::suites::jitter_unit;
use continuousp::trainer::{adam_step, AdamState, TrainConfig};
use continuousp::unit::PeriodicUnit;
use continuousp::Result;

fn primitive_salt(a: f64) -> PeriodicUnit {
    let h = a / 2.0;
    let lattice = Matrix3::new(0.0, h, h, h, 0.0, h, h, h, 0.0);
    PeriodicUnit::new(
        vec![11, 17],
        vec![Vector3::zeros(), Vector3::new(h, h, h)],
        lattice,
    )
    .expect("valid primitive cell")
}

struct PcdOutcome {
    params: ModelParams,
    steps: usize,
}

#[allow(clippy::too_many_arguments)]
fn pcd_train(
    corpus: &[PeriodicUnit],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    chain_steps: usize,
    beta_cd: f64,
    grad_steps: usize,
    seed: u64,
) -> Result<PcdOutcome> {
    let mut params = ModelParams::init(cfg, derive_seed(seed, 0))?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
    let species: Vec<u8> = corpus[0].species.clone();
    // Fresh negatives descend from random initializations so spurious
    // attractors far from the data get pushed up too.
    let fresh_sched = AnnealSchedule {
        steps: chain_steps,
        beta_start: 1.0,
        beta_end: beta_cd,
        alpha_start: 0.1,
        alpha_end: 0.003,
    };
    let mut alpha_cd = 0.02f64;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut steps = 0usize;
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut last_fresh: Option<PeriodicUnit> = None;
    'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let mut sum = params.zeros_like();
            let mut e_data = 0.0;
            let mut e_cd = 0.0;
            let mut e_fresh = 0.0;
            let (mut n_cd, mut n_fresh) = (0usize, 0usize);
            for (k, &idx) in chunk.iter().enumerate() {
                let datum = &corpus[idx];
                let (ep, gp) = energy_with_grads(datum, &params, cfg, GradTargets::params())?;
                let neg = if k % 2 == 0 {
                    // Contrastive-divergence negative: walk away from the datum.
                    let mut st = ChainState::from_unit(datum, &params, cfg, rng.random())?;
                    let mut acc = 0usize;
                    for _ in 0..chain_steps {
                        if mala_step(&mut st, &params, cfg, alpha_cd, beta_cd)? {
                            acc += 1;
                        }
                    }
                    let rate = acc as f64 / chain_steps as f64;
                    alpha_cd = (alpha_cd * (0.6 * (rate - 0.5)).exp()).clamp(1e-6, 1.0);
                    accepted += acc;
                    proposed += chain_steps;
                    n_cd += 1;
                    st.unit()?
                } else {
                    let mut st = init_state(&species, &params, cfg, rng.random())?;
                    run_annealed(&mut st, &params, cfg, &fresh_sched)?;
                    n_fresh += 1;
                    st.unit()?
                };
                let (en, gn) = energy_with_grads(&neg, &params, cfg, GradTargets::params())?;
                sum.axpy(1.0, &gp.params.expect("requested"));
                sum.axpy(-1.0, &gn.params.expect("requested"));
                e_data += ep;
                if k % 2 == 0 {
                    e_cd += en;
                } else {
                    e_fresh += en;
                    last_fresh = Some(neg);
                }
            }
            let m = chunk.len() as f64;
            let mut grads = params.zeros_like();
            grads.axpy(tcfg.beta_train / m, &sum);
            adam_step(&mut params, &grads, &mut adam, tcfg)?;
            steps += 1;
            if steps % 150 == 0 {
                println!(
                    "step {steps:>4}: E_data {:>9.4} E_cd {:>9.4} E_fresh {:>9.4} accept {:.2} alpha_cd {:.1e}",
                    e_data / m,
                    e_cd / n_cd.max(1) as f64,
                    e_fresh / n_fresh.max(1) as f64,
                    accepted as f64 / proposed.max(1) as f64,
                    alpha_cd
                );
                accepted = 0;
                proposed = 0;
            }
            if steps >= grad_steps {
                break 'outer;
            }
        }
    }
    if let Some(f) = last_fresh {
        let (red, _) = f.niggli_reduced()?;
        println!("  last fresh negative: vol {:.1} shape {:?}", f.volume(), cell_shape(&red));
    }
    Ok(PcdOutcome { params, steps })
}

fn main() -> Result<()> {
    let seed = 0u64;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let corpus: Vec<PeriodicUnit> = (0..50)
        .map(|i| {
            let a = 5.4 + 0.5 * (i as f64 / 49.0);
            jitter_unit(&primitive_salt(a), 0.04, &mut rng)
        })
        .collect();
    let (test, train_split) = corpus.split_at(10);

    let cfg = ModelConfig {
        node_dim: 8,
        conv_layers: 2,
        mlp_layers: 1,
        rho_ref: 0.05,
        penalty_weight: 1.0,
        penalty_kind: PenaltyKind::Squared,
        graph: GraphConfig {
            cutoff_multiplier: 2.0,
            smear_max: 6.0,
            smear_coeff: 1.0,
            ..GraphConfig::with_edge_dim(24)
        },
    };
    let tcfg = TrainConfig {
        batch_size: 4,
        learning_rate: 0.0003,
        seed,
        ..TrainConfig::default()
    };

    let t0 = Instant::now();
    let out = pcd_train(train_split, &cfg, &tcfg, 100, 30.0, 900, seed)?;
    println!(
        "trained {} steps in {:.0}s",
        out.steps,
        t0.elapsed().as_secs_f64()
    );

    let t1 = Instant::now();
    let sampler = AnnealedSampler {
        sched: AnnealSchedule {
            steps: 1000,
            ..AnnealSchedule::default()
        },
    };
    let report = evaluate_csp(
        test,
        &out.params,
        &cfg,
        &sampler,
        &MatchTolerances::default(),
        20,
        derive_seed(seed, 77),
    )?;
    println!(
        "eval in {:.0}s: match rate {:.0}%, mean rms {:?}",
        t1.elapsed().as_secs_f64(),
        report.match_rate,
        report.mean_rms
    );
    let truth = primitive_salt(5.64);
    let (red_t, _) = truth.niggli_reduced()?;
    println!("truth reduced: {:?}", cell_shape(&red_t));
    for s in 0..4u64 {
        let u =
            continuousp::sampler::sample(&[11, 17], &out.params, &cfg, &sampler.sched, 1000 + s)?;
        let (red, _) = u.niggli_reduced()?;
        println!("draw {s}: vol {:.1} shape {:?}", u.volume(), cell_shape(&red));
    }
    Ok(())
}

/// (lengths, angles in degrees, nearest unlike distance)
fn cell_shape(u: &PeriodicUnit) -> (Vec<f64>, Vec<f64>, f64) {
    let cols: Vec<_> = (0..3).map(|c| u.lattice.column(c).into_owned()).collect();
    let lens: Vec<f64> = cols
        .iter()
        .map(|v| (v.norm() * 100.0).round() / 100.0)
        .collect();
    let ang = |a: usize, b: usize| {
        ((cols[a].dot(&cols[b]) / (cols[a].norm() * cols[b].norm()))
            .acos()
            .to_degrees()
            * 10.0)
            .round()
            / 10.0
    };
    let angles = vec![ang(1, 2), ang(0, 2), ang(0, 1)];
    let mut nn = f64::INFINITY;
    for (j, img, d) in continuousp::graph::neighborhood(u, 0, 6.0).expect("valid") {
        let _ = img;
        if u.species[j] != u.species[0] && d < nn {
            nn = d;
        }
    }
    (lens, angles, (nn * 1000.0).round() / 1000.0)
}
