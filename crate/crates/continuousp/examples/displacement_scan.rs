//! Checks that a briefly trained model treats its training structure as a
//! local minimum: kick one atom with Gaussian noise of growing size and
//! watch the energy climb. Reports the rank correlation between kick size
//! and energy.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use continuousp::evaluator::{displacement_energy_scan, spearman};
use continuousp::model::ModelConfig;
use continuousp::suites::{jitter_unit, rock_salt_unit};
use continuousp::trainer::{train, MalaNegativeSampler, TrainConfig, TrainState};
use continuousp::unit::PeriodicUnit;
use continuousp::Result;

fn main() -> Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let corpus: Vec<PeriodicUnit> = (0..8)
        .map(|i| jitter_unit(&rock_salt_unit(5.5 + 0.04 * i as f64), 0.03, &mut rng))
        .collect();

    let cfg = ModelConfig {
        node_dim: 8,
        conv_layers: 2,
        mlp_layers: 1,
        ..ModelConfig::small()
    };
    let tcfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        learning_rate: 0.003,
        train_chain_steps: 30,
        seed: 3,
        ..TrainConfig::default()
    };
    let negative = MalaNegativeSampler {
        sched: tcfg.negative_schedule(),
    };
    println!(
        "training {} epochs on {} jittered rock-salt units...",
        tcfg.epochs,
        corpus.len()
    );
    let state = train(
        &corpus,
        &[],
        &cfg,
        &tcfg,
        &negative,
        TrainState::fresh(&cfg, &tcfg)?,
        |_| Ok(()),
        |_, _| Ok(()),
    )?;

    let base = rock_salt_unit(5.64);
    let pairs = displacement_energy_scan(&base, &state.params, &cfg, 0.1, 400, 99)?;
    let (d, h): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let rho = spearman(&d, &h).expect("scan produced varying pairs");
    println!(
        "{} trials, sigma 0.1 A per axis: spearman(displacement, energy) = {rho:.3}",
        pairs.len()
    );

    // Coarse profile: mean energy per displacement band.
    let mut bands = vec![(0usize, 0.0f64); 5];
    for &(dist, energy) in &pairs {
        let b = ((dist / 0.1) as usize).min(bands.len() - 1);
        bands[b].0 += 1;
        bands[b].1 += energy;
    }
    println!("\n{:>12} {:>7} {:>12}", "band (A)", "trials", "mean H");
    for (b, (count, sum)) in bands.iter().enumerate() {
        if *count == 0 {
            continue;
        }
        println!(
            "{:>4.1} - {:<5.1} {count:>7} {:>12.4}",
            0.1 * b as f64,
            if b + 1 == bands.len() { f64::INFINITY } else { 0.1 * (b + 1) as f64 },
            sum / *count as f64
        );
    }
    Ok(())
}
