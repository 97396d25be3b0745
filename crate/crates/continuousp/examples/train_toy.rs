//! Trains the energy model contrastively on a toy corpus of jittered
//! rock-salt cells: data structures are pushed down in energy, chain samples
//! from the model are pushed up. Prints the per-batch diagnostics a longer
//! run would stream to a log.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use continuousp::model::ModelConfig;
use continuousp::suites::{jitter_unit, rock_salt_unit};
use continuousp::trainer::{train, MalaNegativeSampler, TrainConfig, TrainState};
use continuousp::unit::PeriodicUnit;
use continuousp::Result;

fn main() -> Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let corpus: Vec<PeriodicUnit> = (0..9)
        .map(|i| {
            let a = 5.4 + 0.05 * i as f64;
            jitter_unit(&rock_salt_unit(a), 0.04, &mut rng)
        })
        .collect();
    let (train_split, val_split) = corpus.split_at(6);
    println!(
        "corpus: {} training units, {} validation, 8 atoms each",
        train_split.len(),
        val_split.len()
    );

    let cfg = ModelConfig {
        node_dim: 8,
        conv_layers: 2,
        mlp_layers: 1,
        ..ModelConfig::small()
    };
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 3,
        learning_rate: 0.003,
        train_chain_steps: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let negative = MalaNegativeSampler {
        sched: tcfg.negative_schedule(),
    };

    let state = TrainState::fresh(&cfg, &tcfg)?;
    let trained = train(
        train_split,
        val_split,
        &cfg,
        &tcfg,
        &negative,
        state,
        |b| {
            println!(
                "  step {:>2}: E_data {:>8.4}  E_sample {:>8.4}  accept {:.2}  |grad| {:.3e}",
                b.step, b.data_energy, b.sample_energy, b.acceptance, b.grad_norm
            );
            Ok(())
        },
        |e, _| {
            println!(
                "epoch {} done: val energy {}",
                e.epoch,
                e.val_energy.map_or("n/a".into(), |v| format!("{v:.4}")),
            );
            Ok(())
        },
    )?;

    // The contrastive signal drives E_data below E_sample; with a handful of
    // steps the gap direction is the thing to look at, not its size.
    println!(
        "\nfinished at step {}, params still finite: {}",
        trained.global_step,
        trained.params.all_finite()
    );
    Ok(())
}
