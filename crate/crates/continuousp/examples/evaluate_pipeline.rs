//! Runs the structure-prediction scoring loop with a stand-in sampler that
//! returns noisy copies of the truth. This isolates the pipeline mechanics
//! (composition conditioning, matching, aggregation) from model quality, so
//! the numbers here are about the harness, not the physics.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use continuousp::evaluator::{evaluate_csp, StructureSampler};
use continuousp::matcher::MatchTolerances;
use continuousp::model::{ModelConfig, ModelParams};
use continuousp::suites::{jitter_unit, rock_salt_unit};
use continuousp::unit::PeriodicUnit;
use continuousp::Result;

/// Returns the target displaced by per-seed Gaussian noise. A sampler this
/// strong scores a perfect match rate; shrinking sigma shrinks the rms.
struct NoisyOracle {
    sigma: f64,
}

impl StructureSampler for NoisyOracle {
    fn sample(
        &self,
        target: &PeriodicUnit,
        _params: &ModelParams,
        _cfg: &ModelConfig,
        seed: u64,
    ) -> Result<PeriodicUnit> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(jitter_unit(target, self.sigma, &mut rng))
    }
}

fn main() -> Result<()> {
    let cfg = ModelConfig::small();
    let params = ModelParams::init(&cfg, 1)?;
    let test: Vec<PeriodicUnit> = [5.50, 5.64, 5.78, 5.92]
        .iter()
        .map(|&a| rock_salt_unit(a))
        .collect();
    let tol = MatchTolerances::default();

    for sigma in [0.05, 0.25] {
        let report = evaluate_csp(
            &test,
            &params,
            &cfg,
            &NoisyOracle { sigma },
            &tol,
            5,
            2024,
        )?;
        println!(
            "oracle sigma {sigma}: match rate {:.0}%, mean rms {}",
            report.match_rate,
            report
                .mean_rms
                .map_or("n/a".into(), |r| format!("{r:.4} A")),
        );
        for (unit, outcome) in test.iter().zip(&report.outcomes) {
            println!(
                "  a = {:.2}: {}",
                unit.lattice[(0, 0)],
                match outcome.rms {
                    Some(rms) => format!("matched, best rms {rms:.4} A"),
                    None => "no candidate matched".into(),
                }
            );
        }
    }

    // The production path swaps NoisyOracle for AnnealedSampler, which draws
    // from the trained model conditioned on each crystal's composition.
    Ok(())
}
