//! Draws a crystal for a fixed composition by annealed Langevin sampling:
//! random cell and positions in, a local energy minimum out. Prints the
//! schedule endpoints, the energy trace, and the final structure.

use continuousp::composition::Composition;
use continuousp::element::symbol;
use continuousp::model::{ModelConfig, ModelParams};
use continuousp::sampler::{sample_with_stats, AnnealSchedule};
use continuousp::Result;

fn main() -> Result<()> {
    let cfg = ModelConfig::small();
    // Untrained weights already define a smooth landscape for the chain to
    // descend; where it lands only becomes chemically meaningful once the
    // weights are trained (see the train_toy example).
    let params = ModelParams::init(&cfg, 2)?;

    let species = [11u8, 17, 11, 17];
    let sched = AnnealSchedule {
        steps: 2000,
        ..AnnealSchedule::default()
    };
    println!(
        "annealing {} steps, beta {} -> {}, step size {} -> {}",
        sched.steps, sched.beta_start, sched.beta_end, sched.alpha_start, sched.alpha_end
    );

    let (unit, stats) = sample_with_stats(&species, &params, &cfg, &sched, 42)?;
    println!(
        "acceptance {:.1}%, energy {:.4} -> {:.4}",
        100.0 * stats.acceptance_rate(),
        stats.energy_trace.first().expect("trace is non-empty"),
        stats.energy_trace.last().expect("trace is non-empty"),
    );
    for t in (0..sched.steps).step_by(400) {
        println!("  step {t:>5}: H = {:.4}", stats.energy_trace[t]);
    }

    let comp = Composition::from_species(&unit.species)?;
    let formula: String = comp
        .counts()
        .iter()
        .map(|(z, c)| format!("{}{}", symbol(*z).expect("valid species"), c))
        .collect();
    println!("\nfinal unit ({formula}):");
    println!("  volume {:.2} A^3, density {:.4} atoms/A^3", unit.volume(), unit.density());
    for (z, pos) in unit.species.iter().zip(&unit.coords) {
        println!(
            "  {:<2} at ({:>8.4}, {:>8.4}, {:>8.4})",
            symbol(*z).expect("species came from a valid unit"),
            pos.x,
            pos.y,
            pos.z
        );
    }
    Ok(())
}
