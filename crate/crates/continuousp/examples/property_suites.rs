//! Runs the built-in property suites that gate the library's core claims
//! (invariance under re-description, continuity at the cutoff, gradient
//! agreement, sampler calibration, matcher correctness) and prints their
//! reports. The `check` subcommand wraps the same calls.

use continuousp::model::{ModelConfig, ModelParams, PenaltyKind};
use continuousp::graph::GraphConfig;
use continuousp::sampler::derive_seed;
use continuousp::suites;
use continuousp::Result;

fn main() -> Result<()> {
    let seed = 2718;

    // Sampler calibration against the exact Gaussian surrogate.
    let report = suites::run_sampler_suite(seed);
    println!("{}", report.render_text());

    // Matcher verdicts against the exhaustive-assignment oracle.
    let report = suites::run_matcher_suite(seed)?;
    println!("\n{}", report.render_text());

    // Energy invariance over generated re-descriptions, on random weights:
    // the claim is architectural, not about any particular training run.
    let cfg = ModelConfig::small();
    let params = ModelParams::init(&cfg, derive_seed(seed, 1))?;
    let cases = suites::gen_invariance_cases(60, derive_seed(seed, 2))?;
    let report = suites::run_invariance_suite(&params, &cfg, &cases)?;
    println!("\n{}", report.render_text());

    // Continuity where edges cross the cutoff, plus Lipschitz-style bounds.
    let report = suites::run_continuity_suite(&params, &cfg, derive_seed(seed, 3))?;
    println!("\n{}", report.render_text());

    // Gradient agreement with finite differences, on a low-dimensional
    // configuration so the sweep stays quick.
    let small = ModelConfig {
        node_dim: 4,
        conv_layers: 2,
        mlp_layers: 1,
        rho_ref: 0.05,
        penalty_weight: 1.0,
        penalty_kind: PenaltyKind::Squared,
        graph: GraphConfig::with_edge_dim(4),
    };
    let params = ModelParams::init(&small, derive_seed(seed, 4))?;
    let report = suites::run_gradient_suite(&params, &small, derive_seed(seed, 5))?;
    println!("\n{}", report.render_text());
    Ok(())
}
