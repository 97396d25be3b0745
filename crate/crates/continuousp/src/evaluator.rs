//! Evaluation harness: structure-prediction scoring and energy landscape probes.
//!
//! `evaluate_csp` scores a model by sampling candidate structures for each
//! test crystal's composition and matching them against the ground truth.
//! `displacement_energy_scan` probes the learned energy surface around one
//! structure by perturbing a single atom and recording how energy responds.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::matcher::{match_structures, MatchTolerances};
use crate::model::{ModelConfig, ModelParams};
use crate::sampler::{derive_seed, AnnealSchedule};
use crate::unit::PeriodicUnit;
use crate::{Error, Result};

/// Draws one candidate structure for a target crystal's composition.
///
/// Production samplers must condition only on `target.species`; oracle
/// doubles used by pipeline tests may return the target itself.
pub trait StructureSampler: Sync {
    fn sample(
        &self,
        target: &PeriodicUnit,
        params: &ModelParams,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<PeriodicUnit>;
}

/// The production sampler: an annealed chain from the model distribution.
pub struct AnnealedSampler {
    pub sched: AnnealSchedule,
}

impl StructureSampler for AnnealedSampler {
    fn sample(
        &self,
        target: &PeriodicUnit,
        params: &ModelParams,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<PeriodicUnit> {
        crate::sampler::sample(&target.species, params, cfg, &self.sched, seed)
    }
}

/// Per-crystal evaluation outcome. `rms` is the minimum over matching
/// samples and is present exactly when `matched`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalOutcome {
    pub matched: bool,
    pub rms: Option<f64>,
    pub failed_samples: usize,
}

/// Aggregate evaluation result. `mean_rms` averages the per-crystal minimum
/// rms over matched crystals only, and is absent when nothing matched.
#[derive(Debug, Clone, PartialEq)]
pub struct CspReport {
    pub outcomes: Vec<CrystalOutcome>,
    pub match_rate: f64,
    pub mean_rms: Option<f64>,
}

/// Scores structure prediction over a test set.
///
/// For each crystal, `samples_per_crystal` candidates are drawn conditioned
/// on its composition; the crystal counts as matched when any candidate
/// matches. Sampler failures and unmatchable candidates are logged and
/// scored as non-matches, never as errors. Crystals are evaluated in
/// parallel with per-crystal derived seeds, so the report is deterministic
/// for a fixed seed regardless of thread schedule.
pub fn evaluate_csp(
    test: &[PeriodicUnit],
    params: &ModelParams,
    cfg: &ModelConfig,
    sampler: &dyn StructureSampler,
    tol: &MatchTolerances,
    samples_per_crystal: usize,
    seed: u64,
) -> Result<CspReport> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("test set is empty".into()));
    }
    if samples_per_crystal == 0 {
        return Err(Error::InvalidConfig(
            "samples_per_crystal must be at least 1".into(),
        ));
    }
    tol.validate()?;
    for (i, u) in test.iter().enumerate() {
        if let Some(v) = u.validate().first() {
            return Err(Error::InvalidUnit(format!("test crystal {i}: {v}")));
        }
    }

    let outcomes: Vec<CrystalOutcome> = test
        .par_iter()
        .enumerate()
        .map(|(i, truth)| {
            let crystal_seed = derive_seed(seed, i as u64);
            let mut best: Option<f64> = None;
            let mut failed = 0usize;
            for k in 0..samples_per_crystal {
                let sample_seed = derive_seed(crystal_seed, k as u64);
                let candidate = match sampler.sample(truth, params, cfg, sample_seed) {
                    Ok(c) => c,
                    Err(e) => {
                        log::warn!("crystal {i} sample {k}: sampler failed: {e}");
                        failed += 1;
                        continue;
                    }
                };
                match match_structures(truth, &candidate, tol) {
                    Ok(report) => {
                        if let Some(rms) = report.rms {
                            if best.map_or(true, |b| rms < b) {
                                best = Some(rms);
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("crystal {i} sample {k}: unmatchable candidate: {e}");
                        failed += 1;
                    }
                }
            }
            CrystalOutcome {
                matched: best.is_some(),
                rms: best,
                failed_samples: failed,
            }
        })
        .collect();

    let matched: Vec<f64> = outcomes.iter().filter_map(|o| o.rms).collect();
    let match_rate = 100.0 * matched.len() as f64 / test.len() as f64;
    let mean_rms = if matched.is_empty() {
        None
    } else {
        Some(matched.iter().sum::<f64>() / matched.len() as f64)
    };
    Ok(CspReport {
        outcomes,
        match_rate,
        mean_rms,
    })
}

/// Perturbs one seeded-randomly chosen atom with isotropic Gaussian noise
/// (`sigma` per axis) and records (noise norm, energy) per trial. The base
/// structure stays unperturbed throughout; trials whose energy is non-finite
/// are skipped with a warning, so the output holds one pair per successful
/// trial. Output is reproducible for a fixed seed.
pub fn displacement_energy_scan(
    unit: &PeriodicUnit,
    params: &ModelParams,
    cfg: &ModelConfig,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    if let Some(v) = unit.validate().first() {
        return Err(Error::InvalidUnit(v.to_string()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let index = rng.random_range(0..unit.n());

    let mut pairs = Vec::with_capacity(trials);
    for trial in 0..trials {
        let noise = Vector3::new(
            sigma * rng.sample::<f64, _>(StandardNormal),
            sigma * rng.sample::<f64, _>(StandardNormal),
            sigma * rng.sample::<f64, _>(StandardNormal),
        );
        let mut coords = unit.coords.clone();
        coords[index] += noise;
        let perturbed = PeriodicUnit::new(unit.species.clone(), coords, unit.lattice)?;
        match crate::model::energy(&perturbed, params, cfg) {
            Ok(h) => pairs.push((noise.norm(), h)),
            Err(Error::NonFiniteEnergy(msg)) => {
                log::warn!("trial {trial}: skipping non-finite energy: {msg}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(pairs)
}

/// Spearman rank correlation with average ranks for ties. Returns None for
/// mismatched lengths, fewer than two points, or zero variance in either
/// argument.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Tied block [i, j] shares the average of its 1-based rank range.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphConfig;
    use crate::model::PenaltyKind;
    use crate::sampler::C3;
    use nalgebra::Matrix3;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            node_dim: 2,
            conv_layers: 1,
            mlp_layers: 1,
            rho_ref: 0.05,
            penalty_weight: 1.0,
            penalty_kind: PenaltyKind::Squared,
            graph: GraphConfig::with_edge_dim(2),
        }
    }

    fn salt(a: f64) -> PeriodicUnit {
        PeriodicUnit::new(
            vec![11, 17],
            vec![Vector3::zeros(), Vector3::new(a / 2.0, a / 2.0, a / 2.0)],
            Matrix3::identity() * a,
        )
        .expect("valid unit")
    }

    struct Oracle;
    impl StructureSampler for Oracle {
        fn sample(
            &self,
            target: &PeriodicUnit,
            _params: &ModelParams,
            _cfg: &ModelConfig,
            _seed: u64,
        ) -> Result<PeriodicUnit> {
            Ok(target.clone())
        }
    }

    struct AlwaysFail;
    impl StructureSampler for AlwaysFail {
        fn sample(
            &self,
            _target: &PeriodicUnit,
            _params: &ModelParams,
            _cfg: &ModelConfig,
            _seed: u64,
        ) -> Result<PeriodicUnit> {
            Err(Error::InitFailed(1))
        }
    }

    /// Returns the truth for sodium-bearing crystals, fails otherwise.
    struct SodiumOnly;
    impl StructureSampler for SodiumOnly {
        fn sample(
            &self,
            target: &PeriodicUnit,
            _params: &ModelParams,
            _cfg: &ModelConfig,
            _seed: u64,
        ) -> Result<PeriodicUnit> {
            if target.species.contains(&11) {
                Ok(target.clone())
            } else {
                Err(Error::InitFailed(1))
            }
        }
    }

    #[test]
    fn oracle_sampler_scores_perfectly() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let test = vec![salt(3.0), salt(3.2), salt(3.4)];
        let report = evaluate_csp(
            &test,
            &params,
            &cfg,
            &Oracle,
            &MatchTolerances::default(),
            4,
            9,
        )
        .expect("evaluation runs");
        assert_eq!(report.match_rate, 100.0);
        assert!(report.mean_rms.expect("rms present") <= 1e-9);
        assert!(report.outcomes.iter().all(|o| o.matched && o.failed_samples == 0));
    }

    #[test]
    fn sampler_failures_score_as_non_matches() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let test = vec![salt(3.0), salt(3.2)];
        let report = evaluate_csp(
            &test,
            &params,
            &cfg,
            &AlwaysFail,
            &MatchTolerances::default(),
            5,
            9,
        )
        .expect("failures are not errors");
        assert_eq!(report.match_rate, 0.0);
        assert_eq!(report.mean_rms, None);
        assert!(report
            .outcomes
            .iter()
            .all(|o| !o.matched && o.rms.is_none() && o.failed_samples == 5));
    }

    #[test]
    fn partial_failures_average_over_matches_only() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let carbon = PeriodicUnit::new(
            vec![6, 6],
            vec![Vector3::zeros(), Vector3::new(0.9, 0.9, 0.9)],
            Matrix3::identity() * 3.6,
        )
        .expect("valid unit");
        let test = vec![salt(3.0), carbon, salt(3.4)];
        let report = evaluate_csp(
            &test,
            &params,
            &cfg,
            &SodiumOnly,
            &MatchTolerances::default(),
            2,
            9,
        )
        .expect("evaluation runs");
        assert!((report.match_rate - 200.0 / 3.0).abs() < 1e-12);
        assert!(report.mean_rms.expect("two crystals matched") <= 1e-9);
        assert!(!report.outcomes[1].matched);
        assert_eq!(report.outcomes[1].failed_samples, 2);
    }

    #[test]
    fn annealed_sampler_smoke_run_is_deterministic() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let sampler = AnnealedSampler {
            sched: AnnealSchedule {
                steps: 20,
                ..AnnealSchedule::default()
            },
        };
        let test = vec![salt(3.0), salt(3.3)];
        let run = || {
            evaluate_csp(
                &test,
                &params,
                &cfg,
                &sampler,
                &MatchTolerances::default(),
                2,
                11,
            )
            .expect("smoke run completes")
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "fixed seed must reproduce the report exactly");
        assert!(a.match_rate.is_finite());
    }

    #[test]
    fn scan_with_zero_sigma_returns_base_energy_exactly() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let u = salt(3.0);
        let base = crate::model::energy(&u, &params, &cfg).expect("energy evaluates");
        let pairs = displacement_energy_scan(&u, &params, &cfg, 0.0, 10, 7).expect("scan runs");
        assert_eq!(pairs.len(), 10);
        for (d, h) in pairs {
            assert_eq!(d, 0.0);
            assert_eq!(h.to_bits(), base.to_bits());
        }
    }

    #[test]
    fn scan_mean_displacement_matches_gaussian_norm() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let u = salt(3.0);
        let sigma = 0.1;
        let trials = 1000;
        let pairs =
            displacement_energy_scan(&u, &params, &cfg, sigma, trials, 13).expect("scan runs");
        assert_eq!(pairs.len(), trials, "finite model skips no trials");
        let mean = pairs.iter().map(|(d, _)| d).sum::<f64>() / trials as f64;
        // The norm of isotropic Gaussian noise has mean sigma * 2 sqrt(2/pi)
        // and variance sigma^2 (3 - 8/pi).
        let expected = sigma * C3;
        let se = (sigma * sigma * (3.0 - C3 * C3) / trials as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mean {mean} vs {expected} (3se {:.2e})",
            3.0 * se
        );
    }

    #[test]
    fn scan_is_reproducible_for_fixed_seed() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let u = salt(3.0);
        let a = displacement_energy_scan(&u, &params, &cfg, 0.1, 50, 17).expect("scan runs");
        let b = displacement_energy_scan(&u, &params, &cfg, 0.1, 50, 17).expect("scan runs");
        assert_eq!(a.len(), b.len());
        for ((da, ha), (db, hb)) in a.iter().zip(&b) {
            assert_eq!(da.to_bits(), db.to_bits());
            assert_eq!(ha.to_bits(), hb.to_bits());
        }
        let c = displacement_energy_scan(&u, &params, &cfg, 0.1, 50, 18).expect("scan runs");
        assert!(a.iter().zip(&c).any(|((da, _), (dc, _))| da != dc));
    }

    #[test]
    fn scan_rejects_bad_arguments() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let u = salt(3.0);
        assert!(matches!(
            displacement_energy_scan(&u, &params, &cfg, -0.1, 10, 1),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            displacement_energy_scan(&u, &params, &cfg, 0.1, 0, 1),
            Err(Error::InvalidConfig(_))
        ));
        let degenerate =
            PeriodicUnit::new(vec![11], vec![Vector3::zeros()], Matrix3::zeros())
                .expect("constructor accepts shape");
        assert!(matches!(
            displacement_energy_scan(&degenerate, &params, &cfg, 0.1, 10, 1),
            Err(Error::InvalidUnit(_))
        ));
    }

    #[test]
    fn spearman_matches_hand_computed_values() {
        // Monotone increasing, any shape.
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap();
        assert!((r - 1.0).abs() <= 1e-12);
        // Monotone decreasing.
        let r = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() <= 1e-12);
        // Tie case: x ranks (1.5, 1.5, 3), y ranks (1, 2, 3), Pearson on
        // ranks gives sqrt(3)/2.
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 3f64.sqrt() / 2.0).abs() <= 1e-12, "got {r}");
        // Degenerate inputs.
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
        assert_eq!(spearman(&[1.0, 2.0], &[1.0]), None);
    }
}
