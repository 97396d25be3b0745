//! Contrastive training: positive phase on data, negative phase on annealed
//! chains conditioned on geometrically expanded compositions, Adam updates,
//! and a seeded epoch loop.
//!
//! The partition function is never evaluated; only the gradient of its log
//! is estimated, as beta * mean over the batch of
//! (grad_theta H(datum) - grad_theta H(negative sample)),
//! with one negative sample per datum.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::Composition;
use crate::error::{Error, Result};
use crate::grad::{energy_with_grads, GradTargets};
use crate::model::{energy, ModelConfig, ModelParams};
use crate::sampler::{derive_seed, sample_with_stats, AnnealSchedule};
use crate::unit::PeriodicUnit;

/// Most atoms allowed in an expanded negative-phase cell when `j_cap` is
/// left unset.
pub const MAX_EXPANDED_ATOMS: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Success probability of the geometric draw over expansion multipliers.
    pub q: f64,
    /// Inverse temperature scaling the contrastive gradient.
    pub beta_train: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cap on the expansion multiplier. None caps per datum at the largest
    /// j with j * (reduced cell size) <= MAX_EXPANDED_ATOMS.
    pub j_cap: Option<u32>,
    /// MALA steps per negative-phase chain.
    pub train_chain_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            q: 0.5,
            beta_train: 1.0,
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 5,
            batch_size: 8,
            j_cap: None,
            train_chain_steps: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.q > 0.0 && self.q <= 1.0) {
            problems.push(format!("q must be in (0, 1], got {}", self.q));
        }
        if !(self.beta_train > 0.0 && self.beta_train.is_finite()) {
            problems.push(format!("beta_train must be positive, got {}", self.beta_train));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            problems.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if self.j_cap == Some(0) {
            problems.push("j_cap must be >= 1".into());
        }
        if self.train_chain_steps == 0 {
            problems.push("train_chain_steps must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// Expansion cap for a reduced cell of `reduced_atoms` atoms.
    pub fn j_cap_for(&self, reduced_atoms: usize) -> u32 {
        match self.j_cap {
            Some(j) => j,
            None => (MAX_EXPANDED_ATOMS / reduced_atoms.max(1)).max(1) as u32,
        }
    }

    /// Negative-phase schedule: the standard ramps compressed into
    /// `train_chain_steps` steps.
    pub fn negative_schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            steps: self.train_chain_steps,
            ..AnnealSchedule::default()
        }
    }
}

/// Draws an expansion multiplier j from Geom(q) truncated at `j_cap` and
/// renormalized, then expands the reduced composition of `species` by j.
/// Consumes exactly one uniform draw, so the result depends on the input
/// only through its composition.
pub fn sample_expansion<R: Rng + ?Sized>(
    species: &[u8],
    q: f64,
    j_cap: u32,
    rng: &mut R,
) -> Result<(Vec<u8>, u32)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "geometric q must be in (0, 1], got {q}"
        )));
    }
    if j_cap == 0 {
        return Err(Error::InvalidConfig("j_cap must be >= 1".into()));
    }
    let (reduced, _) = Composition::from_species(species)?.reduce();
    let u: f64 = rng.random();
    let total = 1.0 - (1.0 - q).powi(j_cap as i32);
    let mut j = 1u32;
    let mut cum = 0.0;
    while j < j_cap {
        cum += (1.0 - q).powi(j as i32 - 1) * q / total;
        if u < cum {
            break;
        }
        j += 1;
    }
    Ok((reduced.expand_species(j)?, j))
}

/// One negative-phase draw and its chain acceptance rate.
#[derive(Debug, Clone)]
pub struct NegativeSample {
    pub unit: PeriodicUnit,
    pub acceptance: f64,
}

/// Produces the negative-phase sample conditioned on a species vector.
/// Implementations must be deterministic in `seed`.
pub trait NegativeSampler: Sync {
    fn sample(
        &self,
        species: &[u8],
        params: &ModelParams,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<NegativeSample>;
}

/// The standard negative phase: one annealed MALA chain per datum.
#[derive(Debug, Clone)]
pub struct MalaNegativeSampler {
    pub sched: AnnealSchedule,
}

impl NegativeSampler for MalaNegativeSampler {
    fn sample(
        &self,
        species: &[u8],
        params: &ModelParams,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<NegativeSample> {
        let (unit, stats) = sample_with_stats(species, params, cfg, &self.sched, seed)?;
        Ok(NegativeSample {
            unit,
            acceptance: stats.acceptance_rate(),
        })
    }
}

/// Returns a fixed unit regardless of the requested species or seed. Pins
/// the negative phase when calibrating the contrastive gradient identity.
#[derive(Debug, Clone)]
pub struct FrozenNegativeSampler {
    pub unit: PeriodicUnit,
}

impl NegativeSampler for FrozenNegativeSampler {
    fn sample(
        &self,
        _species: &[u8],
        _params: &ModelParams,
        _cfg: &ModelConfig,
        _seed: u64,
    ) -> Result<NegativeSample> {
        Ok(NegativeSample {
            unit: self.unit.clone(),
            acceptance: 1.0,
        })
    }
}

/// Batch means over the data that survived the negative phase.
#[derive(Debug, Clone)]
pub struct BatchDiagnostics {
    pub data_energy: f64,
    pub sample_energy: f64,
    pub acceptance: f64,
    pub used: usize,
    pub dropped: usize,
}

/// Contrastive parameter gradient over one batch:
/// beta_train * mean of (grad H(datum) - grad H(negative sample)), the
/// sample conditioned on the datum's expanded composition. A datum whose
/// phase fails is dropped from the mean with a warning; the call fails only
/// when every datum does. Chains run in parallel; every random choice is
/// drawn from `rng` in batch order first, so the result does not depend on
/// scheduling.
pub fn batch_gradient(
    batch: &[PeriodicUnit],
    params: &ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    negative: &dyn NegativeSampler,
    rng: &mut ChaCha12Rng,
) -> Result<(ModelParams, BatchDiagnostics)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let batch_seed: u64 = rng.random();
    let mut prepared = Vec::with_capacity(batch.len());
    for (i, datum) in batch.iter().enumerate() {
        let reduced_atoms = Composition::from_species(&datum.species)?.reduce().0.total() as usize;
        let (expanded, _) =
            sample_expansion(&datum.species, tcfg.q, tcfg.j_cap_for(reduced_atoms), rng)?;
        prepared.push((expanded, derive_seed(batch_seed, i as u64)));
    }

    struct Phase {
        grad: ModelParams,
        data_energy: f64,
        sample_energy: f64,
        acceptance: f64,
    }

    let phases: Vec<Result<Phase>> = batch
        .par_iter()
        .zip(&prepared)
        .map(|(datum, (expanded, seed))| {
            let (e_pos, g_pos) = energy_with_grads(datum, params, cfg, GradTargets::params())?;
            let neg = negative.sample(expanded, params, cfg, *seed)?;
            let (e_neg, g_neg) = energy_with_grads(&neg.unit, params, cfg, GradTargets::params())?;
            let mut grad = g_pos.params.expect("parameter gradients requested");
            grad.axpy(-1.0, &g_neg.params.expect("parameter gradients requested"));
            Ok(Phase {
                grad,
                data_energy: e_pos,
                sample_energy: e_neg,
                acceptance: neg.acceptance,
            })
        })
        .collect();

    let mut sum = params.zeros_like();
    let mut diag = BatchDiagnostics {
        data_energy: 0.0,
        sample_energy: 0.0,
        acceptance: 0.0,
        used: 0,
        dropped: 0,
    };
    for (i, phase) in phases.into_iter().enumerate() {
        match phase {
            Ok(p) => {
                sum.axpy(1.0, &p.grad);
                diag.data_energy += p.data_energy;
                diag.sample_energy += p.sample_energy;
                diag.acceptance += p.acceptance;
                diag.used += 1;
            }
            Err(e) => {
                diag.dropped += 1;
                log::warn!("dropping datum {i} from batch: {e}");
            }
        }
    }
    if diag.used == 0 {
        return Err(Error::TrainAborted(
            "every datum in the batch failed".into(),
        ));
    }
    let m = diag.used as f64;
    diag.data_energy /= m;
    diag.sample_energy /= m;
    diag.acceptance /= m;
    let mut grads = params.zeros_like();
    grads.axpy(tcfg.beta_train / m, &sum);
    Ok((grads, diag))
}

/// Adam moments, shaped like the parameters they update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ModelParams,
    pub second: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. A non-finite gradient skips the
/// update with a warning, leaving parameters, moments, and the step counter
/// untouched; returns whether the update was applied.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    tcfg: &TrainConfig,
) -> Result<bool> {
    if !grads.all_finite() {
        log::warn!("skipping optimizer step {}: non-finite gradient", state.step + 1);
        return Ok(false);
    }
    let g = grads.flatten();
    let mut p = params.flatten();
    if g.len() != p.len() {
        return Err(Error::ShapeMismatch {
            name: "gradient".into(),
            expected: format!("{} scalars", p.len()),
            found: format!("{} scalars", g.len()),
        });
    }
    let mut m = state.first.flatten();
    let mut v = state.second.flatten();
    state.step += 1;
    let c1 = 1.0 - tcfg.adam_beta1.powi(state.step as i32);
    let c2 = 1.0 - tcfg.adam_beta2.powi(state.step as i32);
    for k in 0..g.len() {
        m[k] = tcfg.adam_beta1 * m[k] + (1.0 - tcfg.adam_beta1) * g[k];
        v[k] = tcfg.adam_beta2 * v[k] + (1.0 - tcfg.adam_beta2) * g[k] * g[k];
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        p[k] -= tcfg.learning_rate * m_hat / (v_hat.sqrt() + tcfg.adam_eps);
    }
    params.unflatten_into(&p)?;
    state.first.unflatten_into(&m)?;
    state.second.unflatten_into(&v)?;
    Ok(true)
}

/// One diagnostics record per applied batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: u64,
    pub data_energy: f64,
    pub sample_energy: f64,
    pub acceptance: f64,
    pub grad_norm: f64,
    pub used: usize,
    pub dropped: usize,
}

/// Where a run stands: parameters, optimizer state, and the next epoch.
/// Batch randomness derives from (seed, epoch), so resuming at an epoch
/// boundary reproduces the uninterrupted run bitwise.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub next_epoch: usize,
    pub global_step: u64,
}

impl TrainState {
    /// Fresh state with parameters drawn from the config seed.
    pub fn fresh(cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(cfg, derive_seed(tcfg.seed, 0))?;
        let adam = AdamState::new(&params);
        Ok(TrainState {
            params,
            adam,
            next_epoch: 0,
            global_step: 0,
        })
    }
}

/// Epoch summary handed to the checkpoint hook after each epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean data energy over the validation split, None if empty.
    pub val_energy: Option<f64>,
    pub failed_batches: usize,
    pub batches: usize,
}

/// Runs epochs of shuffled batches (seeded by (seed, epoch)) through
/// batch_gradient and adam_step. `on_batch` sees one record per applied
/// update; `on_epoch` sees the epoch summary and the state to checkpoint.
/// Aborts when more than 10% of at least 10 batches have failed.
pub fn train(
    data: &[PeriodicUnit],
    val: &[PeriodicUnit],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    negative: &dyn NegativeSampler,
    mut state: TrainState,
    mut on_batch: impl FnMut(&BatchRecord) -> Result<()>,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    cfg.validate()?;
    tcfg.validate()?;
    for epoch in state.next_epoch..tcfg.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(tcfg.seed, 1 + epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut failed = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<PeriodicUnit> = chunk.iter().map(|&i| data[i].clone()).collect();
            batches += 1;
            match batch_gradient(&batch, &state.params, cfg, tcfg, negative, &mut rng) {
                Ok((grads, diag)) => {
                    let grad_norm = grads.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
                    if adam_step(&mut state.params, &grads, &mut state.adam, tcfg)? {
                        state.global_step += 1;
                        on_batch(&BatchRecord {
                            epoch,
                            step: state.global_step,
                            data_energy: diag.data_energy,
                            sample_energy: diag.sample_energy,
                            acceptance: diag.acceptance,
                            grad_norm,
                            used: diag.used,
                            dropped: diag.dropped,
                        })?;
                    } else {
                        failed += 1;
                    }
                }
                Err(e) => {
                    failed += 1;
                    log::warn!("epoch {epoch}: batch failed: {e}");
                }
            }
            if batches >= 10 && failed * 10 > batches {
                return Err(Error::TrainAborted(format!(
                    "{failed} of {batches} batches failed in epoch {epoch}"
                )));
            }
        }
        let val_energy = mean_energy(val, &state.params, cfg);
        state.next_epoch = epoch + 1;
        on_epoch(
            &EpochRecord {
                epoch,
                val_energy,
                failed_batches: failed,
                batches,
            },
            &state,
        )?;
    }
    Ok(state)
}

/// Mean model energy over a split, skipping units that fail to evaluate.
pub fn mean_energy(units: &[PeriodicUnit], params: &ModelParams, cfg: &ModelConfig) -> Option<f64> {
    let values: Vec<f64> = units
        .iter()
        .filter_map(|u| energy(u, params, cfg).ok())
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphConfig;
    use crate::model::PenaltyKind;
    use nalgebra::{Matrix3, Vector3};

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

    fn salt_unit() -> PeriodicUnit {
        PeriodicUnit::new(
            vec![11, 17],
            vec![Vector3::zeros(), Vector3::new(1.5, 1.5, 1.5)],
            Matrix3::from_diagonal(&Vector3::new(3.0, 3.0, 3.0)),
        )
        .unwrap()
    }

    fn carbon_unit() -> PeriodicUnit {
        PeriodicUnit::new(
            vec![6, 6],
            vec![Vector3::zeros(), Vector3::new(0.9, 0.9, 0.9)],
            Matrix3::from_diagonal(&Vector3::new(3.6, 3.6, 3.6)),
        )
        .unwrap()
    }

    struct FailOnCarbon;

    impl NegativeSampler for FailOnCarbon {
        fn sample(
            &self,
            species: &[u8],
            _params: &ModelParams,
            _cfg: &ModelConfig,
            _seed: u64,
        ) -> Result<NegativeSample> {
            if species.contains(&6) {
                return Err(Error::InvalidConfig("no carbon".into()));
            }
            Ok(NegativeSample {
                unit: salt_unit(),
                acceptance: 1.0,
            })
        }
    }

    struct AlwaysFail;

    impl NegativeSampler for AlwaysFail {
        fn sample(
            &self,
            _species: &[u8],
            _params: &ModelParams,
            _cfg: &ModelConfig,
            _seed: u64,
        ) -> Result<NegativeSample> {
            Err(Error::InvalidConfig("this sampler always fails".into()))
        }
    }

    fn bits(params: &ModelParams) -> Vec<u64> {
        params.flatten().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn config_defaults_and_expansion_cap() {
        let tcfg = TrainConfig::default();
        assert!(tcfg.validate().is_ok());
        assert_eq!(tcfg.q, 0.5);
        assert_eq!(tcfg.beta_train, 1.0);
        assert_eq!(tcfg.learning_rate, 0.001);
        assert_eq!((tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!(tcfg.batch_size, 8);
        assert_eq!(tcfg.train_chain_steps, 100);

        assert_eq!(tcfg.j_cap_for(2), 40);
        assert_eq!(tcfg.j_cap_for(80), 1);
        assert_eq!(tcfg.j_cap_for(81), 1);
        let fixed = TrainConfig {
            j_cap: Some(5),
            ..TrainConfig::default()
        };
        assert_eq!(fixed.j_cap_for(2), 5);

        let sched = tcfg.negative_schedule();
        assert_eq!(sched.steps, 100);
        assert_eq!(sched.anneal(0), (1.0, 0.5));
        assert_eq!(sched.anneal(99), (1000.0, 0.0005));

        let bad = TrainConfig {
            q: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn expansion_matches_truncated_geometric() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let trials = 100_000;
        let mut count_one = 0usize;
        let mut sum = 0.0;
        for _ in 0..trials {
            let (species, j) = sample_expansion(&[11, 17], 0.5, 30, &mut rng).unwrap();
            assert_eq!(species.len(), 2 * j as usize);
            if j == 1 {
                count_one += 1;
            }
            sum += j as f64;
        }
        // Truncation mass beyond j = 30 is 2^-30; the untruncated law has
        // P(1) = q and mean 1/q with variance (1-q)/q^2.
        let p1 = count_one as f64 / trials as f64;
        assert!((p1 - 0.5).abs() < 3.0 * (0.25f64 / trials as f64).sqrt());
        let mean = sum / trials as f64;
        assert!((mean - 2.0).abs() < 3.0 * (2.0f64 / trials as f64).sqrt());

        // Tight cap renormalizes: P(1) = q / (1 - (1-q)^3).
        let mut ones = 0usize;
        for _ in 0..trials {
            let (_, j) = sample_expansion(&[11, 17], 0.5, 3, &mut rng).unwrap();
            assert!((1..=3).contains(&j));
            if j == 1 {
                ones += 1;
            }
        }
        let want = 0.5 / (1.0 - 0.125);
        let sigma = (want * (1.0 - want) / trials as f64).sqrt();
        assert!((ones as f64 / trials as f64 - want).abs() < 3.0 * sigma);

        // q = 1 reproduces the reduced composition deterministically.
        let (species, j) = sample_expansion(&[11, 17, 11, 17], 1.0, 4, &mut rng).unwrap();
        assert_eq!(j, 1);
        assert_eq!(species, vec![11, 17]);
    }

    #[test]
    fn expansion_depends_only_on_composition() {
        // Re-descriptions of one crystal share a reduced composition, so a
        // fixed rng stream must produce identical output for all of them.
        let descriptions: [&[u8]; 3] = [&[11, 17, 11, 17], &[17, 11, 17, 11], &[11, 11, 17, 17]];
        let baseline = {
            let mut rng = ChaCha12Rng::seed_from_u64(9);
            sample_expansion(descriptions[0], 0.5, 10, &mut rng).unwrap()
        };
        for d in descriptions {
            let mut rng = ChaCha12Rng::seed_from_u64(9);
            assert_eq!(sample_expansion(d, 0.5, 10, &mut rng).unwrap(), baseline);
        }
    }

    #[test]
    fn batch_gradient_matches_contrastive_identity() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let datum = salt_unit();
        let frozen = FrozenNegativeSampler { unit: carbon_unit() };
        let tcfg = TrainConfig {
            beta_train: 2.5,
            j_cap: Some(1),
            ..TrainConfig::default()
        };

        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (grads, diag) = batch_gradient(
            &[datum.clone()],
            &params,
            &cfg,
            &tcfg,
            &frozen,
            &mut rng,
        )
        .unwrap();
        assert_eq!(diag.used, 1);
        assert_eq!(diag.dropped, 0);

        let (e_pos, g_pos) = energy_with_grads(&datum, &params, &cfg, GradTargets::params()).unwrap();
        let (e_neg, g_neg) =
            energy_with_grads(&carbon_unit(), &params, &cfg, GradTargets::params()).unwrap();
        let mut want = g_pos.params.unwrap();
        want.axpy(-1.0, &g_neg.params.unwrap());
        let mut scaled = want.zeros_like();
        scaled.axpy(2.5, &want);
        assert_eq!(bits(&grads), bits(&scaled));
        assert_eq!(diag.data_energy.to_bits(), e_pos.to_bits());
        assert_eq!(diag.sample_energy.to_bits(), e_neg.to_bits());

        // Two copies of the datum average to the single-datum gradient.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (grads2, diag2) = batch_gradient(
            &[datum.clone(), datum.clone()],
            &params,
            &cfg,
            &tcfg,
            &frozen,
            &mut rng,
        )
        .unwrap();
        assert_eq!(diag2.used, 2);
        assert_eq!(bits(&grads2), bits(&grads));
    }

    #[test]
    fn batch_gradient_cancels_for_identical_sample() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let datum = salt_unit();
        // j_cap = 1 forces the expanded composition back to the datum's own
        // (already reduced) species, and the frozen sampler returns the
        // datum itself: both phases see the same unit and cancel exactly.
        let tcfg = TrainConfig {
            j_cap: Some(1),
            ..TrainConfig::default()
        };
        let frozen = FrozenNegativeSampler {
            unit: datum.clone(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (grads, _) =
            batch_gradient(&[datum], &params, &cfg, &tcfg, &frozen, &mut rng).unwrap();
        assert!(grads.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_gradient_drops_failing_datum() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let tcfg = TrainConfig {
            j_cap: Some(1),
            ..TrainConfig::default()
        };

        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (grads, diag) = batch_gradient(
            &[salt_unit(), carbon_unit()],
            &params,
            &cfg,
            &tcfg,
            &FailOnCarbon,
            &mut rng,
        )
        .unwrap();
        assert_eq!(diag.used, 1);
        assert_eq!(diag.dropped, 1);

        // The surviving datum's expansion uses the same leading draws, so
        // the result equals the one-datum batch under the same rng seed.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (want, _) = batch_gradient(
            &[salt_unit()],
            &params,
            &cfg,
            &tcfg,
            &FailOnCarbon,
            &mut rng,
        )
        .unwrap();
        assert_eq!(bits(&grads), bits(&want));

        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let all_fail = batch_gradient(
            &[carbon_unit()],
            &params,
            &cfg,
            &tcfg,
            &FailOnCarbon,
            &mut rng,
        );
        assert!(matches!(all_fail, Err(Error::TrainAborted(_))));
    }

    #[test]
    fn adam_constant_gradient_update_magnitude_is_learning_rate() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 7).unwrap();
        let tcfg = TrainConfig::default();
        let mut grads = params.zeros_like();
        let constant = vec![0.3; grads.len()];
        grads.unflatten_into(&constant).unwrap();
        let mut state = AdamState::new(&params);

        // With a constant gradient the bias corrections cancel at every
        // step: m_hat = g and v_hat = g^2, so each update is exactly
        // lr * g / (|g| + eps).
        let want = tcfg.learning_rate * 0.3 / (0.3 + tcfg.adam_eps);
        for step in 1..=1000u64 {
            let before = params.flatten();
            assert!(adam_step(&mut params, &grads, &mut state, &tcfg).unwrap());
            assert_eq!(state.step, step);
            let after = params.flatten();
            for (b, a) in before.iter().zip(&after) {
                let delta = b - a;
                assert!(
                    (delta - want).abs() <= 1e-12 * want,
                    "step {step}: delta {delta} vs {want}"
                );
            }
        }
    }

    #[test]
    fn adam_guards_zero_and_nonfinite_gradients() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 7).unwrap();
        let tcfg = TrainConfig::default();
        let mut state = AdamState::new(&params);
        let before = bits(&params);

        let zeros = params.zeros_like();
        assert!(adam_step(&mut params, &zeros, &mut state, &tcfg).unwrap());
        assert_eq!(bits(&params), before, "zero gradient must not move parameters");
        assert_eq!(state.step, 1);

        let mut poisoned = params.zeros_like();
        let mut flat = poisoned.flatten();
        flat[0] = f64::NAN;
        poisoned.unflatten_into(&flat).unwrap();
        assert!(!adam_step(&mut params, &poisoned, &mut state, &tcfg).unwrap());
        assert_eq!(bits(&params), before);
        assert_eq!(state.step, 1, "skipped step must not advance the counter");
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = tiny_cfg();
        let tcfg = TrainConfig::default();
        let mut grads = ModelParams::init(&cfg, 8).unwrap();
        grads.axpy(-0.5, &ModelParams::init(&cfg, 9).unwrap());

        let run = || {
            let mut params = ModelParams::init(&cfg, 7).unwrap();
            let mut state = AdamState::new(&params);
            for _ in 0..50 {
                adam_step(&mut params, &grads, &mut state, &tcfg).unwrap();
            }
            bits(&params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_epoch_zero_returns_fresh_state() {
        let cfg = tiny_cfg();
        let tcfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let fresh = TrainState::fresh(&cfg, &tcfg).unwrap();
        let want = bits(&fresh.params);
        let out = train(
            &[salt_unit()],
            &[],
            &cfg,
            &tcfg,
            &FrozenNegativeSampler { unit: salt_unit() },
            fresh,
            |_| Ok(()),
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(bits(&out.params), want);
        assert_eq!(out.global_step, 0);
        assert_eq!(out.next_epoch, 0);
    }

    #[test]
    fn train_resumes_bitwise_at_epoch_boundaries() {
        let cfg = tiny_cfg();
        let data: Vec<PeriodicUnit> = (0..6)
            .map(|i| {
                let mut u = salt_unit();
                u.coords[1][0] += 0.05 * i as f64;
                u
            })
            .collect();
        let frozen = FrozenNegativeSampler { unit: carbon_unit() };
        let tcfg_full = TrainConfig {
            epochs: 2,
            batch_size: 2,
            j_cap: Some(1),
            seed: 11,
            ..TrainConfig::default()
        };

        let mut full_records = Vec::new();
        let full = train(
            &data,
            &data[..2],
            &cfg,
            &tcfg_full,
            &frozen,
            TrainState::fresh(&cfg, &tcfg_full).unwrap(),
            |r| {
                full_records.push(r.clone());
                Ok(())
            },
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(full.global_step, 6);
        assert_eq!(full.next_epoch, 2);
        assert_eq!(full_records.len(), 6);

        // Stop after one epoch, then resume for the second.
        let tcfg_half = TrainConfig {
            epochs: 1,
            ..tcfg_full.clone()
        };
        let mut epoch_states = Vec::new();
        let half = train(
            &data,
            &data[..2],
            &cfg,
            &tcfg_half,
            &frozen,
            TrainState::fresh(&cfg, &tcfg_half).unwrap(),
            |_| Ok(()),
            |rec, st| {
                epoch_states.push((rec.clone(), bits(&st.params)));
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(epoch_states.len(), 1);

        let mut resumed_records = Vec::new();
        let resumed = train(
            &data,
            &data[..2],
            &cfg,
            &tcfg_full,
            &frozen,
            half,
            |r| {
                resumed_records.push(r.clone());
                Ok(())
            },
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(bits(&resumed.params), bits(&full.params));
        assert_eq!(resumed.global_step, 6);
        for (a, b) in resumed_records.iter().zip(&full_records[3..]) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.step, b.step);
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
            assert_eq!(a.data_energy.to_bits(), b.data_energy.to_bits());
        }
    }

    #[test]
    fn train_aborts_on_repeated_failures() {
        let cfg = tiny_cfg();
        let data: Vec<PeriodicUnit> = (0..12).map(|_| salt_unit()).collect();
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            seed: 13,
            ..TrainConfig::default()
        };
        let out = train(
            &data,
            &[],
            &cfg,
            &tcfg,
            &AlwaysFail,
            TrainState::fresh(&cfg, &tcfg).unwrap(),
            |_| Ok(()),
            |_, _| Ok(()),
        );
        match out {
            Err(Error::TrainAborted(msg)) => assert!(msg.contains("10"), "message: {msg}"),
            other => panic!("expected TrainAborted, got {other:?}"),
        }
    }

    #[test]
    fn mala_negative_sampler_is_deterministic() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 15).unwrap();
        let sampler = MalaNegativeSampler {
            sched: AnnealSchedule {
                steps: 10,
                ..AnnealSchedule::default()
            },
        };
        let a = sampler.sample(&[11, 17], &params, &cfg, 21).unwrap();
        let b = sampler.sample(&[11, 17], &params, &cfg, 21).unwrap();
        assert_eq!(a.unit, b.unit);
        assert!(a.unit.validate().is_empty());
        assert!((0.0..=1.0).contains(&a.acceptance));
        assert_eq!(a.unit.species, vec![11, 17]);
    }
}
