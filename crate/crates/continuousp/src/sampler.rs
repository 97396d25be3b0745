//! Annealed MALA over coordinates and lattice with the species held fixed.
//!
//! Every coordinate and lattice scalar follows the Langevin rule
//! z' = z - alpha*beta*grad H(z) + sqrt(2*alpha) u with standard normal u,
//! corrected by a Metropolis decision that uses the Gaussian transition
//! density of that rule. After an accepted step the unit is re-described
//! (coordinates wrapped, lattice Niggli-reduced); re-description leaves the
//! energy unchanged, so the stored value stays consistent.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grad::{energy_with_grads, GradTargets};
use crate::lattice::DET_EPS;
use crate::model::{ModelConfig, ModelParams};
use crate::unit::PeriodicUnit;

/// E|det G| for a 3x3 matrix G with i.i.d. standard normal entries. |det G|
/// is distributed as a product of independent chi variables with 3, 2, 1
/// degrees of freedom; their means telescope to 2*sqrt(2/pi).
pub const C3: f64 = 1.5957691216057308;

/// Lattice redraws allowed before initialization gives up.
const INIT_ATTEMPTS: usize = 100;

/// Inverse temperature and step size ramps, geometric in the step index.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            steps: 1000,
            beta_start: 1.0,
            beta_end: 1000.0,
            alpha_start: 0.5,
            alpha_end: 0.0005,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("anneal steps must be >= 1".into()));
        }
        for (name, v) in [
            ("beta_start", self.beta_start),
            ("beta_end", self.beta_end),
            ("alpha_start", self.alpha_start),
            ("alpha_end", self.alpha_end),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// (beta, alpha) at step t, 0-based. Both ramp as
    /// start * (end/start)^(t/(steps-1)); the endpoints are returned exactly,
    /// and a one-step schedule sits at the end values.
    pub fn anneal(&self, t: usize) -> (f64, f64) {
        debug_assert!(t < self.steps);
        (
            geometric(self.beta_start, self.beta_end, t, self.steps),
            geometric(self.alpha_start, self.alpha_end, t, self.steps),
        )
    }
}

fn geometric(start: f64, end: f64, t: usize, steps: usize) -> f64 {
    if t + 1 >= steps {
        end
    } else if t == 0 {
        start
    } else {
        start * (end / start).powf(t as f64 / (steps - 1) as f64)
    }
}

/// Mixes a base seed and a chain index into an independent stream seed
/// (splitmix64 finalizer over the golden-ratio-spread index).
pub fn derive_seed(base_seed: u64, chain_index: u64) -> u64 {
    let mut z = base_seed ^ chain_index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One MCMC chain over (coords, lattice) at fixed species. The stored
/// energy and geometry gradients always describe the stored geometry under
/// the params the chain is driven with; `step` counts proposals, accepted
/// or not.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub species: Vec<u8>,
    pub coords: Vec<Vector3<f64>>,
    pub lattice: Matrix3<f64>,
    pub energy: f64,
    pub step: usize,
    pub rng: ChaCha12Rng,
    grad_coords: Vec<Vector3<f64>>,
    grad_lattice: Matrix3<f64>,
}

impl ChainState {
    pub fn unit(&self) -> Result<PeriodicUnit> {
        PeriodicUnit::new(self.species.clone(), self.coords.clone(), self.lattice)
    }

    /// Starts a chain at an existing geometry instead of a random draw:
    /// Niggli-reduces the unit, evaluates its energy and geometry gradients,
    /// and seeds the chain's rng. Warm starts serve relaxation runs and
    /// data-initialized negative phases.
    pub fn from_unit(
        unit: &PeriodicUnit,
        params: &ModelParams,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<ChainState> {
        cfg.validate()?;
        if let Some(v) = unit.validate().first() {
            return Err(Error::InvalidUnit(v.to_string()));
        }
        let (reduced, _) = unit.niggli_reduced()?;
        let (energy, grads) = energy_with_grads(&reduced, params, cfg, GradTargets::geometry())?;
        Ok(ChainState {
            species: reduced.species,
            coords: reduced.coords,
            lattice: reduced.lattice,
            energy,
            step: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
            grad_coords: grads.coords.expect("geometry gradients requested"),
            grad_lattice: grads.lattice.expect("geometry gradients requested"),
        })
    }
}

/// Per-chain accounting from a run of steps.
#[derive(Debug, Clone)]
pub struct ChainStats {
    pub steps: usize,
    pub accepted: usize,
    /// Energy of the retained state after each step.
    pub energy_trace: Vec<f64>,
}

impl ChainStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }
}

/// Draws a starting state: lattice s*G with G standard normal and
/// s = (n / (rho_ref * C3))^(1/3), so the expected cell volume is
/// n / rho_ref; atoms are uniform in fractional coordinates. Draws with a
/// degenerate lattice, coinciding atoms, or a non-finite energy are redrawn.
pub fn init_state(
    species: &[u8],
    params: &ModelParams,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ChainState> {
    cfg.validate()?;
    // Validates species range and non-emptiness once, outside the redraw loop.
    PeriodicUnit::new(
        species.to_vec(),
        vec![Vector3::zeros(); species.len()],
        Matrix3::identity(),
    )?;
    let n = species.len();
    let scale = (n as f64 / (cfg.rho_ref * C3)).cbrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    for _ in 0..INIT_ATTEMPTS {
        let mut lattice = Matrix3::zeros();
        for c in 0..3 {
            for r in 0..3 {
                lattice[(r, c)] = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if lattice.determinant().abs() <= DET_EPS {
            continue;
        }
        let coords: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                let f = Vector3::new(
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                );
                lattice * f
            })
            .collect();
        let unit = PeriodicUnit::new(species.to_vec(), coords, lattice)?;
        if !unit.validate().is_empty() {
            continue;
        }
        let Ok((unit, _)) = unit.niggli_reduced() else {
            continue;
        };
        let Ok((energy, grads)) = energy_with_grads(&unit, params, cfg, GradTargets::geometry())
        else {
            continue;
        };
        return Ok(ChainState {
            species: unit.species,
            coords: unit.coords,
            lattice: unit.lattice,
            energy,
            step: 0,
            rng,
            grad_coords: grads.coords.expect("geometry gradients requested"),
            grad_lattice: grads.lattice.expect("geometry gradients requested"),
        });
    }
    Err(Error::InitFailed(INIT_ATTEMPTS))
}

/// Scalar layout shared by proposals and transition densities: atoms in
/// index order (x, y, z each), then the lattice column by column.
fn pack(coords: &[Vector3<f64>], lattice: &Matrix3<f64>) -> Vec<f64> {
    let mut z = Vec::with_capacity(3 * coords.len() + 9);
    for c in coords {
        z.extend_from_slice(&[c.x, c.y, c.z]);
    }
    for col in 0..3 {
        for row in 0..3 {
            z.push(lattice[(row, col)]);
        }
    }
    z
}

fn unpack(z: &[f64], n: usize) -> (Vec<Vector3<f64>>, Matrix3<f64>) {
    debug_assert_eq!(z.len(), 3 * n + 9);
    let coords = (0..n)
        .map(|i| Vector3::new(z[3 * i], z[3 * i + 1], z[3 * i + 2]))
        .collect();
    let mut lattice = Matrix3::zeros();
    for col in 0..3 {
        for row in 0..3 {
            lattice[(row, col)] = z[3 * n + 3 * col + row];
        }
    }
    (coords, lattice)
}

/// z - alpha*beta*g + sqrt(2*alpha) u per scalar, one standard normal per
/// scalar in layout order.
fn lmc_propose<R: Rng + ?Sized>(
    z: &[f64],
    grad: &[f64],
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Vec<f64> {
    let noise = (2.0 * alpha).sqrt();
    z.iter()
        .zip(grad)
        .map(|(&zi, &gi)| zi - alpha * beta * gi + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// log q(from -> to) of the Langevin kernel, up to the additive constant
/// -(d/2) ln(4 pi alpha) shared by both directions at equal alpha.
fn log_transition(from_z: &[f64], from_grad: &[f64], to_z: &[f64], alpha: f64, beta: f64) -> f64 {
    let mut ss = 0.0;
    for i in 0..from_z.len() {
        let mean = from_z[i] - alpha * beta * from_grad[i];
        let d = to_z[i] - mean;
        ss += d * d;
    }
    -ss / (4.0 * alpha)
}

/// One Langevin update of every coordinate and lattice scalar. Pure
/// arithmetic: no validity check, no acceptance decision.
pub fn lmc_step<R: Rng + ?Sized>(
    coords: &[Vector3<f64>],
    lattice: &Matrix3<f64>,
    grad_coords: &[Vector3<f64>],
    grad_lattice: &Matrix3<f64>,
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> (Vec<Vector3<f64>>, Matrix3<f64>) {
    assert_eq!(coords.len(), grad_coords.len());
    let z = pack(coords, lattice);
    let g = pack(grad_coords, grad_lattice);
    let zp = lmc_propose(&z, &g, alpha, beta, rng);
    unpack(&zp, coords.len())
}

/// Metropolis-Hastings decision: accept with probability
/// min{1, exp(log_proposal_ratio - beta * delta_energy)}. Consumes one
/// uniform draw only when the exponent is negative.
pub fn mh_accept<R: Rng + ?Sized>(
    delta_energy: f64,
    log_proposal_ratio: f64,
    beta: f64,
    rng: &mut R,
) -> bool {
    let log_acceptance = log_proposal_ratio - beta * delta_energy;
    if log_acceptance >= 0.0 {
        return true;
    }
    rng.random::<f64>().ln() < log_acceptance
}

/// One MALA step at fixed (beta, alpha): Langevin proposal, Metropolis
/// correction from the forward and reverse transition densities (one extra
/// gradient at the proposal), and on acceptance a re-description to the
/// wrapped, Niggli-reduced cell. Proposals that fail validation or produce
/// a non-finite energy are rejected outright. Returns whether the proposal
/// was accepted; `step` advances either way.
pub fn mala_step(
    state: &mut ChainState,
    params: &ModelParams,
    cfg: &ModelConfig,
    alpha: f64,
    beta: f64,
) -> Result<bool> {
    let n = state.species.len();
    let z = pack(&state.coords, &state.lattice);
    let g = pack(&state.grad_coords, &state.grad_lattice);
    let zp = lmc_propose(&z, &g, alpha, beta, &mut state.rng);
    state.step += 1;

    let (coords_p, lattice_p) = unpack(&zp, n);
    let proposal = PeriodicUnit::new(state.species.clone(), coords_p, lattice_p)?;
    if !proposal.validate().is_empty() {
        return Ok(false);
    }
    let Ok((energy_p, grads_p)) = energy_with_grads(&proposal, params, cfg, GradTargets::geometry())
    else {
        return Ok(false);
    };
    let gc_p = grads_p.coords.expect("geometry gradients requested");
    let gl_p = grads_p.lattice.expect("geometry gradients requested");
    let gp = pack(&gc_p, &gl_p);

    let log_ratio = log_transition(&zp, &gp, &z, alpha, beta) - log_transition(&z, &g, &zp, alpha, beta);
    if !mh_accept(energy_p - state.energy, log_ratio, beta, &mut state.rng) {
        return Ok(false);
    }

    let (reduced, _) = proposal.niggli_reduced()?;
    if same_representation(&reduced, &proposal) {
        state.coords = reduced.coords;
        state.lattice = reduced.lattice;
        state.energy = energy_p;
        state.grad_coords = gc_p;
        state.grad_lattice = gl_p;
    } else {
        // The basis or wrapping changed; gradients live in the new
        // representation, so recompute both (forward is deterministic, so
        // this matches what a fresh evaluation of the stored state returns).
        let (energy_r, grads_r) = energy_with_grads(&reduced, params, cfg, GradTargets::geometry())?;
        state.coords = reduced.coords;
        state.lattice = reduced.lattice;
        state.energy = energy_r;
        state.grad_coords = grads_r.coords.expect("geometry gradients requested");
        state.grad_lattice = grads_r.lattice.expect("geometry gradients requested");
    }
    Ok(true)
}

fn same_representation(a: &PeriodicUnit, b: &PeriodicUnit) -> bool {
    let bits = |x: f64, y: f64| x.to_bits() == y.to_bits();
    a.coords.len() == b.coords.len()
        && (0..9).all(|i| bits(a.lattice[i], b.lattice[i]))
        && a.coords
            .iter()
            .zip(&b.coords)
            .all(|(p, q)| (0..3).all(|k| bits(p[k], q[k])))
}

/// Runs `sched.steps` annealed MALA steps in place, recording the retained
/// energy after each step.
pub fn run_annealed(
    state: &mut ChainState,
    params: &ModelParams,
    cfg: &ModelConfig,
    sched: &AnnealSchedule,
) -> Result<ChainStats> {
    sched.validate()?;
    let mut stats = ChainStats {
        steps: sched.steps,
        accepted: 0,
        energy_trace: Vec::with_capacity(sched.steps),
    };
    for t in 0..sched.steps {
        let (beta, alpha) = sched.anneal(t);
        if mala_step(state, params, cfg, alpha, beta)? {
            stats.accepted += 1;
        }
        stats.energy_trace.push(state.energy);
    }
    Ok(stats)
}

/// Draws one structure for the given species: random initialization followed
/// by the full annealed schedule. The result is wrapped and Niggli-reduced.
pub fn sample(
    species: &[u8],
    params: &ModelParams,
    cfg: &ModelConfig,
    sched: &AnnealSchedule,
    seed: u64,
) -> Result<PeriodicUnit> {
    sample_with_stats(species, params, cfg, sched, seed).map(|(unit, _)| unit)
}

/// `sample`, also returning the chain accounting for diagnostics.
pub fn sample_with_stats(
    species: &[u8],
    params: &ModelParams,
    cfg: &ModelConfig,
    sched: &AnnealSchedule,
    seed: u64,
) -> Result<(PeriodicUnit, ChainStats)> {
    let mut state = init_state(species, params, cfg, seed)?;
    let stats = run_annealed(&mut state, params, cfg, sched)?;
    let unit = PeriodicUnit::new(state.species, state.coords, state.lattice)?;
    Ok((unit, stats))
}

/// MALA on the 1-D quadratic surrogate H(z) = z^2/2, whose target is the
/// exact Gaussian N(0, 1/beta). Returns the retained-value trace and the
/// accepted count. Calibration aid: it runs the same proposal, transition
/// density, and acceptance rule as the crystal chain.
pub fn quadratic_surrogate_chain(
    beta: f64,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> (Vec<f64>, usize) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut z = [0.0];
    let mut energy = 0.0;
    let mut accepted = 0;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = z;
        let zp = lmc_propose(&z, &g, alpha, beta, &mut rng);
        let ep = 0.5 * zp[0] * zp[0];
        let log_ratio =
            log_transition(&zp, &zp, &z, alpha, beta) - log_transition(&z, &g, &zp, alpha, beta);
        if mh_accept(ep - energy, log_ratio, beta, &mut rng) {
            z = [zp[0]];
            energy = ep;
            accepted += 1;
        }
        trace.push(z[0]);
    }
    (trace, accepted)
}
