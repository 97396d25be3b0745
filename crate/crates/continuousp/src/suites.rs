//! Executable property checks: seeded re-description generators, continuity
//! and gradient verifiers, and sampler/matcher statistics, each producing a
//! report with one row per check. The CLI runs them via `check`; the test
//! surface calls them directly with pinned tolerances.

use nalgebra::{Matrix3, Vector3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grad::{energy_with_grads, finite_diff_check, FdTarget, GradTargets};
use crate::graph;
use crate::lattice;
use crate::matcher::{match_structures_with, AssignmentMethod, MatchTolerances};
use crate::model::{self, ModelConfig, ModelParams};
use crate::sampler::{derive_seed, mh_accept, quadratic_surrogate_chain};
use crate::unit::PeriodicUnit;

/// Relative energy tolerance for transforms that only reorder or rigidly
/// move the atoms (translation, rotation, permutation).
pub const ISOMETRY_TOL: f64 = 1e-9;
/// Relative energy tolerance for cell re-descriptions (unimodular basis
/// change, supercell), which reshuffle the image enumeration.
pub const REDESCRIPTION_TOL: f64 = 1e-8;
/// Relative energy jump allowed when an atom pair crosses the cutoff sphere
/// with a gap of `CROSSING_DELTA` on each side.
pub const CROSSING_TOL: f64 = 1e-6;
/// Half-width of the cutoff crossing in Angstrom.
pub const CROSSING_DELTA: f64 = 1e-7;
/// Allowed ratio between difference quotients measured at coarse and fine
/// step sizes.
pub const LIPSCHITZ_FACTOR: f64 = 2.0;
/// Worst relative error allowed between analytic gradients and central
/// finite differences at h = 1e-4.
pub const GRADIENT_TOL: f64 = 1e-5;
/// Bound on the coordinate gradient sum, relative to the largest entry.
pub const NULL_SPACE_TOL: f64 = 1e-8;
/// A unit matched against itself must come back essentially exact.
pub const SELF_MATCH_TOL: f64 = 1e-9;
/// A re-described unit matched against its base may accumulate reduction
/// round-off but nothing physical.
pub const REDESCRIPTION_MATCH_TOL: f64 = 1e-6;

const MODULUS_CASES: usize = 50;
const CROSSING_CASES: usize = 5;
const COLUMN_SCALE_CASES: usize = 10;
const GRADIENT_UNITS: usize = 20;
const ORACLE_PAIRS: usize = 100;

/// One pass/fail row of a suite run.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Aggregated result of one suite, rendered as text for the terminal and
/// serialized as JSON for machine consumption.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<SuiteCheck>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            checks: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(SuiteCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            let verdict = if check.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{verdict} {}: {}\n", check.name, check.detail));
        }
        let ok = self.checks.iter().filter(|c| c.passed).count();
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{}: {verdict} ({ok}/{} checks)\n",
            self.suite,
            self.checks.len()
        ));
        out
    }
}

/// Ways to rewrite a periodic unit without changing the solid it describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransformKind {
    Identity,
    Translation,
    Rotation,
    Permutation,
    Unimodular,
    Supercell,
}

impl TransformKind {
    /// Every non-identity kind, cycled by the generators.
    pub const RE_DESCRIPTIONS: [TransformKind; 5] = [
        TransformKind::Translation,
        TransformKind::Rotation,
        TransformKind::Permutation,
        TransformKind::Unimodular,
        TransformKind::Supercell,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Translation => "translation",
            TransformKind::Rotation => "rotation",
            TransformKind::Permutation => "permutation",
            TransformKind::Unimodular => "unimodular",
            TransformKind::Supercell => "supercell",
        }
    }
}

const ALL_KINDS: [TransformKind; 6] = [
    TransformKind::Identity,
    TransformKind::Translation,
    TransformKind::Rotation,
    TransformKind::Permutation,
    TransformKind::Unimodular,
    TransformKind::Supercell,
];

/// A concrete transform together with its parameters, kept so a case can be
/// re-verified against the exact map that produced it.
#[derive(Debug, Clone)]
pub enum Transform {
    Identity,
    Translation(Vector3<f64>),
    Rotation(Matrix3<f64>),
    Permutation(Vec<usize>),
    Unimodular(Matrix3<i64>),
    Supercell(Matrix3<i64>),
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::Identity => TransformKind::Identity,
            Transform::Translation(_) => TransformKind::Translation,
            Transform::Rotation(_) => TransformKind::Rotation,
            Transform::Permutation(_) => TransformKind::Permutation,
            Transform::Unimodular(_) => TransformKind::Unimodular,
            Transform::Supercell(_) => TransformKind::Supercell,
        }
    }
}

/// A base unit and a rewriting of it that describes the same solid.
#[derive(Debug, Clone)]
pub struct RedescriptionCase {
    pub transform: Transform,
    pub base: PeriodicUnit,
    pub transformed: PeriodicUnit,
}

impl RedescriptionCase {
    pub fn kind(&self) -> TransformKind {
        self.transform.kind()
    }
}

const SPECIES_PALETTE: [u8; 7] = [3, 6, 8, 11, 14, 17, 26];

/// Seeded random valid unit with `n` atoms: a perturbed cube lattice with a
/// volume floor, atoms uniform in the cell. Redraws on the rare coincidence.
pub fn random_unit(rng: &mut ChaCha12Rng, n: usize) -> PeriodicUnit {
    loop {
        let species: Vec<u8> = (0..n)
            .map(|_| *SPECIES_PALETTE.choose(rng).expect("palette is non-empty"))
            .collect();
        let lattice = Matrix3::from_fn(|r, c| {
            let base = if r == c { 4.0 } else { 0.0 };
            base + 2.0 * (rng.random::<f64>() - 0.5)
        });
        if lattice.determinant().abs() < 20.0 {
            continue;
        }
        let coords = (0..n)
            .map(|_| {
                lattice
                    * Vector3::new(
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                    )
            })
            .collect();
        let unit = PeriodicUnit::new(species, coords, lattice).expect("shape is consistent");
        if unit.is_valid() {
            return unit;
        }
    }
}

/// Conventional 8-atom rock-salt cell with cube edge `a`: one fcc sublattice
/// per species, offset by half the body diagonal.
pub fn rock_salt_unit(a: f64) -> PeriodicUnit {
    let fcc = [
        [0.0, 0.0, 0.0],
        [0.5, 0.5, 0.0],
        [0.5, 0.0, 0.5],
        [0.0, 0.5, 0.5],
    ];
    let mut species = Vec::new();
    let mut coords = Vec::new();
    for f in fcc {
        species.push(11);
        coords.push(Vector3::new(a * f[0], a * f[1], a * f[2]));
    }
    for f in fcc {
        species.push(17);
        coords.push(Vector3::new(
            a * ((f[0] + 0.5) % 1.0),
            a * ((f[1] + 0.5) % 1.0),
            a * ((f[2] + 0.5) % 1.0),
        ));
    }
    let lattice = Matrix3::from_diagonal(&Vector3::new(a, a, a));
    PeriodicUnit::new(species, coords, lattice).expect("fixture is well-formed")
}

/// Adds isotropic Gaussian noise of scale `sigma` to every coordinate.
/// Redraws if the noise happens to collide two atoms.
pub fn jitter_unit(unit: &PeriodicUnit, sigma: f64, rng: &mut ChaCha12Rng) -> PeriodicUnit {
    for _ in 0..32 {
        let coords = unit
            .coords
            .iter()
            .map(|x| {
                x + sigma
                    * Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    )
            })
            .collect();
        let candidate = PeriodicUnit::new(unit.species.clone(), coords, unit.lattice)
            .expect("shape unchanged");
        if candidate.is_valid() {
            return candidate;
        }
    }
    panic!("jitter of sigma {sigma} kept colliding atoms after 32 draws");
}

/// Seeded random transforms of `p`, one case per entry: case 0 is always the
/// identity, later cases cycle through `kinds`. Translations are uniform in
/// the cell, rotations cover both handedness classes, basis changes are shear
/// products, supercells are diagonal with |det| in {2, 4, 8}. Every case is
/// re-verified against the base point set before it is returned.
pub fn gen_redescriptions(
    p: &PeriodicUnit,
    kinds: &[TransformKind],
    count: usize,
    seed: u64,
) -> Result<Vec<RedescriptionCase>> {
    let violations = p.validate();
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidUnit(msgs.join("; ")));
    }
    if count > 1 && kinds.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one transform kind is required".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let kind = if i == 0 {
            TransformKind::Identity
        } else {
            kinds[(i - 1) % kinds.len()]
        };
        let case = build_case(p, kind, &mut rng)?;
        verify_case(&case)?;
        out.push(case);
    }
    Ok(out)
}

/// Random units with every re-description kind applied to each, totalling
/// `count` cases. Convenience wrapper for the invariance suite's callers.
pub fn gen_invariance_cases(count: usize, seed: u64) -> Result<Vec<RedescriptionCase>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(2..=8);
        let unit = random_unit(&mut rng, n);
        let take = (count - out.len()).min(1 + TransformKind::RE_DESCRIPTIONS.len());
        let sub = gen_redescriptions(
            &unit,
            &TransformKind::RE_DESCRIPTIONS,
            take,
            rng.random::<u64>(),
        )?;
        out.extend(sub);
    }
    Ok(out)
}

fn build_case(
    p: &PeriodicUnit,
    kind: TransformKind,
    rng: &mut ChaCha12Rng,
) -> Result<RedescriptionCase> {
    let (transform, transformed) = match kind {
        TransformKind::Identity => (Transform::Identity, p.clone()),
        TransformKind::Translation => {
            let b = p.lattice
                * Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            let coords = p.coords.iter().map(|x| x + b).collect();
            (
                Transform::Translation(b),
                PeriodicUnit::new(p.species.clone(), coords, p.lattice)?,
            )
        }
        TransformKind::Rotation => {
            let q = random_orthogonal(rng);
            let coords = p.coords.iter().map(|x| q * x).collect();
            (
                Transform::Rotation(q),
                PeriodicUnit::new(p.species.clone(), coords, q * p.lattice)?,
            )
        }
        TransformKind::Permutation => {
            let mut idx: Vec<usize> = (0..p.n()).collect();
            idx.shuffle(rng);
            let species = idx.iter().map(|&i| p.species[i]).collect();
            let coords = idx.iter().map(|&i| p.coords[i]).collect();
            (
                Transform::Permutation(idx),
                PeriodicUnit::new(species, coords, p.lattice)?,
            )
        }
        TransformKind::Unimodular => {
            let m = random_unimodular(rng);
            (Transform::Unimodular(m), p.apply_basis_change(&m)?)
        }
        TransformKind::Supercell => {
            let m = random_supercell(rng);
            (Transform::Supercell(m), p.apply_basis_change(&m)?)
        }
    };
    Ok(RedescriptionCase {
        transform,
        base: p.clone(),
        transformed,
    })
}

/// Orthogonal matrix from the QR of a Gaussian draw, sign-normalized, with a
/// coin flip onto the improper component so both handedness classes appear.
fn random_orthogonal(rng: &mut ChaCha12Rng) -> Matrix3<f64> {
    loop {
        let m = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = m.qr();
        let mut q = qr.q();
        let r = qr.r();
        if (0..3).any(|i| r[(i, i)].abs() < 1e-6) {
            continue;
        }
        for j in 0..3 {
            if r[(j, j)] < 0.0 {
                for i in 0..3 {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        if rng.random::<bool>() {
            for i in 0..3 {
                q[(i, 2)] = -q[(i, 2)];
            }
        }
        return q;
    }
}

/// Product of up to five elementary integer shears; determinant stays 1.
fn random_unimodular(rng: &mut ChaCha12Rng) -> Matrix3<i64> {
    let k = rng.random_range(1..=5);
    let mut m = Matrix3::<i64>::identity();
    for _ in 0..k {
        let mut shear = Matrix3::<i64>::identity();
        let i = rng.random_range(0..3);
        let j = (i + rng.random_range(1..3)) % 3;
        shear[(i, j)] = if rng.random::<bool>() { 1 } else { -1 };
        m *= shear;
    }
    m
}

/// Diagonal expansion with determinant 2, 4, or 8, factored randomly over
/// the three axes.
fn random_supercell(rng: &mut ChaCha12Rng) -> Matrix3<i64> {
    let det = *[2i64, 4, 8].choose(rng).expect("choices are non-empty");
    let mut triples = Vec::new();
    for a in 1..=det {
        if det % a != 0 {
            continue;
        }
        let rest = det / a;
        for b in 1..=rest {
            if rest % b != 0 {
                continue;
            }
            triples.push((a, b, rest / b));
        }
    }
    let (a, b, c) = *triples.choose(rng).expect("every det factors");
    Matrix3::from_diagonal(&Vector3::new(a, b, c))
}

/// Confirms the transformed unit describes the same solid as the base: the
/// atom count and volume scale together, and every transformed atom position
/// near the origin appears in the isometry-mapped base point set within
/// 1e-9 A. A failure here is a generator bug, so it panics.
fn verify_case(case: &RedescriptionCase) -> Result<()> {
    let base = &case.base;
    let t = &case.transformed;
    let scale = match &case.transform {
        Transform::Unimodular(m) | Transform::Supercell(m) => {
            lattice::determinant_i64(m).unsigned_abs() as usize
        }
        _ => 1,
    };
    assert_eq!(
        t.n(),
        base.n() * scale,
        "{} case changed the atom count",
        case.kind().label()
    );
    let vol_ratio = t.volume() / base.volume();
    assert!(
        (vol_ratio - scale as f64).abs() <= 1e-9 * scale as f64,
        "{} case scaled the volume by {vol_ratio} instead of {scale}",
        case.kind().label()
    );

    let (q, b) = match &case.transform {
        Transform::Rotation(q) => (*q, Vector3::zeros()),
        Transform::Translation(b) => (Matrix3::identity(), *b),
        _ => (Matrix3::identity(), Vector3::zeros()),
    };
    let radius = 1.3 * base.volume().cbrt();
    let mapped: Vec<(u8, Vector3<f64>)> = base
        .ptos_truncated(radius + b.norm() + 0.5)?
        .into_iter()
        .map(|(z, x)| (z, q * x + b))
        .collect();
    for (z, y) in t.ptos_truncated(radius)? {
        let hit = mapped
            .iter()
            .any(|(zb, yb)| *zb == z && (y - yb).norm() <= 1e-9);
        assert!(
            hit,
            "{} case produced a point off the base solid at {y:?}",
            case.kind().label()
        );
    }
    Ok(())
}

fn invariance_tolerance(kind: TransformKind) -> f64 {
    match kind {
        TransformKind::Identity => 0.0,
        TransformKind::Translation | TransformKind::Rotation | TransformKind::Permutation => {
            ISOMETRY_TOL
        }
        TransformKind::Unimodular | TransformKind::Supercell => REDESCRIPTION_TOL,
    }
}

/// Evaluates the energy on both sides of every case and checks the relative
/// deviation against the per-kind tolerance. Identity cases must agree bit
/// for bit. One report row per kind present in `cases`.
pub fn run_invariance_suite(
    params: &ModelParams,
    cfg: &ModelConfig,
    cases: &[RedescriptionCase],
) -> Result<SuiteReport> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidConfig("no re-description cases given".into()));
    }
    let rows: Vec<(TransformKind, f64, bool)> = cases
        .par_iter()
        .map(|case| -> Result<(TransformKind, f64, bool)> {
            let hb = model::energy(&case.base, params, cfg)?;
            let ht = model::energy(&case.transformed, params, cfg)?;
            let kind = case.kind();
            let rel = (ht - hb).abs() / (1.0 + hb.abs());
            let ok = if kind == TransformKind::Identity {
                ht.to_bits() == hb.to_bits()
            } else {
                rel <= invariance_tolerance(kind)
            };
            Ok((kind, rel, ok))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = SuiteReport::new("invariance");
    for kind in ALL_KINDS {
        let sub: Vec<(usize, &(TransformKind, f64, bool))> = rows
            .iter()
            .enumerate()
            .filter(|(_, row)| row.0 == kind)
            .collect();
        if sub.is_empty() {
            continue;
        }
        let max_rel = sub.iter().fold(0.0f64, |a, (_, row)| a.max(row.1));
        let failed: Vec<usize> = sub
            .iter()
            .filter(|(_, row)| !row.2)
            .map(|(i, _)| *i)
            .collect();
        let tol = if kind == TransformKind::Identity {
            "bitwise".to_string()
        } else {
            format!("{:.0e}", invariance_tolerance(kind))
        };
        let mut detail = format!(
            "{} cases, max relative deviation {max_rel:.3e} (tolerance {tol})",
            sub.len()
        );
        if !failed.is_empty() {
            detail.push_str(&format!(", failed cases {failed:?}"));
        }
        report.push(kind.label(), failed.is_empty(), detail);
    }
    Ok(report)
}

/// Symmetric difference quotient |H(x + du) - H(x - du)| / 2d along a
/// coordinate-space direction.
fn coordinate_quotient(
    unit: &PeriodicUnit,
    params: &ModelParams,
    cfg: &ModelConfig,
    dir: &[Vector3<f64>],
    delta: f64,
) -> Result<f64> {
    let shifted = |s: f64| -> Result<f64> {
        let coords = unit
            .coords
            .iter()
            .zip(dir)
            .map(|(x, u)| x + s * u)
            .collect();
        model::energy(
            &PeriodicUnit::new(unit.species.clone(), coords, unit.lattice)?,
            params,
            cfg,
        )
    };
    Ok((shifted(delta)? - shifted(-delta)?).abs() / (2.0 * delta))
}

/// Same quotient along one lattice column.
fn lattice_quotient(
    unit: &PeriodicUnit,
    params: &ModelParams,
    cfg: &ModelConfig,
    column: usize,
    dir: &Vector3<f64>,
    delta: f64,
) -> Result<f64> {
    let shifted = |s: f64| -> Result<f64> {
        let mut l = unit.lattice;
        for r in 0..3 {
            l[(r, column)] += s * dir[r];
        }
        model::energy(
            &PeriodicUnit::new(unit.species.clone(), unit.coords.clone(), l)?,
            params,
            cfg,
        )
    };
    Ok((shifted(delta)? - shifted(-delta)?).abs() / (2.0 * delta))
}

/// Quotients must agree within `LIPSCHITZ_FACTOR` once both clear the noise
/// floor; below the floor the direction is flat and the ratio means nothing.
fn quotients_stable(coarse: f64, fine: f64, energy: f64) -> (bool, f64) {
    let floor = 1e-6 * (1.0 + energy.abs());
    if coarse.max(fine) <= floor {
        return (true, 1.0);
    }
    let ratio = coarse.max(fine) / coarse.min(fine).max(floor);
    (ratio <= LIPSCHITZ_FACTOR, ratio)
}

fn random_coord_direction(rng: &mut ChaCha12Rng, n: usize) -> Vec<Vector3<f64>> {
    loop {
        let dir: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        let norm = dir.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return dir.iter().map(|v| v / norm).collect();
        }
    }
}

/// Slides one atom of a random unit collinearly with a pair image so the
/// pair distance lands at cutoff -/+ `CROSSING_DELTA`, leaving every other
/// image clear of the swept band. Returns None when the draw has no usable
/// image; callers retry with fresh randomness.
fn crossing_geometries(
    cfg: &ModelConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Option<(PeriodicUnit, PeriodicUnit, f64)>> {
    let (unit, _) = random_unit(rng, 3).niggli_reduced()?;
    let d_cut = graph::cutoff_distance(&unit, &cfg.graph)?;

    let mut best: Option<(usize, usize, [i64; 3], f64)> = None;
    for i in 0..unit.n() {
        for j in 0..unit.n() {
            if i == j {
                continue;
            }
            let delta = unit.coords[j] - unit.coords[i];
            for (k, dist) in lattice::images_within(&unit.lattice, &delta, d_cut + 1.0, true)? {
                if best
                    .as_ref()
                    .is_none_or(|b| (dist - d_cut).abs() < (b.3 - d_cut).abs())
                {
                    best = Some((i, j, k, dist));
                }
            }
        }
    }
    let Some((i, j, k, dist)) = best else {
        return Ok(None);
    };
    let slide = (dist - d_cut).abs() + CROSSING_DELTA;
    if slide > 0.4 {
        return Ok(None);
    }

    // Every other image must clear the band the slide can sweep, else the
    // jump measurement would mix in a second crossing.
    let guard = slide + 1e-3;
    for a in 0..unit.n() {
        for b in 0..unit.n() {
            if a == b {
                continue;
            }
            let delta = unit.coords[b] - unit.coords[a];
            for (ka, da) in lattice::images_within(&unit.lattice, &delta, d_cut + 1.0, true)? {
                // Both orientations of the chosen pair slide to the target
                // together, so neither belongs in the guard.
                if (a, b, ka) == (i, j, k) || (a, b, ka) == (j, i, [-k[0], -k[1], -k[2]]) {
                    continue;
                }
                if (da - d_cut).abs() <= guard {
                    return Ok(None);
                }
            }
        }
    }

    let r = unit.coords[j] - unit.coords[i]
        + unit.lattice * Vector3::new(k[0] as f64, k[1] as f64, k[2] as f64);
    let rhat = r / dist;
    let place = |target: f64| -> Result<PeriodicUnit> {
        let mut coords = unit.coords.clone();
        coords[j] += (target - dist) * rhat;
        PeriodicUnit::new(unit.species.clone(), coords, unit.lattice)
    };
    let inside = place(d_cut - CROSSING_DELTA)?;
    let outside = place(d_cut + CROSSING_DELTA)?;
    if !inside.is_valid() || !outside.is_valid() {
        return Ok(None);
    }
    Ok(Some((inside, outside, d_cut)))
}

/// Continuity checks: exact zero at zero displacement, bounded jumps across
/// the cutoff sphere, and difference quotients stable across two step sizes
/// for both atom coordinates and lattice columns.
pub fn run_continuity_suite(
    params: &ModelParams,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<SuiteReport> {
    cfg.validate()?;
    let mut report = SuiteReport::new("continuity");

    // Zero displacement re-evaluates the same geometry.
    {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
        let unit = random_unit(&mut rng, 4);
        let dir = random_coord_direction(&mut rng, unit.n());
        let h0 = model::energy(&unit, params, cfg)?;
        let coords = unit.coords.iter().zip(&dir).map(|(x, u)| x + 0.0 * u).collect();
        let h1 = model::energy(
            &PeriodicUnit::new(unit.species.clone(), coords, unit.lattice)?,
            params,
            cfg,
        )?;
        report.push(
            "zero displacement",
            h0.to_bits() == h1.to_bits(),
            format!("energies {h0:.6e} and {h1:.6e} agree bitwise"),
        );
    }

    // Cutoff crossing.
    {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
        let mut jumps = Vec::new();
        let mut attempts = 0;
        while jumps.len() < CROSSING_CASES && attempts < 400 {
            attempts += 1;
            if let Some((inside, outside, d_cut)) = crossing_geometries(cfg, &mut rng)? {
                let h_in = model::energy(&inside, params, cfg)?;
                let h_out = model::energy(&outside, params, cfg)?;
                let rel = (h_in - h_out).abs() / (1.0 + h_out.abs());
                jumps.push((rel, d_cut));
            }
        }
        let built = jumps.len();
        let max_rel = jumps.iter().fold(0.0f64, |a, (rel, _)| a.max(*rel));
        let ok = built == CROSSING_CASES && max_rel <= CROSSING_TOL;
        report.push(
            "cutoff crossing",
            ok,
            format!(
                "{built}/{CROSSING_CASES} geometries built, max relative jump {max_rel:.3e} \
                 at +/-{CROSSING_DELTA:.0e} A (tolerance {CROSSING_TOL:.0e})"
            ),
        );
    }

    // Coordinate difference quotients at 1e-3 vs 1e-5.
    {
        let results: Vec<(bool, f64)> = (0..MODULUS_CASES)
            .into_par_iter()
            .map(|c| -> Result<(bool, f64)> {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 200 + c as u64));
                let n = rng.random_range(2..=6);
                let unit = random_unit(&mut rng, n);
                let dir = random_coord_direction(&mut rng, n);
                let h = model::energy(&unit, params, cfg)?;
                let coarse = coordinate_quotient(&unit, params, cfg, &dir, 1e-3)?;
                let fine = coordinate_quotient(&unit, params, cfg, &dir, 1e-5)?;
                Ok(quotients_stable(coarse, fine, h))
            })
            .collect::<Result<Vec<_>>>()?;
        let worst = results.iter().fold(0.0f64, |a, (_, r)| a.max(*r));
        let fails = results.iter().filter(|(ok, _)| !ok).count();
        report.push(
            "coordinate quotients",
            fails == 0,
            format!(
                "{MODULUS_CASES} directions, worst coarse/fine ratio {worst:.3} \
                 (limit {LIPSCHITZ_FACTOR}), {fails} unstable"
            ),
        );
    }

    // Lattice column quotients.
    {
        let results: Vec<(bool, f64)> = (0..MODULUS_CASES)
            .into_par_iter()
            .map(|c| -> Result<(bool, f64)> {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 300 + c as u64));
                let n = rng.random_range(2..=6);
                let unit = random_unit(&mut rng, n);
                let column = rng.random_range(0..3);
                let dir = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
                .normalize();
                let h = model::energy(&unit, params, cfg)?;
                let coarse = lattice_quotient(&unit, params, cfg, column, &dir, 1e-3)?;
                let fine = lattice_quotient(&unit, params, cfg, column, &dir, 1e-5)?;
                Ok(quotients_stable(coarse, fine, h))
            })
            .collect::<Result<Vec<_>>>()?;
        let worst = results.iter().fold(0.0f64, |a, (_, r)| a.max(*r));
        let fails = results.iter().filter(|(ok, _)| !ok).count();
        report.push(
            "lattice column quotients",
            fails == 0,
            format!(
                "{MODULUS_CASES} columns, worst coarse/fine ratio {worst:.3} \
                 (limit {LIPSCHITZ_FACTOR}), {fails} unstable"
            ),
        );
    }

    // A relative column rescale must cost no more than the measured modulus
    // allows for a step of that length.
    {
        let results: Vec<(bool, f64)> = (0..COLUMN_SCALE_CASES)
            .into_par_iter()
            .map(|c| -> Result<(bool, f64)> {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 400 + c as u64));
                let n = rng.random_range(2..=6);
                let unit = random_unit(&mut rng, n);
                let column = rng.random_range(0..3);
                let col = Vector3::new(
                    unit.lattice[(0, column)],
                    unit.lattice[(1, column)],
                    unit.lattice[(2, column)],
                );
                let dir = col.normalize();
                let h = model::energy(&unit, params, cfg)?;
                let k = lattice_quotient(&unit, params, cfg, column, &dir, 1e-3)?;
                let mut l = unit.lattice;
                for r in 0..3 {
                    l[(r, column)] *= 1.0 + 1e-7;
                }
                let h_scaled = model::energy(
                    &PeriodicUnit::new(unit.species.clone(), unit.coords.clone(), l)?,
                    params,
                    cfg,
                )?;
                let change = (h_scaled - h).abs();
                let bound = 2.0 * k * 1e-7 * col.norm() + 1e-9 * (1.0 + h.abs());
                Ok((change <= bound, change / bound))
            })
            .collect::<Result<Vec<_>>>()?;
        let worst = results.iter().fold(0.0f64, |a, (_, r)| a.max(*r));
        let fails = results.iter().filter(|(ok, _)| !ok).count();
        report.push(
            "column rescale bound",
            fails == 0,
            format!(
                "{COLUMN_SCALE_CASES} rescales by 1 + 1e-7, worst change/bound {worst:.3}, \
                 {fails} over bound"
            ),
        );
    }

    Ok(report)
}

/// Gradient checks: every analytic block against central finite differences,
/// plus the translation null space of the coordinate gradient.
pub fn run_gradient_suite(
    params: &ModelParams,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<SuiteReport> {
    cfg.validate()?;
    let units: Vec<PeriodicUnit> = (0..GRADIENT_UNITS)
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64));
            let n = rng.random_range(2..=8);
            random_unit(&mut rng, n)
        })
        .collect();

    let mut report = SuiteReport::new("gradients");
    for (target, name) in [
        (FdTarget::Coords, "coordinate gradients"),
        (FdTarget::Lattice, "lattice gradients"),
        (FdTarget::Params, "parameter gradients"),
    ] {
        let errors: Vec<f64> = units
            .par_iter()
            .map(|u| finite_diff_check(target, u, params, cfg, 1e-4))
            .collect::<Result<Vec<_>>>()?;
        let worst = errors.iter().fold(0.0f64, |a, e| a.max(*e));
        report.push(
            name,
            worst <= GRADIENT_TOL,
            format!(
                "max relative error {worst:.3e} over {GRADIENT_UNITS} units \
                 (h = 1e-4, tolerance {GRADIENT_TOL:.0e})"
            ),
        );
    }

    let residuals: Vec<f64> = units
        .par_iter()
        .map(|u| -> Result<f64> {
            let (_, grads) = energy_with_grads(
                u,
                params,
                cfg,
                GradTargets {
                    coords: true,
                    lattice: false,
                    params: false,
                },
            )?;
            let gc = grads.coords.expect("coordinate gradients requested");
            let sum = gc.iter().fold(Vector3::zeros(), |a, g| a + g);
            let scale = gc.iter().fold(0.0f64, |a, g| a.max(g.amax()));
            Ok(sum.amax() / (1.0 + scale))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = residuals.iter().fold(0.0f64, |a, r| a.max(*r));
    report.push(
        "translation null space",
        worst <= NULL_SPACE_TOL,
        format!(
            "max |sum of coordinate gradients| {worst:.3e} relative to the largest entry \
             (tolerance {NULL_SPACE_TOL:.0e})"
        ),
    );
    Ok(report)
}

/// Sampler checks against analytic laws: the fixed-temperature chain on the
/// quadratic energy reproduces the Gaussian moments, and the acceptance rule
/// hits its closed-form frequency.
pub fn run_sampler_suite(seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("sampler");

    let (beta, alpha) = (4.0, 0.1);
    let (chains, burn, keep) = (100usize, 200usize, 1000usize);
    let stats: Vec<(f64, f64)> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let (trace, _) =
                quadratic_surrogate_chain(beta, alpha, burn + keep, derive_seed(seed, c as u64));
            let kept = &trace[burn..];
            let m = kept.iter().sum::<f64>() / keep as f64;
            let v = kept.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / keep as f64;
            (m, v)
        })
        .collect();
    let pool = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let spread = |xs: &[f64], c: f64| {
        (xs.iter().map(|x| (x - c) * (x - c)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let vars: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let mean = pool(&means);
    let var = pool(&vars);
    let se_mean = spread(&means, mean) / (chains as f64).sqrt();
    let se_var = spread(&vars, var) / (chains as f64).sqrt();
    report.push(
        "stationary mean",
        mean.abs() <= 3.0 * se_mean,
        format!(
            "{} post-burn-in samples, mean {mean:.3e} vs 0 (3 sigma = {:.3e})",
            chains * keep,
            3.0 * se_mean
        ),
    );
    // The 0.001 absorbs the O(1/keep) bias of short-chain variance estimates.
    let target_var = 1.0 / beta;
    report.push(
        "stationary variance",
        (var - target_var).abs() <= 3.0 * se_var + 0.001,
        format!(
            "variance {var:.5} vs {target_var} (3 sigma = {:.3e})",
            3.0 * se_var
        ),
    );

    let trials = 100_000usize;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1_000));
    let mut worst_z = 0.0f64;
    for (delta, lpr, beta_a) in [
        (0.35, 0.0, 1.0),
        (std::f64::consts::LN_2, 0.0, 1.0),
        (0.5, -0.2, 1.4),
    ] {
        let p = (lpr - beta_a * delta).exp();
        let hits = (0..trials)
            .filter(|_| mh_accept(delta, lpr, beta_a, &mut rng))
            .count();
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let z = ((hits as f64 / trials as f64) - p).abs() / sigma;
        worst_z = worst_z.max(z);
    }
    report.push(
        "acceptance frequency",
        worst_z <= 3.0,
        format!("3 uphill settings x {trials} trials, worst z-score {worst_z:.2} (limit 3)"),
    );

    let downhill_ok = (0..1_000).all(|_| {
        mh_accept(-0.5, 0.0, 2.0, &mut rng) && mh_accept(0.0, 0.0, 2.0, &mut rng)
    });
    report.push(
        "downhill acceptance",
        downhill_ok,
        "every non-positive energy move accepted".to_string(),
    );
    report
}

/// Matcher checks: exact self matches, tiny-rms re-description matches, the
/// assignment shortcut against the exhaustive oracle, and rms monotone in
/// the physical displacement.
pub fn run_matcher_suite(seed: u64) -> Result<SuiteReport> {
    let tol = MatchTolerances::default();
    let mut report = SuiteReport::new("matcher");

    {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
        let mut worst = 0.0f64;
        let mut ok = true;
        for _ in 0..10 {
            let n = rng.random_range(1..=8);
            let unit = random_unit(&mut rng, n);
            let rep = match_structures_with(&unit, &unit, &tol, AssignmentMethod::Hungarian)?;
            match rep.rms {
                Some(rms) if rep.matched => worst = worst.max(rms),
                _ => ok = false,
            }
        }
        report.push(
            "self match",
            ok && worst <= SELF_MATCH_TOL,
            format!("10 units, worst rms {worst:.3e} (tolerance {SELF_MATCH_TOL:.0e})"),
        );
    }

    {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
        let mut worst = 0.0f64;
        let mut unmatched = 0usize;
        let mut total = 0usize;
        for u in 0..6 {
            let n = rng.random_range(2..=4);
            let unit = random_unit(&mut rng, n);
            let kinds = [
                TransformKind::Translation,
                TransformKind::Rotation,
                TransformKind::Permutation,
                TransformKind::Unimodular,
            ];
            let mut others = Vec::new();
            for case in gen_redescriptions(&unit, &kinds, 5, derive_seed(seed, 10 + u))? {
                others.push(case.transformed);
            }
            // The expansion search tops out at factor 4, so test dets 2 and 4.
            others.push(unit.apply_basis_change(&Matrix3::from_diagonal(&Vector3::new(1, 1, 2)))?);
            others.push(unit.apply_basis_change(&Matrix3::from_diagonal(&Vector3::new(2, 2, 1)))?);
            for other in others {
                total += 1;
                let rep = match_structures_with(&unit, &other, &tol, AssignmentMethod::Hungarian)?;
                match rep.rms {
                    Some(rms) if rep.matched => worst = worst.max(rms),
                    _ => unmatched += 1,
                }
            }
        }
        report.push(
            "re-description match",
            unmatched == 0 && worst <= REDESCRIPTION_MATCH_TOL,
            format!(
                "{total} rewrites, {unmatched} unmatched, worst rms {worst:.3e} \
                 (tolerance {REDESCRIPTION_MATCH_TOL:.0e})"
            ),
        );
    }

    {
        let outcomes: Vec<(bool, f64)> = (0..ORACLE_PAIRS)
            .into_par_iter()
            .map(|p| -> Result<(bool, f64)> {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 100 + p as u64));
                let n = rng.random_range(2..=8);
                let a = random_unit(&mut rng, n);
                let b = if p % 5 < 3 {
                    jitter_unit(&a, 0.05, &mut rng)
                } else {
                    let m = rng.random_range(2..=8);
                    random_unit(&mut rng, m)
                };
                let fast = match_structures_with(&a, &b, &tol, AssignmentMethod::Hungarian)?;
                let slow = match_structures_with(&a, &b, &tol, AssignmentMethod::Exhaustive)?;
                if fast.matched != slow.matched {
                    return Ok((false, f64::INFINITY));
                }
                let diff = match (fast.rms, slow.rms) {
                    (Some(x), Some(y)) => (x - y).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                };
                Ok((diff <= 1e-9, diff))
            })
            .collect::<Result<Vec<_>>>()?;
        let disagreements = outcomes.iter().filter(|(ok, _)| !ok).count();
        let worst = outcomes
            .iter()
            .filter(|(_, d)| d.is_finite())
            .fold(0.0f64, |a, (_, d)| a.max(*d));
        report.push(
            "assignment oracle",
            disagreements == 0,
            format!(
                "{ORACLE_PAIRS} pairs, {disagreements} verdict or rms disagreements, \
                 worst rms difference {worst:.3e} (tolerance 1e-09)"
            ),
        );
    }

    {
        let base = rock_salt_unit(5.64);
        let mut last = -1.0f64;
        let mut monotone = true;
        let mut values = Vec::new();
        for d in [0.05, 0.10, 0.15, 0.20] {
            let mut coords = base.coords.clone();
            coords[0][0] += d;
            let moved = PeriodicUnit::new(base.species.clone(), coords, base.lattice)?;
            let rep = match_structures_with(&base, &moved, &tol, AssignmentMethod::Hungarian)?;
            match rep.rms {
                Some(rms) if rep.matched => {
                    monotone &= rms > last;
                    last = rms;
                    values.push(rms);
                }
                _ => monotone = false,
            }
        }
        report.push(
            "rms monotonicity",
            monotone,
            format!("displacements 0.05..0.20 A give rms {values:.3?}, strictly increasing"),
        );
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphConfig;
    use crate::model::PenaltyKind;

    fn tiny_cfg() -> ModelConfig {
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

    #[test]
    fn generator_covers_kinds_and_counts_atoms() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let unit = random_unit(&mut rng, 4);
        let cases =
            gen_redescriptions(&unit, &TransformKind::RE_DESCRIPTIONS, 11, 99).unwrap();
        assert_eq!(cases.len(), 11);
        assert_eq!(cases[0].kind(), TransformKind::Identity);
        assert_eq!(cases[0].base, cases[0].transformed);
        for (i, kind) in TransformKind::RE_DESCRIPTIONS.iter().enumerate() {
            assert_eq!(cases[1 + i].kind(), *kind);
            assert_eq!(cases[6 + i].kind(), *kind);
        }
        for case in &cases {
            match &case.transform {
                Transform::Supercell(m) => {
                    let det = lattice::determinant_i64(m).unsigned_abs() as usize;
                    assert!([2, 4, 8].contains(&det));
                    assert_eq!(case.transformed.n(), 4 * det);
                }
                Transform::Unimodular(m) => {
                    assert_eq!(lattice::determinant_i64(m).abs(), 1);
                    assert_eq!(case.transformed.n(), 4);
                }
                _ => assert_eq!(case.transformed.n(), 4),
            }
        }
    }

    #[test]
    fn generator_produces_both_rotation_parities() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let unit = random_unit(&mut rng, 2);
        let mut dets = Vec::new();
        for s in 0..40 {
            let cases =
                gen_redescriptions(&unit, &[TransformKind::Rotation], 2, s).unwrap();
            if let Transform::Rotation(q) = &cases[1].transform {
                dets.push(q.determinant().round() as i64);
            }
        }
        assert!(dets.contains(&1) && dets.contains(&-1));
    }

    #[test]
    fn generator_rejects_invalid_base() {
        let unit = PeriodicUnit::new(
            vec![11],
            vec![Vector3::zeros()],
            Matrix3::zeros(),
        )
        .unwrap();
        let err = gen_redescriptions(&unit, &TransformKind::RE_DESCRIPTIONS, 3, 0);
        assert!(matches!(err, Err(Error::InvalidUnit(_))));
    }

    #[test]
    fn invariance_suite_accepts_energy_preserving_transforms() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 31).unwrap();
        let cases = gen_invariance_cases(24, 7).unwrap();
        let report = run_invariance_suite(&params, &cfg, &cases).unwrap();
        assert!(report.passed(), "{}", report.render_text());
        assert!(report.checks.len() >= 5);
    }

    #[test]
    fn invariance_suite_flags_an_unrelated_unit() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 31).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let base = random_unit(&mut rng, 4);
        let case = RedescriptionCase {
            transform: Transform::Translation(Vector3::zeros()),
            base: base.clone(),
            transformed: random_unit(&mut rng, 4),
        };
        let report = run_invariance_suite(&params, &cfg, &[case]).unwrap();
        assert!(!report.passed());
        assert!(report.render_text().contains("FAIL translation"));
    }

    #[test]
    fn continuity_suite_passes_on_random_params() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 11).unwrap();
        let report = run_continuity_suite(&params, &cfg, 41).unwrap();
        assert!(report.passed(), "{}", report.render_text());
        assert_eq!(report.checks.len(), 5);
    }

    #[test]
    fn gradient_suite_passes_on_random_params() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 13).unwrap();
        let report = run_gradient_suite(&params, &cfg, 43).unwrap();
        assert!(report.passed(), "{}", report.render_text());
    }

    #[test]
    fn sampler_suite_matches_analytic_laws() {
        let report = run_sampler_suite(17);
        assert!(report.passed(), "{}", report.render_text());
    }

    #[test]
    fn matcher_suite_oracle_holds() {
        let report = run_matcher_suite(23).unwrap();
        assert!(report.passed(), "{}", report.render_text());
    }

    #[test]
    fn reports_render_and_serialize() {
        let mut report = SuiteReport::new("demo");
        report.push("first", true, "fine".into());
        report.push("second", false, "broken".into());
        assert!(!report.passed());
        let text = report.render_text();
        assert!(text.contains("PASS first: fine"));
        assert!(text.contains("FAIL second: broken"));
        assert!(text.contains("demo: FAIL (1/2 checks)"));
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["suite"], "demo");
        assert_eq!(json["checks"][1]["passed"], false);
    }

    #[test]
    fn fixtures_are_valid_and_sized() {
        let salt = rock_salt_unit(5.64);
        assert!(salt.is_valid());
        assert_eq!(salt.n(), 8);
        let rho = salt.density();
        assert!((rho - 8.0 / 5.64f64.powi(3)).abs() < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let jittered = jitter_unit(&salt, 0.05, &mut rng);
        assert!(jittered.is_valid());
        assert_eq!(jittered.lattice, salt.lattice);
        let moved: f64 = jittered
            .coords
            .iter()
            .zip(&salt.coords)
            .map(|(a, b)| (a - b).norm())
            .sum();
        assert!(moved > 0.0);
    }
}
