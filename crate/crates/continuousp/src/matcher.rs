//! Structure matching by reduced-cell alignment and optimal atom assignment.
//!
//! Two units match when, after Niggli reduction and rescaling to unit volume
//! per atom, their cells agree within `ltol` and `angle_tol` and some
//! species-preserving assignment puts every atom within `stol` of its image.
//! Distances are measured in fractional space under the averaged metric of
//! the two cells, so the reported rms is already normalized by (V/n)^(1/3).
//! The rms is minimized over basis alignments and anchor translations, which
//! makes it a property of the two crystals rather than of their descriptions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};

use crate::lattice::{adjugate_i64, determinant_i64};
use crate::unit::PeriodicUnit;
use crate::{Error, Result};

/// Largest atom-count ratio reconciled by supercell expansion.
pub const MAX_SUPERCELL_FACTOR: usize = 4;

/// Largest same-species block the exhaustive assignment will enumerate.
const MAX_EXHAUSTIVE_BLOCK: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchTolerances {
    /// Site tolerance, a fraction of the normalized length scale (V/n)^(1/3).
    pub stol: f64,
    /// Fractional tolerance on reduced-cell lengths.
    pub ltol: f64,
    /// Tolerance on reduced-cell angles, in degrees.
    pub angle_tol: f64,
}

impl Default for MatchTolerances {
    fn default() -> Self {
        MatchTolerances {
            stol: 0.5,
            ltol: 0.3,
            angle_tol: 10.0,
        }
    }
}

impl MatchTolerances {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stol", self.stol),
            ("ltol", self.ltol),
            ("angle_tol", self.angle_tol),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a match attempt. `rms` is present exactly when `matched`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchReport {
    pub matched: bool,
    pub rms: Option<f64>,
}

impl MatchReport {
    fn unmatched() -> Self {
        MatchReport {
            matched: false,
            rms: None,
        }
    }
}

/// How the per-species minimum-cost assignment is solved. Both are exact;
/// the exhaustive route exists as an independent oracle for the Hungarian one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentMethod {
    Hungarian,
    Exhaustive,
}

/// Matches two units with the Hungarian assignment.
pub fn match_structures(
    p1: &PeriodicUnit,
    p2: &PeriodicUnit,
    tol: &MatchTolerances,
) -> Result<MatchReport> {
    match_structures_with(p1, p2, tol, AssignmentMethod::Hungarian)
}

/// Matches two units with an explicit assignment method.
///
/// Composition mismatches and tolerance failures report `matched: false`;
/// errors are reserved for invalid inputs.
pub fn match_structures_with(
    p1: &PeriodicUnit,
    p2: &PeriodicUnit,
    tol: &MatchTolerances,
    method: AssignmentMethod,
) -> Result<MatchReport> {
    tol.validate()?;
    for (name, u) in [("first", p1), ("second", p2)] {
        if let Some(v) = u.validate().first() {
            return Err(Error::InvalidUnit(format!("{name} operand: {v}")));
        }
    }

    let (red1, _) = p1.composition()?.reduce();
    let (red2, _) = p2.composition()?.reduce();
    if red1 != red2 {
        return Ok(MatchReport::unmatched());
    }

    // Same reduced composition, so atom counts differ by a rational factor;
    // only integer factors up to MAX_SUPERCELL_FACTOR are reconciled, by
    // expanding the smaller unit over diagonal supercells. Off-diagonal
    // sublattice relations of the same index are not searched.
    let (small, big) = if p1.n() <= p2.n() { (p1, p2) } else { (p2, p1) };
    if big.n() % small.n() != 0 {
        return Ok(MatchReport::unmatched());
    }
    let factor = big.n() / small.n();
    if factor > MAX_SUPERCELL_FACTOR {
        return Ok(MatchReport::unmatched());
    }

    let rb = reduce_and_normalize(big)?;
    let mut best: Option<f64> = None;
    for expanded in diagonal_expansions(small, factor)? {
        let ra = reduce_and_normalize(&expanded)?;
        if !sorted_cells_compatible(&ra.lattice, &rb.lattice, tol) {
            continue;
        }
        align_and_score(&ra, &rb, tol, method, &mut best)?;
    }

    Ok(match best {
        Some(rms) => MatchReport {
            matched: true,
            rms: Some(rms),
        },
        None => MatchReport::unmatched(),
    })
}

/// A unit after Niggli reduction, rescaled so the volume per atom is one.
struct Reduced {
    species: Vec<u8>,
    fracs: Vec<Vector3<f64>>,
    lattice: Matrix3<f64>,
}

fn reduce_and_normalize(u: &PeriodicUnit) -> Result<Reduced> {
    let (r, _) = u.niggli_reduced()?;
    let fracs = r.fractional_coords()?;
    let scale = (r.volume() / r.n() as f64).cbrt();
    Ok(Reduced {
        species: r.species.clone(),
        fracs,
        lattice: r.lattice / scale,
    })
}

fn lengths_angles(l: &Matrix3<f64>) -> ([f64; 3], [f64; 3]) {
    let cols = [
        l.column(0).into_owned(),
        l.column(1).into_owned(),
        l.column(2).into_owned(),
    ];
    let len = [cols[0].norm(), cols[1].norm(), cols[2].norm()];
    let mut ang = [0.0; 3];
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        let c = cols[j].dot(&cols[k]) / (len[j] * len[k]);
        ang[i] = c.clamp(-1.0, 1.0).acos().to_degrees();
    }
    (len, ang)
}

fn within_length_tol(a: f64, b: f64, ltol: f64) -> bool {
    a.max(b) / a.min(b) - 1.0 <= ltol
}

/// Coarse cell gate: sorted lengths and sorted angles must agree pairwise.
/// Sorting pairs each successive minimum with its counterpart, so a failure
/// here cannot be rescued by any basis alignment.
fn sorted_cells_compatible(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: &MatchTolerances) -> bool {
    let (mut la, mut aa) = lengths_angles(a);
    let (mut lb, mut ab) = lengths_angles(b);
    for v in [&mut la, &mut lb, &mut aa, &mut ab] {
        v.sort_by(f64::total_cmp);
    }
    (0..3).all(|i| {
        within_length_tol(la[i], lb[i], tol.ltol) && (aa[i] - ab[i]).abs() <= tol.angle_tol
    })
}

/// All unimodular 3x3 integer matrices with entries in {-1, 0, 1}, together
/// with their (exact integer) inverses. Niggli cells of two near-identical
/// lattices can differ by such a transform when reduction tie-breaks fall
/// differently, so the matcher searches this set to align the two bases.
/// Closure under inversion keeps the match verdict symmetric in its operands.
fn unimodular_candidates() -> &'static [Matrix3<i64>] {
    static CANDS: OnceLock<Vec<Matrix3<i64>>> = OnceLock::new();
    CANDS.get_or_init(|| {
        let key = |m: &Matrix3<i64>| {
            let mut k = [0i64; 9];
            for r in 0..3 {
                for c in 0..3 {
                    k[r * 3 + c] = m[(r, c)];
                }
            }
            k
        };
        let mut set: BTreeSet<[i64; 9]> = BTreeSet::new();
        for code in 0..3i64.pow(9) {
            let mut rem = code;
            let mut e = [0i64; 9];
            for slot in &mut e {
                *slot = rem % 3 - 1;
                rem /= 3;
            }
            let m = Matrix3::from_row_slice(&e);
            let det = determinant_i64(&m);
            if det.abs() == 1 {
                // det is +-1, so adj(m) * det is the exact inverse.
                set.insert(key(&m));
                set.insert(key(&(adjugate_i64(&m) * det)));
            }
        }
        set.into_iter()
            .map(|k| Matrix3::from_row_slice(&k))
            .collect()
    })
}

fn to_f64(m: &Matrix3<i64>) -> Matrix3<f64> {
    m.map(|x| x as f64)
}

/// Tries every basis alignment of `rb` onto `ra`'s axes and folds accepted
/// alignments into `best`.
fn align_and_score(
    ra: &Reduced,
    rb: &Reduced,
    tol: &MatchTolerances,
    method: AssignmentMethod,
    best: &mut Option<f64>,
) -> Result<()> {
    let (la, aa) = lengths_angles(&ra.lattice);
    for t in unimodular_candidates() {
        let lat_b = rb.lattice * to_f64(t);
        let (lb, ab) = lengths_angles(&lat_b);
        let aligned = (0..3).all(|i| {
            within_length_tol(la[i], lb[i], tol.ltol) && (aa[i] - ab[i]).abs() <= tol.angle_tol
        });
        if !aligned {
            continue;
        }
        let inv = to_f64(&(adjugate_i64(t) * determinant_i64(t)));
        let fracs_b: Vec<Vector3<f64>> = rb.fracs.iter().map(|f| inv * f).collect();
        if let Some(rms) = anchored_rms(ra, &lat_b, &rb.species, &fracs_b, tol, method)? {
            if best.map_or(true, |b| rms < b) {
                *best = Some(rms);
            }
        }
    }
    Ok(())
}

/// Minimum rms over anchor translations for one fixed basis alignment, or
/// None when no anchor keeps every displacement within `stol`.
fn anchored_rms(
    ra: &Reduced,
    lat_b: &Matrix3<f64>,
    species_b: &[u8],
    fracs_b: &[Vector3<f64>],
    tol: &MatchTolerances,
    method: AssignmentMethod,
) -> Result<Option<f64>> {
    let n = ra.species.len();
    let gram = (ra.lattice.transpose() * ra.lattice + lat_b.transpose() * lat_b) * 0.5;

    let mut blocks_a: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &z) in ra.species.iter().enumerate() {
        blocks_a.entry(z).or_default().push(i);
    }
    let mut blocks_b: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &z) in species_b.iter().enumerate() {
        blocks_b.entry(z).or_default().push(i);
    }

    // Anchor on the least frequent species: fewest translations to try.
    let (&anchor_z, _) = blocks_a
        .iter()
        .min_by_key(|(z, idx)| (idx.len(), **z))
        .expect("non-empty unit");
    let a0 = blocks_a[&anchor_z][0];

    let mut best: Option<f64> = None;
    for &j in &blocks_b[&anchor_z] {
        let shift = ra.fracs[a0] - fracs_b[j];
        let mut sum_sq = 0.0;
        let mut max_sq = 0.0f64;
        for (z, ia) in &blocks_a {
            let ib = &blocks_b[z];
            let k = ia.len();
            let mut cost = vec![0.0; k * k];
            for (r, &i) in ia.iter().enumerate() {
                for (c, &jb) in ib.iter().enumerate() {
                    cost[r * k + c] = min_image_sq(fracs_b[jb] + shift - ra.fracs[i], &gram);
                }
            }
            let assign = match method {
                AssignmentMethod::Hungarian => hungarian(&cost, k),
                AssignmentMethod::Exhaustive => exhaustive_assignment(&cost, k)?,
            };
            for (r, &c) in assign.iter().enumerate() {
                let d = cost[r * k + c];
                sum_sq += d;
                max_sq = max_sq.max(d);
            }
        }
        if max_sq.sqrt() > tol.stol {
            continue;
        }
        let rms = (sum_sq / n as f64).sqrt();
        if best.map_or(true, |b| rms < b) {
            best = Some(rms);
        }
    }
    Ok(best)
}

/// Squared length of the shortest periodic image of a fractional displacement
/// under the metric `gram`. Wrapping to the centered cell first keeps the
/// +-1 search box sufficient for reduced (hence nearly orthogonal) cells.
fn min_image_sq(delta: Vector3<f64>, gram: &Matrix3<f64>) -> f64 {
    let base = Vector3::new(
        delta.x - delta.x.round(),
        delta.y - delta.y.round(),
        delta.z - delta.z.round(),
    );
    let mut best = f64::INFINITY;
    for kx in -1..=1 {
        for ky in -1..=1 {
            for kz in -1..=1 {
                let v = base + Vector3::new(kx as f64, ky as f64, kz as f64);
                let d = v.dot(&(gram * v));
                if d < best {
                    best = d;
                }
            }
        }
    }
    best
}

/// Diagonal supercells of `u` with the given atom-count factor. Factor one
/// yields the unit itself (rewrapped, which matching cannot observe).
fn diagonal_expansions(u: &PeriodicUnit, factor: usize) -> Result<Vec<PeriodicUnit>> {
    let f = factor as i64;
    let mut out = Vec::new();
    for a in 1..=f {
        if f % a != 0 {
            continue;
        }
        for b in 1..=(f / a) {
            if (f / a) % b != 0 {
                continue;
            }
            let c = f / (a * b);
            let m = Matrix3::new(a, 0, 0, 0, b, 0, 0, 0, c);
            out.push(u.apply_basis_change(&m)?);
        }
    }
    Ok(out)
}

/// Exact minimum-cost assignment on a square row-major cost matrix by the
/// shortest-augmenting-path method with dual potentials. Returns the column
/// assigned to each row.
fn hungarian(cost: &[f64], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual unassigned column.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut row_of = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * k + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; k];
    for j in 1..=k {
        if row_of[j] > 0 {
            result[row_of[j] - 1] = j - 1;
        }
    }
    result
}

/// Minimum-cost assignment by enumerating all permutations. Oracle for
/// `hungarian`; refuses blocks it cannot enumerate quickly.
fn exhaustive_assignment(cost: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > MAX_EXHAUSTIVE_BLOCK {
        return Err(Error::InvalidConfig(format!(
            "exhaustive assignment supports blocks of at most {MAX_EXHAUSTIVE_BLOCK} atoms, got {k}"
        )));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best_perm = perm.clone();
    let mut best_cost = f64::INFINITY;
    let mut counters = vec![0usize; k];
    let score = |p: &[usize], best_cost: &mut f64, best_perm: &mut Vec<usize>| {
        let total: f64 = p.iter().enumerate().map(|(r, &c)| cost[r * k + c]).sum();
        if total < *best_cost {
            *best_cost = total;
            best_perm.copy_from_slice(p);
        }
    };
    score(&perm, &mut best_cost, &mut best_perm);
    let mut i = 0;
    while i < k {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            score(&perm, &mut best_cost, &mut best_perm);
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best_perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn unit(species: Vec<u8>, coords: Vec<Vector3<f64>>, lattice: Matrix3<f64>) -> PeriodicUnit {
        PeriodicUnit::new(species, coords, lattice).expect("valid test unit")
    }

    /// Conventional 8-atom rock salt cell with parameter `a`.
    fn rock_salt(a: f64) -> PeriodicUnit {
        let mut species = Vec::new();
        let mut coords = Vec::new();
        let fcc = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.5, 0.5),
            Vector3::new(0.5, 0.0, 0.5),
            Vector3::new(0.5, 0.5, 0.0),
        ];
        let shift = Vector3::new(0.5, 0.5, 0.5);
        for f in fcc {
            species.push(11);
            coords.push(f * a);
        }
        for f in fcc {
            species.push(17);
            coords.push((f + shift).map(|x| x % 1.0) * a);
        }
        unit(species, coords, Matrix3::identity() * a)
    }

    fn random_unit(rng: &mut ChaCha12Rng, n: usize) -> PeriodicUnit {
        loop {
            let lattice = Matrix3::from_fn(|_, _| rng.random::<f64>() * 6.0 - 3.0)
                + Matrix3::identity() * 4.0;
            if lattice.determinant().abs() < 1.0 {
                continue;
            }
            let species: Vec<u8> = (0..n).map(|_| [6u8, 8, 14][rng.random_range(0..3)]).collect();
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
            let u = PeriodicUnit::new(species, coords, lattice).expect("shape is valid");
            if u.validate().is_empty() {
                return u;
            }
        }
    }

    fn brute_force_min_cost(cost: &[f64], k: usize) -> f64 {
        let perm = exhaustive_assignment(cost, k).expect("small block");
        perm.iter().enumerate().map(|(r, &c)| cost[r * k + c]).sum()
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for case in 0..40 {
            let k = 1 + case % 7;
            let cost: Vec<f64> = (0..k * k).map(|_| rng.random::<f64>() * 10.0).collect();
            let assign = hungarian(&cost, k);
            let mut seen = vec![false; k];
            for &c in &assign {
                assert!(!seen[c], "assignment must be a permutation");
                seen[c] = true;
            }
            let total: f64 = assign
                .iter()
                .enumerate()
                .map(|(r, &c)| cost[r * k + c])
                .sum();
            let expected = brute_force_min_cost(&cost, k);
            assert!(
                (total - expected).abs() <= 1e-12 * (1.0 + expected),
                "k={k}: hungarian {total} vs brute force {expected}"
            );
        }
    }

    #[test]
    fn self_match_has_zero_rms() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let tol = MatchTolerances::default();
        for n in [1usize, 2, 5, 8] {
            let u = random_unit(&mut rng, n);
            let report = match_structures(&u, &u, &tol).expect("match runs");
            assert!(report.matched, "unit must match itself (n={n})");
            assert!(
                report.rms.expect("rms present when matched") <= 1e-9,
                "self rms must vanish, got {:?}",
                report.rms
            );
        }
    }

    #[test]
    fn redescriptions_match_with_tiny_rms() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let tol = MatchTolerances::default();
        let u = random_unit(&mut rng, 6);

        // Translation by an arbitrary Cartesian offset.
        let t = Vector3::new(1.3, -0.4, 2.2);
        let translated = unit(
            u.species.clone(),
            u.coords.iter().map(|c| c + t).collect(),
            u.lattice,
        );

        // Proper rotation from a QR factorization, sign-fixed.
        let raw = Matrix3::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0);
        let qr = raw.qr();
        let mut q = qr.q();
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        let rotated = unit(
            u.species.clone(),
            u.coords.iter().map(|c| q * c).collect(),
            q * u.lattice,
        );

        // Atom order permutation.
        let order = [3usize, 0, 5, 1, 4, 2];
        let permuted = unit(
            order.iter().map(|&i| u.species[i]).collect(),
            order.iter().map(|&i| u.coords[i]).collect(),
            u.lattice,
        );

        // Doubled cell along one axis.
        let supercell = u
            .apply_basis_change(&Matrix3::new(2, 0, 0, 0, 1, 0, 0, 0, 1))
            .expect("valid supercell");

        for (name, v) in [
            ("translated", &translated),
            ("rotated", &rotated),
            ("permuted", &permuted),
            ("supercell", &supercell),
        ] {
            let report = match_structures(&u, v, &tol).expect("match runs");
            assert!(report.matched, "{name} copy must match");
            let rms = report.rms.expect("rms present");
            assert!(rms <= 1e-6, "{name} rms too large: {rms}");
        }
    }

    #[test]
    fn displaced_rock_salt_rms_is_analytic() {
        let tol = MatchTolerances::default();
        let a = 5.64;
        let reference = rock_salt(a);
        let mut displaced = reference.clone();
        displaced.coords[0].x += 0.2;

        let report = match_structures(&reference, &displaced, &tol).expect("match runs");
        assert!(report.matched);
        let rms = report.rms.expect("rms present");

        // One atom off by 0.2 A, the rest exact: rms = sqrt(0.2^2 / 8) in
        // Angstroms, divided by the normalization length (a^3 / 8)^(1/3).
        let norm = (a.powi(3) / 8.0).cbrt();
        let expected = (0.2f64.powi(2) / 8.0).sqrt() / norm;
        assert!(
            (rms - expected).abs() <= 1e-6,
            "rms {rms} vs analytic {expected}"
        );

        let oracle =
            match_structures_with(&reference, &displaced, &tol, AssignmentMethod::Exhaustive)
                .expect("oracle runs");
        assert!(oracle.matched);
        assert!((oracle.rms.unwrap() - rms).abs() <= 1e-9);
    }

    #[test]
    fn hungarian_agrees_with_exhaustive_on_perturbed_pairs() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let tol = MatchTolerances::default();
        for case in 0..20 {
            let n = 2 + case % 7;
            let u = random_unit(&mut rng, n);
            let scale = (u.volume() / n as f64).cbrt();
            let jittered = unit(
                u.species.clone(),
                u.coords
                    .iter()
                    .map(|c| {
                        c + Vector3::new(
                            rng.random::<f64>() - 0.5,
                            rng.random::<f64>() - 0.5,
                            rng.random::<f64>() - 0.5,
                        ) * 0.2
                            * scale
                    })
                    .collect(),
                u.lattice,
            );
            let fast = match_structures(&u, &jittered, &tol).expect("match runs");
            let slow = match_structures_with(&u, &jittered, &tol, AssignmentMethod::Exhaustive)
                .expect("oracle runs");
            assert_eq!(fast.matched, slow.matched, "case {case}");
            if fast.matched {
                let (f, s) = (fast.rms.unwrap(), slow.rms.unwrap());
                assert!((f - s).abs() <= 1e-9, "case {case}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn verdict_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let tol = MatchTolerances::default();
        let base = random_unit(&mut rng, 4);
        let near = unit(
            base.species.clone(),
            base.coords.iter().map(|c| c + Vector3::new(0.05, 0.0, 0.0)).collect(),
            base.lattice,
        );
        let far = random_unit(&mut rng, 4);
        for (a, b) in [(&base, &near), (&base, &far), (&near, &far)] {
            let ab = match_structures(a, b, &tol).expect("match runs");
            let ba = match_structures(b, a, &tol).expect("match runs");
            assert_eq!(ab.matched, ba.matched);
            if let (Some(x), Some(y)) = (ab.rms, ba.rms) {
                assert!((x - y).abs() <= 1e-9, "rms must be symmetric: {x} vs {y}");
            }
        }
    }

    #[test]
    fn rms_grows_with_displacement() {
        let tol = MatchTolerances::default();
        let reference = rock_salt(5.64);
        let mut last = 0.0;
        for delta in [0.05, 0.10, 0.15, 0.20] {
            let mut displaced = reference.clone();
            displaced.coords[0].x += delta;
            let report = match_structures(&reference, &displaced, &tol).expect("match runs");
            assert!(report.matched, "delta {delta} stays within stol");
            let rms = report.rms.unwrap();
            assert!(rms > last, "rms must grow: {rms} after {last}");
            last = rms;
        }
    }

    #[test]
    fn rejections_are_reports_not_errors() {
        let tol = MatchTolerances::default();
        let salt = rock_salt(5.64);

        // Different composition.
        let carbon = unit(
            vec![6, 6],
            vec![Vector3::zeros(), Vector3::new(0.9, 0.9, 0.9)],
            Matrix3::identity() * 3.6,
        );
        let report = match_structures(&salt, &carbon, &tol).expect("runs");
        assert!(!report.matched);
        assert!(report.rms.is_none());

        // Same composition, incompatible cell: stretched far beyond ltol.
        let stretched = unit(
            salt.species.clone(),
            salt.coords.iter().map(|c| Vector3::new(c.x * 2.0, c.y, c.z)).collect(),
            Matrix3::from_diagonal(&Vector3::new(5.64 * 2.0, 5.64, 5.64)),
        );
        let report = match_structures(&salt, &stretched, &tol).expect("runs");
        assert!(!report.matched);

        // Atom counts in a ratio above the supercell limit.
        let salt_x8 = salt
            .apply_basis_change(&Matrix3::new(2, 0, 0, 0, 2, 0, 0, 0, 2))
            .expect("valid supercell");
        let report = match_structures(&salt, &salt_x8, &tol).expect("runs");
        assert!(!report.matched);

        // Within the limit the supercell route reconciles the counts.
        let salt_x4 = salt
            .apply_basis_change(&Matrix3::new(2, 0, 0, 0, 2, 0, 0, 0, 1))
            .expect("valid supercell");
        let report = match_structures(&salt, &salt_x4, &tol).expect("runs");
        assert!(report.matched);
        assert!(report.rms.unwrap() <= 1e-6);
    }

    #[test]
    fn jittered_rock_salt_matches_but_big_jitter_does_not() {
        let tol = MatchTolerances::default();
        let reference = rock_salt(5.64);
        let mut rng = ChaCha12Rng::seed_from_u64(37);

        let jitter = |amount: f64, rng: &mut ChaCha12Rng| {
            unit(
                reference.species.clone(),
                reference
                    .coords
                    .iter()
                    .map(|c| {
                        c + Vector3::new(
                            rng.random::<f64>() - 0.5,
                            rng.random::<f64>() - 0.5,
                            rng.random::<f64>() - 0.5,
                        ) * amount
                    })
                    .collect(),
                reference.lattice,
            )
        };

        let small = jitter(0.1, &mut rng);
        let report = match_structures(&reference, &small, &tol).expect("runs");
        assert!(report.matched, "small jitter stays within stol");

        // %stol of the normalization length is about 1.4 A here; displace one
        // atom far beyond it so no assignment can absorb the move.
        let mut broken = reference.clone();
        broken.coords[0] += Vector3::new(2.0, 2.0, 0.0);
        let report = match_structures(&reference, &broken, &tol).expect("runs");
        assert!(!report.matched, "a 2.8 A displacement must fail stol");
    }

    #[test]
    fn invalid_units_error() {
        let tol = MatchTolerances::default();
        let good = rock_salt(5.64);
        let degenerate = PeriodicUnit::new(
            vec![11],
            vec![Vector3::zeros()],
            Matrix3::zeros(),
        )
        .expect("constructor accepts shape");
        let err = match_structures(&good, &degenerate, &tol).unwrap_err();
        assert!(matches!(err, Error::InvalidUnit(_)), "got {err:?}");
    }
}
