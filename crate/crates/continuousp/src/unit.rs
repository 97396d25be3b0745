//! Periodic units: a species vector, Cartesian coordinates, and a lattice
//! whose columns are the basis vectors. The unit describes the infinite solid
//! obtained by tiling the atoms over all integer lattice translations, so
//! every operation here preserves that point set exactly.

use nalgebra::{Matrix3, Vector3};

use crate::composition::Composition;
use crate::element::MAX_Z;
use crate::error::{Error, Result};
use crate::lattice::{self, DET_EPS, NIGGLI_REL_TOL};

/// Minimum-image distance below which two atoms are considered coincident (A).
pub const COINCIDE_EPS: f64 = 1e-6;

/// One crystal: n species, n Cartesian positions (A), lattice columns (A).
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicUnit {
    pub species: Vec<u8>,
    pub coords: Vec<Vector3<f64>>,
    pub lattice: Matrix3<f64>,
}

/// A violated unit invariant, reported with enough indices to locate it.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DegenerateLattice { det: f64 },
    LengthMismatch { species: usize, coords: usize },
    Empty,
    SpeciesOutOfRange { index: usize, z: u8 },
    NonFiniteCoord { index: usize },
    NonFiniteLattice,
    Coincident { i: usize, j: usize, image: [i64; 3], dist: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DegenerateLattice { det } => {
                write!(f, "degenerate lattice (|det| = {det:.3e})")
            }
            Violation::LengthMismatch { species, coords } => {
                write!(f, "{species} species vs {coords} coordinates")
            }
            Violation::Empty => write!(f, "no atoms"),
            Violation::SpeciesOutOfRange { index, z } => {
                write!(f, "species {z} out of range at index {index}")
            }
            Violation::NonFiniteCoord { index } => {
                write!(f, "non-finite coordinate at index {index}")
            }
            Violation::NonFiniteLattice => write!(f, "non-finite lattice entry"),
            Violation::Coincident { i, j, image, dist } => write!(
                f,
                "atoms {i} and {j} coincide under image {image:?} (d = {dist:.3e} A)"
            ),
        }
    }
}

impl PeriodicUnit {
    /// Builds a unit, checking shape consistency only; geometric invariants
    /// are reported by `validate`.
    pub fn new(
        species: Vec<u8>,
        coords: Vec<Vector3<f64>>,
        lattice: Matrix3<f64>,
    ) -> Result<Self> {
        if species.is_empty() {
            return Err(Error::EmptySpecies);
        }
        if species.len() != coords.len() {
            return Err(Error::LengthMismatch {
                species: species.len(),
                coords: coords.len(),
            });
        }
        if let Some(index) = species.iter().position(|&z| z == 0 || z > MAX_Z) {
            return Err(Error::SpeciesOutOfRange {
                index,
                z: species[index] as u32,
                max: MAX_Z as u32,
            });
        }
        Ok(Self {
            species,
            coords,
            lattice,
        })
    }

    pub fn n(&self) -> usize {
        self.species.len()
    }

    pub fn volume(&self) -> f64 {
        lattice::volume(&self.lattice)
    }

    /// Atomic density n / |det L| in A^-3.
    pub fn density(&self) -> f64 {
        self.n() as f64 / self.volume()
    }

    pub fn composition(&self) -> Result<Composition> {
        Composition::from_species(&self.species)
    }

    /// Checks every unit invariant and returns the list of violations
    /// (empty means valid). Coincidence is tested under the minimum image:
    /// all pairs i < j, plus self-images (i = j with k != 0).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.species.is_empty() {
            out.push(Violation::Empty);
        }
        if self.species.len() != self.coords.len() {
            out.push(Violation::LengthMismatch {
                species: self.species.len(),
                coords: self.coords.len(),
            });
            return out;
        }
        for (index, &z) in self.species.iter().enumerate() {
            if z == 0 || z > MAX_Z {
                out.push(Violation::SpeciesOutOfRange { index, z });
            }
        }
        for (index, x) in self.coords.iter().enumerate() {
            if !(x[0].is_finite() && x[1].is_finite() && x[2].is_finite()) {
                out.push(Violation::NonFiniteCoord { index });
            }
        }
        if self.lattice.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFiniteLattice);
            return out;
        }
        let det = self.lattice.determinant().abs();
        if det <= DET_EPS {
            out.push(Violation::DegenerateLattice { det });
            return out;
        }
        if out.iter().any(|v| matches!(v, Violation::NonFiniteCoord { .. })) {
            return out;
        }
        for i in 0..self.n() {
            for j in i..self.n() {
                let delta = self.coords[j] - self.coords[i];
                match lattice::images_within(&self.lattice, &delta, COINCIDE_EPS, false) {
                    Ok(images) => {
                        for (k, dist) in images {
                            if i == j && k == [0, 0, 0] {
                                continue;
                            }
                            out.push(Violation::Coincident { i, j, image: k, dist });
                        }
                    }
                    Err(_) => {
                        out.push(Violation::DegenerateLattice { det });
                        return out;
                    }
                }
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Fractional coordinates L^-1 x, one per atom.
    pub fn fractional_coords(&self) -> Result<Vec<Vector3<f64>>> {
        let inv = self
            .lattice
            .try_inverse()
            .ok_or(Error::DegenerateLattice {
                det: self.volume(),
                limit: DET_EPS,
            })?;
        Ok(self.coords.iter().map(|x| inv * x).collect())
    }

    /// Translates every atom by an integer lattice vector so its fractional
    /// coordinates land in [0, 1). The described solid is unchanged.
    pub fn wrap_to_cell(&self) -> Result<PeriodicUnit> {
        let fracs = self.fractional_coords()?;
        let coords = fracs
            .iter()
            .map(|f| {
                let mut w = Vector3::new(
                    f[0] - f[0].floor(),
                    f[1] - f[1].floor(),
                    f[2] - f[2].floor(),
                );
                for a in 0..3 {
                    // f - floor(f) rounds up to exactly 1.0 for tiny negative f.
                    if w[a] >= 1.0 {
                        w[a] -= 1.0;
                    }
                }
                self.lattice * w
            })
            .collect();
        Ok(PeriodicUnit {
            species: self.species.clone(),
            coords,
            lattice: self.lattice,
        })
    }

    /// Re-describes the same solid on the lattice L * M for an integer M with
    /// det != 0. |det M| = j multiplies the atom count: the new cell contains
    /// one copy of each atom per coset of the new lattice in the old one,
    /// wrapped into the new cell. Coset representatives are enumerated
    /// exactly with integer arithmetic and ordered canonically, so the result
    /// is deterministic.
    pub fn apply_basis_change(&self, m: &Matrix3<i64>) -> Result<PeriodicUnit> {
        let det_m = lattice::determinant_i64(m);
        if det_m == 0 {
            return Err(Error::SingularTransform);
        }
        let j = det_m.unsigned_abs() as usize;
        let new_lattice = self.lattice * m.map(|v| v as f64);

        // Residue of adj(M) t modulo |det M| classifies t's coset; sign-fix
        // so the residue corresponds to frac(M^-1 t) regardless of det sign.
        let adj = lattice::adjugate_i64(m);
        let modulus = det_m.unsigned_abs() as i64;
        let mut reps: Vec<([i64; 3], [i64; 3])> = Vec::with_capacity(j);
        let mut seen = std::collections::BTreeSet::new();

        // The box spanned by M's columns covers one representative per coset.
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for axis in 0..3 {
            let mut min_c = 0i64;
            let mut max_c = 0i64;
            for col in 0..3 {
                let e = m[(axis, col)];
                if e < 0 {
                    min_c += e;
                } else {
                    max_c += e;
                }
            }
            lo[axis] = min_c - 1;
            hi[axis] = max_c + 1;
        }
        'scan: for t0 in lo[0]..=hi[0] {
            for t1 in lo[1]..=hi[1] {
                for t2 in lo[2]..=hi[2] {
                    let t = [t0, t1, t2];
                    let mut key = [0i64; 3];
                    for r in 0..3 {
                        let v = adj[(r, 0)] * t0 + adj[(r, 1)] * t1 + adj[(r, 2)] * t2;
                        let signed = if det_m > 0 { v } else { -v };
                        key[r] = signed.rem_euclid(modulus);
                    }
                    if seen.insert(key) {
                        reps.push((key, t));
                        if reps.len() == j {
                            break 'scan;
                        }
                    }
                }
            }
        }
        debug_assert_eq!(reps.len(), j, "coset enumeration must find |det M| classes");
        reps.sort_by_key(|(key, _)| *key);

        let mut species = Vec::with_capacity(self.n() * j);
        let mut coords = Vec::with_capacity(self.n() * j);
        for (_, t) in &reps {
            let shift = self.lattice * Vector3::new(t[0] as f64, t[1] as f64, t[2] as f64);
            for (idx, x) in self.coords.iter().enumerate() {
                species.push(self.species[idx]);
                coords.push(x + shift);
            }
        }
        PeriodicUnit {
            species,
            coords,
            lattice: new_lattice,
        }
        .wrap_to_cell()
    }

    /// Finite chunk of the infinite solid: every (species, position) whose
    /// position lies within `radius` of the origin (boundary included).
    /// Ordered by atom index, then ascending lexicographic image.
    pub fn ptos_truncated(&self, radius: f64) -> Result<Vec<(u8, Vector3<f64>)>> {
        let mut out = Vec::new();
        for (idx, x) in self.coords.iter().enumerate() {
            for (k, _) in lattice::images_within(&self.lattice, x, radius, true)? {
                let pos = x + self.lattice
                    * Vector3::new(k[0] as f64, k[1] as f64, k[2] as f64);
                out.push((self.species[idx], pos));
            }
        }
        Ok(out)
    }

    /// Niggli-reduces the lattice and wraps atoms into the reduced cell.
    /// Returns the re-described unit and the applied integer transform.
    pub fn niggli_reduced(&self) -> Result<(PeriodicUnit, Matrix3<i64>)> {
        let (_, m) = lattice::niggli_reduce(&self.lattice, NIGGLI_REL_TOL)?;
        Ok((self.apply_basis_change(&m)?, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn cubic(a: f64) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(a, a, a))
    }

    fn simple_unit() -> PeriodicUnit {
        PeriodicUnit::new(vec![11], vec![Vector3::zeros()], cubic(2.0)).unwrap()
    }

    /// Matches two finite point sets up to a fixed isometry within tol.
    pub(crate) fn same_point_set(
        a: &[(u8, Vector3<f64>)],
        b: &[(u8, Vector3<f64>)],
        tol: f64,
    ) -> bool {
        if a.len() != b.len() {
            return false;
        }
        let mut used = vec![false; b.len()];
        for (za, pa) in a {
            let mut found = false;
            for (idx, (zb, pb)) in b.iter().enumerate() {
                if !used[idx] && za == zb && (pa - pb).norm() <= tol {
                    used[idx] = true;
                    found = true;
                    break;
                }
            }
            if !found {
                return false;
            }
        }
        true
    }

    #[test]
    fn ptos_counts_cubic_shells() {
        // One atom at the origin of a 2 A cube: radius 2.5 reaches the origin
        // plus the six face neighbors.
        let unit = simple_unit();
        let pts = unit.ptos_truncated(2.5).unwrap();
        assert_eq!(pts.len(), 7);
        // Radius includes the boundary: exactly 2.0 picks up the face images.
        let pts = unit.ptos_truncated(2.0).unwrap();
        assert_eq!(pts.len(), 7);
        let pts = unit.ptos_truncated(1.999).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn validate_reports_coincidence_and_degeneracy() {
        let good = PeriodicUnit::new(
            vec![11, 17],
            vec![Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)],
            cubic(2.0),
        )
        .unwrap();
        assert!(good.is_valid());

        // Second atom sits on a lattice image of the first.
        let bad = PeriodicUnit::new(
            vec![11, 17],
            vec![Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)],
            cubic(2.0),
        )
        .unwrap();
        let viol = bad.validate();
        assert!(viol
            .iter()
            .any(|v| matches!(v, Violation::Coincident { i: 0, j: 1, .. })));

        // An atom within eps of its own image.
        let thin = PeriodicUnit::new(
            vec![11],
            vec![Vector3::zeros()],
            Matrix3::from_diagonal(&Vector3::new(1e-7, 2.0, 2.0)),
        )
        .unwrap();
        assert!(!thin.is_valid());

        let degenerate = PeriodicUnit::new(
            vec![11],
            vec![Vector3::zeros()],
            Matrix3::from_diagonal(&Vector3::new(0.0, 2.0, 2.0)),
        )
        .unwrap();
        assert!(degenerate
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::DegenerateLattice { .. })));
    }

    #[test]
    fn wrap_preserves_solid_and_ranges() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..40 {
            let lattice = Matrix3::from_fn(|_, _| rng.random::<f64>() * 6.0 - 3.0);
            if lattice.determinant().abs() < 1.0 {
                continue;
            }
            let n = rng.random_range(1..5usize);
            let coords: Vec<_> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random::<f64>() * 20.0 - 10.0,
                        rng.random::<f64>() * 20.0 - 10.0,
                        rng.random::<f64>() * 20.0 - 10.0,
                    )
                })
                .collect();
            let unit =
                PeriodicUnit::new(vec![6; n], coords, lattice).unwrap();
            let wrapped = unit.wrap_to_cell().unwrap();
            for f in wrapped.fractional_coords().unwrap() {
                for a in 0..3 {
                    assert!(f[a] >= -1e-12 && f[a] < 1.0, "frac {f:?}");
                }
            }
            let p1 = unit.ptos_truncated(6.0).unwrap();
            let p2 = wrapped.ptos_truncated(6.0).unwrap();
            assert!(same_point_set(&p1, &p2, 1e-9));
        }
    }

    #[test]
    fn basis_change_identity_and_supercell() {
        let unit = PeriodicUnit::new(
            vec![11, 17],
            vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 1.1, 0.9)],
            cubic(2.0),
        )
        .unwrap();

        let same = unit.apply_basis_change(&Matrix3::identity()).unwrap();
        assert_eq!(same.n(), 2);

        let m2 = Matrix3::new(2, 0, 0, 0, 1, 0, 0, 0, 1);
        let doubled = unit.apply_basis_change(&m2).unwrap();
        assert_eq!(doubled.n(), 4);
        assert!((doubled.volume() - 2.0 * unit.volume()).abs() < 1e-9);
        assert!((doubled.density() - unit.density()).abs() < 1e-12);
        let p1 = unit.ptos_truncated(5.0).unwrap();
        let p2 = doubled.ptos_truncated(5.0).unwrap();
        assert!(same_point_set(&p1, &p2, 1e-9));

        // A negative-determinant transform still re-describes the solid.
        let neg = Matrix3::new(0, 1, 0, 1, 0, 0, 0, 0, 1);
        let mirrored = unit.apply_basis_change(&neg).unwrap();
        assert_eq!(mirrored.n(), 2);
        let p3 = mirrored.ptos_truncated(5.0).unwrap();
        assert!(same_point_set(&p1, &p3, 1e-9));

        assert!(matches!(
            unit.apply_basis_change(&Matrix3::zeros()),
            Err(Error::SingularTransform)
        ));
    }

    #[test]
    fn basis_change_supercell_dets() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let unit = PeriodicUnit::new(
            vec![11, 17],
            vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 1.1, 0.9)],
            cubic(2.0),
        )
        .unwrap();
        for _ in 0..20 {
            let mut m = Matrix3::<i64>::zeros();
            let mut det: i64 = 1;
            for a in 0..3 {
                let d = rng.random_range(1..3i64);
                m[(a, a)] = d;
                det *= d;
            }
            m[(0, 1)] = rng.random_range(-1..2i64);
            let changed = unit.apply_basis_change(&m).unwrap();
            assert_eq!(changed.n() as i64, 2 * det);
            let p1 = unit.ptos_truncated(4.0).unwrap();
            let p2 = changed.ptos_truncated(4.0).unwrap();
            assert!(same_point_set(&p1, &p2, 1e-9));
        }
    }

    #[test]
    fn niggli_reduced_unit_keeps_solid() {
        let skewed = Matrix3::new(4.0, 4.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0);
        let unit = PeriodicUnit::new(
            vec![11, 17],
            vec![Vector3::new(0.2, 0.1, 0.0), Vector3::new(2.0, 1.0, 1.0)],
            skewed,
        )
        .unwrap();
        let (reduced, m) = unit.niggli_reduced().unwrap();
        assert_eq!(lattice::determinant_i64(&m).abs(), 1);
        assert!(lattice::is_niggli_reduced(&reduced.lattice, NIGGLI_REL_TOL));
        assert_eq!(reduced.n(), unit.n());
        let p1 = unit.ptos_truncated(5.0).unwrap();
        let p2 = reduced.ptos_truncated(5.0).unwrap();
        assert!(same_point_set(&p1, &p2, 1e-9));
    }
}
