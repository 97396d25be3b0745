//! Crystal graphs: directed edges from each atom to every atom image within
//! a density-derived cutoff, Gaussian-smeared distance features, and the
//! smooth cutoff envelope shared by energy and gradient code.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice;
use crate::unit::PeriodicUnit;

/// Geometry and featurization settings for graph construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Cutoff = multiplier * (V/n)^(1/3). At 3.0 a cutoff sphere holds about
    /// 113 atoms of a uniform-density crystal.
    pub cutoff_multiplier: f64,
    /// Largest smearing center (A).
    pub smear_max: f64,
    /// Smearing sigma in units of the center spacing.
    pub smear_coeff: f64,
    /// Number of edge features (smearing centers).
    pub edge_dim: usize,
}

impl GraphConfig {
    pub fn with_edge_dim(edge_dim: usize) -> Self {
        Self {
            cutoff_multiplier: 3.0,
            smear_max: 20.0,
            smear_coeff: 3.0,
            edge_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_multiplier > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cutoff_multiplier must be positive, got {}",
                self.cutoff_multiplier
            )));
        }
        self.smearing().map(|_| ())
    }

    pub fn smearing(&self) -> Result<Smearing> {
        Smearing::new(self.smear_max, self.edge_dim, self.smear_coeff)
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self::with_edge_dim(64)
    }
}

/// Cutoff radius multiplier * (1/rho)^(1/3); scales with the typical atom
/// spacing so every atom keeps a comparable neighborhood at any cell size.
pub fn cutoff_distance(unit: &PeriodicUnit, cfg: &GraphConfig) -> Result<f64> {
    lattice::check_not_degenerate(&unit.lattice)?;
    Ok(cfg.cutoff_multiplier * (unit.volume() / unit.n() as f64).cbrt())
}

/// All neighbors of atom `i` within `cutoff`: pairs (j, k, distance) with
/// ||x_j + L k - x_i|| < cutoff, excluding only the self-pair (i, i, 0).
/// Self-images (j = i, k != 0) are genuine neighbors in a periodic solid.
/// Ordered by (j, k) ascending.
pub fn neighborhood(
    unit: &PeriodicUnit,
    i: usize,
    cutoff: f64,
) -> Result<Vec<(usize, [i64; 3], f64)>> {
    let mut out = Vec::new();
    for j in 0..unit.n() {
        let delta = unit.coords[j] - unit.coords[i];
        for (image, dist) in lattice::images_within(&unit.lattice, &delta, cutoff, false)? {
            if i == j && image == [0, 0, 0] {
                continue;
            }
            out.push((j, image, dist));
        }
    }
    Ok(out)
}

/// One directed edge: `source` atom to the image of `neighbor` shifted by
/// L * image. `delta` is the Cartesian separation
/// x_neighbor + L*image - x_source, `dist` its norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub neighbor: usize,
    pub image: [i64; 3],
    pub delta: Vector3<f64>,
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrystalGraph {
    pub n_atoms: usize,
    pub cutoff: f64,
    /// Sorted by (source, neighbor, image); for every edge (i, j, k) the
    /// reverse edge (j, i, -k) is present with the same distance.
    pub edges: Vec<Edge>,
    /// Smeared distance features, one column per edge (edge_dim x edges).
    pub features: DMatrix<f64>,
}

/// Builds the full graph at the density-derived cutoff and featurizes every
/// edge. Deterministic: edge order is (source, neighbor, image) ascending.
pub fn build_graph(unit: &PeriodicUnit, cfg: &GraphConfig) -> Result<CrystalGraph> {
    let smearing = cfg.smearing()?;
    let cutoff = cutoff_distance(unit, cfg)?;
    let n = unit.n();
    let mut edges = Vec::new();
    for i in 0..n {
        for (j, image, dist) in neighborhood(unit, i, cutoff)? {
            let shift = unit.lattice
                * Vector3::new(image[0] as f64, image[1] as f64, image[2] as f64);
            edges.push(Edge {
                source: i,
                neighbor: j,
                image,
                delta: unit.coords[j] - unit.coords[i] + shift,
                dist,
            });
        }
    }
    debug_assert!(edges
        .windows(2)
        .all(|w| (w[0].source, w[0].neighbor, w[0].image)
            < (w[1].source, w[1].neighbor, w[1].image)));
    let mut features = DMatrix::zeros(cfg.edge_dim, edges.len());
    for (e, edge) in edges.iter().enumerate() {
        smearing.features_into(edge.dist, features.column_mut(e).as_mut_slice());
    }
    Ok(CrystalGraph {
        n_atoms: n,
        cutoff,
        edges,
        features,
    })
}

/// Smooth cutoff envelope cos^2(pi d / (2 D)) for d < D, 0 beyond. Both the
/// value and its d-derivative vanish at D, so edges may appear or disappear
/// at the cutoff without an energy or gradient jump.
pub fn envelope(dist: f64, cutoff: f64) -> f64 {
    if dist >= cutoff {
        return 0.0;
    }
    let c = (std::f64::consts::PI * dist / (2.0 * cutoff)).cos();
    c * c
}

/// d/d(dist) of `envelope`: -(pi / 2D) sin(pi d / D).
pub fn envelope_ddist(dist: f64, cutoff: f64) -> f64 {
    if dist >= cutoff {
        return 0.0;
    }
    let pi = std::f64::consts::PI;
    -(pi / (2.0 * cutoff)) * (pi * dist / cutoff).sin()
}

/// d/d(cutoff) of `envelope`: (pi d / 2D^2) sin(pi d / D). The cutoff itself
/// depends on the lattice, so this term feeds the lattice gradient.
pub fn envelope_dcutoff(dist: f64, cutoff: f64) -> f64 {
    if dist >= cutoff {
        return 0.0;
    }
    let pi = std::f64::consts::PI;
    (pi * dist / (2.0 * cutoff * cutoff)) * (pi * dist / cutoff).sin()
}

/// Gaussian smearing of a scalar distance onto `count` evenly spaced centers
/// 0, spacing, ..., max. Feature t is exp(-(d - t*spacing)^2 / (2 sigma^2)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smearing {
    pub spacing: f64,
    pub sigma: f64,
    pub count: usize,
}

impl Smearing {
    /// `count >= 2` so the spacing max / (count - 1) is defined; sigma is
    /// `coeff` spacings wide.
    pub fn new(max: f64, count: usize, coeff: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidConfig(format!(
                "smearing needs at least 2 centers, got {count}"
            )));
        }
        if !(max > 0.0) || !(coeff > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "smearing max and coeff must be positive, got {max} and {coeff}"
            )));
        }
        let spacing = max / (count - 1) as f64;
        Ok(Self {
            spacing,
            sigma: coeff * spacing,
            count,
        })
    }

    /// Writes the `count` features for distance `dist` into `out`.
    pub fn features_into(&self, dist: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.count);
        let inv_two_sigma2 = 1.0 / (2.0 * self.sigma * self.sigma);
        for (t, slot) in out.iter_mut().enumerate() {
            let gap = dist - t as f64 * self.spacing;
            *slot = (-gap * gap * inv_two_sigma2).exp();
        }
    }

    /// d(feature_t)/d(dist) given the already computed feature value:
    /// e_t * (center_t - d) / sigma^2.
    pub fn ddist(&self, dist: f64, t: usize, feature: f64) -> f64 {
        feature * (t as f64 * self.spacing - dist) / (self.sigma * self.sigma)
    }
}
