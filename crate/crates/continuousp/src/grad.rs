//! Reverse-mode differentiation of the energy with respect to coordinates,
//! lattice, and parameters, over the tape recorded by the forward pass.
//!
//! The neighbor set is held fixed during differentiation. That is exact, not
//! an approximation: the envelope and its distance derivative both vanish at
//! the cutoff, so edges entering or leaving the graph carry zero weight.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph;
use crate::model::{forward, sigmoid, ModelConfig, ModelParams, PenaltyKind};
use crate::unit::PeriodicUnit;

/// Which gradients to compute; unrequested ones are skipped entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub coords: bool,
    pub lattice: bool,
    pub params: bool,
}

impl GradTargets {
    /// Coordinates and lattice: what a sampler step needs.
    pub fn geometry() -> Self {
        Self {
            coords: true,
            lattice: true,
            params: false,
        }
    }

    /// Parameters only: what a training step needs.
    pub fn params() -> Self {
        Self {
            coords: false,
            lattice: false,
            params: true,
        }
    }

    pub fn all() -> Self {
        Self {
            coords: true,
            lattice: true,
            params: true,
        }
    }
}

/// Gradients of the scalar energy; present iff requested.
#[derive(Debug, Clone)]
pub struct EnergyGradients {
    pub coords: Option<Vec<Vector3<f64>>>,
    pub lattice: Option<Matrix3<f64>>,
    pub params: Option<ModelParams>,
}

/// Evaluates the energy and the requested gradients in one pass. The energy
/// equals `model::energy` bit for bit: both run the same forward code.
pub fn energy_with_grads(
    unit: &PeriodicUnit,
    params: &ModelParams,
    cfg: &ModelConfig,
    targets: GradTargets,
) -> Result<(f64, EnergyGradients)> {
    let tape = forward(unit, params, cfg)?;
    let n = unit.n();
    let dv = cfg.node_dim;
    let de = cfg.graph.edge_dim;
    let m = tape.graph.edges.len();
    let need_geometry = targets.coords || targets.lattice;

    let mut grad_params = if targets.params {
        Some(params.zeros_like())
    } else {
        None
    };

    // Head: the final affine layer outputs the network energy directly, so
    // its pre-activation gradient is 1.
    let mut d_pre = DVector::from_element(1, 1.0);
    let mut d_pooled = DVector::zeros(dv);
    for k in (0..params.mlp.len()).rev() {
        if let Some(gp) = grad_params.as_mut() {
            gp.mlp[k].w.gemm(1.0, &d_pre, &tape.zs[k].transpose(), 1.0);
            gp.mlp[k].b += &d_pre;
        }
        let d_z = params.mlp[k].w.transpose() * &d_pre;
        if k > 0 {
            // z_k = softplus(pre_{k-1}); softplus' = sigmoid.
            d_pre = d_z.zip_map(&tape.pres[k - 1], |dz, pre| dz * sigmoid(pre));
        } else {
            d_pooled = d_z;
        }
    }

    // Mean pooling spreads the head gradient evenly over nodes.
    let mut d_v = DMatrix::zeros(dv, n);
    for i in 0..n {
        d_v.column_mut(i).copy_from(&(&d_pooled / n as f64));
    }

    // Distance-feature and envelope-weight gradients accumulate across all
    // layers (each layer reads the same edge features and weights).
    let mut d_feat = if need_geometry {
        Some(DMatrix::zeros(de, m))
    } else {
        None
    };
    let mut d_weight = vec![0.0; m];

    for (l, lt) in tape.layers.iter().enumerate().rev() {
        let layer = &params.convs[l];

        // s = v_in + sum of messages; v_next = softplus(s).
        let ds = d_v.zip_map(&lt.s_pre, |g, s| g * sigmoid(s));

        let mut d_p_gate = DMatrix::zeros(dv, n);
        let mut d_q_gate = DMatrix::zeros(dv, n);
        let mut d_p_core = DMatrix::zeros(dv, n);
        let mut d_q_core = DMatrix::zeros(dv, n);
        let mut d_r_gate = DMatrix::zeros(dv, m);
        let mut d_r_core = DMatrix::zeros(dv, m);
        let mut d_bias_gate = DVector::zeros(dv);
        let mut d_bias_core = DVector::zeros(dv);

        for (e, edge) in tape.graph.edges.iter().enumerate() {
            let (i, j) = (edge.source, edge.neighbor);
            let w = tape.weights[e];
            let mut dw_e = 0.0;
            for d in 0..dv {
                let lin_g = lt.p_gate[(d, i)] + lt.q_gate[(d, j)] + layer.gate.bias[d];
                let lin_c = lt.p_core[(d, i)] + lt.q_core[(d, j)] + layer.core.bias[d];
                let r_g = lt.r_gate[(d, e)];
                let r_c = lt.r_core[(d, e)];
                let t_g = lin_g * r_g;
                let t_c = lin_c * r_c;
                let gate = sigmoid(t_g);
                let ds_i = ds[(d, i)];

                if need_geometry {
                    dw_e += ds_i * gate * t_c;
                }
                let d_msg = w * ds_i;
                let d_gate = d_msg * t_c;
                let d_tc = d_msg * gate;
                let d_tg = d_gate * gate * (1.0 - gate);

                let d_lin_g = d_tg * r_g;
                let d_lin_c = d_tc * r_c;
                d_p_gate[(d, i)] += d_lin_g;
                d_q_gate[(d, j)] += d_lin_g;
                d_bias_gate[d] += d_lin_g;
                d_p_core[(d, i)] += d_lin_c;
                d_q_core[(d, j)] += d_lin_c;
                d_bias_core[d] += d_lin_c;
                d_r_gate[(d, e)] += d_tg * lin_g;
                d_r_core[(d, e)] += d_tc * lin_c;
            }
            d_weight[e] += dw_e;
        }

        if let Some(gp) = grad_params.as_mut() {
            let vt = lt.v_in.transpose();
            let et = tape.graph.features.transpose();
            gp.convs[l].gate.a.gemm(1.0, &d_p_gate, &vt, 1.0);
            gp.convs[l].gate.b.gemm(1.0, &d_q_gate, &vt, 1.0);
            gp.convs[l].gate.c.gemm(1.0, &d_r_gate, &et, 1.0);
            gp.convs[l].gate.bias += &d_bias_gate;
            gp.convs[l].core.a.gemm(1.0, &d_p_core, &vt, 1.0);
            gp.convs[l].core.b.gemm(1.0, &d_q_core, &vt, 1.0);
            gp.convs[l].core.c.gemm(1.0, &d_r_core, &et, 1.0);
            gp.convs[l].core.bias += &d_bias_core;
        }
        if let Some(df) = d_feat.as_mut() {
            df.gemm_tr(1.0, &layer.gate.c, &d_r_gate, 1.0);
            df.gemm_tr(1.0, &layer.core.c, &d_r_core, 1.0);
        }

        // Node chain: identity path through s plus the A/B maps of both
        // halves; becomes the output gradient of the previous layer.
        let mut d_v_in = ds;
        d_v_in.gemm_tr(1.0, &layer.gate.a, &d_p_gate, 1.0);
        d_v_in.gemm_tr(1.0, &layer.gate.b, &d_q_gate, 1.0);
        d_v_in.gemm_tr(1.0, &layer.core.a, &d_p_core, 1.0);
        d_v_in.gemm_tr(1.0, &layer.core.b, &d_q_core, 1.0);
        d_v = d_v_in;
    }

    if let Some(gp) = grad_params.as_mut() {
        for (i, &z) in unit.species.iter().enumerate() {
            let mut col = gp.embedding.column_mut(z as usize - 1);
            col += d_v.column(i);
        }
        if !gp.all_finite() {
            return Err(Error::NonFiniteGradient(
                "parameter gradient has a non-finite entry".into(),
            ));
        }
    }

    let mut g_coords = None;
    let mut g_lattice = None;
    if need_geometry {
        let smearing = cfg.graph.smearing()?;
        let df = d_feat.as_ref().unwrap();
        let mut coords = vec![Vector3::<f64>::zeros(); n];
        let mut lat = Matrix3::<f64>::zeros();
        let mut d_cutoff = 0.0;
        for (e, edge) in tape.graph.edges.iter().enumerate() {
            let mut dd = d_weight[e] * graph::envelope_ddist(edge.dist, tape.graph.cutoff);
            for t in 0..de {
                dd += df[(t, e)] * smearing.ddist(edge.dist, t, tape.graph.features[(t, e)]);
            }
            d_cutoff += d_weight[e] * graph::envelope_dcutoff(edge.dist, tape.graph.cutoff);

            let u = edge.delta / edge.dist;
            let step = dd * u;
            coords[edge.neighbor] += step;
            coords[edge.source] -= step;
            // delta = x_j - x_i + L k, so dH/dL gets the outer product u k^T.
            for r in 0..3 {
                for c in 0..3 {
                    lat[(r, c)] += step[r] * edge.image[c] as f64;
                }
            }
        }

        let inv_t = unit
            .lattice
            .try_inverse()
            .ok_or(Error::DegenerateLattice {
                det: unit.volume(),
                limit: crate::lattice::DET_EPS,
            })?
            .transpose();
        // Cutoff chain: D = mult (V/n)^(1/3) gives dD/dL = (D/3) L^-T.
        lat += (d_cutoff * tape.graph.cutoff / 3.0) * inv_t;
        // Penalty chain: r = ln(rho/rho_ref) has dr/dL = -L^-T.
        let r = tape.log_density_ratio;
        let df_dr = match cfg.penalty_kind {
            PenaltyKind::Squared => 2.0 * r,
            PenaltyKind::Abs => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        };
        lat -= cfg.penalty_weight * df_dr * inv_t;

        let coords_finite = coords.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !coords_finite || lat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(
                "geometry gradient has a non-finite entry".into(),
            ));
        }
        if targets.coords {
            g_coords = Some(coords);
        }
        if targets.lattice {
            g_lattice = Some(lat);
        }
    }

    Ok((
        tape.energy,
        EnergyGradients {
            coords: g_coords,
            lattice: g_lattice,
            params: grad_params,
        },
    ))
}

/// Which block of scalars `finite_diff_check` sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdTarget {
    Coords,
    Lattice,
    Params,
}

/// Central-difference slope of `f` at offset `h`; the building block of the
/// gradient verifier.
pub fn central_slope(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Checks one gradient block against central finite differences and returns
/// the worst relative error. Denominators are floored at 1e-8, raised by two
/// scale terms: the block's largest gradient entry, and the energy magnitude.
/// The energy term matters because central differences carry roundoff noise
/// of about eps * |H| / h regardless of the gradient size (~1e-12 * |H| at
/// h = 1e-4), so a fixed floor would report that noise as error on any entry
/// whose true gradient is tiny. A wrong tiny gradient still fails loudly:
/// its error grows with the gradient itself, not the noise. Blocks above
/// 10^4 scalars are subsampled deterministically.
pub fn finite_diff_check(
    target: FdTarget,
    unit: &PeriodicUnit,
    params: &ModelParams,
    cfg: &ModelConfig,
    h: f64,
) -> Result<f64> {
    const MAX_SCALARS: usize = 10_000;
    let targets = match target {
        FdTarget::Coords => GradTargets {
            coords: true,
            lattice: false,
            params: false,
        },
        FdTarget::Lattice => GradTargets {
            coords: false,
            lattice: true,
            params: false,
        },
        FdTarget::Params => GradTargets::params(),
    };
    let (energy, grads) = energy_with_grads(unit, params, cfg, targets)?;

    let analytic: Vec<f64> = match target {
        FdTarget::Coords => grads
            .coords
            .unwrap()
            .iter()
            .flat_map(|g| [g[0], g[1], g[2]])
            .collect(),
        FdTarget::Lattice => grads.lattice.unwrap().as_slice().to_vec(),
        FdTarget::Params => grads.params.unwrap().flatten(),
    };

    let count = analytic.len();
    let picked: Vec<usize> = if count > MAX_SCALARS {
        let mut rng = ChaCha12Rng::seed_from_u64(0xFD15_EED);
        let mut idx = sample_indices(&mut rng, count, MAX_SCALARS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..count).collect()
    };

    let scale = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let floor = (1e-8 * (1.0 + scale)).max(1e-6 * (1.0 + energy.abs()));
    let mut worst = 0.0f64;
    let mut probe_unit = unit.clone();
    let mut probe_params = params.clone();
    let mut flat = params.flatten();
    for &s in &picked {
        let fd = match target {
            FdTarget::Coords => {
                let (atom, axis) = (s / 3, s % 3);
                let base = unit.coords[atom][axis];
                central_slope(
                    |eps| {
                        probe_unit.coords[atom][axis] = base + eps;
                        crate::model::energy(&probe_unit, params, cfg).unwrap()
                    },
                    h,
                )
            }
            FdTarget::Lattice => {
                let (r, c) = (s % 3, s / 3);
                let base = unit.lattice[(r, c)];
                central_slope(
                    |eps| {
                        probe_unit.lattice[(r, c)] = base + eps;
                        crate::model::energy(&probe_unit, params, cfg).unwrap()
                    },
                    h,
                )
            }
            FdTarget::Params => {
                let base = flat[s];
                let fd = central_slope(
                    |eps| {
                        flat[s] = base + eps;
                        probe_params.unflatten_into(&flat).unwrap();
                        crate::model::energy(unit, &probe_params, cfg).unwrap()
                    },
                    h,
                );
                flat[s] = base;
                fd
            }
        };
        // Restore the probed scalar.
        match target {
            FdTarget::Coords => probe_unit.coords[s / 3][s % 3] = unit.coords[s / 3][s % 3],
            FdTarget::Lattice => probe_unit.lattice[(s % 3, s / 3)] = unit.lattice[(s % 3, s / 3)],
            FdTarget::Params => {}
        }
        let ad = analytic[s];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphConfig;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            node_dim: 2,
            conv_layers: 2,
            mlp_layers: 2,
            rho_ref: 0.05,
            penalty_weight: 1.0,
            penalty_kind: PenaltyKind::Squared,
            graph: GraphConfig::with_edge_dim(2),
        }
    }

    fn random_unit(rng: &mut ChaCha12Rng, n: usize) -> PeriodicUnit {
        loop {
            let lattice = Matrix3::from_fn(|_, _| rng.random::<f64>() * 8.0 - 4.0);
            if lattice.determinant().abs() < 20.0 {
                continue;
            }
            let species = (0..n).map(|_| rng.random_range(1..=20u8)).collect();
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
            let unit = PeriodicUnit::new(species, coords, lattice).unwrap();
            if unit.is_valid() {
                return unit;
            }
        }
    }

    #[test]
    fn energy_agrees_with_plain_forward_bitwise() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for seed in 0..5 {
            let params = ModelParams::init(&cfg, seed).unwrap();
            let unit = random_unit(&mut rng, 3);
            let plain = crate::model::energy(&unit, &params, &cfg).unwrap();
            let (h, _) = energy_with_grads(&unit, &params, &cfg, GradTargets::all()).unwrap();
            assert_eq!(plain.to_bits(), h.to_bits());
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let unit = random_unit(&mut rng, 3);
        let (_, a) = energy_with_grads(&unit, &params, &cfg, GradTargets::all()).unwrap();
        let (_, b) = energy_with_grads(&unit, &params, &cfg, GradTargets::all()).unwrap();
        let fa = a.params.unwrap().flatten();
        let fb = b.params.unwrap().flatten();
        assert!(fa.iter().zip(fb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        for (x, y) in a.coords.unwrap().iter().zip(b.coords.unwrap().iter()) {
            assert_eq!(x, y);
        }
        assert_eq!(a.lattice.unwrap(), b.lattice.unwrap());
    }

    #[test]
    fn coords_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        for seed in 0..5 {
            let params = ModelParams::init(&cfg, 50 + seed).unwrap();
            let unit = random_unit(&mut rng, 2 + (seed as usize) % 3);
            let worst = finite_diff_check(FdTarget::Coords, &unit, &params, &cfg, 1e-4).unwrap();
            assert!(worst <= 1e-5, "seed {seed}: worst rel error {worst:.3e}");
        }
    }

    #[test]
    fn lattice_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        for seed in 0..5 {
            let params = ModelParams::init(&cfg, 70 + seed).unwrap();
            let unit = random_unit(&mut rng, 2);
            let worst = finite_diff_check(FdTarget::Lattice, &unit, &params, &cfg, 1e-4).unwrap();
            assert!(worst <= 1e-5, "seed {seed}: worst rel error {worst:.3e}");
        }
    }

    #[test]
    fn params_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(39);
        for seed in 0..3 {
            let params = ModelParams::init(&cfg, 90 + seed).unwrap();
            let unit = random_unit(&mut rng, 2);
            let worst = finite_diff_check(FdTarget::Params, &unit, &params, &cfg, 1e-4).unwrap();
            assert!(worst <= 1e-5, "seed {seed}: worst rel error {worst:.3e}");
        }
    }

    #[test]
    fn translation_and_rotation_null_directions() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for seed in 0..5 {
            let params = ModelParams::init(&cfg, 110 + seed).unwrap();
            let unit = random_unit(&mut rng, 3);
            let (_, g) =
                energy_with_grads(&unit, &params, &cfg, GradTargets::geometry()).unwrap();
            let coords = g.coords.unwrap();
            let lat = g.lattice.unwrap();

            // Moving every atom together changes nothing, so coordinate
            // gradients sum to zero.
            let total: Vector3<f64> = coords.iter().sum();
            assert!(total.norm() <= 1e-8, "translation residual {:.3e}", total.norm());

            // Rotating atoms and lattice together changes nothing, so the
            // generator moment sum_i g_i x_i^T + gL L^T is symmetric.
            let mut moment = lat * unit.lattice.transpose();
            for (g_i, x_i) in coords.iter().zip(unit.coords.iter()) {
                moment += g_i * x_i.transpose();
            }
            let skew = moment - moment.transpose();
            assert!(skew.norm() <= 1e-8, "rotation residual {:.3e}", skew.norm());
        }
    }

    #[test]
    fn penalty_lattice_gradient_is_analytic() {
        let mut cfg = tiny_cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for seed in 0..20 {
            let params = ModelParams::init(&cfg, 130 + seed).unwrap();
            let unit = random_unit(&mut rng, 2);

            cfg.penalty_weight = 1.7;
            let (_, with) =
                energy_with_grads(&unit, &params, &cfg, GradTargets::geometry()).unwrap();
            cfg.penalty_weight = 0.0;
            let (_, without) =
                energy_with_grads(&unit, &params, &cfg, GradTargets::geometry()).unwrap();

            let got = with.lattice.unwrap() - without.lattice.unwrap();
            let r = (unit.density() / cfg.rho_ref).ln();
            let expected =
                -1.7 * 2.0 * r * unit.lattice.try_inverse().unwrap().transpose();
            let rel = (got - expected).norm() / expected.norm().max(1e-10);
            assert!(rel <= 1e-10, "seed {seed}: rel {rel:.3e}");
        }
    }

    #[test]
    fn central_slope_is_exact_on_linear_functions() {
        let f = |x: f64| 3.25 * x - 7.0;
        let slope = central_slope(|eps| f(1.0 + eps), 1e-4);
        assert!((slope - 3.25).abs() <= 1e-10);
    }

    #[test]
    fn tiny_step_sizes_lose_accuracy() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 77).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(45);
        let unit = random_unit(&mut rng, 2);
        let good = finite_diff_check(FdTarget::Coords, &unit, &params, &cfg, 1e-4).unwrap();
        let bad = finite_diff_check(FdTarget::Coords, &unit, &params, &cfg, 1e-12).unwrap();
        assert!(
            bad > 10.0 * good.max(1e-12),
            "cancellation should dominate at h = 1e-12: {bad:.3e} vs {good:.3e}"
        );
    }

    #[test]
    fn skips_unrequested_gradients() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let unit = random_unit(&mut rng, 2);
        let (_, g) = energy_with_grads(&unit, &params, &cfg, GradTargets::params()).unwrap();
        assert!(g.coords.is_none());
        assert!(g.lattice.is_none());
        assert!(g.params.is_some());
        let (_, g) =
            energy_with_grads(&unit, &params, &cfg, GradTargets::geometry()).unwrap();
        assert!(g.coords.is_some());
        assert!(g.lattice.is_some());
        assert!(g.params.is_none());
    }
}
