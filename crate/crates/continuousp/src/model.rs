//! The energy network: species embedding, envelope-gated graph convolutions,
//! mean pooling, an MLP head, and a log-density penalty. The forward pass
//! records every intermediate needed for reverse-mode differentiation, so
//! scoring and gradient evaluation share one code path and agree bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::element::MAX_Z;
use crate::error::{Error, Result};
use crate::graph::{self, CrystalGraph, GraphConfig};
use crate::unit::PeriodicUnit;

/// Functional form of the density penalty applied to r = ln(rho / rho_ref).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    /// r^2: smooth everywhere, the default.
    Squared,
    /// |r|: selectable alternative reading of the same idea.
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Node feature width d_v.
    pub node_dim: usize,
    /// Graph convolution layer count.
    pub conv_layers: usize,
    /// MLP matrix count: hidden layers at width d_v with softplus, final
    /// layer maps to a scalar.
    pub mlp_layers: usize,
    /// Reference atomic density rho_0 (A^-3).
    pub rho_ref: f64,
    pub penalty_weight: f64,
    pub penalty_kind: PenaltyKind,
    pub graph: GraphConfig,
}

impl ModelConfig {
    /// Preset sized for small cells and quick experiments.
    pub fn small() -> Self {
        Self {
            node_dim: 32,
            conv_layers: 3,
            mlp_layers: 2,
            rho_ref: 0.05,
            penalty_weight: 1.0,
            penalty_kind: PenaltyKind::Squared,
            graph: GraphConfig::with_edge_dim(32),
        }
    }

    /// Preset sized for larger datasets.
    pub fn large() -> Self {
        Self {
            node_dim: 64,
            conv_layers: 6,
            mlp_layers: 4,
            rho_ref: 0.05,
            penalty_weight: 1.0,
            penalty_kind: PenaltyKind::Squared,
            graph: GraphConfig::with_edge_dim(64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_dim < 1 {
            return Err(Error::InvalidConfig("node_dim must be >= 1".into()));
        }
        if self.conv_layers < 1 {
            return Err(Error::InvalidConfig("conv_layers must be >= 1".into()));
        }
        if self.mlp_layers < 1 {
            return Err(Error::InvalidConfig("mlp_layers must be >= 1".into()));
        }
        if !(self.rho_ref > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rho_ref must be positive, got {}",
                self.rho_ref
            )));
        }
        if !(self.penalty_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "penalty_weight must be non-negative, got {}",
                self.penalty_weight
            )));
        }
        self.graph.validate()
    }
}

/// One affine map pair of a convolution layer: y = (A v_i + B v_j + bias)
/// elementwise-multiplied with (C e). Gate and core are two such maps.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub gate: EdgeMap,
    pub core: EdgeMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// All learnable tensors. Also serves as the gradient container: shapes of a
/// gradient mirror the parameters they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Column z-1 is the initial feature of species z (d_v x 103).
    pub embedding: DMatrix<f64>,
    pub convs: Vec<ConvLayer>,
    pub mlp: Vec<MlpLayer>,
}

fn uniform(rng: &mut ChaCha12Rng, bound: f64) -> f64 {
    (2.0 * rng.random::<f64>() - 1.0) * bound
}

fn glorot(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| uniform(rng, bound))
}

impl ModelParams {
    /// Fresh parameters: weights uniform in +-sqrt(6/(fan_in+fan_out)),
    /// biases zero, embedding entries uniform in +-0.1. Deterministic in the
    /// seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dv = cfg.node_dim;
        let de = cfg.graph.edge_dim;
        let embedding =
            DMatrix::from_fn(dv, MAX_Z as usize, |_, _| uniform(&mut rng, 0.1));
        let edge_map = |rng: &mut ChaCha12Rng| EdgeMap {
            a: glorot(rng, dv, dv),
            b: glorot(rng, dv, dv),
            c: glorot(rng, dv, de),
            bias: DVector::zeros(dv),
        };
        let convs = (0..cfg.conv_layers)
            .map(|_| ConvLayer {
                gate: edge_map(&mut rng),
                core: edge_map(&mut rng),
            })
            .collect();
        let mlp = (0..cfg.mlp_layers)
            .map(|k| {
                let rows = if k + 1 == cfg.mlp_layers { 1 } else { dv };
                MlpLayer {
                    w: glorot(&mut rng, rows, dv),
                    b: DVector::zeros(rows),
                }
            })
            .collect();
        Ok(Self {
            embedding,
            convs,
            mlp,
        })
    }

    /// Zero tensors with the same shapes; the identity for gradient sums.
    pub fn zeros_like(&self) -> Self {
        let zero_map = |m: &EdgeMap| EdgeMap {
            a: DMatrix::zeros(m.a.nrows(), m.a.ncols()),
            b: DMatrix::zeros(m.b.nrows(), m.b.ncols()),
            c: DMatrix::zeros(m.c.nrows(), m.c.ncols()),
            bias: DVector::zeros(m.bias.nrows()),
        };
        Self {
            embedding: DMatrix::zeros(self.embedding.nrows(), self.embedding.ncols()),
            convs: self
                .convs
                .iter()
                .map(|l| ConvLayer {
                    gate: zero_map(&l.gate),
                    core: zero_map(&l.core),
                })
                .collect(),
            mlp: self
                .mlp
                .iter()
                .map(|l| MlpLayer {
                    w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                    b: DVector::zeros(l.b.nrows()),
                })
                .collect(),
        }
    }

    /// Named tensors in a fixed order; the flat layouts below follow it.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for i in 0..self.convs.len() {
            for half in ["gate", "core"] {
                for t in ["a", "b", "c", "bias"] {
                    names.push(format!("conv{i}.{half}.{t}"));
                }
            }
        }
        for i in 0..self.mlp.len() {
            names.push(format!("mlp{i}.w"));
            names.push(format!("mlp{i}.b"));
        }
        names
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.as_slice()];
        for l in &self.convs {
            for m in [&l.gate, &l.core] {
                out.push(m.a.as_slice());
                out.push(m.b.as_slice());
                out.push(m.c.as_slice());
                out.push(m.bias.as_slice());
            }
        }
        for l in &self.mlp {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.embedding.as_mut_slice());
        for l in &mut self.convs {
            for m in [&mut l.gate, &mut l.core] {
                out.push(m.a.as_mut_slice());
                out.push(m.b.as_mut_slice());
                out.push(m.c.as_mut_slice());
                out.push(m.bias.as_mut_slice());
            }
        }
        for l in &mut self.mlp {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Concatenation of all tensors (column-major within each) in the
    /// `tensor_names` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Inverse of `flatten` onto existing shapes.
    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch {
                name: "flattened parameters".into(),
                expected: format!("{}", self.len()),
                found: format!("{}", flat.len()),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Elementwise a += scale * b over every tensor.
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        for (m, t) in mine.iter_mut().zip(theirs.iter()) {
            for (x, y) in m.iter_mut().zip(t.iter()) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn shapes_match(&self, cfg: &ModelConfig) -> bool {
        let dv = cfg.node_dim;
        let de = cfg.graph.edge_dim;
        if self.embedding.nrows() != dv || self.embedding.ncols() != MAX_Z as usize {
            return false;
        }
        if self.convs.len() != cfg.conv_layers || self.mlp.len() != cfg.mlp_layers {
            return false;
        }
        for l in &self.convs {
            for m in [&l.gate, &l.core] {
                if m.a.shape() != (dv, dv)
                    || m.b.shape() != (dv, dv)
                    || m.c.shape() != (dv, de)
                    || m.bias.nrows() != dv
                {
                    return false;
                }
            }
        }
        for (k, l) in self.mlp.iter().enumerate() {
            let rows = if k + 1 == cfg.mlp_layers { 1 } else { dv };
            if l.w.shape() != (rows, dv) || l.b.nrows() != rows {
                return false;
            }
        }
        true
    }
}

/// Numerically stable softplus ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Everything the backward pass needs, recorded by `forward`.
pub(crate) struct LayerTape {
    /// Input node features V (d_v x n).
    pub v_in: DMatrix<f64>,
    /// A V, B V for gate and core (d_v x n).
    pub p_gate: DMatrix<f64>,
    pub q_gate: DMatrix<f64>,
    pub p_core: DMatrix<f64>,
    pub q_core: DMatrix<f64>,
    /// C E for gate and core (d_v x edges).
    pub r_gate: DMatrix<f64>,
    pub r_core: DMatrix<f64>,
    /// Pre-softplus node state s = v + sum of weighted messages (d_v x n).
    pub s_pre: DMatrix<f64>,
}

pub(crate) struct Tape {
    pub graph: CrystalGraph,
    /// Envelope weight per edge at the built cutoff.
    pub weights: Vec<f64>,
    pub layers: Vec<LayerTape>,
    /// MLP inputs per layer: z_0 is the mean-pooled node feature,
    /// z_k = softplus(pre_k) for hidden layers. pres[k] is the
    /// pre-activation of layer k.
    pub zs: Vec<DVector<f64>>,
    pub pres: Vec<DVector<f64>>,
    /// ln(rho / rho_ref) for the penalty chain.
    pub log_density_ratio: f64,
    pub energy: f64,
}

/// Runs the full forward pass and records the tape.
pub(crate) fn forward(
    unit: &PeriodicUnit,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tape> {
    cfg.validate()?;
    if !params.shapes_match(cfg) {
        return Err(Error::ShapeMismatch {
            name: "model parameters".into(),
            expected: format!(
                "d_v {} d_e {} conv {} mlp {}",
                cfg.node_dim, cfg.graph.edge_dim, cfg.conv_layers, cfg.mlp_layers
            ),
            found: "mismatched tensor shapes".into(),
        });
    }
    let g = graph::build_graph(unit, &cfg.graph)?;
    let n = g.n_atoms;
    let dv = cfg.node_dim;
    let m = g.edges.len();

    let weights: Vec<f64> = g
        .edges
        .iter()
        .map(|e| graph::envelope(e.dist, g.cutoff))
        .collect();

    let mut v = DMatrix::zeros(dv, n);
    for (i, &z) in unit.species.iter().enumerate() {
        v.column_mut(i)
            .copy_from(&params.embedding.column(z as usize - 1));
    }

    let mut layers = Vec::with_capacity(cfg.conv_layers);
    for layer in &params.convs {
        let p_gate = &layer.gate.a * &v;
        let q_gate = &layer.gate.b * &v;
        let p_core = &layer.core.a * &v;
        let q_core = &layer.core.b * &v;
        let r_gate = &layer.gate.c * &g.features;
        let r_core = &layer.core.c * &g.features;

        let mut s = v.clone();
        for (e, edge) in g.edges.iter().enumerate() {
            let (i, j) = (edge.source, edge.neighbor);
            let w = weights[e];
            let rg = r_gate.column(e);
            let rc = r_core.column(e);
            let pgi = p_gate.column(i);
            let qgj = q_gate.column(j);
            let pci = p_core.column(i);
            let qcj = q_core.column(j);
            let mut si = s.column_mut(i);
            for d in 0..dv {
                let t_gate = (pgi[d] + qgj[d] + layer.gate.bias[d]) * rg[d];
                let t_core = (pci[d] + qcj[d] + layer.core.bias[d]) * rc[d];
                si[d] += w * sigmoid(t_gate) * t_core;
            }
        }
        let v_next = s.map(softplus);
        layers.push(LayerTape {
            v_in: v,
            p_gate,
            q_gate,
            p_core,
            q_core,
            r_gate,
            r_core,
            s_pre: s,
        });
        v = v_next;
    }
    let mut pooled = DVector::zeros(dv);
    for i in 0..n {
        pooled += v.column(i);
    }
    pooled /= n as f64;

    let mut zs = vec![pooled];
    let mut pres = Vec::with_capacity(params.mlp.len());
    for (k, l) in params.mlp.iter().enumerate() {
        let pre = &l.w * zs.last().unwrap() + &l.b;
        if k + 1 < params.mlp.len() {
            zs.push(pre.map(softplus));
        }
        pres.push(pre);
    }
    let network = pres.last().unwrap()[0];

    let log_density_ratio = (unit.density() / cfg.rho_ref).ln();
    let penalty = cfg.penalty_weight
        * match cfg.penalty_kind {
            PenaltyKind::Squared => log_density_ratio * log_density_ratio,
            PenaltyKind::Abs => log_density_ratio.abs(),
        };
    let energy = network + penalty;
    if !energy.is_finite() {
        return Err(Error::NonFiniteEnergy(format!(
            "forward pass produced {energy} (network {network}, penalty {penalty})"
        )));
    }
    // The edge count `m` is implied by the tape matrices; assert the tape is
    // internally consistent in debug builds.
    debug_assert!(layers.iter().all(|l| l.r_gate.ncols() == m));
    Ok(Tape {
        graph: g,
        weights,
        layers,
        zs,
        pres,
        log_density_ratio,
        energy,
    })
}

/// Scalar energy of a unit under the given parameters.
pub fn energy(unit: &PeriodicUnit, params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    forward(unit, params, cfg).map(|t| t.energy)
}
