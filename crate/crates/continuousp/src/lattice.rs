//! Lattice-level geometry: volumes, face spacings, periodic image enumeration,
//! and Niggli cell reduction.
//!
//! A lattice is a 3x3 matrix whose *columns* are the basis vectors, in Angstrom.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Determinant magnitude below which a lattice is considered degenerate (A^3).
pub const DET_EPS: f64 = 1e-8;

/// Relative tolerance used by default for Niggli reduction comparisons.
pub const NIGGLI_REL_TOL: f64 = 1e-5;

/// Iteration cap for the reduction loop.
pub const NIGGLI_MAX_ITER: usize = 100;

/// Cap on the number of candidate images a single enumeration may scan.
/// Exceeding it means the cell is so skewed or flat that the caller should
/// treat it as degenerate rather than grind through millions of candidates.
const MAX_IMAGE_CANDIDATES: u64 = 4_000_000;

/// Cell volume |det L| in A^3.
pub fn volume(l: &Matrix3<f64>) -> f64 {
    l.determinant().abs()
}

/// Errors out when |det L| <= DET_EPS.
pub fn check_not_degenerate(l: &Matrix3<f64>) -> Result<()> {
    let det = l.determinant().abs();
    if det <= DET_EPS {
        Err(Error::DegenerateLattice {
            det,
            limit: DET_EPS,
        })
    } else {
        Ok(())
    }
}

/// Distance between opposite faces of the cell along each axis: h_a is the
/// spacing of the lattice planes spanned by the other two basis vectors,
/// h_a = V / |l_b x l_c|. These bound how far one unit step of k_a moves a
/// point, which makes image enumeration ranges exact.
pub fn face_spacings(l: &Matrix3<f64>) -> Result<Vector3<f64>> {
    check_not_degenerate(l)?;
    let v = volume(l);
    let a = l.column(0);
    let b = l.column(1);
    let c = l.column(2);
    let bc = Vector3::from(b).cross(&Vector3::from(c)).norm();
    let ca = Vector3::from(c).cross(&Vector3::from(a)).norm();
    let ab = Vector3::from(a).cross(&Vector3::from(b)).norm();
    Ok(Vector3::new(v / bc, v / ca, v / ab))
}

/// All integer images k with ||delta + L k|| < radius (or <= radius when
/// `include_boundary`), returned with their distances in ascending
/// lexicographic k order.
///
/// The scan box is exact: any admissible k satisfies
/// |k_a + f_a| <= radius / h_a where f = L^-1 delta, so one integer of margin
/// per axis covers rounding.
pub fn images_within(
    l: &Matrix3<f64>,
    delta: &Vector3<f64>,
    radius: f64,
    include_boundary: bool,
) -> Result<Vec<([i64; 3], f64)>> {
    let spacings = face_spacings(l)?;
    let inv = l
        .try_inverse()
        .ok_or(Error::DegenerateLattice {
            det: volume(l),
            limit: DET_EPS,
        })?;
    let f = inv * delta;

    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    let mut count: u64 = 1;
    for axis in 0..3 {
        let reach = radius / spacings[axis];
        lo[axis] = (-f[axis] - reach).floor() as i64 - 1;
        hi[axis] = (-f[axis] + reach).ceil() as i64 + 1;
        count = count.saturating_mul((hi[axis] - lo[axis] + 1).max(0) as u64);
    }
    if count > MAX_IMAGE_CANDIDATES {
        return Err(Error::ImageBoxOverflow { candidates: count });
    }

    let (c0, c1, c2) = (l.column(0), l.column(1), l.column(2));
    let r2 = radius * radius;
    let mut out = Vec::new();
    for k0 in lo[0]..=hi[0] {
        let p0 = delta + Vector3::from(c0) * k0 as f64;
        for k1 in lo[1]..=hi[1] {
            let p01 = p0 + Vector3::from(c1) * k1 as f64;
            for k2 in lo[2]..=hi[2] {
                let p = p01 + Vector3::from(c2) * k2 as f64;
                let d2 = p.norm_squared();
                let keep = if include_boundary { d2 <= r2 } else { d2 < r2 };
                if keep {
                    out.push(([k0, k1, k2], d2.sqrt()));
                }
            }
        }
    }
    Ok(out)
}

fn metric(l: &Matrix3<f64>) -> (f64, f64, f64, f64, f64, f64) {
    let a = Vector3::from(l.column(0));
    let b = Vector3::from(l.column(1));
    let c = Vector3::from(l.column(2));
    (
        a.dot(&a),
        b.dot(&b),
        c.dot(&c),
        2.0 * b.dot(&c),
        2.0 * a.dot(&c),
        2.0 * a.dot(&b),
    )
}

fn eps_sign(x: f64, eps: f64) -> i64 {
    if x > eps {
        1
    } else if x < -eps {
        -1
    } else {
        0
    }
}

fn approx_eq(x: f64, y: f64, eps: f64) -> bool {
    (x - y).abs() <= eps
}

fn i64_to_f64(m: &Matrix3<i64>) -> Matrix3<f64> {
    m.map(|v| v as f64)
}

pub(crate) fn determinant_i64(m: &Matrix3<i64>) -> i64 {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

/// Integer adjugate; satisfies m * adjugate(m) = det(m) * I exactly.
pub(crate) fn adjugate_i64(m: &Matrix3<i64>) -> Matrix3<i64> {
    let g = |r: usize, c: usize| m[(r, c)];
    Matrix3::new(
        g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1),
        g(0, 2) * g(2, 1) - g(0, 1) * g(2, 2),
        g(0, 1) * g(1, 2) - g(0, 2) * g(1, 1),
        g(1, 2) * g(2, 0) - g(1, 0) * g(2, 2),
        g(0, 0) * g(2, 2) - g(0, 2) * g(2, 0),
        g(0, 2) * g(1, 0) - g(0, 0) * g(1, 2),
        g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0),
        g(0, 1) * g(2, 0) - g(0, 0) * g(2, 1),
        g(0, 0) * g(1, 1) - g(0, 1) * g(1, 0),
    )
}


/// Krivy-Gruber Niggli reduction. Returns the reduced lattice and the integer
/// transform M with |det M| = 1 such that reduced = L * M.
///
/// Comparisons use eps = rel_tol * V^(2/3), the scale of squared lengths. One
/// transformation is applied per pass and the pass restarts from the first
/// rule; the rule sequence matches the published algorithm and the iteration
/// cap turns the (tolerance-induced) non-termination risk into an error.
pub fn niggli_reduce(l: &Matrix3<f64>, rel_tol: f64) -> Result<(Matrix3<f64>, Matrix3<i64>)> {
    check_not_degenerate(l)?;
    let eps = rel_tol * volume(l).powf(2.0 / 3.0);
    let mut m = Matrix3::<i64>::identity();

    for _ in 0..NIGGLI_MAX_ITER {
        let cur = l * i64_to_f64(&m);
        let (a, b, c, xi, eta, zeta) = metric(&cur);

        // Swap a,b when A > B (ties broken on |xi| vs |eta|).
        if a > b + eps || (approx_eq(a, b, eps) && xi.abs() > eta.abs() + eps) {
            m *= Matrix3::new(0, -1, 0, -1, 0, 0, 0, 0, -1);
            continue;
        }
        // Swap b,c when B > C (ties broken on |eta| vs |zeta|).
        if b > c + eps || (approx_eq(b, c, eps) && eta.abs() > zeta.abs() + eps) {
            m *= Matrix3::new(-1, 0, 0, 0, 0, -1, 0, -1, 0);
            continue;
        }

        // Sign normalization: make (xi, eta, zeta) all positive when their
        // eps-sign product is positive, all non-positive otherwise. Only the
        // pair products of the diagonal matter, so the reachable patterns
        // flip exactly two of the three quantities (or none).
        let (sx, sy, sz) = (eps_sign(xi, eps), eps_sign(eta, eps), eps_sign(zeta, eps));
        let pattern: Option<[i64; 3]> = if sx * sy * sz == 1 {
            // Flip the (zero or two) negatives to reach (+,+,+).
            let flips = [sx < 0, sy < 0, sz < 0];
            if flips.iter().any(|&f| f) {
                Some([
                    if flips[0] { -1 } else { 1 },
                    if flips[1] { -1 } else { 1 },
                    if flips[2] { -1 } else { 1 },
                ])
            } else {
                None
            }
        } else {
            // Make all non-positive: flip every strict positive, padding with
            // a zero entry when exactly one is positive.
            let signs = [sx, sy, sz];
            let positives = signs.iter().filter(|&&s| s > 0).count();
            match positives {
                0 => None,
                2 => Some([
                    if sx > 0 { -1 } else { 1 },
                    if sy > 0 { -1 } else { 1 },
                    if sz > 0 { -1 } else { 1 },
                ]),
                1 => {
                    let mut p = [1i64; 3];
                    for i in 0..3 {
                        if signs[i] > 0 {
                            p[i] = -1;
                        }
                    }
                    // Pad with the first zero so an even number flips.
                    let zero = signs.iter().position(|&s| s == 0).expect(
                        "one positive with non-positive sign product implies a zero entry",
                    );
                    p[zero] = -1;
                    Some(p)
                }
                _ => unreachable!("three positives have positive sign product"),
            }
        };
        if let Some([_, q, r]) = pattern {
            // diag(i,j,k) scales (xi,eta,zeta) by (jk,ik,ij); with i = 1 the
            // requested flips (p,q,r), p = q*r, are realized by diag(1,r,q).
            m *= Matrix3::new(1, 0, 0, 0, r, 0, 0, 0, q);
            continue;
        }

        // Shear c by b when |xi| exceeds B.
        if xi.abs() > b + eps
            || (approx_eq(xi, b, eps) && 2.0 * eta < zeta - eps)
            || (approx_eq(xi, -b, eps) && zeta < -eps)
        {
            let s = eps_sign(xi, eps);
            m *= Matrix3::new(1, 0, 0, 0, 1, -s, 0, 0, 1);
            continue;
        }
        // Shear c by a when |eta| exceeds A.
        if eta.abs() > a + eps
            || (approx_eq(eta, a, eps) && 2.0 * xi < zeta - eps)
            || (approx_eq(eta, -a, eps) && zeta < -eps)
        {
            let s = eps_sign(eta, eps);
            m *= Matrix3::new(1, 0, -s, 0, 1, 0, 0, 0, 1);
            continue;
        }
        // Shear b by a when |zeta| exceeds A.
        if zeta.abs() > a + eps
            || (approx_eq(zeta, a, eps) && 2.0 * xi < eta - eps)
            || (approx_eq(zeta, -a, eps) && eta < -eps)
        {
            let s = eps_sign(zeta, eps);
            m *= Matrix3::new(1, -s, 0, 0, 1, 0, 0, 0, 1);
            continue;
        }
        // Final body-diagonal step.
        let t = xi + eta + zeta + a + b;
        if t < -eps || (approx_eq(t, 0.0, eps) && 2.0 * (a + eta) + zeta > eps) {
            m *= Matrix3::new(1, 0, 1, 0, 1, 1, 0, 0, 1);
            continue;
        }

        debug_assert_eq!(determinant_i64(&m).abs(), 1);
        return Ok((l * i64_to_f64(&m), m));
    }
    Err(Error::ReductionFailed(NIGGLI_MAX_ITER))
}

/// Checks the main Niggli conditions (sorted lengths, bounded scalar
/// products, uniform sign type) within eps = rel_tol * V^(2/3).
pub fn is_niggli_reduced(l: &Matrix3<f64>, rel_tol: f64) -> bool {
    if l.determinant().abs() <= DET_EPS {
        return false;
    }
    let eps = rel_tol * volume(l).powf(2.0 / 3.0);
    let (a, b, c, xi, eta, zeta) = metric(l);
    let sorted = a <= b + eps && b <= c + eps;
    let bounded = xi.abs() <= b + eps && eta.abs() <= a + eps && zeta.abs() <= a + eps;
    let uniform = (xi >= -eps && eta >= -eps && zeta >= -eps)
        || (xi <= eps && eta <= eps && zeta <= eps);
    let diag = xi + eta + zeta + a + b >= -eps;
    sorted && bounded && uniform && diag
}
