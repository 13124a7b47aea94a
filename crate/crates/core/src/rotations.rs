//! Rotation representations and quaternion averaging.
//!
//! Poses are stored in the continuous 6D form (the first two columns of a
//! rotation matrix) and decoded by Gram-Schmidt. Cluster centers average
//! rotations as the dominant eigenvector of the quaternion moment matrix
//! `M = sum_i w_i q_i q_i^T`, computed here with a small Jacobi solver.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Orthonormality tolerance for matrices accepted as rotations.
pub const ORTHO_TOL: f64 = 1e-8;
/// Unit-norm tolerance for quaternions.
pub const UNIT_TOL: f64 = 1e-9;
/// Relative threshold below which a Gram-Schmidt input counts as degenerate.
const GS_EPS: f64 = 1e-12;
/// Jacobi convergence tolerance on the off-diagonal norm (relative).
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 200;
/// Relative eigenvalue gap below which the average is considered ambiguous.
const EIGEN_GAP_TOL: f64 = 1e-12;

/// Axis-angle rotation: direction is the axis, norm is the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// Continuous 6D rotation encoding: `[a1; a2]`, the first two matrix columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

/// A 3x3 proper rotation matrix (`R^T R = I`, `det R = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotMatrix(Matrix3<f64>);

impl RotMatrix {
    pub fn identity() -> Self {
        RotMatrix(Matrix3::identity())
    }

    /// Validates orthonormality and orientation within [`ORTHO_TOL`].
    pub fn try_new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("rotation matrix has non-finite entries"));
        }
        let defect = (m.transpose() * m - Matrix3::identity()).amax();
        if defect > ORTHO_TOL {
            return Err(invalid(format!(
                "matrix is not orthonormal (max |R^T R - I| = {defect:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(invalid(format!("matrix determinant {det} is not +1")));
        }
        Ok(RotMatrix(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }
}

/// Unit quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion([f64; 4]);

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion([1.0, 0.0, 0.0, 0.0]);

    /// Accepts a quaternion whose norm is within [`UNIT_TOL`] of one.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = [w, x, y, z];
        if q.iter().any(|v| !v.is_finite()) {
            return Err(invalid("quaternion has non-finite components"));
        }
        let n = norm4(&q);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(invalid(format!("quaternion norm {n} is not 1")));
        }
        Ok(UnitQuaternion(q))
    }

    /// Normalizes an arbitrary nonzero 4-vector.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = [w, x, y, z];
        let n = norm4(&q);
        if !n.is_finite() || n == 0.0 {
            return Err(invalid("cannot normalize a zero or non-finite quaternion"));
        }
        Ok(UnitQuaternion(q.map(|v| v / n)))
    }

    pub fn coords(&self) -> [f64; 4] {
        self.0
    }

    pub fn w(&self) -> f64 {
        self.0[0]
    }

    pub fn neg(&self) -> Self {
        UnitQuaternion(self.0.map(|v| -v))
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = rhs.0;
        UnitQuaternion([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    /// Sign convention: `w >= 0`; when `w` is zero the first nonzero
    /// vector component is made positive.
    pub fn canonical(&self) -> UnitQuaternion {
        for &c in &self.0 {
            if c.abs() > GS_EPS {
                return if c < 0.0 { self.neg() } else { *self };
            }
        }
        *self
    }

    /// Equality up to the double cover.
    pub fn angular_distance(&self, other: &UnitQuaternion) -> f64 {
        let d: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        2.0 * d.abs().min(1.0).acos()
    }
}

fn norm4(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula. Angles beyond `2*pi` wrap naturally.
pub fn axis_angle_to_rotmat(v: &AxisAngle) -> Result<RotMatrix> {
    if v.0.iter().any(|c| !c.is_finite()) {
        return Err(invalid("axis-angle vector has non-finite components"));
    }
    let angle = v.0.norm();
    if angle == 0.0 {
        return Ok(RotMatrix::identity());
    }
    let k = skew(&(v.0 / angle));
    let m = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
    Ok(RotMatrix(m))
}

/// Inverse of [`axis_angle_to_rotmat`] with the angle in `[0, pi]`.
pub fn rotmat_to_axis_angle(r: &RotMatrix) -> AxisAngle {
    let [w, x, y, z] = rotmat_to_quat(r).0;
    let s = (x * x + y * y + z * z).sqrt();
    if s == 0.0 {
        return AxisAngle::new(0.0, 0.0, 0.0);
    }
    let angle = 2.0 * s.atan2(w);
    AxisAngle(Vector3::new(x, y, z) * (angle / s))
}

/// Gram-Schmidt decoding of the 6D representation.
pub fn rot6d_to_rotmat(r: &Rot6D) -> Result<RotMatrix> {
    if r.0.iter().any(|c| !c.is_finite()) {
        return Err(invalid("6D rotation has non-finite components"));
    }
    let a1 = r.first();
    let a2 = r.second();
    let n1 = a1.norm();
    if !(n1 > GS_EPS) {
        return Err(Error::Degenerate("first 6D column is zero".into()));
    }
    let e1 = a1 / n1;
    let u = a2 - e1 * e1.dot(&a2);
    let nu = u.norm();
    if !(nu > GS_EPS * a2.norm()) || nu == 0.0 {
        return Err(Error::Degenerate("6D columns are parallel".into()));
    }
    let e2 = u / nu;
    let e3 = e1.cross(&e2);
    Ok(RotMatrix(Matrix3::from_columns(&[e1, e2, e3])))
}

pub fn rotmat_to_rot6d(r: &RotMatrix) -> Rot6D {
    let m = &r.0;
    Rot6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Vector-Jacobian product of [`rot6d_to_rotmat`]: maps `dL/dR` to `dL/dr`.
pub(crate) fn rot6d_backward(r: &Rot6D, grad_r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let a1 = r.first();
    let a2 = r.second();
    let n1 = a1.norm();
    let e1 = a1 / n1;
    let u = a2 - e1 * e1.dot(&a2);
    let nu = u.norm();
    if !(n1 > GS_EPS) || !(nu > GS_EPS * a2.norm()) || nu == 0.0 {
        return Err(Error::Degenerate("6D columns are parallel".into()));
    }
    let e2 = u / nu;

    let mut g_e1: Vector3<f64> = grad_r.column(0).into();
    let mut g_e2: Vector3<f64> = grad_r.column(1).into();
    let g_e3: Vector3<f64> = grad_r.column(2).into();

    // e3 = e1 x e2
    g_e1 += e2.cross(&g_e3);
    g_e2 += g_e3.cross(&e1);
    // e2 = u / |u|
    let g_u = (g_e2 - e2 * e2.dot(&g_e2)) / nu;
    // u = a2 - (e1 . a2) e1
    let e1_gu = e1.dot(&g_u);
    let g_a2 = g_u - e1 * e1_gu;
    g_e1 += -a2 * e1_gu - g_u * e1.dot(&a2);
    // e1 = a1 / |a1|
    let g_a1 = (g_e1 - e1 * e1.dot(&g_e1)) / n1;

    Ok([g_a1.x, g_a1.y, g_a1.z, g_a2.x, g_a2.y, g_a2.z])
}

/// Shepperd's method, pivoting on the largest of `w, x, y, z`.
pub fn rotmat_to_quat(r: &RotMatrix) -> UnitQuaternion {
    let m = &r.0;
    let (m00, m11, m22) = (m[(0, 0)], m[(1, 1)], m[(2, 2)]);
    let trace = m00 + m11 + m22;
    let q = if trace >= m00 && trace >= m11 && trace >= m22 {
        let s = (1.0 + trace).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m00 >= m11 && m00 >= m22 {
        let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m11 >= m22 {
        let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = norm4(&q);
    UnitQuaternion(q.map(|v| v / n)).canonical()
}

pub fn quat_to_rotmat(q: &UnitQuaternion) -> RotMatrix {
    let [w, x, y, z] = q.0;
    RotMatrix(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Eigen-decomposition of a symmetric 4x4 matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors
/// as columns.
pub fn symmetric_eigen4(m: &Matrix4<f64>) -> (Vector4<f64>, Matrix4<f64>) {
    let mut a = *m;
    let mut v = Matrix4::<f64>::identity();
    let scale = a.norm().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..4 {
            for q in (p + 1)..4 {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..4 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = Vector4::from_fn(|i, _| a[(order[i], order[i])]);
    let vectors = Matrix4::from_fn(|r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Builds the weighted moment matrix `sum_i w_i q_i q_i^T`.
pub fn quaternion_moment(qs: &[UnitQuaternion], weights: Option<&[f64]>) -> Matrix4<f64> {
    let mut m = Matrix4::<f64>::zeros();
    for (i, q) in qs.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        let v = Vector4::from(q.0);
        m += v * v.transpose() * w;
    }
    m
}

/// Rotation mean as the dominant eigenvector of the quaternion moment matrix.
///
/// The result is sign-canonicalized (see [`UnitQuaternion::canonical`]), so
/// the average does not depend on the signs of the inputs.
pub fn average_quaternions(
    qs: &[UnitQuaternion],
    weights: Option<&[f64]>,
) -> Result<UnitQuaternion> {
    if qs.is_empty() {
        return Err(invalid("cannot average an empty set of quaternions"));
    }
    if let Some(ws) = weights {
        if ws.len() != qs.len() {
            return Err(invalid(format!(
                "{} weights supplied for {} quaternions",
                ws.len(),
                qs.len()
            )));
        }
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("quaternion weights must be finite and nonnegative"));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(invalid("quaternion weights are all zero"));
        }
    }
    for q in qs {
        let n = norm4(&q.0);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(invalid(format!("quaternion norm {n} is not 1")));
        }
    }

    let m = quaternion_moment(qs, weights);
    let (values, vectors) = symmetric_eigen4(&m);
    let gap = values[0] - values[1];
    if gap <= EIGEN_GAP_TOL * m.trace() {
        return Err(Error::AmbiguousAverage { gap });
    }
    let top = vectors.column(0);
    UnitQuaternion::normalize(top[0], top[1], top[2], top[3]).map(|q| q.canonical())
}
