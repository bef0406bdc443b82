//! Rigid-body math on SE(3).
//!
//! Rotations are stored as 3×3 matrices. Two charts are provided:
//!
//! * [`exp_map`] / [`log_map`]: the SE(3) exponential and logarithm, with the
//!   translation coupled to the rotation through the left Jacobian `V`.
//! * [`Pose::retract`] / [`Pose::local`]: the chart used by the pose solver,
//!   `R ← Exp(δr)·R`, `p ← p + δp`. Rotation errors are left-multiplicative,
//!   `δr = Log(R̂·R̄ᵀ)`, and translation errors are plain differences.

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle the Rodrigues terms switch to their series.
const SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the coefficients of `V` and `V⁻¹` use their series.
const SERIES_ANGLE: f64 = 1e-3;
/// Allowed deviation from orthonormality for a valid rotation.
const ORTHO_TOL: f64 = 1e-9;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn so3_exp(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let half = 0.5 * theta;
    let b = 2.0 * (half.sin() / theta).powi(2);
    Mat3::identity() + a * k + b * k * k
}

/// Axis-angle vector of a rotation matrix, with norm in `[0, π]`.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = vee(&(r - r.transpose())) * 0.5; // axis · sin θ
    if theta < SMALL_ANGLE {
        return w;
    }
    if std::f64::consts::PI - theta > 1e-4 {
        return w * (theta / theta.sin());
    }
    // Near π the antisymmetric part vanishes; the symmetric part is
    // cos θ·I + (1 − cos θ)·a·aᵀ, so the axis is its dominant column.
    let b = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
    let col = (0..3)
        .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
        .unwrap_or(0);
    let mut axis = b.column(col).into_owned();
    axis /= axis.norm();
    let sign = if w.norm() > 1e-12 {
        axis.dot(&w).signum()
    } else {
        // Exactly π: both signs are the same rotation; make the largest
        // component positive.
        let big = axis.iamax();
        axis[big].signum()
    };
    axis * (sign * theta)
}

/// Nearest rotation in the Frobenius sense (polar factor), with det = +1.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Largest elementwise deviation of `rᵀr` from identity, combined with `|det r − 1|`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let gram = r.transpose() * r - Mat3::identity();
    gram.amax().max((r.determinant() - 1.0).abs())
}

/// A rigid transform mapping sensor-frame points into the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validated constructor; the rotation must be orthonormal with det 1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose has non-finite entries".into()));
        }
        let err = orthonormality_error(&rotation);
        if err > ORTHO_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (deviation {err:.3e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from an arbitrary 3×3 block by projecting it onto SO(3).
    pub fn from_parts_orthonormalized(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Solver update: `R ← Exp(δr)·R`, `p ← p + δp`, re-projected onto SO(3).
    pub fn retract(&self, delta: &Twist) -> Pose {
        let rotation = orthonormalize(&(so3_exp(&delta.rot) * self.rotation));
        Pose {
            rotation,
            translation: self.translation + delta.trans,
        }
    }

    /// Inverse of [`Pose::retract`]: the twist taking `self` to `other`.
    pub fn local(&self, other: &Pose) -> Twist {
        Twist {
            rot: so3_log(&(other.rotation * self.rotation.transpose())),
            trans: other.translation - self.translation,
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }
}

/// Tangent vector: axis-angle rotation part and translation part.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rot: Vec3,
    pub trans: Vec3,
}

impl Twist {
    pub fn new(rot: Vec3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Stacked as `[rot; trans]`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rot: Vec3::new(v[0], v[1], v[2]),
            trans: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rot.x,
            self.rot.y,
            self.rot.z,
            self.trans.x,
            self.trans.y,
            self.trans.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rot.iter().chain(self.trans.iter()).all(|v| v.is_finite())
    }
}

/// Coefficients `(a, b)` of `V = I + a·K + b·K²` with `K = skew(φ)`.
fn left_jacobian_coeffs(theta: f64) -> (f64, f64) {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let half = 0.5 * theta;
        let a = 2.0 * (half.sin() / theta).powi(2);
        let b = (theta - theta.sin()) / (theta * theta * theta);
        (a, b)
    }
}

/// SE(3) exponential of a twist.
pub fn exp_map(xi: &Twist) -> Pose {
    let theta = xi.rot.norm();
    let k = skew(&xi.rot);
    let (a, b) = left_jacobian_coeffs(theta);
    let v = Mat3::identity() + a * k + b * k * k;
    Pose {
        rotation: so3_exp(&xi.rot),
        translation: v * xi.trans,
    }
}

/// SE(3) logarithm; the rotation part has norm in `[0, π]`.
pub fn log_map(t: &Pose) -> Twist {
    let rot = so3_log(&t.rotation);
    let theta = rot.norm();
    let k = skew(&rot);
    let c = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    let v_inv = Mat3::identity() - 0.5 * k + c * k * k;
    Twist {
        rot,
        trans: v_inv * t.translation,
    }
}

pub fn apply(t: &Pose, p: &Vec3) -> Vec3 {
    t.apply(p)
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(t: &Pose) -> Pose {
    t.inverse()
}

/// `(x − μ)ᵀ Σ⁻¹ (x − μ)` given the inverse covariance.
pub fn mahalanobis_sq(x: &Vec3, mu: &Vec3, sigma_inv: &Mat3) -> Result<f64> {
    let finite = x
        .iter()
        .chain(mu.iter())
        .chain(sigma_inv.iter())
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::InvalidInput(
            "mahalanobis_sq received non-finite input".into(),
        ));
    }
    Ok(mahalanobis_sq_unchecked(x, mu, sigma_inv))
}

#[inline]
pub(crate) fn mahalanobis_sq_unchecked(x: &Vec3, mu: &Vec3, sigma_inv: &Mat3) -> f64 {
    let d = x - mu;
    d.dot(&(sigma_inv * d)).max(0.0)
}
