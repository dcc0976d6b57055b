//! Rigid-body pose algebra: axis-angle ↔ rotation matrix, SVD projection of
//! unconstrained 3×3 outputs onto SO(3), and SE(3) composition.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Angles below this use the Taylor expansion of the Rodrigues coefficients.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Fixed gain applied to the raw axis-angle and translation head outputs.
pub const HEAD_OUTPUT_SCALE: f64 = 0.001;

/// Orthonormality tolerance accepted by [`RotationMatrix::new`] and
/// [`log_rotation`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Rotation vector: unit axis times angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Checks `RᵀR = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        check_rotation(&m)?;
        Ok(Self(m))
    }

    /// Wraps a matrix the caller already knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Largest deviation of `RᵀR` from identity, and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let e = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        (e, (self.0.determinant() - 1.0).abs())
    }
}

fn check_rotation(m: &Matrix3<f64>) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entries".into()));
    }
    let (orth, det) = RotationMatrix(*m).orthonormality_error();
    if orth > ROTATION_TOLERANCE || det > ROTATION_TOLERANCE {
        return Err(Error::InvalidRotation(format!(
            "|RᵀR − I| = {orth:e}, |det − 1| = {det:e}"
        )));
    }
    Ok(())
}

/// Unconstrained nine-value rotation regression output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Raw9D(pub Matrix3<f64>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: RotationMatrix::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: RotationMatrix, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_axis_angle(phi: AxisAngle, translation: Vector3<f64>) -> Self {
        Self::new(rodrigues(&phi), translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * p + self.translation
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        compose(self, other)
    }

    pub fn inverse(&self) -> PoseSE3 {
        invert(self)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }
}

/// `(R1R2, R1·t2 + t1)`.
pub fn compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    PoseSE3 {
        rotation: RotationMatrix(a.rotation.0 * b.rotation.0),
        translation: a.rotation.0 * b.translation + a.translation,
    }
}

/// `(Rᵀ, −Rᵀt)`.
pub fn invert(t: &PoseSE3) -> PoseSE3 {
    let rt = t.rotation.0.transpose();
    PoseSE3 {
        rotation: RotationMatrix(rt),
        translation: -(rt * t.translation),
    }
}

/// Cross-product matrix `[v]×`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `sinθ/θ` and `(1 − cosθ)/θ²`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / (theta * theta))
    }
}

/// `R = I + sinθ·K + (1 − cosθ)·K²`, written in terms of the unnormalised
/// cross-product matrix so that θ → 0 needs no special axis.
pub fn rodrigues(phi: &AxisAngle) -> RotationMatrix {
    let theta = phi.0.norm();
    let k = hat(&phi.0);
    if theta < SMALL_ANGLE {
        return RotationMatrix(Matrix3::identity() + k + 0.5 * k * k);
    }
    let (a, b) = rodrigues_coefficients(theta);
    RotationMatrix(Matrix3::identity() + a * k + b * k * k)
}

/// Partial derivatives `∂R/∂φ_i` of [`rodrigues`], i = 0..3.
pub fn rodrigues_jacobian(phi: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = phi.norm();
    let t2 = theta * theta;
    // a = sinθ/θ, b = (1−cosθ)/θ², da = a'(θ)/θ, db = b'(θ)/θ
    let (a, b, da, db) = if theta < 1e-2 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let (a, b) = rodrigues_coefficients(theta);
        (
            a,
            b,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    };
    let k = hat(phi);
    let k2 = k * k;
    let mut out = [Matrix3::zeros(); 3];
    for (i, o) in out.iter_mut().enumerate() {
        let e = hat(&Vector3::ith(i, 1.0));
        *o = da * phi[i] * k + a * e + db * phi[i] * k2 + b * (e * k + k * e);
    }
    out
}

/// Inverse of [`rodrigues`], returning the canonical vector with angle in
/// `[0, π]`.
pub fn log_rotation(r: &RotationMatrix) -> Result<AxisAngle> {
    check_rotation(&r.0)?;
    let m = &r.0;
    let w = vee(&(m - m.transpose())); // 2·sinθ·axis
    let sin = 0.5 * w.norm();
    let cos = 0.5 * (m.trace() - 1.0);
    let theta = sin.atan2(cos);

    if theta < 1e-5 {
        // θ/sinθ ≈ 1 + θ²/6
        return Ok(AxisAngle(0.5 * w * (1.0 + theta * theta / 6.0)));
    }
    if std::f64::consts::PI - theta > 1e-3 {
        return Ok(AxisAngle(w * (theta / (2.0 * sin))));
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // dominant diagonal of the symmetric part (R + Rᵀ)/2 = cosθ·I + (1 − cosθ)aaᵀ.
    let sym = 0.5 * (m + m.transpose());
    let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
    let k = (0..3)
        .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = outer.column(k).into_owned() / outer[(k, k)].max(0.0).sqrt();
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    Ok(AxisAngle(axis * theta))
}

/// Frobenius-nearest rotation to a raw 3×3 output:
/// `U·diag(1, 1, det(UVᵀ))·Vᵀ`, with the sign correction on the smallest
/// singular direction.
pub fn svd_orthogonalize(raw: &Raw9D) -> Result<RotationMatrix> {
    if !raw.0.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite 9D rotation output"));
    }
    let svd = raw.0.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateOrthogonalization(0.0)),
    };
    let sv = svd.singular_values;
    let smax = sv.max();
    let (imin, smin) = sv.argmin();
    if smax <= 0.0 || smin <= 1e-12 * smax {
        return Err(Error::DegenerateOrthogonalization(smin));
    }
    let d = (u * vt).determinant().signum();
    let mut diag = Matrix3::identity();
    diag[(imin, imin)] = d;
    Ok(RotationMatrix(u * diag * vt))
}

/// Applies [`HEAD_OUTPUT_SCALE`] to both raw head outputs.
pub fn scale_head_outputs(phi_raw: &Vector3<f64>, t_raw: &Vector3<f64>) -> (AxisAngle, Vector3<f64>) {
    scale_head_outputs_by(phi_raw, t_raw, HEAD_OUTPUT_SCALE)
}

pub fn scale_head_outputs_by(
    phi_raw: &Vector3<f64>,
    t_raw: &Vector3<f64>,
    factor: f64,
) -> (AxisAngle, Vector3<f64>) {
    (AxisAngle(phi_raw * factor), t_raw * factor)
}
