//! Continuous 6D rotation parameterization.
//!
//! A rotation is stored as its first two matrix columns. Recovering the full
//! matrix runs Gram–Schmidt on the two 3-vectors and completes the frame with
//! a cross product, so any non-degenerate 6-vector maps to a proper rotation.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Smallest norm accepted when normalizing either column.
pub const DEGENERACY_EPS: f64 = 1e-8;

/// Tolerance used by [`matrix_to_rot6d`] when checking orthonormality.
pub const ORTHONORMAL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rot6d(pub [f64; 6]);

impl Rot6d {
    pub const IDENTITY: Rot6d = Rot6d([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        rot6d_to_matrix(self)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        matrix_to_rot6d(m)
    }

    /// Same rotation, re-encoded from its orthonormalized matrix.
    pub fn normalized(&self) -> Result<Self> {
        Ok(columns_of(&rot6d_to_matrix(self)?))
    }
}

impl Default for Rot6d {
    fn default() -> Self {
        Rot6d::IDENTITY
    }
}

pub fn rot6d_to_matrix(r: &Rot6d) -> Result<Matrix3<f64>> {
    let a1 = r.first();
    let a2 = r.second();
    let n1 = a1.norm();
    if !(n1 >= DEGENERACY_EPS) {
        return Err(Error::DegenerateRotation(n1));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let n2 = u.norm();
    if !(n2 >= DEGENERACY_EPS) {
        return Err(Error::DegenerateRotation(n2));
    }
    let b2 = u / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rot6d> {
    let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !(residual <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
        return Err(Error::NotARotation(residual.max((det - 1.0).abs())));
    }
    Ok(columns_of(m))
}

fn columns_of(m: &Matrix3<f64>) -> Rot6d {
    Rot6d([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Pulls a gradient with respect to the rotation matrix back onto the 6D
/// coordinates that produced it (reverse-mode through Gram–Schmidt).
pub fn rot6d_matrix_vjp(r: &Rot6d, grad: &Matrix3<f64>) -> Result<[f64; 6]> {
    let a1 = r.first();
    let a2 = r.second();
    let n1 = a1.norm();
    if !(n1 >= DEGENERACY_EPS) {
        return Err(Error::DegenerateRotation(n1));
    }
    let b1 = a1 / n1;
    let c = b1.dot(&a2);
    let u = a2 - b1 * c;
    let n2 = u.norm();
    if !(n2 >= DEGENERACY_EPS) {
        return Err(Error::DegenerateRotation(n2));
    }
    let b2 = u / n2;

    let g1: Vector3<f64> = grad.column(0).into();
    let g2: Vector3<f64> = grad.column(1).into();
    let g3: Vector3<f64> = grad.column(2).into();

    // b3 = b1 x b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);

    // b2 = u / |u|
    let gu = (gb2 - b2 * b2.dot(&gb2)) / n2;

    // u = a2 - (b1.a2) b1
    let gu_b1 = gu.dot(&b1);
    let ga2 = gu - b1 * gu_b1;
    gb1 += -a2 * gu_b1 - gu * c;

    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;

    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// Rotation of `angle` radians about a unit `axis`.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}
