use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Rigid sensor-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(x, y, z),
        }
    }

    /// From the 12 row-major entries of `[R | t]`.
    pub fn from_row_major(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    #[rustfmt::skip]
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn position(&self) -> [f64; 3] {
        [
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    /// `R^T R = I` and `det R = 1` within `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    pub fn inverse(&self) -> Result<Pose> {
        let inv = self
            .rotation
            .try_inverse()
            .filter(|_| self.rotation.determinant().abs() > 1e-9)
            .ok_or_else(|| Error::Pose(format!("rotation not invertible: {}", self.rotation)))?;
        Ok(Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        })
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v[0], v[1], v[2]]
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}
