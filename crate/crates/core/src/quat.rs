//! Quaternion helpers. Quaternions are stored `[w, x, y, z]`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat([w, x, y, z])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    /// Unit length with `w >= 0`.
    pub fn canonical(&self) -> Result<Quat> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateRotation);
        }
        let sign = if self.0[0] < 0.0 { -1.0 } else { 1.0 };
        // already unit up to rounding: dividing again would perturb the last bits
        let n = if (n - 1.0).abs() <= 4.0 * f64::EPSILON { 1.0 } else { n };
        let mut q = self.0.map(|c| sign * c / n);
        // -0.0 would break bit-exact idempotence checks downstream
        for c in q.iter_mut() {
            if *c == 0.0 {
                *c = 0.0;
            }
        }
        Ok(Quat(q))
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let a = axis.normalize() * (0.5 * angle).sin();
        Quat([(0.5 * angle).cos(), a.x, a.y, a.z])
    }

    /// Canonical quaternion of a proper rotation matrix.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Quat {
        let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
        let c = q.coords;
        Quat([c.w, c.x, c.y, c.z]).canonical().unwrap_or(Quat::IDENTITY)
    }

    /// Rotation matrix of the normalized quaternion. Non-unit inputs are normalized first.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let n = self.norm();
        let [w, x, y, z] = self.0.map(|c| c / n);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Pulls `dL/dR` back to `dL/dq` through `to_matrix`, including the normalization.
    pub fn matrix_vjp(&self, g: &Matrix3<f64>) -> [f64; 4] {
        let n = self.norm();
        let [w, x, y, z] = self.0.map(|c| c / n);
        let dw = -2.0 * z * g[(0, 1)] + 2.0 * y * g[(0, 2)] + 2.0 * z * g[(1, 0)]
            - 2.0 * x * g[(1, 2)]
            - 2.0 * y * g[(2, 0)]
            + 2.0 * x * g[(2, 1)];
        let dx = 2.0 * y * g[(0, 1)] + 2.0 * z * g[(0, 2)] + 2.0 * y * g[(1, 0)]
            - 4.0 * x * g[(1, 1)]
            - 2.0 * w * g[(1, 2)]
            + 2.0 * z * g[(2, 0)]
            + 2.0 * w * g[(2, 1)]
            - 4.0 * x * g[(2, 2)];
        let dy = -4.0 * y * g[(0, 0)] + 2.0 * x * g[(0, 1)] + 2.0 * w * g[(0, 2)]
            + 2.0 * x * g[(1, 0)]
            + 2.0 * z * g[(1, 2)]
            - 2.0 * w * g[(2, 0)]
            + 2.0 * z * g[(2, 1)]
            - 4.0 * y * g[(2, 2)];
        let dz = -4.0 * z * g[(0, 0)] - 2.0 * w * g[(0, 1)] + 2.0 * x * g[(0, 2)]
            + 2.0 * w * g[(1, 0)]
            - 4.0 * z * g[(1, 1)]
            + 2.0 * y * g[(1, 2)]
            + 2.0 * x * g[(2, 0)]
            + 2.0 * y * g[(2, 1)];
        let gh = [dw, dx, dy, dz];
        let qh = [w, x, y, z];
        let proj: f64 = gh.iter().zip(qh.iter()).map(|(a, b)| a * b).sum();
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = (gh[i] - qh[i] * proj) / n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_flips_and_normalizes() {
        assert_eq!(Quat::new(-1.0, 0.0, 0.0, 0.0).canonical().unwrap(), Quat::IDENTITY);
        assert_eq!(Quat::new(2.0, 0.0, 0.0, 0.0).canonical().unwrap(), Quat::IDENTITY);
        assert!(matches!(
            Quat::new(0.0, 0.0, 0.0, 0.0).canonical(),
            Err(Error::DegenerateRotation)
        ));
    }

    #[test]
    fn matrix_is_orthonormal() {
        let r = Quat::new(0.3, -0.2, 0.9, 0.1).to_matrix();
        let id = r * r.transpose();
        assert!((id - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let q = Quat::new(0.7, -0.3, 0.4, 0.2);
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.7, 0.2, 0.4, -0.6);
        let f = |q: &Quat| q.to_matrix().component_mul(&g).sum();
        let analytic = q.matrix_vjp(&g);
        let h = 1e-6;
        for i in 0..4 {
            let mut p = q;
            let mut m = q;
            p.0[i] += h;
            m.0[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }
}
