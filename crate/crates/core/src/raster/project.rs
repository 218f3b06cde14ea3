//! Perspective-affine (EWA) projection of 3D Gaussians and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3};

use crate::geometry::Z_NEAR;
use crate::model::{Camera, Gaussian3D, Mat3, Vec3};
use crate::sh;

/// Added to both diagonal entries of every screen-space covariance (px^2).
pub const COV2D_BLUR: f64 = 0.3;

/// `R diag(s^2) R^T`.
pub fn covariance_3d(g: &Gaussian3D) -> Mat3 {
    let m = g.rot.to_matrix() * Mat3::from_diagonal(&g.scale);
    m * m.transpose()
}

pub(crate) fn isotropic_covariance(scale: f64) -> Mat3 {
    Mat3::identity() * (scale * scale)
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    /// Index of the Gaussian within its layer.
    pub source: usize,
    pub mean: [f64; 2],
    /// Inverse 2D covariance as (xx, xy, yy).
    pub conic: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the 3-sigma ellipse.
    pub bbox: [usize; 4],
    pub color: [f64; 3],
}

/// Intermediates kept for the adjoint.
#[derive(Clone, Debug)]
pub(crate) struct Projected {
    pub t: Vec3,
    pub tmat: Matrix2x3<f64>,
    pub cov3: Mat3,
    pub conic: Matrix2<f64>,
    pub mean: [f64; 2],
    pub bbox: [usize; 4],
}

pub(crate) fn project(mu: &Vec3, cov3: Mat3, cam: &Camera) -> Option<Projected> {
    let t = cam.to_camera(mu);
    if t.z <= Z_NEAR {
        return None;
    }
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let jac = Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    );
    let tmat = jac * cam.rotation;
    let cov2 = tmat * cov3 * tmat.transpose() + Matrix2::identity() * COV2D_BLUR;
    let conic = cov2.try_inverse()?;
    let mean = [fx * t.x * iz + cam.cx, fy * t.y * iz + cam.cy];
    // The q <= 9 ellipse is bounded by 3*sqrt of the marginal variances.
    let ex = 3.0 * cov2[(0, 0)].sqrt();
    let ey = 3.0 * cov2[(1, 1)].sqrt();
    let x0 = (mean[0] - ex).ceil().max(0.0);
    let x1 = (mean[0] + ex).floor().min(cam.width as f64 - 1.0);
    let y0 = (mean[1] - ey).ceil().max(0.0);
    let y1 = (mean[1] + ey).floor().min(cam.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(Projected {
        t,
        tmat,
        cov3,
        conic,
        mean,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

/// Pulls screen-space gradients back to the mean and 3D covariance.
///
/// `d_conic` is the matrix gradient `[[a, b], [b, c]]` of the symmetric conic.
pub(crate) fn project_vjp(
    p: &Projected,
    cam: &Camera,
    d_mean: [f64; 2],
    d_conic: [f64; 3],
    d_depth: f64,
) -> (Vec3, Mat3) {
    let gc = Matrix2::new(d_conic[0], d_conic[1], d_conic[1], d_conic[2]);
    let g_cov2 = -(p.conic * gc * p.conic);
    let g_cov3 = p.tmat.transpose() * g_cov2 * p.tmat;
    let g_tmat = 2.0 * g_cov2 * p.tmat * p.cov3;
    let g_jac = g_tmat * cam.rotation.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let (x, y, z) = (p.t.x, p.t.y, p.t.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut dt = Vec3::zeros();
    dt.x += g_jac[(0, 2)] * (-fx * iz2);
    dt.y += g_jac[(1, 2)] * (-fy * iz2);
    dt.z += g_jac[(0, 0)] * (-fx * iz2)
        + g_jac[(0, 2)] * (2.0 * fx * x * iz3)
        + g_jac[(1, 1)] * (-fy * iz2)
        + g_jac[(1, 2)] * (2.0 * fy * y * iz3);
    dt.x += d_mean[0] * fx * iz;
    dt.z += d_mean[0] * (-fx * x * iz2);
    dt.y += d_mean[1] * fy * iz;
    dt.z += d_mean[1] * (-fy * y * iz2);
    dt.z += d_depth;

    (cam.rotation.transpose() * dt, g_cov3)
}

/// View direction used for SH evaluation, with the norm of the unnormalized vector.
fn view_dir(mu: &Vec3, cam: &Camera) -> (Vec3, f64) {
    let v = mu - cam.center();
    let n = v.norm();
    if n > 0.0 {
        (v / n, n)
    } else {
        (Vec3::new(0.0, 0.0, 1.0), 0.0)
    }
}

/// Clamped RGB and per-channel flags telling whether the clamp was inactive.
pub(crate) fn eval_color(g: &Gaussian3D, degree: usize, cam: &Camera) -> ([f64; 3], [bool; 3]) {
    let (dir, _) = view_dir(&g.mu, cam);
    let basis = sh::basis(&dir, degree);
    let mut raw = [0.5; 3];
    for (l, coeff) in g.sh.iter().enumerate().take(sh::coeff_count(degree)) {
        for ch in 0..3 {
            raw[ch] += coeff[ch] * basis[l];
        }
    }
    let mut active = [true; 3];
    let mut out = [0.0; 3];
    for ch in 0..3 {
        out[ch] = raw[ch].clamp(0.0, 1.0);
        active[ch] = (0.0..=1.0).contains(&raw[ch]);
    }
    (out, active)
}

/// Adjoint of `eval_color`: accumulates into `d_sh` and returns the mean gradient.
pub(crate) fn color_vjp(
    g: &Gaussian3D,
    degree: usize,
    cam: &Camera,
    d_color: [f64; 3],
    d_sh: &mut [[f64; 3]],
) -> Vec3 {
    let (_, active) = eval_color(g, degree, cam);
    let (dir, vnorm) = view_dir(&g.mu, cam);
    let basis = sh::basis(&dir, degree);
    let dc: [f64; 3] = std::array::from_fn(|ch| if active[ch] { d_color[ch] } else { 0.0 });
    let n = sh::coeff_count(degree);
    for l in 0..n {
        for ch in 0..3 {
            d_sh[l][ch] += dc[ch] * basis[l];
        }
    }
    if degree == 0 || vnorm == 0.0 {
        return Vec3::zeros();
    }
    let bg = sh::basis_grad(&dir, degree);
    let mut d_dir = Vec3::zeros();
    for l in 1..n {
        let w: f64 = (0..3).map(|ch| dc[ch] * g.sh[l][ch]).sum();
        d_dir += Vec3::new(bg[l][0], bg[l][1], bg[l][2]) * w;
    }
    (d_dir - dir * dir.dot(&d_dir)) / vnorm
}

/// Adjoint of `covariance_3d` for an anisotropic Gaussian: returns (d_scale, d_rot).
pub(crate) fn covariance_vjp(g: &Gaussian3D, g_cov3: &Mat3) -> (Vec3, [f64; 4]) {
    let r = g.rot.to_matrix();
    let m = r * Mat3::from_diagonal(&g.scale);
    let sym = 0.5 * (g_cov3 + g_cov3.transpose());
    let g_m = 2.0 * sym * m;
    let mut g_r = Matrix3::zeros();
    let mut d_scale = Vec3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            g_r[(i, j)] = g_m[(i, j)] * g.scale[j];
            d_scale[j] += g_m[(i, j)] * r[(i, j)];
        }
    }
    (d_scale, g.rot.matrix_vjp(&g_r))
}
