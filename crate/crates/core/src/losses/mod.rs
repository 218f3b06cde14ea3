//! Training objectives and their gradients with respect to rendered quantities.

mod contrastive;
pub mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, DepthMap, FeatureMap, Image};
use crate::model::LossConfig;
use crate::quat::Quat;

pub use contrastive::{
    instance_contrastive_loss, instance_contrastive_loss_with_grad, Sampling, DEFAULT_SAMPLE_BUDGET,
};
pub use ssim::{ssim, ssim_with_grad};

/// Default Huber transition point for pose distillation.
pub const HUBER_DELTA: f64 = 0.1;

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0,1]")));
    }
    Ok(())
}

/// `eta * (1 - SSIM) / 2 + (1 - eta) * mean |rendered - target|`.
pub fn photometric_loss(rendered: &Image, target: &Image, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    rendered.same_shape(target)?;
    let l1 = mean_abs(&rendered.data, &target.data);
    let s = if eta > 0.0 { ssim(rendered, target)? } else { 1.0 };
    Ok(eta * (1.0 - s) / 2.0 + (1.0 - eta) * l1)
}

/// Photometric loss and its gradient with respect to `rendered`.
pub fn photometric_loss_with_grad(rendered: &Image, target: &Image, eta: f64) -> Result<(f64, Vec<f64>)> {
    check_eta(eta)?;
    rendered.same_shape(target)?;
    let n = rendered.data.len() as f64;
    let l1 = mean_abs(&rendered.data, &target.data);
    let w1 = (1.0 - eta) / n;
    let mut grad: Vec<f64> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| w1 * l1_sign(r - t))
        .collect();
    let mut s = 1.0;
    if eta > 0.0 {
        let (v, gs) = ssim_with_grad(rendered, target)?;
        s = v;
        for (g, d) in grad.iter_mut().zip(gs) {
            *g -= 0.5 * eta * d;
        }
    }
    Ok((eta * (1.0 - s) / 2.0 + (1.0 - eta) * l1, grad))
}

/// Residuals this close to zero take the zero subgradient.
pub const L1_DEAD_ZONE: f64 = 1e-9;

fn l1_sign(v: f64) -> f64 {
    if v > L1_DEAD_ZONE {
        1.0
    } else if v < -L1_DEAD_ZONE {
        -1.0
    } else {
        0.0
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn check_mask(valid: Option<&BinaryMask>, width: usize, height: usize) -> Result<()> {
    if let Some(m) = valid {
        if m.width != width || m.height != height {
            return Err(Error::dims(format!(
                "mask {}x{} vs map {width}x{height}",
                m.width, m.height
            )));
        }
    }
    Ok(())
}

/// Cosine loss details: value, gradient w.r.t. `pred`, pixels used and skipped.
#[derive(Clone, Debug)]
pub struct CosineLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub used: usize,
    /// Valid pixels skipped because either feature had zero norm.
    pub skipped: usize,
}

/// Mean over valid pixels of `1 - cos(pred, target)`.
pub fn feature_cosine_loss(pred: &FeatureMap, target: &FeatureMap, valid: Option<&BinaryMask>) -> Result<f64> {
    feature_cosine_loss_with_grad(pred, target, valid).map(|r| r.value)
}

pub fn feature_cosine_loss_with_grad(
    pred: &FeatureMap,
    target: &FeatureMap,
    valid: Option<&BinaryMask>,
) -> Result<CosineLoss> {
    pred.same_shape(target)?;
    check_mask(valid, pred.width, pred.height)?;
    let d = pred.dim;
    let mut grad = vec![0.0; pred.data.len()];
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut terms = Vec::new();
    for i in 0..pred.pixel_count() {
        if valid.is_some_and(|m| !m.data[i]) {
            continue;
        }
        let p = pred.at(i);
        let t = target.at(i);
        let np = norm(p);
        let nt = norm(t);
        if np == 0.0 || nt == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        sum += 1.0 - dot / (np * nt);
        used += 1;
        terms.push((i, np, nt, dot));
    }
    if used == 0 {
        return Err(Error::NoValidFeatures);
    }
    if skipped > 0 {
        log::debug!("feature cosine loss skipped {skipped} zero-norm pixels");
    }
    let inv = 1.0 / used as f64;
    for (i, np, nt, dot) in terms {
        let p = pred.at(i);
        let t = target.at(i);
        let g = &mut grad[i * d..(i + 1) * d];
        for k in 0..d {
            g[k] = -inv * (t[k] / (np * nt) - dot * p[k] / (np * np * np * nt));
        }
    }
    Ok(CosineLoss {
        value: sum * inv,
        grad,
        used,
        skipped,
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean squared depth error over valid pixels (all pixels when `valid` is `None`).
pub fn depth_distill_loss(rendered: &DepthMap, pseudo: &DepthMap, valid: Option<&BinaryMask>) -> Result<f64> {
    depth_distill_loss_with_grad(rendered, pseudo, valid).map(|r| r.0)
}

pub fn depth_distill_loss_with_grad(
    rendered: &DepthMap,
    pseudo: &DepthMap,
    valid: Option<&BinaryMask>,
) -> Result<(f64, Vec<f64>)> {
    rendered.same_shape(pseudo)?;
    check_mask(valid, rendered.width, rendered.height)?;
    let use_px = |i: usize| valid.is_none_or(|m| m.data[i]);
    let n = (0..rendered.data.len()).filter(|&i| use_px(i)).count();
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv = 1.0 / n as f64;
    let mut grad = vec![0.0; rendered.data.len()];
    let mut sum = 0.0;
    for i in 0..rendered.data.len() {
        if use_px(i) {
            let e = rendered.data[i] - pseudo.data[i];
            sum += e * e;
            grad[i] = 2.0 * e * inv;
        }
    }
    Ok((sum * inv, grad))
}

/// Camera pose encoding: translation, unit rotation quaternion, field of view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEncoding {
    pub translation: [f64; 3],
    pub rotation: Quat,
    /// Horizontal and vertical field of view in radians.
    pub fov: [f64; 2],
}

impl PoseEncoding {
    pub fn new(translation: [f64; 3], rotation: Quat, fov: [f64; 2]) -> Result<Self> {
        let p = PoseEncoding {
            translation,
            rotation: rotation.canonical()?,
            fov,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if ((self.rotation.norm()) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("pose quaternion is not unit norm"));
        }
        if self.fov.iter().any(|f| !(*f > 0.0 && *f < std::f64::consts::PI)) {
            return Err(Error::invalid("fov must lie in (0, pi)"));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    /// Pose of a camera: camera-to-world translation and rotation plus field of view.
    pub fn from_camera(cam: &crate::model::Camera) -> Result<Self> {
        let c = cam.center();
        let r = cam.rotation.transpose();
        let rot = nalgebra::UnitQuaternion::from_matrix(&r);
        let q = Quat::new(rot.w, rot.i, rot.j, rot.k);
        let fov = [
            2.0 * (cam.width as f64 / (2.0 * cam.fx)).atan(),
            2.0 * (cam.height as f64 / (2.0 * cam.fy)).atan(),
        ];
        PoseEncoding::new([c.x, c.y, c.z], q, fov)
    }

    fn to_array(self) -> [f64; 9] {
        let [w, x, y, z] = self.rotation.0;
        let t = self.translation;
        [t[0], t[1], t[2], w, x, y, z, self.fov[0], self.fov[1]]
    }
}

fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Mean elementwise Huber loss over the 9-dim encoding, quaternions hemisphere-aligned.
pub fn pose_distill_loss(pred: &PoseEncoding, pseudo: &PoseEncoding, delta: f64) -> f64 {
    let mut target = *pseudo;
    if pred.rotation.dot(&target.rotation) < 0.0 {
        target.rotation = Quat(target.rotation.0.map(|v| -v));
    }
    let a = pred.to_array();
    let b = target.to_array();
    a.iter().zip(&b).map(|(x, y)| huber(x - y, delta)).sum::<f64>() / 9.0
}

/// Raw loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub photo: f64,
    pub feat: f64,
    pub depth_distill: f64,
    pub pose_distill: f64,
    pub inst: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photo: f64,
    pub feat: f64,
    pub depth_distill: f64,
    pub pose_distill: f64,
    pub inst: f64,
    pub total: f64,
    pub lambda_depth: f64,
    pub lambda_pose: f64,
    pub lambda_inst: f64,
}

impl LossReport {
    /// Weighted terms in summation order.
    pub fn weighted_terms(&self) -> [f64; 5] {
        [
            self.photo,
            self.feat,
            self.lambda_depth * self.depth_distill,
            self.lambda_pose * self.pose_distill,
            self.lambda_inst * self.inst,
        ]
    }
}

/// Weighted sum of the components. The total is the correctly rounded sum of the
/// weighted terms, so it does not depend on summation order.
pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> LossReport {
    let mut r = LossReport {
        photo: c.photo,
        feat: c.feat,
        depth_distill: c.depth_distill,
        pose_distill: c.pose_distill,
        inst: c.inst,
        total: 0.0,
        lambda_depth: cfg.lambda_depth,
        lambda_pose: cfg.lambda_pose,
        lambda_inst: cfg.lambda_inst,
    };
    r.total = exact_sum(&r.weighted_terms());
    r
}

/// Correctly rounded floating-point sum (Shewchuk partials).
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round-half-even correction on the top partials
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}
