//! Scene value types and their validation.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::Quat;
use crate::sh;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const DEFAULT_FEAT_DIM: usize = 16;

const UNIT_TOL: f64 = 1e-6;

/// One geometry splat. Scale and opacity are linear, not log/logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vec3,
    pub scale: Vec3,
    pub rot: Quat,
    pub opacity: f64,
    /// `(k+1)^2` RGB triples; index 0 is the DC term.
    pub sh: Vec<[f64; 3]>,
    /// Merge confidence logit.
    pub conf: f64,
    pub feat: Option<Vec<f64>>,
}

impl Gaussian3D {
    /// Degree-0 Gaussian with the given base color.
    pub fn with_color(mu: Vec3, scale: Vec3, rot: Quat, opacity: f64, color: [f64; 3]) -> Self {
        Gaussian3D {
            mu,
            scale,
            rot,
            opacity,
            sh: vec![color.map(sh::dc_from_color)],
            conf: 0.0,
            feat: None,
        }
    }

    pub fn base_color(&self) -> [f64; 3] {
        self.sh[0].map(|c| sh::C0 * c + 0.5)
    }
}

/// Isotropic splat carrying only the semantic feature. Rotation is implicitly identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGaussian {
    pub mu: Vec3,
    pub scale_iso: f64,
    pub opacity: f64,
    pub feat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub geo: Vec<Gaussian3D>,
    pub sem: Option<Vec<SemanticGaussian>>,
    pub sh_degree: usize,
    pub feat_dim: usize,
}

impl Scene {
    pub fn new(geo: Vec<Gaussian3D>, sh_degree: usize, feat_dim: usize) -> Self {
        Scene {
            geo,
            sem: None,
            sh_degree,
            feat_dim,
        }
    }

    pub fn empty(feat_dim: usize) -> Self {
        Scene::new(Vec::new(), 0, feat_dim)
    }

    pub fn len(&self) -> usize {
        self.geo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geo.is_empty()
    }

    pub fn has_geo_features(&self) -> bool {
        !self.geo.is_empty() && self.geo.iter().all(|g| g.feat.is_some())
    }

    /// Axis-aligned bounds of the geometry means, `None` when empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.geo.first()?.mu;
        Some(self.geo.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.mu), hi.sup(&g.mu))
        }))
    }

    pub fn diagonal(&self) -> f64 {
        self.bounds().map(|(lo, hi)| (hi - lo).norm()).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let violations = validate_scene(self);
        if violations.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
            Err(Error::InvalidScene(format!(
                "{} violation(s): {}",
                violations.len(),
                msg.join("; ")
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Subject {
    Scene,
    Geo(usize),
    Sem(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub subject: Subject,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.subject {
            Subject::Scene => write!(f, "scene.{}: {}", self.field, self.message),
            Subject::Geo(i) => write!(f, "geo[{i}].{}: {}", self.field, self.message),
            Subject::Sem(i) => write!(f, "sem[{i}].{}: {}", self.field, self.message),
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Every invariant breach in the scene. Never aborts early.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject, field, message: String| {
        out.push(Violation {
            subject,
            field,
            message,
        })
    };
    if scene.sh_degree > sh::MAX_DEGREE {
        push(
            Subject::Scene,
            "sh_degree",
            format!("degree {} exceeds {}", scene.sh_degree, sh::MAX_DEGREE),
        );
    }
    let n_sh = sh::coeff_count(scene.sh_degree);
    for (i, g) in scene.geo.iter().enumerate() {
        let s = Subject::Geo(i);
        if !all_finite(g.mu.as_slice()) {
            push(s, "mu", "non-finite position".into());
        }
        if !g.scale.iter().all(|c| c.is_finite() && *c > 0.0) {
            push(s, "scale", format!("components must be finite and > 0, got {:?}", g.scale.as_slice()));
        }
        let n = g.rot.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            push(s, "rot", format!("norm {n} is not 1"));
        } else if g.rot.0[0] < 0.0 {
            push(s, "rot", "w < 0 (non-canonical sign)".into());
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            push(s, "opacity", format!("{} outside [0,1]", g.opacity));
        }
        if g.sh.len() != n_sh {
            push(s, "sh", format!("{} coefficients, expected {n_sh}", g.sh.len()));
        }
        if !g.sh.iter().all(|c| all_finite(c)) {
            push(s, "sh", "non-finite coefficient".into());
        }
        if !g.conf.is_finite() {
            push(s, "conf", "non-finite".into());
        }
        if let Some(f) = &g.feat {
            if f.len() != scene.feat_dim {
                push(s, "feat", format!("length {} != feat_dim {}", f.len(), scene.feat_dim));
            } else if !all_finite(f) {
                push(s, "feat", "non-finite".into());
            }
        }
    }
    if let Some(sem) = &scene.sem {
        for (j, g) in sem.iter().enumerate() {
            let s = Subject::Sem(j);
            if !all_finite(g.mu.as_slice()) {
                push(s, "mu", "non-finite position".into());
            }
            if !(g.scale_iso.is_finite() && g.scale_iso > 0.0) {
                push(s, "scale_iso", format!("{} must be finite and > 0", g.scale_iso));
            }
            if !(0.0..=1.0).contains(&g.opacity) {
                push(s, "opacity", format!("{} outside [0,1]", g.opacity));
            }
            if g.feat.len() != scene.feat_dim {
                push(s, "feat", format!("length {} != feat_dim {}", g.feat.len(), scene.feat_dim));
            } else if !all_finite(&g.feat) {
                push(s, "feat", "non-finite".into());
            }
        }
    }
    out
}

/// Renormalizes the rotation to unit length with non-negative `w`.
pub fn canonicalize(g: &Gaussian3D) -> Result<Gaussian3D> {
    let rot = g.rot.canonical()?;
    Ok(Gaussian3D { rot, ..g.clone() })
}

pub fn canonicalize_scene(scene: &Scene) -> Result<Scene> {
    let geo = scene.geo.iter().map(canonicalize).collect::<Result<Vec<_>>>()?;
    Ok(Scene { geo, ..scene.clone() })
}

/// Pinhole camera. `rotation`/`translation` map world points into the camera frame
/// (`x_cam = R x_world + t`), camera looks down +z with +y pointing down the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: [f64; 4], rotation: Mat3, translation: Vec3, width: usize, height: usize) -> Self {
        let [fx, fy, cx, cy] = intrinsics;
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        }
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(intrinsics: [f64; 4], width: usize, height: usize) -> Self {
        Camera::new(intrinsics, Mat3::identity(), Vec3::zeros(), width, height)
    }

    /// From a row-major 4x4 world-to-camera matrix.
    pub fn from_matrix(intrinsics: [f64; 4], m: &[f64; 16], width: usize, height: usize) -> Self {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Camera::new(intrinsics, rotation, translation, width, height)
    }

    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(intrinsics: [f64; 4], eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize) -> Self {
        let z = (target - eye).normalize();
        // image y points down, so the camera "down" axis is -up projected
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(intrinsics, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("camera principal point must be finite"));
        }
        let err = (self.rotation * self.rotation.transpose() - Mat3::identity()).abs().max();
        if !(err <= UNIT_TOL) || self.rotation.determinant() <= 0.0 {
            return Err(Error::invalid("camera rotation is not orthonormal with det +1"));
        }
        if !all_finite(self.translation.as_slice()) {
            return Err(Error::invalid("camera translation must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be nonzero"));
        }
        Ok(())
    }
}

/// Weights and hyperparameters of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// SSIM vs L1 mix of the photometric term.
    pub eta: f64,
    pub lambda_depth: f64,
    pub lambda_pose: f64,
    pub lambda_inst: f64,
    /// Contrastive temperature.
    pub alpha: f64,
    /// Coverage threshold for target-view selection.
    pub tau: f64,
    /// Huber transition point of the pose distillation term.
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 0.85,
            lambda_depth: 0.1,
            lambda_pose: 10.0,
            lambda_inst: 0.05,
            alpha: 0.07,
            tau: 0.7,
            huber_delta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.eta) {
            return Err(Error::invalid(format!("eta {} outside [0,1]", self.eta)));
        }
        if !unit(self.tau) {
            return Err(Error::invalid(format!("tau {} outside [0,1]", self.tau)));
        }
        for (name, v) in [
            ("lambda_depth", self.lambda_depth),
            ("lambda_pose", self.lambda_pose),
            ("lambda_inst", self.lambda_inst),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be > 0"));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::invalid("huber_delta must be > 0"));
        }
        Ok(())
    }
}
