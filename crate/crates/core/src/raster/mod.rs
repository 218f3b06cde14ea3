//! CPU splatting renderer with an exact adjoint.
//!
//! Gaussians are projected with the perspective-affine approximation, binned into
//! 16x16 pixel tiles and composited front to back in camera-depth order (ties broken
//! by index). Colors, alpha, expected depth and features share compositing weights.
//! When a scene carries a semantic set, the feature channel is composited from it
//! with its own isotropic footprints instead.

mod composite;
mod project;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::maps::{DepthMap, FeatureMap, Image, ScalarMap};
use crate::model::{Camera, Scene, Vec3};
use crate::sh;

use composite::{Layer, Upstream, G_COLOR, G_CONIC, G_DEPTH, G_FEAT, G_MEAN, G_OPACITY};
pub use project::{covariance_3d, COV2D_BLUR};
use project::{
    color_vjp, covariance_vjp, eval_color, isotropic_covariance, project, project_vjp, Projected, Splat,
};

pub use composite::{MAX_MAHALANOBIS_SQ, MIN_ALPHA, TILE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Also composite the feature channel.
    pub features: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0; 3],
            features: false,
        }
    }
}

impl RenderOptions {
    pub fn with_features() -> Self {
        RenderOptions {
            features: true,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-normalized expected camera depth.
    pub depth: DepthMap,
    pub alpha: ScalarMap,
    pub feature: Option<FeatureMap>,
    /// Identifies the ordered set of contributing (pixel, Gaussian) pairs and the
    /// active color clamps. Equal signatures mean the render is smooth between two
    /// parameter settings.
    pub support_signature: u64,
}

/// Upstream gradient of a scalar loss with respect to each rendered channel.
/// Missing channels are zero.
#[derive(Clone, Debug, Default)]
pub struct PixelGrad {
    /// H*W*3
    pub color: Option<Vec<f64>>,
    /// H*W
    pub depth: Option<Vec<f64>>,
    /// H*W
    pub alpha: Option<Vec<f64>>,
    /// H*W*D
    pub feature: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianGrad {
    pub mu: Vec3,
    pub scale: Vec3,
    pub rot: [f64; 4],
    pub opacity: f64,
    pub sh: Vec<[f64; 3]>,
    pub feat: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SemanticGrad {
    pub mu: Vec3,
    pub scale_iso: f64,
    pub opacity: f64,
    pub feat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RenderGrad {
    pub geo: Vec<GaussianGrad>,
    pub sem: Vec<SemanticGrad>,
}

impl RenderGrad {
    fn zeros(scene: &Scene) -> Self {
        let n_sh = sh::coeff_count(scene.sh_degree);
        RenderGrad {
            geo: scene
                .geo
                .iter()
                .map(|g| GaussianGrad {
                    mu: Vec3::zeros(),
                    scale: Vec3::zeros(),
                    rot: [0.0; 4],
                    opacity: 0.0,
                    sh: vec![[0.0; 3]; n_sh],
                    feat: g.feat.as_ref().map(|f| vec![0.0; f.len()]),
                })
                .collect(),
            sem: scene
                .sem
                .iter()
                .flatten()
                .map(|s| SemanticGrad {
                    mu: Vec3::zeros(),
                    scale_iso: 0.0,
                    opacity: 0.0,
                    feat: vec![0.0; s.feat.len()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        let fin = |v: &[f64]| v.iter().all(|x| x.is_finite());
        self.geo.iter().all(|g| {
            fin(g.mu.as_slice())
                && fin(g.scale.as_slice())
                && fin(&g.rot)
                && g.opacity.is_finite()
                && g.sh.iter().all(|c| fin(c))
                && g.feat.as_deref().map_or(true, fin)
        }) && self
            .sem
            .iter()
            .all(|s| fin(s.mu.as_slice()) && s.scale_iso.is_finite() && s.opacity.is_finite() && fin(&s.feat))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FeatureSource {
    None,
    Geo,
    Sem,
}

fn feature_source(scene: &Scene, opts: &RenderOptions) -> Result<FeatureSource> {
    if !opts.features {
        return Ok(FeatureSource::None);
    }
    if scene.sem.is_some() {
        Ok(FeatureSource::Sem)
    } else if scene.has_geo_features() || scene.geo.is_empty() {
        Ok(FeatureSource::Geo)
    } else {
        Err(Error::invalid("scene has no features to render"))
    }
}

fn sort_layer(splats: &mut Vec<Splat>, feats: &mut Vec<f64>, feat_dim: usize) {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    // stable: equal depths keep index order
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth));
    let sorted: Vec<Splat> = order.iter().map(|&i| splats[i].clone()).collect();
    let mut f = Vec::with_capacity(feats.len());
    for &i in &order {
        f.extend_from_slice(&feats[i * feat_dim..(i + 1) * feat_dim]);
    }
    *splats = sorted;
    *feats = f;
}

struct GeoLayer {
    layer: Layer,
    projections: Vec<Option<Projected>>,
    clamp_hash: u64,
}

fn geo_layer(scene: &Scene, cam: &Camera, bg: [f64; 3], with_feat: bool) -> GeoLayer {
    let feat_dim = if with_feat { scene.feat_dim } else { 0 };
    let mut splats = Vec::new();
    let mut feats = Vec::new();
    let mut projections = Vec::with_capacity(scene.geo.len());
    let mut clamp_hash = 0u64;
    for (i, g) in scene.geo.iter().enumerate() {
        let p = project(&g.mu, covariance_3d(g), cam);
        if let Some(p) = &p {
            let (color, active) = eval_color(g, scene.sh_degree, cam);
            for (ch, a) in active.iter().enumerate() {
                if !a {
                    clamp_hash = clamp_hash.rotate_left(7) ^ ((i * 3 + ch) as u64 + 1);
                }
            }
            splats.push(Splat {
                source: i,
                mean: p.mean,
                conic: [p.conic[(0, 0)], p.conic[(0, 1)], p.conic[(1, 1)]],
                opacity: g.opacity,
                depth: p.t.z,
                bbox: p.bbox,
                color,
            });
            if with_feat {
                feats.extend_from_slice(g.feat.as_deref().expect("checked by feature_source"));
            }
        }
        projections.push(p);
    }
    sort_layer(&mut splats, &mut feats, feat_dim);
    GeoLayer {
        layer: Layer {
            splats,
            feat_dim,
            feats,
            background: bg,
            width: cam.width,
            height: cam.height,
        },
        projections,
        clamp_hash,
    }
}

fn sem_layer(scene: &Scene, cam: &Camera) -> (Layer, Vec<Option<Projected>>) {
    let sem = scene.sem.as_deref().unwrap_or(&[]);
    let mut splats = Vec::new();
    let mut feats = Vec::new();
    let mut projections = Vec::with_capacity(sem.len());
    for (j, s) in sem.iter().enumerate() {
        let p = project(&s.mu, isotropic_covariance(s.scale_iso), cam);
        if let Some(p) = &p {
            splats.push(Splat {
                source: j,
                mean: p.mean,
                conic: [p.conic[(0, 0)], p.conic[(0, 1)], p.conic[(1, 1)]],
                opacity: s.opacity,
                depth: p.t.z,
                bbox: p.bbox,
                color: [0.0; 3],
            });
            feats.extend_from_slice(&s.feat);
        }
        projections.push(p);
    }
    sort_layer(&mut splats, &mut feats, scene.feat_dim);
    (
        Layer {
            splats,
            feat_dim: scene.feat_dim,
            feats,
            background: [0.0; 3],
            width: cam.width,
            height: cam.height,
        },
        projections,
    )
}

/// Forward render of a validated scene.
pub fn render(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    scene.validate()?;
    cam.validate()?;
    render_unchecked(scene, cam, opts)
}

/// Forward render without invariant checks. Non-unit rotations are normalized on the fly.
pub(crate) fn render_unchecked(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    let source = feature_source(scene, opts)?;
    let geo = geo_layer(scene, cam, opts.background, source == FeatureSource::Geo);
    let img = composite::forward(&geo.layer);
    let (w, h) = (cam.width, cam.height);
    let mut signature = img.signature ^ geo.clamp_hash.rotate_left(17);
    let feature = match source {
        FeatureSource::None => None,
        FeatureSource::Geo => Some(FeatureMap::from_data(w, h, scene.feat_dim, img.feat)?),
        FeatureSource::Sem => {
            let (layer, _) = sem_layer(scene, cam);
            let sem_img = composite::forward(&layer);
            signature = signature.rotate_left(29) ^ sem_img.signature;
            Some(FeatureMap::from_data(w, h, scene.feat_dim, sem_img.feat)?)
        }
    };
    Ok(RenderOutput {
        color: Image::from_data(w, h, img.color)?,
        depth: ScalarMap {
            width: w,
            height: h,
            data: img.depth,
        },
        alpha: ScalarMap {
            width: w,
            height: h,
            data: img.alpha,
        },
        feature,
        support_signature: signature,
    })
}

fn check_grad_len(name: &str, v: &Option<Vec<f64>>, expected: usize) -> Result<()> {
    if let Some(v) = v {
        if v.len() != expected {
            return Err(Error::dims(format!(
                "{name} gradient has {} values, expected {expected}",
                v.len()
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(format!("{name} gradient is not finite")));
        }
    }
    Ok(())
}

/// Forward render plus the adjoint of a scalar loss given its per-pixel gradient.
pub fn render_with_grad(
    scene: &Scene,
    cam: &Camera,
    opts: &RenderOptions,
    pixel_grad: &PixelGrad,
) -> Result<(RenderOutput, RenderGrad)> {
    scene.validate()?;
    cam.validate()?;
    render_with_grad_unchecked(scene, cam, opts, pixel_grad)
}

pub(crate) fn render_with_grad_unchecked(
    scene: &Scene,
    cam: &Camera,
    opts: &RenderOptions,
    pixel_grad: &PixelGrad,
) -> Result<(RenderOutput, RenderGrad)> {
    let n = cam.pixel_count();
    check_grad_len("color", &pixel_grad.color, n * 3)?;
    check_grad_len("depth", &pixel_grad.depth, n)?;
    check_grad_len("alpha", &pixel_grad.alpha, n)?;
    if pixel_grad.feature.is_some() && !opts.features {
        return Err(Error::invalid("feature gradient given but features are not rendered"));
    }
    check_grad_len("feature", &pixel_grad.feature, n * scene.feat_dim)?;

    let out = render_unchecked(scene, cam, opts)?;
    let source = feature_source(scene, opts)?;
    let mut grad = RenderGrad::zeros(scene);

    let geo = geo_layer(scene, cam, opts.background, source == FeatureSource::Geo);
    let up = Upstream {
        color: pixel_grad.color.as_deref(),
        alpha: pixel_grad.alpha.as_deref(),
        depth: pixel_grad.depth.as_deref(),
        feat: if source == FeatureSource::Geo {
            pixel_grad.feature.as_deref()
        } else {
            None
        },
    };
    let stride = composite::grad_stride(geo.layer.feat_dim);
    let screen = composite::backward(&geo.layer, &up);
    for (k, s) in geo.layer.splats.iter().enumerate() {
        let rec = &screen[k * stride..(k + 1) * stride];
        let i = s.source;
        let g = &scene.geo[i];
        let p = geo.projections[i].as_ref().expect("splat implies projection");
        let (mut d_mu, g_cov3) = project_vjp(
            p,
            cam,
            [rec[G_MEAN], rec[G_MEAN + 1]],
            [rec[G_CONIC], rec[G_CONIC + 1], rec[G_CONIC + 2]],
            rec[G_DEPTH],
        );
        let (d_scale, d_rot) = covariance_vjp(g, &g_cov3);
        let gg = &mut grad.geo[i];
        d_mu += color_vjp(
            g,
            scene.sh_degree,
            cam,
            [rec[G_COLOR], rec[G_COLOR + 1], rec[G_COLOR + 2]],
            &mut gg.sh,
        );
        gg.mu = d_mu;
        gg.scale = d_scale;
        gg.rot = d_rot;
        gg.opacity = rec[G_OPACITY];
        if source == FeatureSource::Geo {
            if let Some(f) = gg.feat.as_mut() {
                f.copy_from_slice(&rec[G_FEAT..]);
            }
        }
    }

    if source == FeatureSource::Sem {
        if let Some(fg) = pixel_grad.feature.as_deref() {
            let (layer, projections) = sem_layer(scene, cam);
            let stride = composite::grad_stride(layer.feat_dim);
            let screen = composite::backward(
                &layer,
                &Upstream {
                    feat: Some(fg),
                    ..Default::default()
                },
            );
            let sem = scene.sem.as_deref().unwrap_or(&[]);
            for (k, s) in layer.splats.iter().enumerate() {
                let rec = &screen[k * stride..(k + 1) * stride];
                let j = s.source;
                let p = projections[j].as_ref().expect("splat implies projection");
                let (d_mu, g_cov3) = project_vjp(
                    p,
                    cam,
                    [rec[G_MEAN], rec[G_MEAN + 1]],
                    [rec[G_CONIC], rec[G_CONIC + 1], rec[G_CONIC + 2]],
                    0.0,
                );
                let sg = &mut grad.sem[j];
                sg.mu = d_mu;
                sg.scale_iso = 2.0 * sem[j].scale_iso * g_cov3.trace();
                sg.opacity = rec[G_OPACITY];
                sg.feat.copy_from_slice(&rec[G_FEAT..]);
            }
        }
    }
    Ok((out, grad))
}

#[cfg(test)]
mod tests;
