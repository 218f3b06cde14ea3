//! Synthetic scenes with ground truth produced by the crate's own renderer.
//!
//! Every preset is deterministic per seed. Instance features are the first K standard
//! basis vectors of the feature space, so they are orthogonal unit vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::masks_to_feature_map;
use crate::error::{Error, Result};
use crate::geometry::backproject_depth;
use crate::io::{
    write_cameras, write_feature_map, write_geo_ply, write_instance_mask, write_json, write_png_color,
    write_png_scalar, write_point_map, write_query_vector, ScalarEncoding,
};
use crate::maps::{BinaryMask, DepthMap, FeatureMap, Image, InstanceMask, PointMap};
use crate::model::{Camera, Gaussian3D, Scene, Vec3, DEFAULT_FEAT_DIM};
use crate::quat::Quat;
use crate::raster::{render, RenderOptions};

/// Spacing of the lattice preset.
pub const LATTICE_PITCH: f64 = 0.25;
/// Per-axis uniform jitter of the two-objects initial positions.
pub const INIT_MU_JITTER: f64 = 0.05;
/// Per-channel uniform jitter of the two-objects initial colors.
pub const INIT_COLOR_JITTER: f64 = 0.1;
/// Pixels with rendered alpha below this have no depth and no point.
pub const DEPTH_ALPHA_MIN: f64 = 0.5;
/// Pixels whose best instance response is below this are background.
pub const MASK_RESPONSE_MIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Lattice,
    TwoObjects,
    TexturedRoom,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Lattice, Preset::TwoObjects, Preset::TexturedRoom];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Lattice => "lattice",
            Preset::TwoObjects => "two-objects",
            Preset::TexturedRoom => "textured-room",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset '{s}' (expected lattice, two-objects or textured-room)")))
    }
}

/// Ground truth for one camera.
#[derive(Clone, Debug)]
pub struct SynthView {
    pub camera: Camera,
    pub image: Image,
    /// NaN where alpha < [`DEPTH_ALPHA_MIN`].
    pub depth: DepthMap,
    pub points: PointMap,
    pub mask: InstanceMask,
    /// Instance feature per pixel, zero on background.
    pub feature: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub preset: Preset,
    pub seed: u64,
    pub scene: Scene,
    /// Instance id of every geometry Gaussian.
    pub labels: Vec<u16>,
    pub instances: BTreeMap<u16, Vec<f64>>,
    /// Perturbed starting point for fitting (two-objects only).
    pub init: Option<Scene>,
    pub views: Vec<SynthView>,
    /// Characteristic spacing: the lattice pitch, or the surface sample spacing.
    pub pitch: f64,
}

impl SynthScene {
    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    /// Scene restricted to the Gaussians of one instance.
    pub fn instance_scene(&self, id: u16) -> Scene {
        let mut s = self.scene.clone();
        s.geo = s
            .geo
            .into_iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == id)
            .map(|(g, _)| g)
            .collect();
        s
    }
}

/// Summary written next to the generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub preset: Preset,
    pub seed: u64,
    pub gaussians: usize,
    pub views: usize,
    pub feat_dim: usize,
    pub pitch: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: u16,
    pub name: String,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub instances: Vec<InstanceEntry>,
}

fn basis(k: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    v
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    // uniform on the 3-sphere via normalized Gaussian components
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| {
            let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        if let Ok(c) = Quat(q).canonical() {
            return c;
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.05, 0.95))
}

fn gaussian(mu: Vec3, scale: Vec3, rot: Quat, opacity: f64, color: [f64; 3], conf: f64, feat: Vec<f64>) -> Gaussian3D {
    let mut g = Gaussian3D::with_color(mu, scale, rot, opacity, color);
    g.conf = conf;
    g.feat = Some(feat);
    g
}

/// Cameras on a horizontal ring (world up is +z) around `center`, all looking at it.
fn ring(n: usize, center: Vec3, radius: f64, height: f64, intr: [f64; 4], w: usize, h: usize, phase: f64) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let eye = center + Vec3::new(radius * a.cos(), radius * a.sin(), height);
            Camera::look_at(intr, eye, center, Vec3::new(0.0, 0.0, 1.0), w, h)
        })
        .collect()
}

fn lattice(seed: u64) -> (Scene, Vec<u16>, usize, Vec<Camera>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = DEFAULT_FEAT_DIM;
    let p = LATTICE_PITCH;
    // offsets of 0.4 pitch keep every coordinate away from voxel boundaries at p and 2p
    let coord = |k: i32| (k as f64 + 0.4) * p;
    let mut geo = Vec::with_capacity(512);
    let mut labels = Vec::with_capacity(512);
    for i in -5..=2 {
        for j in -5..=2 {
            for k in -5..=2 {
                // octant blocks of 4 lattice steps are the instances
                let id = 1 + ((i >= -1) as u16) + 2 * ((j >= -1) as u16) + 4 * ((k >= -1) as u16);
                let color = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
                let s = rng.gen_range(0.04..0.06);
                geo.push(gaussian(
                    Vec3::new(coord(i), coord(j), coord(k)),
                    Vec3::new(s, s * rng.gen_range(0.8..1.0), s * rng.gen_range(0.8..1.0)),
                    random_rotation(&mut rng),
                    rng.gen_range(0.6..0.9),
                    color,
                    rng.gen_range(-1.0..1.0),
                    basis(id as usize - 1, d),
                ));
                labels.push(id);
            }
        }
    }
    let c = Vec3::from_element(coord(-5) / 2.0 + coord(2) / 2.0);
    let cams = ring(8, c, 4.0, 1.2, [70.0, 70.0, 32.0, 32.0], 64, 64, 0.0);
    (Scene::new(geo, 0, d), labels, 8, cams)
}

fn blob(rng: &mut ChaCha8Rng, center: Vec3, n: usize, base: [f64; 3], feat: &[f64]) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let off = loop {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if v.norm() <= 1.0 {
                    break v * 0.25;
                }
            };
            let s = rng.gen_range(0.07..0.11);
            gaussian(
                center + off,
                Vec3::new(s, s * rng.gen_range(0.6..1.0), s * rng.gen_range(0.6..1.0)),
                random_rotation(rng),
                rng.gen_range(0.7..0.9),
                jitter(rng, base, 0.05),
                rng.gen_range(-1.0..1.0),
                feat.to_vec(),
            )
        })
        .collect()
}

fn two_objects(seed: u64) -> (Scene, Vec<u16>, usize, Vec<Camera>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = DEFAULT_FEAT_DIM;
    let mut geo = blob(&mut rng, Vec3::new(-0.45, 0.0, 0.0), 25, [0.8, 0.3, 0.2], &basis(0, d));
    geo.extend(blob(&mut rng, Vec3::new(0.45, 0.0, 0.0), 25, [0.2, 0.4, 0.8], &basis(1, d)));
    let labels = [vec![1u16; 25], vec![2u16; 25]].concat();
    let cams = ring(4, Vec3::zeros(), 3.0, 0.8, [70.0, 70.0, 32.0, 32.0], 64, 64, 0.5);
    (Scene::new(geo, 0, d), labels, 2, cams)
}

/// Flat disk Gaussians on the rectangle `origin + a·u + b·v`, a, b in [0, 1].
#[allow(clippy::too_many_arguments)]
fn surface(
    rng: &mut ChaCha8Rng,
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    spacing: f64,
    texture: impl Fn(usize, usize) -> [f64; 3],
    feat: &[f64],
    out: &mut Vec<Gaussian3D>,
) -> usize {
    let (nu, nv) = ((u.norm() / spacing).round() as usize, (v.norm() / spacing).round() as usize);
    let n = u.cross(&v).normalize();
    let (ue, ve) = (u.normalize(), v.normalize());
    let rot = Quat::from_rotation_matrix(&crate::model::Mat3::from_columns(&[ue, ve, n]));
    for a in 0..nu {
        for b in 0..nv {
            let mu = origin + u * ((a as f64 + 0.5) / nu as f64) + v * ((b as f64 + 0.5) / nv as f64);
            let mut g = gaussian(
                mu,
                Vec3::new(0.6 * spacing, 0.6 * spacing, 0.05 * spacing),
                rot,
                0.95,
                jitter(rng, texture(a, b), 0.02),
                rng.gen_range(-1.0..1.0),
                feat.to_vec(),
            );
            g.sh.resize(4, [0.0; 3]);
            g.sh[1] = [rng.gen_range(-0.02..0.02); 3];
            out.push(g);
        }
    }
    nu * nv
}

fn textured_room(seed: u64) -> (Scene, Vec<u16>, usize, Vec<Camera>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = DEFAULT_FEAT_DIM;
    let sp = 0.25;
    let mut geo = Vec::new();
    let mut labels = Vec::new();
    let x = Vec3::new(1.0, 0.0, 0.0);
    let y = Vec3::new(0.0, 1.0, 0.0);
    let z = Vec3::new(0.0, 0.0, 1.0);
    let checker = |a: usize, b: usize| if (a + b) % 2 == 0 { [0.85, 0.8, 0.7] } else { [0.3, 0.25, 0.2] };
    let stripes = |a: usize, _b: usize| if a % 4 < 2 { [0.6, 0.7, 0.8] } else { [0.4, 0.5, 0.65] };
    // open corner: floor (1) and two back walls (4), viewed from the open side so that no
    // surface passes close to a camera plane
    let n = surface(&mut rng, Vec3::new(-2.0, -2.0, 0.0), 3.5 * x, 3.5 * y, sp, checker, &basis(0, d), &mut geo);
    labels.extend(std::iter::repeat(1).take(n));
    let walls = [
        (Vec3::new(-2.0, -2.0, 0.0), 3.5 * x, 2.0 * z),
        (Vec3::new(-2.0, 1.5, 0.0), -3.5 * y, 2.0 * z),
    ];
    for (o, u, v) in walls {
        let n = surface(&mut rng, o, u, v, sp, stripes, &basis(3, d), &mut geo);
        labels.extend(std::iter::repeat(4).take(n));
    }
    // cube (2): five visible faces of an axis-aligned box
    let (c0, e) = (Vec3::new(0.3, 0.2, 0.0), 0.6);
    let red = |_: usize, _: usize| [0.8, 0.2, 0.15];
    let faces = [
        (c0 + Vec3::new(0.0, 0.0, e), e * x, e * y),
        (c0, e * z, e * y),
        (c0 + Vec3::new(e, 0.0, 0.0), e * y, e * z),
        (c0, e * x, e * z),
        (c0 + Vec3::new(0.0, e, 0.0), e * z, e * x),
    ];
    for (o, u, v) in faces {
        let n = surface(&mut rng, o, u, v, 0.15, red, &basis(1, d), &mut geo);
        labels.extend(std::iter::repeat(2).take(n));
    }
    // ball (3)
    let ball = blob(&mut rng, Vec3::new(-0.8, -0.6, 0.35), 40, [0.2, 0.7, 0.3], &basis(2, d));
    labels.extend(std::iter::repeat(3).take(ball.len()));
    geo.extend(ball.into_iter().map(|mut g| {
        g.sh.resize(4, [0.0; 3]);
        g
    }));
    let target = Vec3::new(-0.3, -0.3, 0.4);
    let cams = (0..6)
        .map(|i| {
            let a = (15.0 + 12.0 * i as f64).to_radians();
            let eye = target + Vec3::new(3.4 * a.cos(), 3.4 * a.sin(), 1.2);
            Camera::look_at([40.0, 40.0, 32.0, 32.0], eye, target, z, 64, 64)
        })
        .collect();
    (Scene::new(geo, 1, d), labels, 4, cams, sp)
}

/// Renders every ground-truth channel of one view.
pub fn ground_truth_view(
    scene: &Scene,
    instances: &BTreeMap<u16, Vec<f64>>,
    camera: &Camera,
) -> Result<SynthView> {
    let out = render(scene, camera, &RenderOptions::with_features())?;
    let feat = out.feature.as_ref().expect("features requested");
    let n = camera.pixel_count();
    let mut mask = InstanceMask::new(camera.width, camera.height);
    for i in 0..n {
        let f = feat.at(i);
        let mut best = (0u16, MASK_RESPONSE_MIN);
        for (&id, e) in instances {
            let r: f64 = f.iter().zip(e).map(|(a, b)| a * b).sum();
            if r >= best.1 {
                best = (id, r);
            }
        }
        mask.data[i] = best.0;
    }
    let valid = BinaryMask {
        width: camera.width,
        height: camera.height,
        data: out.alpha.data.iter().map(|a| *a >= DEPTH_ALPHA_MIN).collect(),
    };
    let points = backproject_depth(&out.depth, Some(&valid), camera)?;
    let mut depth = out.depth;
    for (d, ok) in depth.data.iter_mut().zip(&valid.data) {
        if !ok {
            *d = f64::NAN;
        }
    }
    let feature = masks_to_feature_map(&mask, instances, scene.feat_dim)?;
    Ok(SynthView {
        camera: camera.clone(),
        image: out.color,
        depth,
        points,
        mask,
        feature,
    })
}

/// Moves every position by up to [`INIT_MU_JITTER`] per axis and every color by up to
/// [`INIT_COLOR_JITTER`] per channel.
pub fn perturb(scene: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a17);
    let mut s = scene.clone();
    for g in &mut s.geo {
        g.mu += Vec3::from_fn(|_, _| rng.gen_range(-INIT_MU_JITTER..=INIT_MU_JITTER));
        let c = jitter(&mut rng, g.base_color(), INIT_COLOR_JITTER);
        let init = Gaussian3D::with_color(g.mu, g.scale, g.rot, g.opacity, c);
        g.sh[0] = init.sh[0];
    }
    s
}

pub fn synth_scene(preset: Preset, seed: u64) -> Result<SynthScene> {
    let (scene, labels, k, cams, pitch) = match preset {
        Preset::Lattice => {
            let (s, l, k, c) = lattice(seed);
            (s, l, k, c, LATTICE_PITCH)
        }
        Preset::TwoObjects => {
            let (s, l, k, c) = two_objects(seed);
            (s, l, k, c, 0.25)
        }
        Preset::TexturedRoom => textured_room(seed),
    };
    scene.validate()?;
    let instances: BTreeMap<u16, Vec<f64>> = (1..=k as u16).map(|id| (id, basis(id as usize - 1, scene.feat_dim))).collect();
    let views = cams
        .iter()
        .map(|c| ground_truth_view(&scene, &instances, c))
        .collect::<Result<Vec<_>>>()?;
    let init = (preset == Preset::TwoObjects).then(|| perturb(&scene, seed));
    Ok(SynthScene {
        preset,
        seed,
        scene,
        labels,
        instances,
        init,
        views,
        pitch,
    })
}

fn instance_name(preset: Preset, id: u16) -> String {
    match (preset, id) {
        (Preset::TwoObjects, 1) => "object_a".into(),
        (Preset::TwoObjects, 2) => "object_b".into(),
        (Preset::TexturedRoom, 1) => "floor".into(),
        (Preset::TexturedRoom, 2) => "cube".into(),
        (Preset::TexturedRoom, 3) => "ball".into(),
        (Preset::TexturedRoom, 4) => "walls".into(),
        (_, id) => format!("block_{id}"),
    }
}

/// Writes the dataset layout:
///
/// | file | content |
/// |------|---------|
/// | `scene.geo.ply` | ground-truth Gaussians with instance features |
/// | `scene_init.geo.ply` | perturbed fit start (two-objects) |
/// | `cameras.json` | all views |
/// | `render_{i}.png` | color |
/// | `depth_{i}.png` + `depth_{i}.json` | 16-bit depth and its scale |
/// | `points_{i}.pmap` | back-projected depth |
/// | `mask_{i}.imsk` | instance ids |
/// | `feature_{i}.fmap` | per-pixel instance features |
/// | `instances.json` | instance ids, names and feature vectors |
/// | `query_{id}.bin` | instance feature as a raw f32 query vector |
/// | `synth.json` | summary, including the pitch |
pub fn write_synth(dir: &Path, s: &SynthScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_geo_ply(&dir.join("scene.geo.ply"), &s.scene)?;
    if let Some(init) = &s.init {
        write_geo_ply(&dir.join("scene_init.geo.ply"), init)?;
    }
    write_cameras(&dir.join("cameras.json"), &s.cameras())?;
    for (i, v) in s.views.iter().enumerate() {
        write_png_color(&dir.join(format!("render_{i}.png")), &v.image)?;
        let max = v.depth.data.iter().filter(|d| d.is_finite()).fold(0.0f64, |m, d| m.max(*d));
        write_png_scalar(&dir.join(format!("depth_{i}.png")), &v.depth, ScalarEncoding::depth(max))?;
        write_point_map(&dir.join(format!("points_{i}.pmap")), &v.points)?;
        write_instance_mask(&dir.join(format!("mask_{i}.imsk")), &v.mask)?;
        write_feature_map(&dir.join(format!("feature_{i}.fmap")), &v.feature)?;
    }
    let instances = InstanceFile {
        instances: s
            .instances
            .iter()
            .map(|(&id, f)| InstanceEntry {
                id,
                name: instance_name(s.preset, id),
                feature: f.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("instances.json"), &instances)?;
    for (id, f) in &s.instances {
        write_query_vector(&dir.join(format!("query_{id}.bin")), f)?;
    }
    let first = &s.views[0].camera;
    write_json(
        &dir.join("synth.json"),
        &SynthManifest {
            preset: s.preset,
            seed: s.seed,
            gaussians: s.scene.len(),
            views: s.views.len(),
            feat_dim: s.scene.feat_dim,
            pitch: s.pitch,
            width: first.width,
            height: first.height,
        },
    )
}

/// Random small scene in front of a 32×32 identity camera, for gradient checks.
///
/// Positions lie in a frustum slab at depth 2..4, scales 0.15..0.5, opacities 0.3..0.9,
/// colors well inside (0, 1), and features (if `feat_dim > 0`) uniform in [-1, 1].
pub fn random_scene(n: usize, feat_dim: usize, sh_degree: usize, seed: u64) -> (Scene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::identity([32.0, 32.0, 16.0, 16.0], 32, 32);
    let geo = (0..n)
        .map(|_| {
            let z = rng.gen_range(2.0..4.0);
            let mu = Vec3::new(rng.gen_range(-0.35..0.35) * z, rng.gen_range(-0.35..0.35) * z, z);
            let scale = Vec3::from_fn(|_, _| rng.gen_range(0.15..0.5));
            let color = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            let mut g = Gaussian3D::with_color(mu, scale, random_rotation(&mut rng), rng.gen_range(0.3..0.9), color);
            g.sh.resize(crate::sh::coeff_count(sh_degree), [0.0; 3]);
            for c in g.sh.iter_mut().skip(1) {
                *c = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
            }
            g.conf = rng.gen_range(-1.0..1.0);
            if feat_dim > 0 {
                g.feat = Some((0..feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            g
        })
        .collect();
    (Scene::new(geo, sh_degree, feat_dim), cam)
}
