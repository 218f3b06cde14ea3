//! Direct optimization of Gaussian attributes against rendered targets, and a
//! finite-difference gradient checker for the render-plus-loss pipeline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    depth_distill_loss_with_grad, feature_cosine_loss_with_grad, instance_contrastive_loss_with_grad,
    photometric_loss_with_grad, total_loss, LossComponents, LossReport, Sampling, DEFAULT_SAMPLE_BUDGET,
};
use crate::maps::{BinaryMask, DepthMap, FeatureMap, Image, InstanceMask};
use crate::metrics::psnr;
use crate::model::{canonicalize_scene, Camera, LossConfig, Scene};
use crate::raster::{render, render_unchecked, render_with_grad_unchecked, PixelGrad, RenderGrad, RenderOptions};
use crate::sh;

/// One supervised view.
#[derive(Clone, Debug)]
pub struct FitTarget {
    pub camera: Camera,
    pub image: Image,
    pub depth: Option<DepthMap>,
    pub feature: Option<FeatureMap>,
    pub mask: Option<InstanceMask>,
}

impl FitTarget {
    pub fn color_only(camera: Camera, image: Image) -> Self {
        FitTarget {
            camera,
            image,
            depth: None,
            feature: None,
            mask: None,
        }
    }
}

/// Adam step sizes per attribute group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the initial scene diagonal.
    pub mu: f64,
    pub log_scale: f64,
    pub rot: f64,
    pub logit_opacity: f64,
    pub sh: f64,
    pub feat: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mu: 1e-3,
            log_scale: 5e-3,
            rot: 1e-3,
            logit_opacity: 5e-2,
            sh: 2.5e-3,
            feat: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the contrastive pixel sampler.
    pub seed: u64,
    /// Progress is logged every `log_every` iterations (0 disables).
    pub log_every: usize,
    pub background: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 1000,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            log_every: 100,
            background: [0.0; 3],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("mu", lr.mu),
            ("log_scale", lr.log_scale),
            ("rot", lr.rot),
            ("logit_opacity", lr.logit_opacity),
            ("sh", lr.sh),
            ("feat", lr.feat),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("step size {name} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment decays must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitTrace {
    /// Loss of the parameters entering each iteration, averaged over views.
    pub reports: Vec<LossReport>,
    pub final_psnr: Vec<f64>,
}

impl FitTrace {
    pub fn mean_final_psnr(&self) -> f64 {
        self.final_psnr.iter().sum::<f64>() / self.final_psnr.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,photo,feat,depth_distill,pose_distill,inst,total\n");
        for (i, r) in self.reports.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i + 1,
                r.photo,
                r.feat,
                r.depth_distill,
                r.pose_distill,
                r.inst,
                r.total
            ));
        }
        s
    }
}

const OPACITY_EPS: f64 = 1e-6;
/// Gradient entries below this are round-off; Adam would otherwise rescale them to full steps.
pub const GRAD_NOISE_FLOOR: f64 = 1e-14;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Flat optimizer view of a scene: log scales, logit opacities, raw quaternions.
struct Params {
    values: Vec<f64>,
    lr: Vec<f64>,
}

fn n_sh(scene: &Scene) -> usize {
    sh::coeff_count(scene.sh_degree)
}

fn pack(scene: &Scene, lr: &LearningRates, diag: f64) -> Params {
    let ns = n_sh(scene);
    let mut values = Vec::new();
    let mut rates = Vec::new();
    let mut push = |v: f64, r: f64| {
        values.push(v);
        rates.push(r);
    };
    for g in &scene.geo {
        g.mu.iter().for_each(|&v| push(v, lr.mu * diag));
        g.scale.iter().for_each(|&v| push(v.ln(), lr.log_scale));
        g.rot.0.iter().for_each(|&v| push(v, lr.rot));
        push(logit(g.opacity), lr.logit_opacity);
        for c in g.sh.iter().take(ns) {
            c.iter().for_each(|&v| push(v, lr.sh));
        }
        for &v in g.feat.iter().flatten() {
            push(v, lr.feat);
        }
    }
    for s in scene.sem.iter().flatten() {
        s.mu.iter().for_each(|&v| push(v, lr.mu * diag));
        push(s.scale_iso.ln(), lr.log_scale);
        push(logit(s.opacity), lr.logit_opacity);
        for &v in &s.feat {
            push(v, lr.feat);
        }
    }
    Params { values, lr: rates }
}

/// Writes back the entries flagged in `changed`; untouched attributes stay bit-identical.
fn unpack_changed(values: &[f64], changed: &[bool], scene: &mut Scene) {
    let ns = n_sh(scene);
    let mut i = 0;
    let mut next = |f: &mut dyn FnMut(f64)| {
        if changed[i] {
            f(values[i]);
        }
        i += 1;
    };
    for g in &mut scene.geo {
        for k in 0..3 {
            next(&mut |v| g.mu[k] = v);
        }
        for k in 0..3 {
            next(&mut |v| g.scale[k] = v.exp());
        }
        let mut rot_changed = false;
        for k in 0..4 {
            next(&mut |v| {
                g.rot.0[k] = v;
                rot_changed = true;
            });
        }
        if rot_changed {
            let n = g.rot.norm();
            g.rot.0 = g.rot.0.map(|v| v / n);
        }
        next(&mut |v| g.opacity = sigmoid(v));
        for c in g.sh.iter_mut().take(ns) {
            for v in c.iter_mut() {
                next(&mut |x| *v = x);
            }
        }
        for v in g.feat.iter_mut().flatten() {
            next(&mut |x| *v = x);
        }
    }
    for s in scene.sem.iter_mut().flatten() {
        for k in 0..3 {
            next(&mut |v| s.mu[k] = v);
        }
        next(&mut |v| s.scale_iso = v.exp());
        next(&mut |v| s.opacity = sigmoid(v));
        for v in s.feat.iter_mut() {
            next(&mut |x| *v = x);
        }
    }
}

/// Gradient in the packed parameter domain.
fn pack_grad(scene: &Scene, grad: &RenderGrad, out: &mut [f64], weight: f64) {
    let ns = n_sh(scene);
    let mut i = 0;
    let mut add = |v: f64| {
        out[i] += weight * v;
        i += 1;
    };
    for (g, d) in scene.geo.iter().zip(&grad.geo) {
        d.mu.iter().for_each(|&v| add(v));
        for k in 0..3 {
            add(d.scale[k] * g.scale[k]);
        }
        d.rot.iter().for_each(|&v| add(v));
        add(d.opacity * g.opacity * (1.0 - g.opacity));
        for c in d.sh.iter().take(ns) {
            c.iter().for_each(|&v| add(v));
        }
        if g.feat.is_some() {
            for &v in d.feat.iter().flatten() {
                add(v);
            }
        }
    }
    for (s, d) in scene.sem.iter().flatten().zip(&grad.sem) {
        d.mu.iter().for_each(|&v| add(v));
        add(d.scale_iso * s.scale_iso);
        add(d.opacity * s.opacity * (1.0 - s.opacity));
        d.feat.iter().for_each(|&v| add(v));
    }
}

fn renders_features(scene: &Scene, t: &FitTarget) -> bool {
    (t.feature.is_some() || t.mask.is_some()) && (scene.sem.is_some() || scene.has_geo_features())
}

/// Loss terms of one view and, when `with_grad`, the scene gradient of its weighted total.
fn view_loss(
    scene: &Scene,
    t: &FitTarget,
    loss_cfg: &LossConfig,
    bg: [f64; 3],
    sampling: Sampling,
    with_grad: bool,
) -> Result<(LossComponents, Option<RenderGrad>)> {
    let opts = RenderOptions {
        background: bg,
        features: renders_features(scene, t),
    };
    let out = render_unchecked(scene, &t.camera, &opts)?;
    let mut c = LossComponents::default();
    let mut pg = PixelGrad::default();

    let (photo, g) = photometric_loss_with_grad(&out.color, &t.image, loss_cfg.eta)?;
    c.photo = photo;
    pg.color = Some(g);

    if let Some(depth) = &t.depth {
        let valid = BinaryMask {
            width: depth.width,
            height: depth.height,
            data: depth.data.iter().map(|d| d.is_finite() && *d > 0.0).collect(),
        };
        match depth_distill_loss_with_grad(&out.depth, depth, Some(&valid)) {
            Ok((v, g)) => {
                c.depth_distill = v;
                pg.depth = Some(g.into_iter().map(|x| x * loss_cfg.lambda_depth).collect());
            }
            Err(Error::NoValidPixels) => {}
            Err(e) => return Err(e),
        }
    }

    if let Some(rendered) = &out.feature {
        let mut gf = vec![0.0; rendered.data.len()];
        if let Some(target) = &t.feature {
            match feature_cosine_loss_with_grad(rendered, target, None) {
                Ok(r) => {
                    c.feat = r.value;
                    gf.iter_mut().zip(&r.grad).for_each(|(a, b)| *a += b);
                }
                Err(Error::NoValidFeatures) => {}
                Err(e) => return Err(e),
            }
        }
        if let Some(mask) = &t.mask {
            if mask.data.iter().any(|&v| v != 0) {
                let (v, g) = instance_contrastive_loss_with_grad(rendered, mask, loss_cfg.alpha, sampling)?;
                c.inst = v;
                gf.iter_mut().zip(&g).for_each(|(a, b)| *a += loss_cfg.lambda_inst * b);
            }
        }
        pg.feature = Some(gf);
    }

    if !with_grad {
        return Ok((c, None));
    }
    let (_, grad) = render_with_grad_unchecked(scene, &t.camera, &opts, &pg)?;
    Ok((c, Some(grad)))
}

fn mean_components(cs: &[LossComponents]) -> LossComponents {
    let n = cs.len() as f64;
    let mut m = LossComponents::default();
    for c in cs {
        m.photo += c.photo / n;
        m.feat += c.feat / n;
        m.depth_distill += c.depth_distill / n;
        m.pose_distill += c.pose_distill / n;
        m.inst += c.inst / n;
    }
    m
}

/// Adam over positions, log scales, raw rotations, logit opacities, SH and features.
/// Camera poses are fixed, so the pose distillation term is identically zero.
pub fn fit_scene(
    init: &Scene,
    targets: &[FitTarget],
    cfg: &FitConfig,
    loss_cfg: &LossConfig,
) -> Result<(Scene, FitTrace)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    init.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("at least one target view is required"));
    }
    for (v, t) in targets.iter().enumerate() {
        t.camera.validate()?;
        if t.image.width != t.camera.width || t.image.height != t.camera.height {
            return Err(Error::dims(format!("target {v}: image size differs from camera")));
        }
    }
    let diag = init.diagonal().max(1e-6);
    let Params { mut values, lr } = pack(init, &cfg.lr, diag);
    let mut m = vec![0.0; values.len()];
    let mut v = vec![0.0; values.len()];
    let mut scene = init.clone();
    let mut reports = Vec::with_capacity(cfg.iterations);
    let weight = 1.0 / targets.len() as f64;

    for it in 1..=cfg.iterations {
        let sampling = Sampling::Stratified {
            budget: DEFAULT_SAMPLE_BUDGET,
            seed: cfg.seed.wrapping_add(it as u64),
        };
        let mut grad = vec![0.0; values.len()];
        let mut comps = Vec::with_capacity(targets.len());
        for t in targets {
            let (c, g) = view_loss(&scene, t, loss_cfg, cfg.background, sampling, true)?;
            pack_grad(&scene, &g.expect("gradient requested"), &mut grad, weight);
            comps.push(c);
        }
        let report = total_loss(&mean_components(&comps), loss_cfg);
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(it));
        }
        if cfg.log_every > 0 && (it == 1 || it % cfg.log_every == 0) {
            log::info!("iter {it}: total {:.6}", report.total);
        }
        reports.push(report);

        let b1t = 1.0 - cfg.beta1.powi(it as i32);
        let b2t = 1.0 - cfg.beta2.powi(it as i32);
        let mut changed = vec![false; values.len()];
        for k in 0..values.len() {
            if grad[k].abs() < GRAD_NOISE_FLOOR {
                grad[k] = 0.0;
            }
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let step = lr[k] * (m[k] / b1t) / ((v[k] / b2t).sqrt() + cfg.epsilon);
            if step != 0.0 {
                values[k] -= step;
                changed[k] = true;
            }
        }
        unpack_changed(&values, &changed, &mut scene);
        // stored quaternions stay unit
        values = pack(&scene, &cfg.lr, diag).values;
    }

    check_windows(&reports);
    // raw quaternions may cross into w < 0 during optimization
    let scene = canonicalize_scene(&scene)?;
    let final_psnr = targets
        .iter()
        .map(|t| {
            let out = render(
                &scene,
                &t.camera,
                &RenderOptions {
                    background: cfg.background,
                    features: false,
                },
            )?;
            psnr(&out.color, &t.image)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, FitTrace { reports, final_psnr }))
}

fn check_windows(reports: &[LossReport]) {
    const W: usize = 100;
    let means: Vec<f64> = reports
        .chunks(W)
        .filter(|c| c.len() == W)
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / W as f64)
        .collect();
    for (i, pair) in means.windows(2).enumerate() {
        if pair[1] > pair[0] {
            log::warn!(
                "mean loss rose from {:.6} to {:.6} over iterations {}..{}",
                pair[0],
                pair[1],
                (i + 1) * W + 1,
                (i + 2) * W
            );
        }
    }
}

/// Loss used by [`gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Constant,
    Photometric,
    FeatureCosine,
    Depth,
    Contrastive,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LossKind::Constant),
            "photometric" => Ok(LossKind::Photometric),
            "feature-cosine" => Ok(LossKind::FeatureCosine),
            "depth" => Ok(LossKind::Depth),
            "contrastive" => Ok(LossKind::Contrastive),
            _ => Err(Error::invalid(format!("unknown loss {s:?}"))),
        }
    }
}

/// Largest central-difference step (refined once by Richardson extrapolation).
pub const GRADCHECK_STEP: f64 = 1e-4;
/// Pass threshold on the relative error.
pub const GRADCHECK_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, so that two near-zero gradients compare equal.
pub const GRADCHECK_FLOOR: f64 = 1e-5;
const MAX_DRAWS_PER_TRIAL: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub trials: usize,
    /// Parameters compared (at most `trials`).
    pub checked: usize,
    /// Draws rejected because the step crossed a cutoff of the forward pass.
    pub resampled: usize,
    pub failures: usize,
    /// Largest relative error per attribute group.
    pub max_rel_error: BTreeMap<String, f64>,
    pub passed: bool,
}

/// Synthetic supervision for one loss, derived from `seed`.
struct CheckTargets {
    image: Image,
    depth: DepthMap,
    feature: Option<FeatureMap>,
    mask: InstanceMask,
}

fn check_targets(scene: &Scene, cam: &Camera, seed: u64) -> CheckTargets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (w, h, d) = (cam.width, cam.height, scene.feat_dim);
    let n = w * h;
    CheckTargets {
        image: Image::from_data(w, h, (0..n * 3).map(|_| rng.gen::<f64>()).collect()).expect("sized"),
        depth: DepthMap::from_data(w, h, (0..n).map(|_| rng.gen_range(1.0..8.0)).collect()).expect("sized"),
        feature: (d > 0).then(|| {
            FeatureMap::from_data(w, h, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
        }),
        mask: InstanceMask::from_data(w, h, (0..n).map(|_| rng.gen_range(0..4)).collect()).expect("sized"),
    }
}

/// Loss value, a hash of its own non-smooth points, and optionally the scene gradient.
fn check_loss(
    scene: &Scene,
    cam: &Camera,
    kind: LossKind,
    t: &CheckTargets,
    with_grad: bool,
) -> Result<(f64, u64, Option<RenderGrad>)> {
    let features = matches!(kind, LossKind::FeatureCosine | LossKind::Contrastive);
    let opts = RenderOptions {
        background: [0.0; 3],
        features,
    };
    let out = render_unchecked(scene, cam, &opts)?;
    let mut pg = PixelGrad::default();
    let mut kink = 0u64;
    let value = match kind {
        LossKind::Constant => 0.0,
        LossKind::Photometric => {
            let eta = LossConfig::default().eta;
            // L1 is non-smooth where a residual changes sign
            for (i, (r, g)) in out.color.data.iter().zip(&t.image.data).enumerate() {
                if r > g {
                    kink = kink.rotate_left(5) ^ (i as u64 + 1);
                }
            }
            let (v, g) = photometric_loss_with_grad(&out.color, &t.image, eta)?;
            pg.color = Some(g);
            v
        }
        LossKind::Depth => {
            let (v, g) = depth_distill_loss_with_grad(&out.depth, &t.depth, None)?;
            pg.depth = Some(g);
            v
        }
        LossKind::FeatureCosine => {
            let rendered = out.feature.as_ref().expect("features rendered");
            let target = t.feature.as_ref().ok_or_else(|| Error::invalid("scene has no features"))?;
            match feature_cosine_loss_with_grad(rendered, target, None) {
                Ok(r) => {
                    pg.feature = Some(r.grad);
                    r.value
                }
                Err(Error::NoValidFeatures) => 0.0,
                Err(e) => return Err(e),
            }
        }
        LossKind::Contrastive => {
            let rendered = out.feature.as_ref().expect("features rendered");
            let (v, g) = instance_contrastive_loss_with_grad(rendered, &t.mask, LossConfig::default().alpha, Sampling::Full)?;
            pg.feature = Some(g);
            v
        }
    };
    let sig = out.support_signature ^ kink.rotate_left(31);
    if !with_grad {
        return Ok((value, sig, None));
    }
    let (_, grad) = render_with_grad_unchecked(scene, cam, &opts, &pg)?;
    Ok((value, sig, Some(grad)))
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Geo { i: usize, attr: GeoAttr, k: usize },
    Sem { i: usize, attr: SemAttr, k: usize },
}

#[derive(Clone, Copy, Debug)]
enum GeoAttr {
    Mu,
    Scale,
    Rot,
    Opacity,
    Sh,
    Feat,
}

#[derive(Clone, Copy, Debug)]
enum SemAttr {
    Mu,
    Scale,
    Opacity,
    Feat,
}

impl Slot {
    fn group(&self) -> &'static str {
        match self {
            Slot::Geo { attr, .. } => match attr {
                GeoAttr::Mu => "mu",
                GeoAttr::Scale => "scale",
                GeoAttr::Rot => "rot",
                GeoAttr::Opacity => "opacity",
                GeoAttr::Sh => "sh",
                GeoAttr::Feat => "feat",
            },
            Slot::Sem { attr, .. } => match attr {
                SemAttr::Mu => "sem_mu",
                SemAttr::Scale => "sem_scale",
                SemAttr::Opacity => "sem_opacity",
                SemAttr::Feat => "sem_feat",
            },
        }
    }

    fn value_mut<'a>(&self, s: &'a mut Scene) -> &'a mut f64 {
        match *self {
            Slot::Geo { i, attr, k } => {
                let g = &mut s.geo[i];
                match attr {
                    GeoAttr::Mu => &mut g.mu[k],
                    GeoAttr::Scale => &mut g.scale[k],
                    GeoAttr::Rot => &mut g.rot.0[k],
                    GeoAttr::Opacity => &mut g.opacity,
                    GeoAttr::Sh => &mut g.sh[k / 3][k % 3],
                    GeoAttr::Feat => &mut g.feat.as_mut().expect("slot exists")[k],
                }
            }
            Slot::Sem { i, attr, k } => {
                let g = &mut s.sem.as_mut().expect("slot exists")[i];
                match attr {
                    SemAttr::Mu => &mut g.mu[k],
                    SemAttr::Scale => &mut g.scale_iso,
                    SemAttr::Opacity => &mut g.opacity,
                    SemAttr::Feat => &mut g.feat[k],
                }
            }
        }
    }

    fn grad(&self, g: &RenderGrad) -> f64 {
        match *self {
            Slot::Geo { i, attr, k } => {
                let d = &g.geo[i];
                match attr {
                    GeoAttr::Mu => d.mu[k],
                    GeoAttr::Scale => d.scale[k],
                    GeoAttr::Rot => d.rot[k],
                    GeoAttr::Opacity => d.opacity,
                    GeoAttr::Sh => d.sh[k / 3][k % 3],
                    GeoAttr::Feat => d.feat.as_ref().map_or(0.0, |f| f[k]),
                }
            }
            Slot::Sem { i, attr, k } => {
                let d = &g.sem[i];
                match attr {
                    SemAttr::Mu => d.mu[k],
                    SemAttr::Scale => d.scale_iso,
                    SemAttr::Opacity => d.opacity,
                    SemAttr::Feat => d.feat[k],
                }
            }
        }
    }
}

fn slots(scene: &Scene) -> Vec<Slot> {
    let ns = n_sh(scene);
    let mut out = Vec::new();
    for (i, g) in scene.geo.iter().enumerate() {
        let mut add = |attr, n| (0..n).for_each(|k| out.push(Slot::Geo { i, attr, k }));
        add(GeoAttr::Mu, 3);
        add(GeoAttr::Scale, 3);
        add(GeoAttr::Rot, 4);
        add(GeoAttr::Opacity, 1);
        add(GeoAttr::Sh, ns * 3);
        add(GeoAttr::Feat, g.feat.as_ref().map_or(0, Vec::len));
    }
    for (i, s) in scene.sem.iter().flatten().enumerate() {
        let mut add = |attr, n| (0..n).for_each(|k| out.push(Slot::Sem { i, attr, k }));
        add(SemAttr::Mu, 3);
        add(SemAttr::Scale, 1);
        add(SemAttr::Opacity, 1);
        add(SemAttr::Feat, s.feat.len());
    }
    out
}

/// Central difference of the loss along `slot`, or `None` when either side of the
/// step has a different support signature.
fn central(scene: &Scene, cam: &Camera, loss: LossKind, t: &CheckTargets, slot: Slot, h: f64, sig0: u64) -> Result<Option<f64>> {
    let mut plus = scene.clone();
    *slot.value_mut(&mut plus) += h;
    let mut minus = scene.clone();
    *slot.value_mut(&mut minus) -= h;
    let (lp, sp, _) = check_loss(&plus, cam, loss, t, false)?;
    let (lm, sm, _) = check_loss(&minus, cam, loss, t, false)?;
    if sp != sig0 || sm != sig0 {
        return Ok(None);
    }
    Ok(Some((lp - lm) / (2.0 * h)))
}

/// Richardson-extrapolated central difference from steps `h` and `h / 2`.
fn richardson(scene: &Scene, cam: &Camera, loss: LossKind, t: &CheckTargets, slot: Slot, sig0: u64) -> Result<Option<f64>> {
    let h = GRADCHECK_STEP;
    let Some(d1) = central(scene, cam, loss, t, slot, h, sig0)? else {
        return Ok(None);
    };
    let Some(d2) = central(scene, cam, loss, t, slot, h / 2.0, sig0)? else {
        return Ok(None);
    };
    Ok(Some((4.0 * d2 - d1) / 3.0))
}

/// Compares analytic gradients with central differences on `trials` random
/// parameters. A draw whose ±step changes the set of contributing pixels, an active
/// color clamp, or a non-smooth point of the loss is rejected and redrawn, since the
/// forward pass is only piecewise smooth there.
pub fn gradcheck(scene: &Scene, cam: &Camera, loss: LossKind, trials: usize, seed: u64) -> Result<GradcheckReport> {
    scene.validate()?;
    cam.validate()?;
    if scene.len() > 10 {
        return Err(Error::invalid("gradcheck expects at most 10 Gaussians"));
    }
    let t = check_targets(scene, cam, seed);
    let (_, sig0, grad) = check_loss(scene, cam, loss, &t, true)?;
    let grad = grad.expect("gradient requested");
    let all = slots(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        loss,
        trials,
        checked: 0,
        resampled: 0,
        failures: 0,
        max_rel_error: BTreeMap::new(),
        passed: true,
    };
    for _ in 0..trials {
        if all.is_empty() {
            break;
        }
        for _ in 0..MAX_DRAWS_PER_TRIAL {
            let slot = all[rng.gen_range(0..all.len())];
            let Some(numeric) = richardson(scene, cam, loss, &t, slot, sig0)? else {
                report.resampled += 1;
                continue;
            };
            let analytic = slot.grad(&grad);
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRADCHECK_FLOOR);
            let e = report.max_rel_error.entry(slot.group().to_string()).or_insert(0.0);
            *e = e.max(err);
            report.checked += 1;
            if err > GRADCHECK_TOL {
                report.failures += 1;
                log::debug!("{:?}: analytic {analytic} vs numeric {numeric}", slot);
            }
            break;
        }
    }
    report.passed = report.failures == 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gaussian3D, SemanticGaussian};
    use crate::{Quat, Vec3};

    fn cam() -> Camera {
        Camera::identity([30.0, 30.0, 12.0, 11.0], 24, 22)
    }

    fn scene(sem: bool) -> Scene {
        let mut geo = vec![
            Gaussian3D::with_color(Vec3::new(0.1, -0.05, 3.0), Vec3::new(0.4, 0.25, 0.3), Quat::new(0.9, 0.2, -0.1, 0.3), 0.7, [0.6, 0.3, 0.4]),
            Gaussian3D::with_color(Vec3::new(-0.2, 0.1, 3.5), Vec3::new(0.3, 0.5, 0.2), Quat::new(0.8, -0.3, 0.4, 0.1), 0.6, [0.2, 0.7, 0.5]),
        ];
        for g in &mut geo {
            g.rot = g.rot.canonical().unwrap();
            g.feat = Some(vec![0.3, -0.4, 0.5]);
        }
        geo[1].feat = Some(vec![-0.6, 0.2, 0.1]);
        let mut s = Scene::new(geo, 0, 3);
        if sem {
            s.sem = Some(vec![SemanticGaussian {
                mu: Vec3::new(0.0, 0.0, 3.2),
                scale_iso: 0.4,
                opacity: 0.8,
                feat: vec![0.2, 0.9, -0.3],
            }]);
        }
        s
    }

    #[test]
    fn packing_roundtrips() {
        let s = scene(true);
        let p = pack(&s, &LearningRates::default(), 1.0);
        let mut back = s.clone();
        unpack_changed(&p.values, &vec![true; p.values.len()], &mut back);
        for (a, b) in s.geo.iter().zip(&back.geo) {
            assert!((a.mu - b.mu).norm() < 1e-12);
            assert!((a.scale - b.scale).norm() < 1e-12);
            assert!((a.opacity - b.opacity).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iterations_is_an_error() {
        let s = scene(false);
        let img = render(&s, &cam(), &RenderOptions::default()).unwrap().color;
        let cfg = FitConfig {
            iterations: 0,
            ..Default::default()
        };
        let r = fit_scene(&s, &[FitTarget::color_only(cam(), img)], &cfg, &LossConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn exact_init_is_stationary() {
        let s = scene(false);
        let img = render(&s, &cam(), &RenderOptions::default()).unwrap().color;
        let cfg = FitConfig {
            iterations: 5,
            ..Default::default()
        };
        let (out, trace) = fit_scene(&s, &[FitTarget::color_only(cam(), img)], &cfg, &LossConfig::default()).unwrap();
        assert!(trace.reports[0].total.abs() < 1e-6);
        assert_eq!(trace.reports.len(), 5);
        for (a, b) in s.geo.iter().zip(&out.geo) {
            assert!((a.mu - b.mu).norm() < 1e-4);
            assert!((a.opacity - b.opacity).abs() < 1e-4);
        }
    }

    #[test]
    fn gradcheck_passes_on_small_scenes() {
        for (kind, sem) in [
            (LossKind::Constant, false),
            (LossKind::Photometric, false),
            (LossKind::Depth, false),
            (LossKind::FeatureCosine, false),
            (LossKind::FeatureCosine, true),
            (LossKind::Contrastive, true),
        ] {
            let r = gradcheck(&scene(sem), &cam(), kind, 30, 4).unwrap();
            assert!(r.passed, "{kind:?}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn csv_has_one_row_per_iteration() {
        let trace = FitTrace {
            reports: vec![total_loss(&LossComponents::default(), &LossConfig::default()); 3],
            final_psnr: vec![30.0],
        };
        assert_eq!(trace.to_csv().lines().count(), 4);
    }
}
