//! Pinhole projection, depth back-projection, coverage masks and target-view selection.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, CoverageMask, DepthMap, PointMap};
use crate::model::{Camera, LossConfig, Vec3};

/// Points at or closer than this (camera-space z) are behind the camera.
pub const Z_NEAR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub in_frustum: bool,
}

pub fn project_point(p: &Vec3, cam: &Camera) -> Projection {
    let c = cam.to_camera(p);
    let u = cam.fx * c.x / c.z + cam.cx;
    let v = cam.fy * c.y / c.z + cam.cy;
    let in_frustum = c.z > Z_NEAR
        && u >= 0.0
        && v >= 0.0
        && u < cam.width as f64
        && v < cam.height as f64;
    Projection {
        pixel: [u, v],
        depth: c.z,
        in_frustum,
    }
}

pub fn project_points(points: &[Vec3], cam: &Camera) -> Vec<Projection> {
    points.iter().map(|p| project_point(p, cam)).collect()
}

/// Pixel `(u, v)` at camera depth `d` lifted to world coordinates.
pub fn unproject(u: f64, v: f64, d: f64, cam: &Camera) -> Vec3 {
    let c = Vec3::new(d * (u - cam.cx) / cam.fx, d * (v - cam.cy) / cam.fy, d);
    cam.to_world(&c)
}

/// Lifts every valid pixel of `depth` into world space. Without `valid`, every pixel is valid.
pub fn backproject_depth(depth: &DepthMap, valid: Option<&BinaryMask>, cam: &Camera) -> Result<PointMap> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::dims(format!(
            "depth {}x{} vs camera {}x{}",
            depth.width, depth.height, cam.width, cam.height
        )));
    }
    if let Some(m) = valid {
        if m.width != depth.width || m.height != depth.height {
            return Err(Error::dims("validity mask does not match depth map"));
        }
    }
    let mut out = PointMap::new(depth.width, depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            if !valid.map_or(true, |m| m.data[i]) {
                continue;
            }
            let d = depth.data[i];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-positive depth {d} at valid pixel ({x}, {y})"
                )));
            }
            out.points[i] = unproject(x as f64, y as f64, d, cam);
            out.valid[i] = true;
        }
    }
    Ok(out)
}

/// Splats every valid context point into `mask` as a single nearest pixel. No depth test.
fn splat_into(mask: &mut CoverageMask, pm: &PointMap, cam: &Camera) {
    for p in pm.valid_points() {
        let pr = project_point(p, cam);
        if pr.depth <= Z_NEAR {
            continue;
        }
        // f64::round ties away from zero
        let u = pr.pixel[0].round();
        let v = pr.pixel[1].round();
        if u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64 {
            mask.data[v as usize * cam.width + u as usize] = true;
        }
    }
}

/// One coverage mask per camera from the union of all context point maps.
pub fn coverage_masks(context: &[&PointMap], cams: &[Camera]) -> Result<Vec<CoverageMask>> {
    if context.is_empty() {
        return Err(Error::invalid("coverage needs at least one context point map"));
    }
    for cam in cams {
        cam.validate()?;
    }
    Ok(cams
        .par_iter()
        .map(|cam| {
            let mut mask = BinaryMask::new(cam.width, cam.height);
            for pm in context {
                splat_into(&mut mask, pm, cam);
            }
            mask
        })
        .collect())
}

/// Fraction of set pixels.
pub fn coverage_ratio(mask: &CoverageMask) -> f64 {
    let total = mask.width * mask.height;
    if total == 0 {
        return 0.0;
    }
    mask.count() as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionResult {
    pub coverage: Vec<f64>,
    pub selected: Vec<usize>,
    #[serde(skip)]
    pub masks: Vec<CoverageMask>,
}

/// Views whose coverage by the context point maps strictly exceeds `cfg.tau`.
pub fn select_target_views(
    pointmaps: &[PointMap],
    cams: &[Camera],
    context_indices: &[usize],
    cfg: &LossConfig,
) -> Result<SelectionResult> {
    if pointmaps.len() != cams.len() {
        return Err(Error::dims(format!(
            "{} point maps for {} cameras",
            pointmaps.len(),
            cams.len()
        )));
    }
    if context_indices.is_empty() {
        return Err(Error::invalid("context view list is empty"));
    }
    if let Some(&bad) = context_indices.iter().find(|&&i| i >= cams.len()) {
        return Err(Error::invalid(format!(
            "context index {bad} out of range for {} views",
            cams.len()
        )));
    }
    let mut ctx: Vec<usize> = context_indices.to_vec();
    ctx.sort_unstable();
    ctx.dedup();
    let context: Vec<&PointMap> = ctx.iter().map(|&i| &pointmaps[i]).collect();
    let masks = coverage_masks(&context, cams)?;
    let coverage: Vec<f64> = masks.iter().map(coverage_ratio).collect();
    let selected = coverage
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > cfg.tau)
        .map(|(i, _)| i)
        .collect();
    Ok(SelectionResult {
        coverage,
        selected,
        masks,
    })
}
