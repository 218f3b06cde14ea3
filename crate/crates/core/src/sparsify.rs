//! Voxel sparsification with confidence-softmax merging, and the decoupled
//! geometry/semantic hierarchy with moment-matched isotropic semantic splats.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{Gaussian3D, Mat3, Scene, SemanticGaussian, Vec3};
use crate::quat::Quat;
use crate::raster::covariance_3d;

pub type VoxelKey = [i64; 3];

/// Nearest grid cell of `mu` on a grid of edge `eps` anchored at the origin.
/// Ties round away from zero.
pub fn voxel_index(mu: &Vec3, eps: f64) -> Result<VoxelKey> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("voxel size must be > 0, got {eps}")));
    }
    Ok([
        (mu.x / eps).round() as i64,
        (mu.y / eps).round() as i64,
        (mu.z / eps).round() as i64,
    ])
}

/// Occupied cells with their member indices. Cells are ordered by first member,
/// members ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub eps: f64,
    pub cells: Vec<(VoxelKey, Vec<usize>)>,
}

impl VoxelGrid {
    pub fn build<'a>(points: impl IntoIterator<Item = &'a Vec3>, eps: f64) -> Result<Self> {
        let mut lookup: HashMap<VoxelKey, usize> = HashMap::new();
        let mut cells: Vec<(VoxelKey, Vec<usize>)> = Vec::new();
        for (i, p) in points.into_iter().enumerate() {
            let key = voxel_index(p, eps)?;
            let slot = *lookup.entry(key).or_insert_with(|| {
                cells.push((key, Vec::new()));
                cells.len() - 1
            });
            cells[slot].1.push(i);
        }
        Ok(VoxelGrid { eps, cells })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// `exp(conf_i) / sum_j exp(conf_j)`, computed with the max subtracted.
pub fn softmax_weights(confs: &[f64]) -> Vec<f64> {
    let m = confs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = confs.iter().map(|c| (c - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn argmax_conf(members: &[&Gaussian3D]) -> usize {
    let mut best = 0;
    for (i, g) in members.iter().enumerate() {
        if g.conf > members[best].conf {
            best = i;
        }
    }
    best
}

/// Weighted quaternion mean after flipping every member into the hemisphere of
/// `reference`, renormalized and sign-canonical.
fn average_rotation(members: &[&Gaussian3D], weights: &[f64], reference: Quat) -> Quat {
    let mut acc = [0.0; 4];
    for (g, w) in members.iter().zip(weights) {
        let s = if g.rot.dot(&reference) < 0.0 { -1.0 } else { 1.0 };
        for c in 0..4 {
            acc[c] += w * s * g.rot.0[c];
        }
    }
    Quat(acc)
        .canonical()
        .or_else(|_| reference.canonical())
        .unwrap_or(Quat::IDENTITY)
}

fn merge_cell(members: &[&Gaussian3D]) -> Gaussian3D {
    let confs: Vec<f64> = members.iter().map(|g| g.conf).collect();
    let w = softmax_weights(&confs);
    let reference = members[argmax_conf(members)].rot;
    let n_sh = members[0].sh.len();
    let mut mu = Vec3::zeros();
    let mut scale = Vec3::zeros();
    let mut opacity = 0.0;
    let mut conf = 0.0;
    let mut sh = vec![[0.0; 3]; n_sh];
    let with_feat = members.iter().all(|g| g.feat.is_some());
    let mut feat = if with_feat {
        Some(vec![0.0; members[0].feat.as_ref().map_or(0, |f| f.len())])
    } else {
        None
    };
    for (g, &wi) in members.iter().zip(&w) {
        mu += g.mu * wi;
        scale += g.scale * wi;
        opacity += g.opacity * wi;
        conf += g.conf * wi;
        for (acc, c) in sh.iter_mut().zip(&g.sh) {
            for ch in 0..3 {
                acc[ch] += wi * c[ch];
            }
        }
        if let (Some(acc), Some(f)) = (feat.as_mut(), g.feat.as_ref()) {
            for (a, v) in acc.iter_mut().zip(f) {
                *a += wi * v;
            }
        }
    }
    Gaussian3D {
        mu,
        scale,
        rot: average_rotation(members, &w, reference),
        opacity: opacity.clamp(0.0, 1.0),
        sh,
        conf,
        feat,
    }
}

/// One Gaussian per occupied `eps_geo` voxel, every attribute confidence-softmax averaged.
pub fn softmax_merge(scene: &Scene, eps_geo: f64) -> Result<Scene> {
    let grid = VoxelGrid::build(scene.geo.iter().map(|g| &g.mu), eps_geo)?;
    let geo = grid
        .cells
        .iter()
        .map(|(_, idx)| {
            let members: Vec<&Gaussian3D> = idx.iter().map(|&i| &scene.geo[i]).collect();
            merge_cell(&members)
        })
        .collect();
    Ok(Scene {
        geo,
        sem: None,
        sh_degree: scene.sh_degree,
        feat_dim: scene.feat_dim,
    })
}

/// Moment-matched covariance of a weighted Gaussian mixture about `mu_fused`.
/// Members are `(weight, mean, covariance)`.
pub fn fuse_moments(members: &[(f64, Vec3, Mat3)], mu_fused: &Vec3) -> Result<Mat3> {
    let total: f64 = members.iter().map(|m| m.0).sum();
    if !((total - 1.0).abs() <= 1e-6) {
        return Err(Error::invalid(format!("fusion weights sum to {total}, expected 1")));
    }
    let mut cov = Mat3::zeros();
    for (w, mu, c) in members {
        let d = mu - mu_fused;
        cov += (c + d * d.transpose()) * *w;
    }
    Ok(cov)
}

pub fn fuse_covariance(members: &[(f64, &Gaussian3D)], mu_fused: &Vec3) -> Result<Mat3> {
    let m: Vec<(f64, Vec3, Mat3)> = members
        .iter()
        .map(|(w, g)| (*w, g.mu, covariance_3d(g)))
        .collect();
    fuse_moments(&m, mu_fused)
}

/// Trace-preserving isotropic approximation: `sqrt(tr / 3)` and the identity rotation.
pub fn isotropize(cov: &Mat3) -> (f64, Quat) {
    let mut tr = cov.trace();
    if tr < 0.0 {
        log::warn!("negative covariance trace {tr} clamped to 0");
        tr = 0.0;
    }
    ((tr / 3.0).sqrt(), Quat::IDENTITY)
}

/// Default voxel sizes: 1% of the scene diagonal, semantic grid 4x coarser.
pub fn default_eps(scene: &Scene) -> (f64, f64) {
    let diag = scene.diagonal();
    let geo = if diag > 0.0 { 0.01 * diag } else { 1e-3 };
    (geo, 4.0 * geo)
}

/// Geometry set merged at `eps_geo` with features stripped, plus a semantic set with
/// one isotropic Gaussian per occupied `eps_sem` voxel.
pub fn hierarchical_sparsify(scene: &Scene, eps_geo: f64, eps_sem: f64) -> Result<Scene> {
    if !(eps_geo > 0.0) {
        return Err(Error::invalid(format!("eps_geo must be > 0, got {eps_geo}")));
    }
    if !(eps_sem >= eps_geo) {
        return Err(Error::invalid(format!(
            "eps_sem ({eps_sem}) must be at least eps_geo ({eps_geo})"
        )));
    }
    if !scene.geo.is_empty() && !scene.has_geo_features() {
        return Err(Error::InvalidScene(
            "hierarchical sparsification needs a feature on every Gaussian".into(),
        ));
    }
    let merged = softmax_merge(scene, eps_geo)?;
    let grid = VoxelGrid::build(merged.geo.iter().map(|g| &g.mu), eps_sem)?;
    let mut sem = Vec::with_capacity(grid.len());
    for (_, idx) in &grid.cells {
        let members: Vec<&Gaussian3D> = idx.iter().map(|&i| &merged.geo[i]).collect();
        let confs: Vec<f64> = members.iter().map(|g| g.conf).collect();
        let w = softmax_weights(&confs);
        let mut mu = Vec3::zeros();
        let mut opacity = 0.0;
        let mut feat = vec![0.0; scene.feat_dim];
        for (g, &wi) in members.iter().zip(&w) {
            mu += g.mu * wi;
            opacity += g.opacity * wi;
            for (a, v) in feat.iter_mut().zip(g.feat.as_deref().unwrap_or(&[])) {
                *a += wi * v;
            }
        }
        let weighted: Vec<(f64, &Gaussian3D)> = w.iter().cloned().zip(members.iter().cloned()).collect();
        let cov = fuse_covariance(&weighted, &mu)?;
        let (scale_iso, _) = isotropize(&cov);
        sem.push(SemanticGaussian {
            mu,
            scale_iso,
            opacity: opacity.clamp(0.0, 1.0),
            feat,
        });
    }
    let geo = merged
        .geo
        .into_iter()
        .map(|g| Gaussian3D { feat: None, ..g })
        .collect();
    Ok(Scene {
        geo,
        sem: Some(sem),
        sh_degree: scene.sh_degree,
        feat_dim: scene.feat_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: [f64; 3], conf: f64, color: [f64; 3]) -> Gaussian3D {
        let mut g = Gaussian3D::with_color(Vec3::from(mu), Vec3::new(0.1, 0.1, 0.1), Quat::IDENTITY, 0.5, color);
        g.conf = conf;
        g
    }

    #[test]
    fn voxel_index_rounds_half_away_from_zero() {
        assert_eq!(voxel_index(&Vec3::new(0.26, 0.0, -0.1), 0.5).unwrap(), [1, 0, 0]);
        assert_eq!(voxel_index(&Vec3::zeros(), 0.37).unwrap(), [0, 0, 0]);
        assert_eq!(voxel_index(&Vec3::new(0.25, -0.25, 0.75), 0.5).unwrap(), [1, -1, 2]);
        assert!(voxel_index(&Vec3::zeros(), 0.0).is_err());
        assert!(voxel_index(&Vec3::zeros(), -1.0).is_err());
    }

    #[test]
    fn equal_confidence_averages_colors() {
        let s = Scene::new(vec![g([0.0; 3], 0.0, [1.0, 0.0, 0.0]), g([0.01, 0.0, 0.0], 0.0, [0.0, 0.0, 1.0])], 0, 4);
        let m = softmax_merge(&s, 0.5).unwrap();
        assert_eq!(m.geo.len(), 1);
        let c = m.geo[0].base_color();
        assert!((c[0] - 0.5).abs() < 1e-12 && c[1].abs() < 1e-12 && (c[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn confidence_ln3_weights_three_to_one() {
        let s = Scene::new(
            vec![g([0.1, 0.0, 0.0], 3f64.ln(), [0.5; 3]), g([-0.1, 0.2, 0.0], 0.0, [0.5; 3])],
            0,
            4,
        );
        assert!((softmax_weights(&[3f64.ln(), 0.0])[0] - 0.75).abs() < 1e-15);
        let m = softmax_merge(&s, 1.0).unwrap();
        let want = Vec3::new(0.1, 0.0, 0.0) * 0.75 + Vec3::new(-0.1, 0.2, 0.0) * 0.25;
        assert!((m.geo[0].mu - want).norm() < 1e-15);
    }

    #[test]
    fn singleton_cells_pass_through() {
        let mut a = g([0.0; 3], 0.3, [0.2, 0.3, 0.4]);
        a.rot = Quat::new(-2.0, 0.0, 0.0, 0.0);
        let b = g([1.0, 0.0, 0.0], -1.0, [0.7, 0.1, 0.9]);
        let s = Scene::new(vec![a.clone(), b.clone()], 0, 4);
        let m = softmax_merge(&s, 0.1).unwrap();
        assert_eq!(m.geo[0], crate::model::canonicalize(&a).unwrap());
        assert_eq!(m.geo[1], b);
    }

    #[test]
    fn antipodal_rotations_do_not_cancel() {
        let q = Quat::new(0.6, 0.8, 0.0, 0.0);
        let mut a = g([0.0; 3], 1.0, [0.5; 3]);
        a.rot = q;
        let mut b = g([0.0; 3], 0.0, [0.5; 3]);
        b.rot = Quat(q.0.map(|c| -c));
        let m = softmax_merge(&Scene::new(vec![a, b], 0, 4), 1.0).unwrap();
        assert!((m.geo[0].rot.dot(&q).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_member_fusion_is_its_covariance() {
        let a = g([0.3, 0.0, 0.0], 0.0, [0.5; 3]);
        let c = fuse_covariance(&[(1.0, &a)], &a.mu).unwrap();
        assert!((c - Mat3::identity() * 0.01).norm() < 1e-15);
    }

    #[test]
    fn two_member_fusion_adds_spread() {
        let m = [
            (0.5, Vec3::new(1.0, 0.0, 0.0), Mat3::identity()),
            (0.5, Vec3::new(-1.0, 0.0, 0.0), Mat3::identity()),
        ];
        let c = fuse_moments(&m, &Vec3::zeros()).unwrap();
        assert_eq!(c, Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0)));
        let (s, r) = isotropize(&c);
        assert!((s - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r, Quat::IDENTITY);
    }

    #[test]
    fn fusion_rejects_unnormalized_weights() {
        let m = [(0.7, Vec3::zeros(), Mat3::identity())];
        assert!(fuse_moments(&m, &Vec3::zeros()).is_err());
    }

    #[test]
    fn isotropize_examples() {
        assert!((isotropize(&(Mat3::identity() * 0.09)).0 - 0.3).abs() < 1e-15);
        let (s, _) = isotropize(&Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)));
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(isotropize(&(Mat3::identity() * -1.0)).0, 0.0);
    }

    #[test]
    fn one_semantic_voxel_averages_features() {
        let mut a = g([0.0; 3], 0.0, [0.5; 3]);
        a.feat = Some(vec![1.0, 0.0]);
        let mut b = g([0.3, 0.0, 0.0], 3f64.ln(), [0.5; 3]);
        b.feat = Some(vec![0.0, 1.0]);
        let s = Scene::new(vec![a, b], 0, 2);
        let h = hierarchical_sparsify(&s, 0.1, 10.0).unwrap();
        assert_eq!(h.geo.len(), 2);
        assert!(h.geo.iter().all(|g| g.feat.is_none()));
        let sem = h.sem.unwrap();
        assert_eq!(sem.len(), 1);
        assert!((sem[0].feat[0] - 0.25).abs() < 1e-15 && (sem[0].feat[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn hierarchy_requires_features_and_ordered_eps() {
        let s = Scene::new(vec![g([0.0; 3], 0.0, [0.5; 3])], 0, 2);
        assert!(hierarchical_sparsify(&s, 0.1, 0.2).is_err());
        let mut f = s.clone();
        f.geo[0].feat = Some(vec![1.0, 0.0]);
        assert!(hierarchical_sparsify(&f, 0.2, 0.1).is_err());
        assert_eq!(hierarchical_sparsify(&f, 0.1, 0.1).unwrap().sem.unwrap().len(), 1);
    }

    #[test]
    fn empty_scene_stays_empty() {
        let m = softmax_merge(&Scene::empty(4), 0.1).unwrap();
        assert!(m.geo.is_empty());
        let h = hierarchical_sparsify(&Scene::empty(4), 0.1, 0.4).unwrap();
        assert!(h.sem.unwrap().is_empty());
    }
}
