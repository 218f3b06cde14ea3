//! Multi-view feature aggregation: voxel pooling across views, then per-instance averaging.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{FeatureMap, InstanceMask, PointMap};
use crate::sparsify::{voxel_index, VoxelKey};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub voxel_eps: f64,
    /// Number of voxel-then-instance passes.
    pub rounds: usize,
}

impl AggregationConfig {
    pub fn new(voxel_eps: f64) -> Self {
        AggregationConfig { voxel_eps, rounds: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_eps > 0.0 && self.voxel_eps.is_finite()) {
            return Err(Error::invalid("voxel_eps must be > 0"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be >= 1"));
        }
        Ok(())
    }
}

fn check_aligned(pointmaps: &[PointMap], features: &[FeatureMap], masks: &[InstanceMask]) -> Result<usize> {
    if pointmaps.len() != features.len() || pointmaps.len() != masks.len() {
        return Err(Error::dims(format!(
            "{} point maps, {} feature maps, {} masks",
            pointmaps.len(),
            features.len(),
            masks.len()
        )));
    }
    let dim = features.first().map_or(0, |f| f.dim);
    for (v, ((p, f), m)) in pointmaps.iter().zip(features).zip(masks).enumerate() {
        if p.width != f.width || p.height != f.height || m.width != f.width || m.height != f.height {
            return Err(Error::dims(format!("view {v}: point map, features and mask differ in size")));
        }
        if f.dim != dim {
            return Err(Error::dims(format!("view {v}: feature dim {} vs {dim}", f.dim)));
        }
    }
    Ok(dim)
}

/// Voxel-pools features over all views jointly, writes voxel means back to pixels,
/// then replaces each (view, instance) region by its mean. Background id 0 skips the
/// instance stage; invalid point-map pixels skip the voxel stage.
pub fn aggregate_features(
    pointmaps: &[PointMap],
    features: &[FeatureMap],
    masks: &[InstanceMask],
    cfg: &AggregationConfig,
) -> Result<Vec<FeatureMap>> {
    cfg.validate()?;
    let dim = check_aligned(pointmaps, features, masks)?;
    let keys: Vec<Vec<Option<VoxelKey>>> = pointmaps
        .par_iter()
        .map(|pm| {
            pm.points
                .iter()
                .zip(&pm.valid)
                .map(|(p, &ok)| if ok { voxel_index(p, cfg.voxel_eps).map(Some) } else { Ok(None) })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut out: Vec<FeatureMap> = features.to_vec();
    for _ in 0..cfg.rounds {
        // views and pixels are visited in order, so per-voxel sums are deterministic
        let mut cells: HashMap<VoxelKey, (Vec<f64>, usize)> = HashMap::new();
        for (view, fm) in keys.iter().zip(&out) {
            for (i, key) in view.iter().enumerate() {
                if let Some(key) = key {
                    let e = cells.entry(*key).or_insert_with(|| (vec![0.0; dim], 0));
                    for (s, f) in e.0.iter_mut().zip(fm.at(i)) {
                        *s += f;
                    }
                    e.1 += 1;
                }
            }
        }
        let means: HashMap<VoxelKey, Vec<f64>> = cells
            .into_iter()
            .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();

        out = out
            .into_par_iter()
            .zip(keys.par_iter().zip(masks.par_iter()))
            .map(|(mut fm, (view, mask))| {
                for (i, key) in view.iter().enumerate() {
                    if let Some(key) = key {
                        fm.at_mut(i).copy_from_slice(&means[key]);
                    }
                }
                instance_average(&mut fm, mask);
                fm
            })
            .collect();
    }
    Ok(out)
}

fn instance_average(fm: &mut FeatureMap, mask: &InstanceMask) {
    let dim = fm.dim;
    let mut sums: BTreeMap<u16, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &id) in mask.data.iter().enumerate() {
        if id != 0 {
            let e = sums.entry(id).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, f) in e.0.iter_mut().zip(fm.at(i)) {
                *s += f;
            }
            e.1 += 1;
        }
    }
    let means: BTreeMap<u16, Vec<f64>> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    for (i, &id) in mask.data.iter().enumerate() {
        if id != 0 {
            fm.at_mut(i).copy_from_slice(&means[&id]);
        }
    }
}

/// Paints each instance's feature vector over its mask region; background is zero.
pub fn masks_to_feature_map(mask: &InstanceMask, features: &BTreeMap<u16, Vec<f64>>, dim: usize) -> Result<FeatureMap> {
    for (id, f) in features {
        if f.len() != dim {
            return Err(Error::dims(format!("instance {id} feature has dim {} vs {dim}", f.len())));
        }
    }
    let mut fm = FeatureMap::new(mask.width, mask.height, dim);
    for (i, &id) in mask.data.iter().enumerate() {
        if id != 0 {
            let f = features.get(&id).ok_or(Error::MissingInstance(id))?;
            fm.at_mut(i).copy_from_slice(f);
        }
    }
    Ok(fm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;

    fn pm(points: Vec<Vec3>, w: usize, h: usize) -> PointMap {
        let mut p = PointMap::new(w, h);
        p.points = points;
        p.valid = vec![true; w * h];
        p
    }

    #[test]
    fn distinct_voxels_without_instances_is_identity() {
        let points = (0..6).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let f = FeatureMap::from_data(3, 2, 2, (0..12).map(|v| v as f64).collect()).unwrap();
        let out = aggregate_features(&[pm(points, 3, 2)], &[f.clone()], &[InstanceMask::new(3, 2)], &AggregationConfig::new(0.5)).unwrap();
        assert_eq!(out[0], f);
    }

    #[test]
    fn shared_point_across_views_is_averaged() {
        let a = pm(vec![Vec3::new(1.0, 2.0, 3.0)], 1, 1);
        let b = pm(vec![Vec3::new(1.01, 2.0, 3.0)], 1, 1);
        let fa = FeatureMap::from_data(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let fb = FeatureMap::from_data(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let m = InstanceMask::new(1, 1);
        let out = aggregate_features(&[a, b], &[fa, fb], &[m.clone(), m], &AggregationConfig::new(0.1)).unwrap();
        assert_eq!(out[0].data, vec![0.5, 0.5]);
        assert_eq!(out[1].data, vec![0.5, 0.5]);
    }

    #[test]
    fn instance_region_is_averaged_and_background_kept() {
        let mut p = pm(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(5.0, 0.0, 1.0), Vec3::new(9.0, 0.0, 1.0)], 3, 1);
        p.valid[2] = false;
        let f = FeatureMap::from_data(3, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 3.0, 3.0]).unwrap();
        let m = InstanceMask::from_data(3, 1, vec![4, 4, 0]).unwrap();
        let out = aggregate_features(&[p], &[f], &[m], &AggregationConfig::new(0.5)).unwrap();
        assert_eq!(out[0].data, vec![0.5, 0.5, 0.5, 0.5, 3.0, 3.0]);
    }

    #[test]
    fn misaligned_lists_are_rejected() {
        let f = FeatureMap::new(1, 1, 2);
        let r = aggregate_features(&[], &[f], &[], &AggregationConfig::new(0.1));
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
        let z = AggregationConfig { voxel_eps: 0.1, rounds: 0 };
        assert!(z.validate().is_err());
    }

    #[test]
    fn masks_to_features() {
        let m = InstanceMask::from_data(2, 2, vec![1, 2, 2, 1]).unwrap();
        let mut feats = BTreeMap::new();
        feats.insert(1, vec![1.0, 0.0]);
        feats.insert(2, vec![0.0, 1.0]);
        let fm = masks_to_feature_map(&m, &feats, 2).unwrap();
        assert_eq!(fm.data, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let bg = masks_to_feature_map(&InstanceMask::new(2, 2), &BTreeMap::new(), 3).unwrap();
        assert!(bg.data.iter().all(|&v| v == 0.0));
        feats.remove(&2);
        let err = masks_to_feature_map(&m, &feats, 2).unwrap_err();
        assert!(matches!(err, Error::MissingInstance(2)));
        assert!(err.to_string().contains('2'));
    }
}
