//! Reconstruction and segmentation metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::maps::{Image, InstanceMask, ScalarMap};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub use crate::losses::ssim;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub macc: f64,
    /// IoU per ground-truth class id.
    pub per_class_iou: BTreeMap<u16, f64>,
}

/// IoU per ground-truth class and localization accuracy.
///
/// Class ids are the nonzero labels of `gt`. A class counts as localized when the
/// argmax pixel of its relevance map lies inside its ground-truth region; without a
/// relevance map for the class, when any predicted pixel of the class lies inside it.
pub fn segmentation_metrics(
    pred: &InstanceMask,
    gt: &InstanceMask,
    relevance: Option<&BTreeMap<u16, ScalarMap>>,
) -> Result<SegMetrics> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::dims(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let classes = gt.ids();
    if classes.is_empty() {
        return Err(Error::invalid("ground truth has no labeled classes"));
    }
    let mut per_class_iou = BTreeMap::new();
    let mut hits = 0usize;
    for &c in &classes {
        let (mut inter, mut union) = (0usize, 0usize);
        let mut touched = false;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (ip, ig) = (p == c, g == c);
            if ip && ig {
                inter += 1;
                touched = true;
            }
            if ip || ig {
                union += 1;
            }
        }
        per_class_iou.insert(c, inter as f64 / union as f64);
        let located = match relevance.and_then(|r| r.get(&c)) {
            Some(map) => {
                if map.width != gt.width || map.height != gt.height {
                    return Err(Error::dims(format!("relevance map for class {c} has wrong size")));
                }
                // first maximum in raster order
                let mut best = 0;
                for (i, v) in map.data.iter().enumerate() {
                    if *v > map.data[best] {
                        best = i;
                    }
                }
                gt.data[best] == c
            }
            None => touched,
        };
        hits += located as usize;
    }
    let miou = per_class_iou.values().sum::<f64>() / classes.len() as f64;
    Ok(SegMetrics {
        miou,
        macc: hits as f64 / classes.len() as f64,
        per_class_iou,
    })
}
