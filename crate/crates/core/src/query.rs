//! Open-vocabulary relevance queries and query-driven scene edits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::norm;
use crate::maps::ScalarMap;
use crate::model::{Camera, Scene};
use crate::raster::{render, RenderOptions};

/// Which Gaussian set a query's relevance scores refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryTarget {
    Sem,
    Geo,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub target: QueryTarget,
    /// Cosine similarity per Gaussian, clamped to [-1, 1].
    pub relevance: Vec<f64>,
    /// Indices with `relevance >= threshold`, ascending.
    pub selected: Vec<usize>,
    pub threshold: f64,
    #[serde(skip)]
    pub rendered_relevance: Option<ScalarMap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Delete,
    Extract,
}

impl std::str::FromStr for EditOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delete" => Ok(EditOp::Delete),
            "extract" => Ok(EditOp::Extract),
            _ => Err(Error::invalid(format!("unknown edit op {s:?}"))),
        }
    }
}

fn cosine(f: &[f64], q_unit: &[f64]) -> f64 {
    let n = norm(f);
    if n == 0.0 {
        return 0.0;
    }
    let c = f.iter().zip(q_unit).map(|(a, b)| a * b).sum::<f64>() / n;
    c.clamp(-1.0, 1.0)
}

/// Scores every semantic Gaussian (or every geometry Gaussian when the scene has no
/// semantic set) against `query`. With `cam`, also renders the relevance image.
pub fn query_scene(scene: &Scene, query: &[f64], threshold: f64, cam: Option<&Camera>) -> Result<QueryResult> {
    if query.len() != scene.feat_dim {
        return Err(Error::dims(format!("query dim {} vs scene feature dim {}", query.len(), scene.feat_dim)));
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::invalid("query vector must be nonzero and finite"));
    }
    let q: Vec<f64> = query.iter().map(|v| v / qn).collect();
    let (target, relevance): (QueryTarget, Vec<f64>) = match &scene.sem {
        Some(sem) => (QueryTarget::Sem, sem.par_iter().map(|s| cosine(&s.feat, &q)).collect()),
        None if scene.has_geo_features() => (
            QueryTarget::Geo,
            scene.geo.par_iter().map(|g| cosine(g.feat.as_deref().unwrap_or(&[]), &q)).collect(),
        ),
        None => return Err(Error::invalid("scene has neither a semantic set nor geometry features")),
    };
    let selected = (0..relevance.len()).filter(|&i| relevance[i] >= threshold).collect();
    let mut result = QueryResult {
        target,
        relevance,
        selected,
        threshold,
        rendered_relevance: None,
    };
    if let Some(cam) = cam {
        result.rendered_relevance = Some(render_relevance(scene, &result, cam)?);
    }
    Ok(result)
}

/// Composites per-Gaussian relevance with the renderer's feature weights.
pub fn render_relevance(scene: &Scene, result: &QueryResult, cam: &Camera) -> Result<ScalarMap> {
    let mut s = scene.clone();
    s.feat_dim = 1;
    match result.target {
        QueryTarget::Sem => {
            for (g, r) in s.sem.iter_mut().flatten().zip(&result.relevance) {
                g.feat = vec![*r];
            }
            for g in s.geo.iter_mut() {
                g.feat = None;
            }
        }
        QueryTarget::Geo => {
            for (g, r) in s.geo.iter_mut().zip(&result.relevance) {
                g.feat = Some(vec![*r]);
            }
        }
    }
    let out = render(&s, cam, &RenderOptions::with_features())?;
    let fm = out.feature.expect("feature render requested");
    ScalarMap::from_data(fm.width, fm.height, fm.data)
}

/// Index of the semantic Gaussian nearest to each geometry mean (lowest index on ties).
pub fn nearest_semantic(scene: &Scene) -> Vec<Option<usize>> {
    let sem = scene.sem.as_deref().unwrap_or(&[]);
    scene
        .geo
        .par_iter()
        .map(|g| {
            let mut best: Option<(usize, f64)> = None;
            for (j, s) in sem.iter().enumerate() {
                let d = (s.mu - g.mu).norm_squared();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|b| b.0)
        })
        .collect()
}

/// Geometry mask of Gaussians selected by a query, propagated through nearest semantic
/// Gaussians when the scene has a semantic set.
pub fn geo_selection(scene: &Scene, result: &QueryResult) -> Vec<bool> {
    let mut sel = vec![false; result.relevance.len()];
    for &i in &result.selected {
        sel[i] = true;
    }
    match result.target {
        QueryTarget::Geo => sel,
        QueryTarget::Sem => nearest_semantic(scene)
            .into_iter()
            .map(|j| j.is_some_and(|j| sel[j]))
            .collect(),
    }
}

/// Removes (`Delete`) or keeps only (`Extract`) the queried content.
pub fn edit_scene(scene: &Scene, query: &[f64], threshold: f64, op: EditOp) -> Result<Scene> {
    let result = query_scene(scene, query, threshold, None)?;
    let geo_sel = geo_selection(scene, &result);
    let keep = |s: bool| match op {
        EditOp::Delete => !s,
        EditOp::Extract => s,
    };
    let geo: Vec<_> = scene
        .geo
        .iter()
        .zip(&geo_sel)
        .filter(|(_, &s)| keep(s))
        .map(|(g, _)| g.clone())
        .collect();
    if op == EditOp::Extract && geo.is_empty() {
        return Err(Error::EmptyResult);
    }
    let sem = scene.sem.as_ref().map(|sem| {
        let mut sel = vec![false; sem.len()];
        for &i in &result.selected {
            sel[i] = true;
        }
        sem.iter()
            .zip(sel)
            .filter(|(_, s)| keep(*s))
            .map(|(g, _)| g.clone())
            .collect()
    });
    Ok(Scene {
        geo,
        sem,
        sh_degree: scene.sh_degree,
        feat_dim: scene.feat_dim,
    })
}
