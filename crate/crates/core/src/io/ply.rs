//! Binary little-endian PLY for geometry and semantic Gaussian sets.
//!
//! Values are stored in linear space (scale, opacity) rather than the log/logit space
//! of common splat files; the header comment [`SCENE_COMMENT`] marks that convention.

use std::path::{Path, PathBuf};

use super::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::{Gaussian3D, Scene, SemanticGaussian, Vec3};
use crate::quat::Quat;
use crate::sh;

pub const SCENE_COMMENT: &str = "comment fleg_scene 1";

struct Header {
    count: usize,
    props: Vec<String>,
    /// Byte offset of the first vertex.
    data_start: usize,
}

fn header_text(count: usize, props: &[String]) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\n{SCENE_COMMENT}\nelement vertex {count}\n");
    for p in props {
        h.push_str(&format!("property float {p}\n"));
    }
    h.push_str("end_header\n");
    h
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start as u64, "unterminated header line"))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| Error::parse(start as u64, "header is not ASCII"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (at, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(Error::parse(at as u64, "missing 'ply' magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut format_ok = false;
    let mut marked = false;
    loop {
        let (at, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", ..] => return Err(Error::parse(at as u64, format!("unsupported format line '{line}'"))),
            ["comment", ..] => marked |= line.trim() == SCENE_COMMENT,
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::parse(at as u64, "duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| Error::parse(at as u64, format!("bad vertex count '{n}'")))?);
            }
            ["element", ..] => return Err(Error::parse(at as u64, format!("unsupported element '{line}'"))),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(Error::parse(at as u64, "property before element"));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(Error::parse(at as u64, format!("property {name} has type {ty}, expected float")));
                }
                props.push(name.to_string());
            }
            _ => return Err(Error::parse(at as u64, format!("unrecognized header line '{line}'"))),
        }
    }
    if !format_ok {
        return Err(Error::parse(0, "missing binary_little_endian format line"));
    }
    if !marked {
        return Err(Error::parse(0, format!("missing '{SCENE_COMMENT}' header comment")));
    }
    let count = count.ok_or_else(|| Error::parse(pos as u64, "missing vertex element"))?;
    Ok(Header {
        count,
        props,
        data_start: pos,
    })
}

/// Checks the property list against the expected order and returns the payload reader.
fn open_payload<'a>(bytes: &'a [u8], h: &Header, expected: &[String]) -> Result<Reader<'a>> {
    if h.props != expected {
        return Err(Error::parse(
            h.data_start as u64,
            format!("property list {:?} does not match expected {:?}", h.props, expected),
        ));
    }
    let mut r = Reader::new(bytes);
    r.pos = h.data_start;
    let need = h.count * expected.len() * 4;
    r.expect_exact(need, "vertex payload")?;
    Ok(r)
}

fn count_prefixed(props: &[String], prefix: &str) -> usize {
    props.iter().filter(|p| p.starts_with(prefix)).count()
}

fn geo_props(n_sh: usize, feat_dim: usize) -> Vec<String> {
    let mut p: Vec<String> = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    p.extend((0..3).map(|i| format!("f_dc_{i}")));
    p.extend((0..3 * (n_sh - 1)).map(|i| format!("f_rest_{i}")));
    p.push("conf".into());
    p.extend((0..feat_dim).map(|i| format!("feat_{i}")));
    p
}

fn sem_props(feat_dim: usize) -> Vec<String> {
    let mut p: Vec<String> = ["x", "y", "z", "scale_iso", "opacity"].iter().map(|s| s.to_string()).collect();
    p.extend((0..feat_dim).map(|i| format!("feat_{i}")));
    p
}

fn put(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Geometry set bytes. Features are written only when every Gaussian carries them.
pub fn encode_geo(scene: &Scene) -> Vec<u8> {
    let n_sh = sh::coeff_count(scene.sh_degree);
    // an empty geo set still records the dimension
    let with_feat = scene.feat_dim > 0 && scene.geo.iter().all(|g| g.feat.is_some());
    let feat_dim = if with_feat { scene.feat_dim } else { 0 };
    let props = geo_props(n_sh, feat_dim);
    let mut out = header_text(scene.geo.len(), &props).into_bytes();
    for g in &scene.geo {
        g.mu.iter().for_each(|v| put(&mut out, *v));
        g.scale.iter().for_each(|v| put(&mut out, *v));
        g.rot.0.iter().for_each(|v| put(&mut out, *v));
        put(&mut out, g.opacity);
        for ch in 0..3 {
            put(&mut out, g.sh[0][ch]);
        }
        // channel-major rest coefficients
        for ch in 0..3 {
            for l in 1..n_sh {
                put(&mut out, g.sh[l][ch]);
            }
        }
        put(&mut out, g.conf);
        if feat_dim > 0 {
            g.feat.as_deref().unwrap_or(&[]).iter().for_each(|v| put(&mut out, *v));
        }
    }
    out
}

pub fn decode_geo(bytes: &[u8]) -> Result<Scene> {
    let h = parse_header(bytes)?;
    let n_rest = count_prefixed(&h.props, "f_rest_");
    if n_rest % 3 != 0 {
        return Err(Error::parse(h.data_start as u64, format!("{n_rest} f_rest properties is not a multiple of 3")));
    }
    let n_sh = 1 + n_rest / 3;
    let degree = (0..=sh::MAX_DEGREE)
        .find(|&d| sh::coeff_count(d) == n_sh)
        .ok_or_else(|| Error::parse(h.data_start as u64, format!("{n_sh} SH coefficients match no degree <= 3")))?;
    let feat_dim = count_prefixed(&h.props, "feat_");
    let mut r = open_payload(bytes, &h, &geo_props(n_sh, feat_dim))?;
    let mut geo = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let start = r.pos;
        let mu = Vec3::new(r.finite()?, r.finite()?, r.finite()?);
        let scale = Vec3::new(r.finite()?, r.finite()?, r.finite()?);
        let rot = Quat([r.finite()?, r.finite()?, r.finite()?, r.finite()?]);
        let opacity = r.finite()?;
        let mut coeffs = vec![[0.0; 3]; n_sh];
        for c in coeffs[0].iter_mut() {
            *c = r.finite()?;
        }
        for ch in 0..3 {
            for c in coeffs.iter_mut().skip(1) {
                c[ch] = r.finite()?;
            }
        }
        let conf = r.finite()?;
        let feat = if feat_dim > 0 {
            Some((0..feat_dim).map(|_| r.finite()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if !scale.iter().all(|s| *s > 0.0) {
            return Err(Error::parse(start as u64 + 12, "scale must be > 0"));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::parse(start as u64 + 40, "opacity outside [0,1]"));
        }
        geo.push(Gaussian3D {
            mu,
            scale,
            rot,
            opacity,
            sh: coeffs,
            conf,
            feat,
        });
    }
    Ok(Scene::new(geo, degree, feat_dim))
}

pub fn encode_sem(sem: &[SemanticGaussian], feat_dim: usize) -> Vec<u8> {
    let props = sem_props(feat_dim);
    let mut out = header_text(sem.len(), &props).into_bytes();
    for s in sem {
        s.mu.iter().for_each(|v| put(&mut out, *v));
        put(&mut out, s.scale_iso);
        put(&mut out, s.opacity);
        s.feat.iter().for_each(|v| put(&mut out, *v));
    }
    out
}

/// Semantic set and its feature dimension.
pub fn decode_sem(bytes: &[u8]) -> Result<(Vec<SemanticGaussian>, usize)> {
    let h = parse_header(bytes)?;
    let feat_dim = count_prefixed(&h.props, "feat_");
    let mut r = open_payload(bytes, &h, &sem_props(feat_dim))?;
    let mut sem = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let start = r.pos as u64;
        let mu = Vec3::new(r.finite()?, r.finite()?, r.finite()?);
        let scale_iso = r.finite()?;
        let opacity = r.finite()?;
        let feat = (0..feat_dim).map(|_| r.finite()).collect::<Result<Vec<_>>>()?;
        if scale_iso <= 0.0 {
            return Err(Error::parse(start + 12, "scale_iso must be > 0"));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::parse(start + 16, "opacity outside [0,1]"));
        }
        sem.push(SemanticGaussian {
            mu,
            scale_iso,
            opacity,
            feat,
        });
    }
    Ok((sem, feat_dim))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    })
}

pub fn read_geo_ply(path: &Path) -> Result<Scene> {
    with_path(path, decode_geo(&super::read_file(path)?))
}

pub fn write_geo_ply(path: &Path, scene: &Scene) -> Result<()> {
    write_atomic(path, &encode_geo(scene))
}

pub fn read_sem_ply(path: &Path) -> Result<(Vec<SemanticGaussian>, usize)> {
    with_path(path, decode_sem(&super::read_file(path)?))
}

pub fn write_sem_ply(path: &Path, sem: &[SemanticGaussian], feat_dim: usize) -> Result<()> {
    write_atomic(path, &encode_sem(sem, feat_dim))
}

/// Paths of a scene's geometry file and optional semantic companion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenePaths {
    pub geo: PathBuf,
    pub sem: Option<PathBuf>,
}

impl ScenePaths {
    /// `name.geo.ply` pairs with `name.sem.ply`; `sem` is set only if that file exists.
    pub fn from_geo(geo: &Path) -> Self {
        let sem = Self::sem_sibling(geo).filter(|p| p.exists());
        ScenePaths {
            geo: geo.to_path_buf(),
            sem,
        }
    }

    /// The semantic path that pairs with `geo`, whether or not it exists.
    pub fn sem_sibling(geo: &Path) -> Option<PathBuf> {
        let name = geo.file_name()?.to_str()?;
        let stem = name.strip_suffix(".geo.ply")?;
        Some(geo.with_file_name(format!("{stem}.sem.ply")))
    }
}

pub fn read_scene(paths: &ScenePaths) -> Result<Scene> {
    let mut scene = read_geo_ply(&paths.geo)?;
    if let Some(sem_path) = &paths.sem {
        let (sem, d) = read_sem_ply(sem_path)?;
        if scene.has_geo_features() && d != scene.feat_dim {
            return Err(Error::InvalidScene(format!(
                "semantic feature dim {d} differs from geometry feature dim {}",
                scene.feat_dim
            )));
        }
        scene.feat_dim = d;
        scene.sem = Some(sem);
    }
    scene.validate()?;
    Ok(scene)
}

/// Writes the geometry set, and the semantic set when the scene has one and `paths.sem` is set.
pub fn write_scene(paths: &ScenePaths, scene: &Scene) -> Result<()> {
    write_geo_ply(&paths.geo, scene)?;
    if let (Some(sem), Some(p)) = (&scene.sem, &paths.sem) {
        write_sem_ply(p, sem, scene.feat_dim)?;
    }
    Ok(())
}
