//! On-disk formats. Every write goes to a temporary file in the target directory and is
//! renamed into place.

mod camera;
mod image;
mod ply;
mod tensor;

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use camera::{read_cameras, write_cameras, CameraFile, CameraView};
pub use image::{read_png_color, read_png_scalar, write_png_color, write_png_scalar, ScalarEncoding};
pub use ply::{
    decode_geo, decode_sem, encode_geo, encode_sem, read_geo_ply, read_scene, read_sem_ply, write_geo_ply, write_scene,
    write_sem_ply, ScenePaths, SCENE_COMMENT,
};
pub use tensor::{
    decode_feature_map, decode_instance_mask, decode_point_map, encode_feature_map, encode_instance_mask,
    encode_point_map, read_feature_map, read_instance_mask, read_point_map, write_feature_map, write_instance_mask,
    write_point_map, TENSOR_VERSION,
};

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads a whole file; IO errors name the path.
pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Serializes `value` as pretty JSON and writes it atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(0, format!("{}: {e}", path.display())))
}

/// Query vector: raw little-endian f32 values.
pub fn read_query_vector(path: &Path) -> Result<Vec<f64>> {
    decode_f32s(&read_file(path)?)
}

pub fn write_query_vector(path: &Path, v: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

fn decode_f32s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(
            (bytes.len() - bytes.len() % 4) as u64,
            format!("length {} is not a multiple of 4", bytes.len()),
        ));
    }
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(Error::parse((i * 4) as u64, "non-finite value"))
            }
        })
        .collect()
}

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("unexpected end of data: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// A finite f32, widened.
    pub fn finite(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = self.f32()?;
        if !v.is_finite() {
            return Err(Error::parse(at as u64, "non-finite value"));
        }
        Ok(v as f64)
    }

    /// Fails unless exactly `n` bytes remain.
    pub fn expect_exact(&self, n: usize, what: &str) -> Result<()> {
        if self.remaining() != n {
            return Err(Error::parse(
                self.pos as u64,
                format!("{what}: expected {n} bytes, found {}", self.remaining()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_vector_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.bin");
        write_query_vector(&p, &[1.0, -0.5, 0.25]).unwrap();
        assert_eq!(read_query_vector(&p).unwrap(), vec![1.0, -0.5, 0.25]);
        std::fs::write(&p, [0u8; 5]).unwrap();
        assert!(matches!(read_query_vector(&p), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
