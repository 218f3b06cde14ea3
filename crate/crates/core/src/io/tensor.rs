//! Dense tensor files: a 4-byte magic, a u32 version, u32 dims, then the payload.
//!
//! | kind | magic  | dims        | payload                         |
//! |------|--------|-------------|---------------------------------|
//! | FMAP | `FMAP` | H, W, D     | f32 × H·W·D                     |
//! | PMAP | `PMAP` | H, W        | f32 × H·W·3, then u8 × H·W      |
//! | IMSK | `IMSK` | H, W        | u16 × H·W                       |

use std::path::Path;

use super::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::maps::{FeatureMap, InstanceMask, PointMap};
use crate::model::Vec3;

pub const TENSOR_VERSION: u32 = 1;

fn header(magic: &[u8; 4], dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out
}

fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], n_dims: usize) -> Result<(Reader<'a>, Vec<usize>)> {
    let mut r = Reader::new(bytes);
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::parse(
            0,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(m), String::from_utf8_lossy(magic)),
        ));
    }
    let v = r.u32()?;
    if v != TENSOR_VERSION {
        return Err(Error::parse(4, format!("unsupported version {v}")));
    }
    let dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    Ok((r, dims))
}

fn checked_len(dims: &[usize], unit: usize) -> Result<usize> {
    dims.iter()
        .try_fold(unit, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::parse(8, format!("dims {dims:?} overflow")))
}

pub fn encode_feature_map(m: &FeatureMap) -> Vec<u8> {
    let mut out = header(b"FMAP", &[m.height, m.width, m.dim]);
    out.reserve(m.data.len() * 4);
    for v in &m.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let (mut r, d) = open(bytes, b"FMAP", 3)?;
    let (h, w, dim) = (d[0], d[1], d[2]);
    r.expect_exact(checked_len(&d, 4)?, "FMAP payload")?;
    let data = (0..h * w * dim).map(|_| r.finite()).collect::<Result<Vec<_>>>()?;
    FeatureMap::from_data(w, h, dim, data)
}

pub fn encode_point_map(m: &PointMap) -> Vec<u8> {
    let mut out = header(b"PMAP", &[m.height, m.width]);
    for p in &m.points {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.extend(m.valid.iter().map(|&v| v as u8));
    out
}

pub fn decode_point_map(bytes: &[u8]) -> Result<PointMap> {
    let (mut r, d) = open(bytes, b"PMAP", 2)?;
    let (h, w) = (d[0], d[1]);
    let n = checked_len(&d, 1)?;
    r.expect_exact(checked_len(&d, 13)?, "PMAP payload")?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let p = [r.f32()?, r.f32()?, r.f32()?];
        points.push(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
    }
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let at = r.pos;
        let b = r.take(1)?[0];
        if b > 1 {
            return Err(Error::parse(at as u64, format!("validity byte {b} is not 0 or 1")));
        }
        if b == 1 && !points[i].iter().all(|v| v.is_finite()) {
            return Err(Error::parse((16 + 12 * i) as u64, "valid point is non-finite"));
        }
        valid.push(b == 1);
    }
    Ok(PointMap {
        width: w,
        height: h,
        points,
        valid,
    })
}

pub fn encode_instance_mask(m: &InstanceMask) -> Vec<u8> {
    let mut out = header(b"IMSK", &[m.height, m.width]);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_instance_mask(bytes: &[u8]) -> Result<InstanceMask> {
    let (mut r, d) = open(bytes, b"IMSK", 2)?;
    let (h, w) = (d[0], d[1]);
    r.expect_exact(checked_len(&d, 2)?, "IMSK payload")?;
    let data = (0..h * w)
        .map(|_| r.take(2).map(|b| u16::from_le_bytes([b[0], b[1]])))
        .collect::<Result<Vec<_>>>()?;
    InstanceMask::from_data(w, h, data)
}

fn read_with<T>(path: &Path, f: fn(&[u8]) -> Result<T>) -> Result<T> {
    f(&super::read_file(path)?).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    })
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    read_with(path, decode_feature_map)
}

pub fn write_feature_map(path: &Path, m: &FeatureMap) -> Result<()> {
    write_atomic(path, &encode_feature_map(m))
}

pub fn read_point_map(path: &Path) -> Result<PointMap> {
    read_with(path, decode_point_map)
}

pub fn write_point_map(path: &Path, m: &PointMap) -> Result<()> {
    write_atomic(path, &encode_point_map(m))
}

pub fn read_instance_mask(path: &Path) -> Result<InstanceMask> {
    read_with(path, decode_instance_mask)
}

pub fn write_instance_mask(path: &Path, m: &InstanceMask) -> Result<()> {
    write_atomic(path, &encode_instance_mask(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_roundtrip() {
        let m = FeatureMap::from_data(3, 2, 2, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let bytes = encode_feature_map(&m);
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(decode_feature_map(&bytes).unwrap(), m);
    }

    #[test]
    fn point_map_roundtrip() {
        let mut m = PointMap::new(2, 2);
        m.points[1] = Vec3::new(0.5, -1.0, 2.0);
        m.valid[1] = true;
        m.points[3] = Vec3::new(f64::NAN, 0.0, 0.0);
        let back = decode_point_map(&encode_point_map(&m)).unwrap();
        assert_eq!(back.valid, m.valid);
        assert_eq!(back.points[1], m.points[1]);
    }

    #[test]
    fn instance_mask_roundtrip() {
        let m = InstanceMask::from_data(3, 1, vec![0, 7, 65535]).unwrap();
        assert_eq!(decode_instance_mask(&encode_instance_mask(&m)).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let m = InstanceMask::from_data(3, 1, vec![0, 7, 9]).unwrap();
        let mut bytes = encode_instance_mask(&m);
        bytes[0] = b'J';
        assert!(matches!(decode_instance_mask(&bytes), Err(Error::Parse { offset: 0, .. })));

        let mut bytes = encode_instance_mask(&m);
        bytes[4] = 2;
        assert!(matches!(decode_instance_mask(&bytes), Err(Error::Parse { offset: 4, .. })));

        let bytes = encode_instance_mask(&m);
        let err = decode_instance_mask(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("expected 6 bytes, found 5"), "{err}");

        let mut f = encode_feature_map(&FeatureMap::new(1, 1, 2));
        let n = f.len();
        f[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_feature_map(&f), Err(Error::Parse { offset: 24, .. })));

        let mut p = encode_point_map(&PointMap::new(1, 1));
        let n = p.len();
        p[n - 1] = 3;
        assert!(matches!(decode_point_map(&p), Err(Error::Parse { .. })));
    }
}
