//! PNG codecs. Color is 8-bit RGB. Scalar maps (depth, relevance) are 16-bit gray with a
//! JSON sidecar holding the affine decoding `value = offset + scale · code`.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{read_json, write_atomic, write_json};
use crate::error::{Error, Result};
use crate::maps::{Image, ScalarMap};

/// Affine map from 16-bit codes to values. Code 0 with `zero_is_invalid` decodes to NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarEncoding {
    pub offset: f64,
    pub scale: f64,
    pub zero_is_invalid: bool,
}

impl ScalarEncoding {
    /// Depth: code 0 marks missing depth, codes 1..=65535 span `(0, max]`.
    pub fn depth(max: f64) -> Self {
        ScalarEncoding {
            offset: 0.0,
            scale: if max > 0.0 { max / 65535.0 } else { 1.0 },
            zero_is_invalid: true,
        }
    }

    /// Fixed range `[lo, hi]`, e.g. `[-1, 1]` for cosine relevance.
    pub fn range(lo: f64, hi: f64) -> Self {
        ScalarEncoding {
            offset: lo,
            scale: (hi - lo) / 65535.0,
            zero_is_invalid: false,
        }
    }

    fn encode(&self, v: f64) -> u16 {
        if !v.is_finite() {
            return 0;
        }
        let c = ((v - self.offset) / self.scale).round().clamp(0.0, 65535.0) as u16;
        if self.zero_is_invalid {
            c.max(1)
        } else {
            c
        }
    }

    fn decode(&self, c: u16) -> f64 {
        if self.zero_is_invalid && c == 0 {
            f64::NAN
        } else {
            self.offset + self.scale * c as f64
        }
    }
}

/// `depth_0.png` keeps its encoding in `depth_0.json`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn encode_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    img: &ImageBuffer<P, Vec<S>>,
) -> Result<Vec<u8>>
where
    [S]: image::EncodableLayout,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

pub fn write_png_color(path: &Path, img: &Image) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.data.iter().map(|v| to_u8(*v)).collect(),
    )
    .ok_or_else(|| Error::dims("image buffer size"))?;
    write_atomic(path, &encode_png(&buf)?)
}

pub fn read_png_color(path: &Path) -> Result<Image> {
    let rgb = image::load_from_memory(&super::read_file(path)?)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_data(w as usize, h as usize, rgb.into_raw().iter().map(|v| *v as f64 / 255.0).collect())
}

/// Writes the 16-bit PNG and its sidecar.
pub fn write_png_scalar(path: &Path, map: &ScalarMap, enc: ScalarEncoding) -> Result<()> {
    if !(enc.scale > 0.0 && enc.scale.is_finite() && enc.offset.is_finite()) {
        return Err(Error::invalid("scalar encoding needs a positive finite scale"));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        map.width as u32,
        map.height as u32,
        map.data.iter().map(|v| enc.encode(*v)).collect(),
    )
    .ok_or_else(|| Error::dims("scalar buffer size"))?;
    write_json(&sidecar_path(path), &enc)?;
    write_atomic(path, &encode_png(&buf)?)
}

pub fn read_png_scalar(path: &Path) -> Result<ScalarMap> {
    let enc: ScalarEncoding = read_json(&sidecar_path(path))?;
    let gray = image::load_from_memory(&super::read_file(path)?)?.to_luma16();
    let (w, h) = gray.dimensions();
    ScalarMap::from_data(w as usize, h as usize, gray.into_raw().iter().map(|c| enc.decode(*c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let img = Image::from_data(2, 1, vec![0.0, 0.5, 1.0, 0.2, 1.7, -0.3]).unwrap();
        write_png_color(&p, &img).unwrap();
        let back = read_png_color(&p).unwrap();
        let want = [0.0, 128.0 / 255.0, 1.0, 51.0 / 255.0, 1.0, 0.0];
        for (a, b) in back.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_roundtrip_keeps_invalid_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let map = ScalarMap::from_data(3, 1, vec![1.5, f64::NAN, 3.0]).unwrap();
        write_png_scalar(&p, &map, ScalarEncoding::depth(3.0)).unwrap();
        assert!(sidecar_path(&p).exists());
        let back = read_png_scalar(&p).unwrap();
        assert!((back.data[0] - 1.5).abs() <= 3.0 / 65535.0);
        assert!(back.data[1].is_nan());
        assert!((back.data[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_range_encoding() {
        let e = ScalarEncoding::range(-1.0, 1.0);
        assert_eq!(e.encode(-1.0), 0);
        assert_eq!(e.encode(1.0), 65535);
        assert!((e.decode(e.encode(0.3)) - 0.3).abs() <= e.scale);
    }
}
