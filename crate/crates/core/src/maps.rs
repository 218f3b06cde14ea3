//! Per-pixel image containers. All are row-major with pixel `(x, y)` at `y * width + x`.

use crate::error::{Error, Result};
use crate::model::Vec3;

/// RGB image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dims(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dims(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Single-channel real image (depth, alpha, relevance).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

pub type DepthMap = ScalarMap;

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        ScalarMap::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        ScalarMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(format!(
                "{} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(ScalarMap { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &ScalarMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dims(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// H x W x D feature image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        FeatureMap {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn from_data(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::dims(format!(
                "feature data has {} values, expected {}",
                data.len(),
                width * height * dim
            )));
        }
        Ok(FeatureMap {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.dim != other.dim {
            return Err(Error::dims(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.dim, other.width, other.height, other.dim
            )));
        }
        Ok(())
    }
}

/// Per-pixel instance (or class) ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize) -> Self {
        InstanceMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(format!(
                "mask has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(InstanceMask { width, height, data })
    }

    /// Sorted distinct nonzero ids.
    pub fn ids(&self) -> Vec<u16> {
        let mut seen = std::collections::BTreeSet::new();
        for &v in &self.data {
            if v != 0 {
                seen.insert(v);
            }
        }
        seen.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

pub type CoverageMask = BinaryMask;

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel world points with validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl PointMap {
    pub fn new(width: usize, height: usize) -> Self {
        PointMap {
            width,
            height,
            points: vec![Vec3::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn valid_points(&self) -> impl Iterator<Item = &Vec3> + '_ {
        self.points
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, &v)| v)
            .map(|(p, _)| p)
    }
}
