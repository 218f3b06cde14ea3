//! Camera rig JSON:
//! `{"views":[{"intrinsics":[fx,fy,cx,cy],"world_to_cam":[16 row-major],"width":W,"height":H}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::model::Camera;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub intrinsics: [f64; 4],
    pub world_to_cam: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub views: Vec<CameraView>,
}

impl CameraFile {
    pub fn from_cameras(cams: &[Camera]) -> Self {
        CameraFile {
            views: cams
                .iter()
                .map(|c| CameraView {
                    intrinsics: c.intrinsics(),
                    world_to_cam: c.to_matrix().to_vec(),
                    width: c.width,
                    height: c.height,
                })
                .collect(),
        }
    }

    /// Validated cameras. The last matrix row must be `[0, 0, 0, 1]`.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let m: [f64; 16] = v.world_to_cam.as_slice().try_into().map_err(|_| {
                    Error::invalid(format!("view {i}: world_to_cam has {} entries, expected 16", v.world_to_cam.len()))
                })?;
                if m[12..] != [0.0, 0.0, 0.0, 1.0] {
                    return Err(Error::invalid(format!("view {i}: last matrix row must be [0,0,0,1]")));
                }
                let cam = Camera::from_matrix(v.intrinsics, &m, v.width, v.height);
                cam.validate().map_err(|e| Error::invalid(format!("view {i}: {e}")))?;
                Ok(cam)
            })
            .collect()
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    read_json::<CameraFile>(path)?.cameras()
}

pub fn write_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    write_json(path, &CameraFile::from_cameras(cams))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vec3;

    #[test]
    fn roundtrip_is_exact() {
        let cams = vec![
            Camera::identity([50.0, 50.0, 16.0, 12.0], 32, 24),
            Camera::look_at([70.0, 71.0, 32.0, 32.0], Vec3::new(3.0, -1.0, 0.5), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), 64, 64),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cameras.json");
        write_cameras(&p, &cams).unwrap();
        assert_eq!(read_cameras(&p).unwrap(), cams);
    }

    #[test]
    fn malformed_views_are_rejected() {
        let mut f = CameraFile::from_cameras(&[Camera::identity([50.0, 50.0, 16.0, 12.0], 32, 24)]);
        f.views[0].world_to_cam.pop();
        assert!(f.cameras().is_err());
        let mut f = CameraFile::from_cameras(&[Camera::identity([50.0, 50.0, 16.0, 12.0], 32, 24)]);
        f.views[0].world_to_cam[0] = 2.0;
        assert!(f.cameras().is_err());
        let mut f = CameraFile::from_cameras(&[Camera::identity([50.0, 50.0, 16.0, 12.0], 32, 24)]);
        f.views[0].intrinsics[0] = -1.0;
        assert!(f.cameras().is_err());
    }
}
