//! Reading dataset directories: `cameras.json`, `images/`, `masks/`,
//! `meta.json` and an optional `gt_dem.pfm`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraRecord, FisheyeCamera, PixelMask};
use crate::io::{self, Image, IoError};
use crate::metrics::HeightMap;
use crate::shading::{HapkeParams, SunGeometry};
use crate::simulator::{DescentTrajectory, TerrainSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("camera {index}: {source}")]
    Camera { index: usize, source: CameraError },
    #[error("frame {index}: {what} is {got:?}, camera expects {expected:?}")]
    SizeMismatch { index: usize, what: &'static str, got: (usize, usize), expected: (usize, usize) },
    #[error("dataset has no frames")]
    Empty,
}

/// Scene description stored next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Planar reconstruction region.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// World elevation bounds `[min, max]` of the surface.
    pub height_bounds: [f64; 2],
    /// Elevation of the highest camera; DEM files store `z - datum_height`.
    pub datum_height: f64,
    pub dem_rows: usize,
    pub dem_cols: usize,
    pub dem_cell_size: f64,
    /// Planar center of DEM cell (0, 0).
    pub dem_origin: [f64; 2],
    pub hapke: HapkeParams,
    pub sun: SunGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terrain: Option<TerrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<DescentTrajectory>,
}

impl DatasetMeta {
    /// Converts a map stored in the top-camera datum to world elevations.
    pub fn to_world(&self, map: &HeightMap) -> HeightMap {
        map.map_valid(|h| h + self.datum_height)
    }

    pub fn to_datum(&self, map: &HeightMap) -> HeightMap {
        map.map_valid(|z| z - self.datum_height)
    }

    /// Reads a DEM PFM written in this dataset's layout.
    pub fn read_dem(&self, path: &Path) -> Result<HeightMap, IoError> {
        let img = io::read_pfm(path)?;
        Ok(io::image_to_heightmap(&img, self.dem_cell_size, self.dem_origin))
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub camera: FisheyeCamera,
    /// Linear RGB.
    pub image: Image,
    pub mask: PixelMask,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    pub meta: DatasetMeta,
    /// Ground truth in the top-camera datum, when present.
    pub gt_dem: Option<HeightMap>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let records: Vec<CameraRecord> = io::read_json(&root.join("cameras.json"))?;
        let meta: DatasetMeta = io::read_json(&root.join("meta.json"))?;
        if records.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut frames = Vec::with_capacity(records.len());
        for (index, rec) in records.iter().enumerate() {
            let camera = FisheyeCamera::try_from(rec).map_err(|source| DatasetError::Camera { index, source })?;
            let expected = (camera.width as usize, camera.height as usize);
            let image_path = rec.image.clone().unwrap_or_else(|| format!("images/frame_{index:03}.pfm"));
            let image = io::read_pfm(&root.join(image_path))?;
            if (image.width, image.height) != expected {
                return Err(DatasetError::SizeMismatch { index, what: "image", got: (image.width, image.height), expected });
            }
            let mask_path = rec.mask.clone().unwrap_or_else(|| format!("masks/frame_{index:03}.png"));
            let mask_file = root.join(mask_path);
            let mask = if mask_file.exists() { io::read_mask_png(&mask_file)? } else { camera.circular_mask() };
            let got = (mask.width as usize, mask.height as usize);
            if got != expected {
                return Err(DatasetError::SizeMismatch { index, what: "mask", got, expected });
            }
            frames.push(Frame { camera, image, mask });
        }
        let dem_path = root.join("gt_dem.pfm");
        let gt_dem = if dem_path.exists() { Some(meta.read_dem(&dem_path)?) } else { None };
        Ok(Self { root: root.to_path_buf(), frames, meta, gt_dem })
    }

    pub fn valid_pixel_count(&self) -> usize {
        self.frames.iter().map(|f| f.mask.valid.iter().filter(|&&v| v).count()).sum()
    }

    /// Elevation of the highest camera.
    pub fn top_camera_height(&self) -> f64 {
        self.frames.iter().map(|f| f.camera.translation[2]).fold(f64::NEG_INFINITY, f64::max)
    }
}
