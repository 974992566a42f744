//! Digital elevation models from fisheye descent imagery with a coupled
//! radiance field and explicit height field.
//!
//! The crate covers the camera model, both scene representations, Hapke
//! shading, volume rendering, the training objectives and loop, DEM metrics
//! and a synthetic descent simulator that produces verifiable datasets.

pub mod camera;
pub mod dataset;
pub mod fields;
pub mod geom;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod render;
pub mod shading;
pub mod simulator;
pub mod tape;
pub mod train;

pub use camera::{CameraError, FisheyeCamera, PixelMask, Ray};
pub use metrics::{HeightMap, MetricsError};
pub use shading::{HapkeParams, SunGeometry};
