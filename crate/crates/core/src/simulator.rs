//! Synthetic descent datasets: analytic terrains, fisheye ground-truth
//! renders with Hapke shading, and degraded pseudo-MVS elevation maps.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraRecord, FisheyeCamera, PixelMask};
use crate::dataset::DatasetMeta;
use crate::geom::{self, Vec3};
use crate::io::{self, Image, IoError};
use crate::metrics::HeightMap;
use crate::shading::{hapke_terms, HapkeParams, SunGeometry};

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("invalid terrain: {0}")]
    Terrain(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crater {
    pub center: [f64; 2],
    /// Gaussian standard deviation.
    pub radius: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerrainKind {
    Flat,
    /// Gaussian bowls combined so the surface stays within `[-amplitude, 0]`.
    /// Explicit `craters` take precedence over random generation.
    GaussianCraters {
        #[serde(default = "default_crater_count")]
        count: usize,
        #[serde(default = "default_radius_range")]
        radius_range: [f64; 2],
        #[serde(default)]
        craters: Vec<Crater>,
    },
    /// `amplitude * sin(2 pi x / wavelength[0])`, times `sin(2 pi y / wavelength[1])` when given.
    Sinusoid {
        wavelength: [f64; 2],
        #[serde(default)]
        two_dimensional: bool,
    },
    /// Smooth lattice value noise, normalized so the octave sum stays within the amplitude.
    ValueNoise {
        #[serde(default = "default_octaves")]
        octaves: u32,
        base_wavelength: f64,
    },
}

fn default_crater_count() -> usize {
    8
}

fn default_radius_range() -> [f64; 2] {
    [4.0, 12.0]
}

fn default_octaves() -> u32 {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlbedoSpec {
    Constant {
        rgb: [f64; 3],
    },
    /// `rgb * (1 + variation * noise(x, y))`, noise in `[-1, 1]`.
    Procedural {
        rgb: [f64; 3],
        variation: f64,
        wavelength: f64,
    },
}

impl Default for AlbedoSpec {
    fn default() -> Self {
        Self::Procedural { rgb: [0.6, 0.58, 0.55], variation: 0.4, wavelength: 6.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    #[serde(flatten)]
    pub kind: TerrainKind,
    pub amplitude: f64,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub albedo: AlbedoSpec,
}

/// A terrain ready for evaluation (random features drawn once from the seed).
#[derive(Clone, Debug)]
pub struct Terrain {
    pub spec: TerrainSpec,
    craters: Vec<Crater>,
}

fn hash2(ix: i64, iy: i64, salt: u64) -> f64 {
    let mut z = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ salt.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn quintic(t: f64) -> (f64, f64) {
    (t * t * t * (t * (t * 6.0 - 15.0) + 10.0), 30.0 * t * t * (t * (t - 2.0) + 1.0))
}

/// Value noise in `[-1, 1]` with its gradient, lattice spacing `wavelength`.
fn value_noise(x: f64, y: f64, wavelength: f64, salt: u64) -> (f64, [f64; 2]) {
    let (gx, gy) = (x / wavelength, y / wavelength);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash2(ix, iy, salt);
    let v10 = hash2(ix + 1, iy, salt);
    let v01 = hash2(ix, iy + 1, salt);
    let v11 = hash2(ix + 1, iy + 1, salt);
    let (sx, dsx) = quintic(fx);
    let (sy, dsy) = quintic(fy);
    let a = v00 + sx * (v10 - v00);
    let b = v01 + sx * (v11 - v01);
    let value = a + sy * (b - a);
    let dx = dsx * ((v10 - v00) + sy * ((v11 - v01) - (v10 - v00))) / wavelength;
    let dy = dsy * (b - a) / wavelength;
    (value, [dx, dy])
}

impl Terrain {
    pub fn new(spec: TerrainSpec) -> Result<Self, SimulatorError> {
        if !(spec.amplitude >= 0.0) || spec.x_range[0] >= spec.x_range[1] || spec.y_range[0] >= spec.y_range[1] {
            return Err(SimulatorError::Terrain("amplitude must be >= 0 and ranges increasing".into()));
        }
        let mut craters = Vec::new();
        if let TerrainKind::GaussianCraters { count, radius_range, craters: explicit } = &spec.kind {
            if !explicit.is_empty() {
                craters = explicit.clone();
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                for _ in 0..*count {
                    let cx = rng.random_range(spec.x_range[0]..spec.x_range[1]);
                    let cy = rng.random_range(spec.y_range[0]..spec.y_range[1]);
                    let radius = rng.random_range(radius_range[0]..=radius_range[1]);
                    let depth = spec.amplitude * rng.random_range(0.4..=1.0);
                    craters.push(Crater { center: [cx, cy], radius, depth });
                }
            }
            if craters.iter().any(|c| c.depth > spec.amplitude || c.depth < 0.0 || c.radius <= 0.0) {
                return Err(SimulatorError::Terrain("crater depth must lie in [0, amplitude] and radius > 0".into()));
            }
        }
        Ok(Self { spec, craters })
    }

    pub fn craters(&self) -> &[Crater] {
        &self.craters
    }

    /// Height and its gradient `(dh/dx, dh/dy)`.
    pub fn height_and_gradient(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let a = self.spec.amplitude;
        match &self.spec.kind {
            TerrainKind::Flat => (0.0, [0.0, 0.0]),
            TerrainKind::GaussianCraters { .. } => {
                if a == 0.0 {
                    return (0.0, [0.0, 0.0]);
                }
                // h = -A (1 - prod_i (1 - d_i/A g_i))
                let mut prod = 1.0;
                let mut dlog = [0.0, 0.0];
                let mut zero_factor = false;
                let mut grad_if_zero = [0.0, 0.0];
                for c in &self.craters {
                    let (dx, dy) = (x - c.center[0], y - c.center[1]);
                    let s2 = c.radius * c.radius;
                    let g = (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
                    let f = 1.0 - c.depth / a * g;
                    // df/dx = -d/A g * (-dx / s2)
                    let dfx = c.depth / a * g * dx / s2;
                    let dfy = c.depth / a * g * dy / s2;
                    if f <= 0.0 {
                        zero_factor = true;
                        grad_if_zero = [dfx, dfy];
                        continue;
                    }
                    prod *= f;
                    dlog[0] += dfx / f;
                    dlog[1] += dfy / f;
                }
                if zero_factor {
                    // Exactly at a full-depth crater center: the other factors multiply the zero's slope.
                    return (-a, [a * prod * grad_if_zero[0], a * prod * grad_if_zero[1]]);
                }
                (-a * (1.0 - prod), [a * prod * dlog[0], a * prod * dlog[1]])
            }
            TerrainKind::Sinusoid { wavelength, two_dimensional } => {
                let k = std::f64::consts::TAU;
                let (sx, cx) = (k * x / wavelength[0]).sin_cos();
                if *two_dimensional {
                    let (sy, cy) = (k * y / wavelength[1]).sin_cos();
                    (a * sx * sy, [a * k / wavelength[0] * cx * sy, a * k / wavelength[1] * sx * cy])
                } else {
                    (a * sx, [a * k / wavelength[0] * cx, 0.0])
                }
            }
            TerrainKind::ValueNoise { octaves, base_wavelength } => {
                let mut h = 0.0;
                let mut g = [0.0, 0.0];
                let mut weight = 1.0;
                let mut norm = 0.0;
                for o in 0..*octaves {
                    let (v, d) = value_noise(x, y, base_wavelength / (1u64 << o) as f64, self.spec.seed.wrapping_add(o as u64));
                    h += weight * v;
                    g[0] += weight * d[0];
                    g[1] += weight * d[1];
                    norm += weight;
                    weight *= 0.5;
                }
                let s = if norm > 0.0 { a / norm } else { 0.0 };
                (h * s, [g[0] * s, g[1] * s])
            }
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.height_and_gradient(x, y).0
    }

    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (_, [gx, gy]) = self.height_and_gradient(x, y);
        geom::normalize([-gx, -gy, 1.0])
    }

    pub fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        match &self.spec.albedo {
            AlbedoSpec::Constant { rgb } => *rgb,
            AlbedoSpec::Procedural { rgb, variation, wavelength } => {
                let (n, _) = value_noise(x, y, *wavelength, self.spec.seed ^ 0xA1BE_D0);
                let (n2, _) = value_noise(x, y, wavelength / 3.0, self.spec.seed ^ 0xA1BE_D1);
                let m = 1.0 + variation * (0.7 * n + 0.3 * n2);
                rgb.map(|c| (c * m).clamp(0.0, 1.0))
            }
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let s = &self.spec;
        x >= s.x_range[0] && x <= s.x_range[1] && y >= s.y_range[0] && y <= s.y_range[1]
    }

    /// Bounds `[min, max]` of the surface elevation.
    pub fn height_bounds(&self) -> [f64; 2] {
        let a = self.spec.amplitude;
        match self.spec.kind {
            TerrainKind::Flat => [0.0, 0.0],
            TerrainKind::GaussianCraters { .. } => [-a, 0.0],
            _ => [-a, a],
        }
    }

    pub fn max_height(&self) -> f64 {
        self.height_bounds()[1]
    }

    /// Step used when marching rays: a 512th of the smaller planar extent.
    pub fn march_step(&self) -> f64 {
        let s = &self.spec;
        (s.x_range[1] - s.x_range[0]).min(s.y_range[1] - s.y_range[0]) / 512.0
    }

    /// Exact elevations at the cell centers of a `rows x cols` partition of the extent.
    pub fn heightmap(&self, rows: usize, cols: usize) -> HeightMap {
        let s = &self.spec;
        let cell = (s.x_range[1] - s.x_range[0]) / cols as f64;
        let cell_y = (s.y_range[1] - s.y_range[0]) / rows as f64;
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(self.height(s.x_range[0] + (c as f64 + 0.5) * cell, s.y_range[0] + (r as f64 + 0.5) * cell_y));
            }
        }
        HeightMap::new(rows, cols, cell, [s.x_range[0] + 0.5 * cell, s.y_range[0] + 0.5 * cell_y], values)
    }

    /// First intersection of `origin + t dir` with the surface: march with
    /// steps of `min(cell, clearance / 4)`, then refine by 30 bisections.
    pub fn intersect(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<f64> {
        let cell = self.march_step();
        let min_step = cell * 1e-3;
        let clearance = |t: f64| {
            let p = geom::add(origin, geom::scale(dir, t));
            p[2] - self.height(p[0], p[1])
        };
        let mut t0 = 0.0;
        let mut c0 = clearance(0.0);
        if c0 <= 0.0 {
            return None;
        }
        while t0 < t_max {
            let step = (0.25 * c0).clamp(min_step, cell);
            let t1 = (t0 + step).min(t_max);
            let c1 = clearance(t1);
            if c1 <= 0.0 {
                let (mut lo, mut hi) = (t0, t1);
                for _ in 0..30 {
                    let mid = 0.5 * (lo + hi);
                    if clearance(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            if t1 >= t_max {
                break;
            }
            // Rays that climb above the highest surface never come back down.
            if dir[2] >= 0.0 && origin[2] + t1 * dir[2] > self.max_height() {
                return None;
            }
            t0 = t1;
            c0 = c1;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    /// Full field of view in degrees.
    pub fov_deg: f64,
    #[serde(default)]
    pub dist: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentTrajectory {
    pub n_frames: usize,
    pub start_altitude: f64,
    pub end_altitude: f64,
    /// Planar offset of the first frame from the target; later frames move linearly onto it.
    #[serde(default)]
    pub lateral_drift: [f64; 2],
    /// Point the cameras look at (optical axes pass through it unless `nadir`).
    #[serde(default)]
    pub look_at: Vec3,
    /// Point the optical axis straight down instead of at `look_at`.
    #[serde(default)]
    pub nadir: bool,
    pub camera: CameraIntrinsics,
}

impl DescentTrajectory {
    /// Camera centers and world-from-camera rotations, highest first.
    pub fn cameras(&self) -> Result<Vec<FisheyeCamera>, SimulatorError> {
        if self.n_frames == 0 {
            return Err(SimulatorError::Trajectory("need at least one frame".into()));
        }
        if self.n_frames > 1 && self.end_altitude >= self.start_altitude {
            return Err(SimulatorError::Trajectory("altitudes must strictly decrease".into()));
        }
        let cam = &self.camera;
        let theta_max = (0.5 * cam.fov_deg).to_radians();
        let radius = 0.5 * cam.width.min(cam.height) as f64;
        let mut tmp = FisheyeCamera {
            fx: 1.0,
            fy: 1.0,
            cx: 0.5 * cam.width as f64,
            cy: 0.5 * cam.height as f64,
            dist: cam.dist,
            width: cam.width,
            height: cam.height,
            rotation: geom::IDENTITY,
            translation: [0.0; 3],
            theta_max,
        };
        // Focal length so theta_max lands on the inscribed circle.
        let f = radius / tmp.distort(theta_max);
        tmp.fx = f;
        tmp.fy = f;
        let mut out = Vec::with_capacity(self.n_frames);
        for i in 0..self.n_frames {
            let s = if self.n_frames == 1 { 0.0 } else { i as f64 / (self.n_frames - 1) as f64 };
            let alt = self.start_altitude + s * (self.end_altitude - self.start_altitude);
            let pos = [self.look_at[0] + self.lateral_drift[0] * (1.0 - s), self.look_at[1] + self.lateral_drift[1] * (1.0 - s), alt];
            let z = if self.nadir { [0.0, 0.0, -1.0] } else { geom::normalize(geom::sub(self.look_at, pos)) };
            let ex = [1.0, 0.0, 0.0];
            let x = geom::normalize(geom::sub(ex, geom::scale(z, geom::dot(ex, z))));
            let y = geom::cross(z, x);
            let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
            let mut c = tmp.clone();
            c.rotation = rotation;
            c.translation = pos;
            c.validate()?;
            out.push(c);
        }
        Ok(out)
    }
}

/// Rendered frame: linear RGB, ray-length depth (NaN where no surface) and validity mask.
#[derive(Clone, Debug)]
pub struct Frame {
    pub rgb: Image,
    pub depth: Image,
    pub mask: PixelMask,
}

/// Ground-truth render. Pixels outside the lens circle, without an
/// intersection, or whose intersection falls outside the terrain extent are
/// black, have NaN depth and are masked out.
pub fn render_gt_image(cam: &FisheyeCamera, terrain: &Terrain, hapke: &HapkeParams, sun: &SunGeometry) -> Frame {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let lens = cam.circular_mask();
    let extent = (terrain.spec.x_range[1] - terrain.spec.x_range[0]).max(terrain.spec.y_range[1] - terrain.spec.y_range[0]);
    let t_max = 10.0 * (cam.translation[2] + terrain.spec.amplitude + extent);
    let rows: Vec<Vec<([f32; 3], f32, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    if !lens.is_valid(x as u32, y as u32) {
                        return ([0.0; 3], f32::NAN, false);
                    }
                    let Ok(ray) = cam.pixel_to_ray(x as f64 + 0.5, y as f64 + 0.5) else {
                        return ([0.0; 3], f32::NAN, false);
                    };
                    let Some(t) = terrain.intersect(ray.origin, ray.direction, t_max) else {
                        return ([0.0; 3], f32::NAN, false);
                    };
                    let p = ray.at(t);
                    if !terrain.contains(p[0], p[1]) {
                        return ([0.0; 3], f32::NAN, false);
                    }
                    let n = terrain.normal(p[0], p[1]);
                    let light = hapke_terms(hapke, sun.dir, sun.intensity, n, ray.direction).value;
                    let a = terrain.albedo(p[0], p[1]);
                    ([(a[0] * light) as f32, (a[1] * light) as f32, (a[2] * light) as f32], t as f32, true)
                })
                .collect()
        })
        .collect();
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut valid = Vec::with_capacity(w * h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d, ok)) in row.into_iter().enumerate() {
            rgb.pixel_mut(x, y).copy_from_slice(&c);
            depth.pixel_mut(x, y)[0] = d;
            valid.push(ok);
        }
    }
    Frame { rgb, depth, mask: PixelMask { width: cam.width, height: cam.height, valid } }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLighting {
    #[serde(default)]
    pub hapke: HapkeParams,
    pub sun: SunGeometry,
}

impl Default for SceneLighting {
    fn default() -> Self {
        let sun = SunGeometry::from_angles(0.8, 30f64.to_radians(), 1.0).expect("unit sun direction");
        Self { hapke: HapkeParams::default(), sun }
    }
}

/// Terrain description with optional lighting, as stored in scene files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    #[serde(flatten)]
    pub terrain: TerrainSpec,
    #[serde(default)]
    pub lighting: SceneLighting,
}

pub const DEM_RESOLUTION: usize = 256;

/// Renders every frame and writes the dataset directory.
pub fn emit_dataset(
    terrain: &Terrain,
    trajectory: &DescentTrajectory,
    hapke: &HapkeParams,
    sun: &SunGeometry,
    out_dir: &Path,
) -> Result<DatasetMeta, SimulatorError> {
    let cams = trajectory.cameras()?;
    if let Some(c) = cams.iter().find(|c| c.translation[2] <= terrain.max_height()) {
        return Err(SimulatorError::Trajectory(format!("camera at z = {} is not above the terrain", c.translation[2])));
    }
    for sub in ["images", "masks", "depth"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| IoError::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(cams.len());
    for (i, cam) in cams.iter().enumerate() {
        let frame = render_gt_image(cam, terrain, hapke, sun);
        let stem = format!("frame_{i:03}");
        let image = format!("images/{stem}.pfm");
        let mask = format!("masks/{stem}.png");
        io::write_pfm(&out_dir.join(&image), &frame.rgb)?;
        io::write_preview_png(&out_dir.join(format!("images/{stem}.png")), &frame.rgb)?;
        io::write_mask_png(&out_dir.join(&mask), &frame.mask)?;
        io::write_pfm(&out_dir.join(format!("depth/{stem}.pfm")), &frame.depth)?;
        let mut rec = CameraRecord::from(cam);
        rec.image = Some(image);
        rec.mask = Some(mask);
        records.push(rec);
    }
    io::write_json(&out_dir.join("cameras.json"), &records)?;
    let datum = cams.iter().map(|c| c.translation[2]).fold(f64::NEG_INFINITY, f64::max);
    let dem = terrain.heightmap(DEM_RESOLUTION, DEM_RESOLUTION).map_valid(|z| z - datum);
    io::write_heightmap_pfm(&out_dir.join("gt_dem.pfm"), &dem)?;
    io::write_heightmap_png(&out_dir.join("gt_dem.png"), &dem)?;
    let meta = DatasetMeta {
        x_range: terrain.spec.x_range,
        y_range: terrain.spec.y_range,
        datum_height: datum,
        dem_rows: dem.rows,
        dem_cols: dem.cols,
        dem_cell_size: dem.cell_size,
        dem_origin: dem.origin,
        height_bounds: terrain.height_bounds(),
        hapke: *hapke,
        sun: *sun,
        terrain: Some(terrain.spec.clone()),
        trajectory: Some(trajectory.clone()),
    };
    io::write_json(&out_dir.join("meta.json"), &meta)?;
    Ok(meta)
}

/// Ground truth with Gaussian elevation noise and contiguous blob-shaped
/// holes covering `hole_fraction` of the valid cells.
pub fn make_pseudo_mvs(gt: &HeightMap, hole_fraction: f64, noise_sigma: f64, seed: u64) -> HeightMap {
    assert!((0.0..1.0).contains(&hole_fraction), "hole fraction must be in [0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = gt.clone();
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in out.values.iter_mut().filter(|v| v.is_finite()) {
            *v += normal.sample(&mut rng);
        }
    }
    let valid_cells = gt.valid_count();
    let target = (hole_fraction * valid_cells as f64).round() as usize;
    let (rows, cols) = gt.shape();
    let mut removed = 0;
    // Blob sizes up to ~2% of the map keep holes contiguous but numerous.
    let max_blob = ((valid_cells as f64 * 0.02).ceil() as usize).max(1);
    while removed < target {
        let start = rng.random_range(0..rows * cols);
        if !out.values[start].is_finite() {
            continue;
        }
        let size = rng.random_range(1..=max_blob).min(target - removed);
        let mut frontier = VecDeque::from([start]);
        let mut grown = 0;
        while grown < size {
            let Some(i) = frontier.pop_front() else { break };
            if !out.values[i].is_finite() {
                continue;
            }
            out.values[i] = f64::NAN;
            grown += 1;
            let (r, c) = (i / cols, i % cols);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(i - cols);
            }
            if r + 1 < rows {
                nbrs.push(i + cols);
            }
            if c > 0 {
                nbrs.push(i - 1);
            }
            if c + 1 < cols {
                nbrs.push(i + 1);
            }
            // Random neighbor order gives irregular blob outlines.
            for k in (1..nbrs.len()).rev() {
                nbrs.swap(k, rng.random_range(0..=k));
            }
            frontier.extend(nbrs.into_iter().filter(|&j| out.values[j].is_finite()));
        }
        removed += grown;
    }
    out
}
