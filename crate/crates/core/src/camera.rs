//! Fisheye camera model: pixel to world-ray mapping with an odd-polynomial
//! (Kannala-Brandt style) radial distortion, plus validity masks.
//!
//! Camera frame: +z is the optical axis, +x follows increasing `u`, +y
//! follows increasing `v`. `rotation` maps camera-frame vectors to world
//! vectors and `translation` is the camera center in world coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Mat3, Vec3};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("distortion inversion did not converge for pixel radius {radius}")]
    NoConvergence { radius: f64 },
    #[error("pixel maps to angle {theta} rad beyond the field limit {theta_max} rad")]
    OutOfField { theta: f64, theta_max: f64 },
    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    OutsideImage { u: f64, v: f64, width: u32, height: u32 },
    #[error("requested {requested} rays but the mask has no valid pixels")]
    InsufficientPixels { requested: usize },
    #[error("invalid camera: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisheyeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Radial coefficients of `theta * (1 + k1 theta^2 + k2 theta^4 + k3 theta^6 + k4 theta^8)`.
    pub dist: [f64; 4],
    pub width: u32,
    pub height: u32,
    /// World-from-camera rotation.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub theta_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Angle between `direction` and the optical axis.
    pub theta_d: f64,
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        geom::add(self.origin, geom::scale(self.direction, t))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    pub valid: Vec<bool>,
}

impl PixelMask {
    pub fn all_valid(width: u32, height: u32) -> Self {
        Self { width, height, valid: vec![true; (width * height) as usize] }
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.valid[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Linear indices of valid pixels in row-major order.
    pub fn valid_indices(&self) -> Vec<u32> {
        self.valid.iter().enumerate().filter_map(|(i, &v)| v.then_some(i as u32)).collect()
    }
}

impl FisheyeCamera {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::Invalid(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.theta_max) {
            return Err(CameraError::Invalid(format!("theta_max {} outside [0, pi]", self.theta_max)));
        }
        let err = geom::orthonormality_error(&self.rotation);
        if err > 1e-9 {
            return Err(CameraError::Invalid(format!("rotation is not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    /// Distorted normalized radius for angle `theta`.
    pub fn distort(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.dist;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    fn distort_derivative(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.dist;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    /// Solves `distort(theta) = radius` by Newton iteration from `theta = radius`.
    pub fn undistort(&self, radius: f64) -> Result<f64, CameraError> {
        if radius == 0.0 {
            return Ok(0.0);
        }
        let mut theta = radius;
        for _ in 0..NEWTON_MAX_ITERS {
            let residual = self.distort(theta) - radius;
            if residual.abs() < NEWTON_TOL {
                return Ok(theta);
            }
            let slope = self.distort_derivative(theta);
            if slope <= 0.0 || !slope.is_finite() {
                break;
            }
            theta -= residual / slope;
            if !theta.is_finite() || theta < 0.0 {
                break;
            }
        }
        if (self.distort(theta) - radius).abs() < NEWTON_TOL {
            Ok(theta)
        } else {
            Err(CameraError::NoConvergence { radius })
        }
    }

    /// Recovered field angle for pixel coordinates without rotating to world.
    pub fn pixel_theta(&self, u: f64, v: f64) -> Result<(f64, f64, f64), CameraError> {
        let a = (u - self.cx) / self.fx;
        let b = (v - self.cy) / self.fy;
        let r = (a * a + b * b).sqrt();
        Ok((self.undistort(r)?, a, b))
    }

    /// Camera-frame unit direction for the pixel at `(u, v)`.
    pub fn camera_direction(&self, u: f64, v: f64) -> Result<(Vec3, f64), CameraError> {
        let (theta, a, b) = self.pixel_theta(u, v)?;
        if theta > self.theta_max {
            return Err(CameraError::OutOfField { theta, theta_max: self.theta_max });
        }
        let r = (a * a + b * b).sqrt();
        let dir = if r == 0.0 {
            [0.0, 0.0, 1.0]
        } else {
            let s = theta.sin();
            [s * a / r, s * b / r, theta.cos()]
        };
        Ok((dir, theta))
    }

    /// World ray through continuous pixel coordinates `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Result<Ray, CameraError> {
        if !(0.0..=self.width as f64).contains(&u) || !(0.0..=self.height as f64).contains(&v) {
            return Err(CameraError::OutsideImage { u, v, width: self.width, height: self.height });
        }
        let (d, theta) = self.camera_direction(u, v)?;
        Ok(Ray { origin: self.translation, direction: geom::normalize(geom::mat_vec(&self.rotation, d)), theta_d: theta, pixel: (u, v) })
    }

    /// Projects a world point to pixel coordinates; `None` behind the lens limit.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let local = geom::mat_vec(&geom::transpose(&self.rotation), geom::sub(p, self.translation));
        let n = geom::norm(local);
        if n == 0.0 {
            return None;
        }
        let theta = (local[2] / n).clamp(-1.0, 1.0).acos();
        if theta > self.theta_max {
            return None;
        }
        let rho = (local[0] * local[0] + local[1] * local[1]).sqrt();
        let rd = self.distort(theta);
        let (a, b) = if rho == 0.0 { (0.0, 0.0) } else { (rd * local[0] / rho, rd * local[1] / rho) };
        Some((self.cx + self.fx * a, self.cy + self.fy * b))
    }

    /// Optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vec3 {
        geom::mat_vec(&self.rotation, [0.0, 0.0, 1.0])
    }

    /// Valid iff the pixel center's recovered angle is within `theta_max`.
    pub fn circular_mask(&self) -> PixelMask {
        let mut valid = Vec::with_capacity((self.width * self.height) as usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let ok = matches!(
                    self.pixel_theta(x as f64 + 0.5, y as f64 + 0.5),
                    Ok((theta, _, _)) if theta <= self.theta_max
                );
                valid.push(ok);
            }
        }
        PixelMask { width: self.width, height: self.height, valid }
    }

    /// `n` rays at uniformly drawn valid pixels.
    ///
    /// Draws are without replacement while `n` does not exceed the number of
    /// valid pixels and with replacement beyond that. Without jitter rays pass
    /// through pixel centers; with jitter the sub-pixel offset is uniform over
    /// the pixel footprint.
    pub fn generate_ray_batch(&self, mask: &PixelMask, n: usize, seed: u64, jitter: bool) -> Result<Vec<Ray>, CameraError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let pool = mask.valid_indices();
        if pool.is_empty() {
            return Err(CameraError::InsufficientPixels { requested: n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = draw_indices(pool.len(), n, &mut rng);
        picks
            .into_iter()
            .map(|i| {
                let idx = pool[i];
                let (x, y) = (idx % mask.width, idx / mask.width);
                let (ox, oy) = if jitter { (rng.random::<f64>(), rng.random::<f64>()) } else { (0.5, 0.5) };
                self.pixel_to_ray(x as f64 + ox, y as f64 + oy)
            })
            .collect()
    }
}

/// `n` indices into `0..len`: a partial shuffle when `n <= len`, uniform
/// draws with replacement otherwise.
pub(crate) fn draw_indices(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= len {
        let mut all: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = rng.random_range(i..len);
            all.swap(i, j);
        }
        all.truncate(n);
        all
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// One entry of a dataset's `cameras.json` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub dist: [f64; 4],
    pub width: u32,
    pub height: u32,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub theta_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl From<&FisheyeCamera> for CameraRecord {
    fn from(c: &FisheyeCamera) -> Self {
        let m = c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            dist: c.dist,
            width: c.width,
            height: c.height,
            r: [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]],
            t: c.translation,
            theta_max: c.theta_max,
            image: None,
            mask: None,
        }
    }
}

impl TryFrom<&CameraRecord> for FisheyeCamera {
    type Error = CameraError;

    fn try_from(r: &CameraRecord) -> Result<Self, CameraError> {
        let m = r.r;
        let cam = FisheyeCamera {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            dist: r.dist,
            width: r.width,
            height: r.height,
            rotation: [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]],
            translation: r.t,
            theta_max: r.theta_max,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn nadir(f: f64, dist: [f64; 4], size: u32, theta_max: f64) -> FisheyeCamera {
        FisheyeCamera {
            fx: f,
            fy: f,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            dist,
            width: size,
            height: size,
            rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            translation: [1.0, 2.0, 100.0],
            theta_max,
        }
    }

    #[test]
    fn principal_point_looks_along_axis() {
        let cam = nadir(50.0, [0.1, -0.02, 0.003, 0.0], 128, 1.3);
        let ray = cam.pixel_to_ray(cam.cx, cam.cy).unwrap();
        assert_eq!(ray.theta_d, 0.0);
        assert_eq!(ray.direction, [0.0, 0.0, -1.0]);
        assert_eq!(ray.origin, cam.translation);
    }

    #[test]
    fn equidistant_radius_maps_to_angle() {
        let cam = nadir(100.0, [0.0; 4], 512, PI);
        let ray = cam.pixel_to_ray(cam.cx + 100.0 * FRAC_PI_4, cam.cy).unwrap();
        assert!((ray.theta_d - FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn distorted_radius_inverts() {
        let f = 100.0;
        let cam = nadir(f, [0.05, 0.0, 0.0, 0.0], 512, PI);
        let theta: f64 = 0.8;
        // Closed-form forward polynomial.
        let r = f * theta * (1.0 + 0.05 * theta * theta);
        let ray = cam.pixel_to_ray(cam.cx, cam.cy + r).unwrap();
        assert!((ray.theta_d - theta).abs() < 1e-8, "{}", ray.theta_d);
    }

    #[test]
    fn beyond_theta_max_is_out_of_field() {
        let cam = nadir(40.0, [0.0; 4], 128, 1.0);
        let err = cam.pixel_to_ray(cam.cx + 41.0, cam.cy).unwrap_err();
        assert!(matches!(err, CameraError::OutOfField { .. }));
    }

    #[test]
    fn non_monotone_polynomial_fails_to_converge() {
        // theta (1 - 0.5 theta^2) peaks at r ~ 0.54; larger radii have no root.
        let cam = nadir(10.0, [-0.5, 0.0, 0.0, 0.0], 128, PI);
        let err = cam.undistort(0.9).unwrap_err();
        assert!(matches!(err, CameraError::NoConvergence { .. }));
    }

    #[test]
    fn outside_image_is_rejected() {
        let cam = nadir(40.0, [0.0; 4], 64, PI);
        assert!(matches!(cam.pixel_to_ray(-1.0, 3.0), Err(CameraError::OutsideImage { .. })));
    }

    #[test]
    fn mask_without_cutoff_is_full() {
        let cam = nadir(20.0, [0.0; 4], 32, PI);
        assert_eq!(cam.circular_mask().count(), 32 * 32);
    }

    #[test]
    fn mask_keeps_principal_pixel() {
        let cam = nadir(20.0, [0.0; 4], 33, 0.01);
        let mask = cam.circular_mask();
        assert!(mask.is_valid(16, 16));
        assert_eq!(mask.count(), 1);
    }

    #[test]
    fn mask_matches_pixel_centres_inside_circle() {
        let theta_max = 75.0f64.to_radians();
        let f = 450.0 / theta_max;
        let cam = nadir(f, [0.0; 4], 1000, theta_max);
        let mask = cam.circular_mask();
        // Direct count of pixel centres within radius 450.
        let mut expected = 0;
        for y in 0..1000 {
            for x in 0..1000 {
                let dx = x as f64 + 0.5 - cam.cx;
                let dy = y as f64 + 0.5 - cam.cy;
                if dx * dx + dy * dy <= 450.0 * 450.0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(mask.count(), expected);
    }

    #[test]
    fn empty_batch() {
        let cam = nadir(20.0, [0.0; 4], 4, PI);
        let rays = cam.generate_ray_batch(&PixelMask::all_valid(4, 4), 0, 1, false).unwrap();
        assert!(rays.is_empty());
    }

    #[test]
    fn batch_covers_pixel_centres() {
        let cam = nadir(20.0, [0.0; 4], 4, PI);
        let rays = cam.generate_ray_batch(&PixelMask::all_valid(4, 4), 16, 3, false).unwrap();
        let mut seen: Vec<(u32, u32)> = rays
            .iter()
            .map(|r| {
                assert_eq!((r.pixel.0.fract(), r.pixel.1.fract()), (0.5, 0.5));
                (r.pixel.0 as u32, r.pixel.1 as u32)
            })
            .collect();
        seen.sort();
        let all: Vec<(u32, u32)> = (0..4).flat_map(|x| (0..4).map(move |y| (x, y))).collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn single_valid_pixel_is_resampled() {
        let cam = nadir(20.0, [0.0; 4], 4, PI);
        let mut mask = PixelMask { width: 4, height: 4, valid: vec![false; 16] };
        mask.valid[6] = true;
        let rays = cam.generate_ray_batch(&mask, 3, 9, true).unwrap();
        assert_eq!(rays.len(), 3);
        for r in rays {
            assert_eq!((r.pixel.0.floor(), r.pixel.1.floor()), (2.0, 1.0));
        }
    }

    #[test]
    fn empty_mask_is_insufficient() {
        let cam = nadir(20.0, [0.0; 4], 4, PI);
        let mask = PixelMask { width: 4, height: 4, valid: vec![false; 16] };
        assert!(matches!(cam.generate_ray_batch(&mask, 1, 0, false), Err(CameraError::InsufficientPixels { requested: 1 })));
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let cam = nadir(20.0, [0.0; 4], 16, PI);
        let mask = cam.circular_mask();
        let a = cam.generate_ray_batch(&mask, 50, 77, true).unwrap();
        let b = cam.generate_ray_batch(&mask, 50, 77, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_inverts_ray_casting() {
        let cam = nadir(45.0, [0.02, -0.001, 0.0, 0.0], 128, 1.3);
        for (u, v) in [(10.5, 60.5), (64.0, 64.0), (100.25, 30.75)] {
            let ray = cam.pixel_to_ray(u, v).unwrap();
            let (pu, pv) = cam.project(ray.at(37.0)).unwrap();
            assert!((pu - u).abs() < 1e-8 && (pv - v).abs() < 1e-8);
        }
    }

    #[test]
    fn record_round_trip() {
        let cam = nadir(45.0, [0.02, -0.001, 0.0, 0.0], 128, 1.3);
        let rec = CameraRecord::from(&cam);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"R\"") && json.contains("\"theta_max\""));
        let back: CameraRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(FisheyeCamera::try_from(&back).unwrap(), cam);
    }
}
