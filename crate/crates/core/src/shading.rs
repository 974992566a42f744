//! Hapke reflectance (isotropic multiple scattering approximation with a
//! single-lobe Henyey-Greenstein phase function and an opposition surge).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::HeightField;
use crate::geom::{self, Vec3};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ShadingError {
    #[error("vector {name} has norm {norm}, expected 1")]
    NonUnitVector { name: &'static str, norm: f64 },
    #[error("invalid Hapke parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHapke")]
pub struct HapkeParams {
    w: f64,
    b_hg: f64,
    b0: f64,
    h_op: f64,
}

#[derive(Deserialize)]
struct RawHapke {
    w: f64,
    b_hg: f64,
    b0: f64,
    h_op: f64,
}

impl TryFrom<RawHapke> for HapkeParams {
    type Error = ShadingError;

    fn try_from(r: RawHapke) -> Result<Self, Self::Error> {
        HapkeParams::new(r.w, r.b_hg, r.b0, r.h_op)
    }
}

impl HapkeParams {
    pub fn new(w: f64, b_hg: f64, b0: f64, h_op: f64) -> Result<Self, ShadingError> {
        let bad = |msg: String| Err(ShadingError::InvalidParameter(msg));
        if !(w > 0.0 && w <= 1.0) {
            return bad(format!("w = {w} outside (0, 1]"));
        }
        if !(b_hg > -1.0 && b_hg < 1.0) {
            return bad(format!("b_hg = {b_hg} outside (-1, 1)"));
        }
        if !(b0 >= 0.0 && b0.is_finite()) {
            return bad(format!("b0 = {b0} must be >= 0"));
        }
        if !(h_op > 0.0 && h_op.is_finite()) {
            return bad(format!("h_op = {h_op} must be > 0"));
        }
        Ok(Self { w, b_hg, b0, h_op })
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn b_hg(&self) -> f64 {
        self.b_hg
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    pub fn h_op(&self) -> f64 {
        self.h_op
    }

    /// Henyey-Greenstein phase function at phase angle with cosine `cos_g`.
    pub fn phase(&self, cos_g: f64) -> f64 {
        let b = self.b_hg;
        (1.0 - b * b) / (1.0 + 2.0 * b * cos_g + b * b).powf(1.5)
    }

    /// Opposition surge `B0 / (1 + tan(g/2)/h)`.
    pub fn surge(&self, cos_g: f64) -> f64 {
        let c = cos_g.clamp(-1.0, 1.0);
        // tan(g/2) = sin g / (1 + cos g)
        let denom = 1.0 + c;
        if denom <= 0.0 {
            return 0.0;
        }
        let tan_half = (1.0 - c * c).max(0.0).sqrt() / denom;
        self.b0 / (1.0 + tan_half / self.h_op)
    }

    fn gamma(&self) -> f64 {
        (1.0 - self.w).sqrt()
    }

    /// Two-term rational approximation of Chandrasekhar's H function.
    pub fn h_function(&self, x: f64) -> f64 {
        (1.0 + 2.0 * x) / (1.0 + 2.0 * x * self.gamma())
    }

    fn h_derivative(&self, x: f64) -> f64 {
        let g = self.gamma();
        let d = 1.0 + 2.0 * x * g;
        2.0 * (1.0 - g) / (d * d)
    }
}

impl Default for HapkeParams {
    fn default() -> Self {
        Self { w: 0.8, b_hg: -0.3, b0: 0.6, h_op: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunGeometry {
    /// Unit vector toward the sun, world frame.
    pub dir: Vec3,
    pub intensity: f64,
}

impl SunGeometry {
    pub fn new(dir: Vec3, intensity: f64) -> Result<Self, ShadingError> {
        check_unit("sun_dir", dir)?;
        if !(intensity > 0.0 && intensity.is_finite()) {
            return Err(ShadingError::InvalidParameter(format!("intensity = {intensity} must be > 0")));
        }
        Ok(Self { dir, intensity })
    }

    /// Sun at `elevation` above the horizon, coming from `azimuth` (radians from +x toward +y).
    pub fn from_angles(azimuth: f64, elevation: f64, intensity: f64) -> Result<Self, ShadingError> {
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        Self::new([ce * ca, ce * sa, se], intensity)
    }
}

fn check_unit(name: &'static str, v: Vec3) -> Result<(), ShadingError> {
    let norm = geom::norm(v);
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(ShadingError::NonUnitVector { name, norm });
    }
    Ok(())
}

/// Reflectance together with its partial derivatives in `mu0 = n.s` and `mu = -n.v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HapkeTerms {
    pub value: f64,
    pub d_mu0: f64,
    pub d_mu: f64,
}

/// Unchecked evaluation used by the renderer. `view` points from the camera
/// toward the surface.
pub fn hapke_terms(params: &HapkeParams, sun: Vec3, intensity: f64, normal: Vec3, view: Vec3) -> HapkeTerms {
    let zero = HapkeTerms { value: 0.0, d_mu0: 0.0, d_mu: 0.0 };
    let mu0_raw = geom::dot(normal, sun);
    let mu_raw = -geom::dot(normal, view);
    let mu0 = mu0_raw.max(0.0);
    let mu = mu_raw.max(0.0);
    if mu0 == 0.0 || mu0 + mu == 0.0 {
        return zero;
    }
    let cos_g = -geom::dot(sun, view);
    let bracket = (1.0 + params.surge(cos_g)) * params.phase(cos_g) + params.h_function(mu0) * params.h_function(mu) - 1.0;
    let k = intensity * params.w / 4.0;
    let sum = mu0 + mu;
    let value = (k * mu0 / sum * bracket).max(0.0);
    let (h0, h) = (params.h_function(mu0), params.h_function(mu));
    let d_mu0 = k * (mu / (sum * sum) * bracket + mu0 / sum * params.h_derivative(mu0) * h);
    let d_mu = if mu_raw > 0.0 { k * (-mu0 / (sum * sum) * bracket + mu0 / sum * h0 * params.h_derivative(mu)) } else { 0.0 };
    HapkeTerms { value, d_mu0, d_mu }
}

/// Lighting scalar for a surface with unit `normal` seen along unit `view_dir`.
pub fn hapke_light(params: &HapkeParams, sun: &SunGeometry, normal: Vec3, view_dir: Vec3) -> Result<f64, ShadingError> {
    check_unit("sun_dir", sun.dir)?;
    check_unit("normal", normal)?;
    check_unit("view_dir", view_dir)?;
    Ok(hapke_terms(params, sun.dir, sun.intensity, normal, view_dir).value)
}

/// Height-field surface normal at `(x, y)`.
pub fn heightfield_normal(hf: &HeightField, x: f64, y: f64) -> Vec3 {
    hf.normal(x, y)
}
