//! Ray sampling and volume-rendering quadrature for both scene branches.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Ray;
use crate::fields::{encode_direction, ColorHead, HeightField, RadianceField, DIRECTION_ENCODING_DIM};
use crate::geom::Vec3;
use crate::shading::{HapkeParams, SunGeometry};
use crate::tape::{Tape, Tensor, Var};

pub const MAX_DENSITY: f64 = 1e6;
pub const MAX_OPTICAL_DEPTH: f64 = 80.0;
pub const DEPTH_EPS: f64 = 1e-10;
/// Fraction of the fine-sample budget spread uniformly regardless of weights.
const UNIFORM_FLOOR: f64 = 0.01;
/// Interval length standing in for "infinitely far" behind an opaque end.
const OPAQUE_DELTA: f64 = 1e10;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid sampling range: t_near = {t_near}, t_far = {t_far}")]
    InvalidRange { t_near: f64, t_far: f64 },
    #[error("need at least 2 coarse samples, got {0}")]
    TooFewSamples(usize),
}

/// Volume-rendering weights for one ray.
pub fn weights_into(density: &[f64], delta: &[f64], out: &mut [f64]) {
    let mut acc = 0.0f64;
    for k in 0..density.len() {
        let a = density[k].clamp(0.0, MAX_DENSITY) * delta[k];
        let trans = (-acc.min(MAX_OPTICAL_DEPTH)).exp();
        out[k] = trans * (1.0 - (-a.min(MAX_OPTICAL_DEPTH)).exp());
        acc += a;
    }
}

/// Vector-Jacobian product of [`weights_into`], written into `grad_density`.
pub fn weights_backward(density: &[f64], delta: &[f64], weights: &[f64], grad_out: &[f64], grad_density: &mut [f64]) {
    let n = density.len();
    let mut prefix = Vec::with_capacity(n);
    let mut acc = 0.0;
    for k in 0..n {
        prefix.push(acc);
        acc += density[k].clamp(0.0, MAX_DENSITY) * delta[k];
    }
    // tail = sum over k > j of g_k w_k (only where the transmittance clamp is inactive)
    let mut tail = 0.0;
    for j in (0..n).rev() {
        let a = density[j].clamp(0.0, MAX_DENSITY) * delta[j];
        let mut d_a = -tail;
        if a < MAX_OPTICAL_DEPTH {
            let trans = (-prefix[j].min(MAX_OPTICAL_DEPTH)).exp();
            d_a += grad_out[j] * trans * (-a).exp();
        }
        // an opaque end has (numerically) zero sensitivity to its own density
        let active = density[j] >= 0.0 && density[j] <= MAX_DENSITY && delta[j] < OPAQUE_DELTA;
        grad_density[j] = if active { d_a * delta[j] } else { 0.0 };
        if prefix[j] < MAX_OPTICAL_DEPTH {
            tail += grad_out[j] * weights[j];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// `t = t_near * (t_far / t_near)^s`.
    Log,
    /// `t = t_near + s (t_far - t_near)`.
    Linear,
}

/// Two-stage sampler: stratified coarse boundaries in `s`, then importance
/// resampling of fine boundaries from the coarse weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampler {
    pub t_near: f64,
    pub t_far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub spacing: Spacing,
    pub jitter: bool,
    /// Treat the far end as a solid floor: the last interval absorbs all remaining transmittance.
    pub opaque_end: bool,
    /// Part of the normalized coordinate that is sampled; `(0, 1)` covers `[t_near, t_far]`.
    pub s_range: (f64, f64),
}

impl Sampler {
    pub fn new(t_near: f64, t_far: f64, n_coarse: usize, n_fine: usize, spacing: Spacing) -> Result<Self, RenderError> {
        let positive = spacing == Spacing::Linear || t_near > 0.0;
        if !(positive && t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
            return Err(RenderError::InvalidRange { t_near, t_far });
        }
        if n_coarse < 2 {
            return Err(RenderError::TooFewSamples(n_coarse));
        }
        Ok(Self { t_near, t_far, n_coarse, n_fine, spacing, jitter: true, opaque_end: false, s_range: (0.0, 1.0) })
    }

    pub fn without_jitter(mut self) -> Self {
        self.jitter = false;
        self
    }

    pub fn with_opaque_end(mut self) -> Self {
        self.opaque_end = true;
        self
    }

    fn deltas(&self, t: &[f64], out: &mut Vec<f64>) {
        let start = out.len();
        out.extend(t.windows(2).map(|w| w[1] - w[0]));
        if self.opaque_end && out.len() > start {
            *out.last_mut().unwrap() = OPAQUE_DELTA;
        }
    }

    /// Number of intervals per ray after refinement.
    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_fine
    }

    pub fn t_of(&self, s: f64) -> f64 {
        match self.spacing {
            Spacing::Log => self.t_near * (self.t_far / self.t_near).powf(s),
            Spacing::Linear => self.t_near + s * (self.t_far - self.t_near),
        }
    }

    pub fn s_of(&self, t: f64) -> f64 {
        match self.spacing {
            Spacing::Log => (t / self.t_near).ln() / (self.t_far / self.t_near).ln(),
            Spacing::Linear => (t - self.t_near) / (self.t_far - self.t_near),
        }
    }

    /// Sampler restricted to the part of `[t_near, t_far]` where `ray` lies in
    /// the slab `z_lo <= z <= z_hi`; `self` when the ray misses the slab.
    /// The normalized coordinate (and with it the distortion loss) keeps its
    /// meaning over the full range. The slab floor is opaque when the ray
    /// reaches it before `t_far`.
    pub fn within_slab(&self, ray: &Ray, z_lo: f64, z_hi: f64) -> Sampler {
        let (oz, dz) = (ray.origin[2], ray.direction[2]);
        if dz.abs() < 1e-12 {
            return *self;
        }
        let (ta, tb) = ((z_lo - oz) / dz, (z_hi - oz) / dz);
        let (t0, t1) = (ta.min(tb).max(self.t_near), ta.max(tb).min(self.t_far));
        if t1 - t0 <= 1e-9 * self.t_far {
            return *self;
        }
        let opaque_end = self.opaque_end || (dz < 0.0 && ta <= self.t_far);
        Sampler { s_range: (self.s_of(t0), self.s_of(t1)), opaque_end, ..*self }
    }

    /// `n_coarse + 1` increasing boundaries spanning `s_range`, interior ones jittered within their strata.
    pub fn coarse(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.n_coarse;
        let (lo, hi) = self.s_range;
        let mut s = Vec::with_capacity(n + 1);
        s.push(lo);
        for i in 1..n {
            let offset = if self.jitter { rng.random::<f64>() - 0.5 } else { 0.0 };
            s.push(lo + (hi - lo) * (i as f64 + offset) / n as f64);
        }
        s.push(hi);
        s
    }

    /// Merges `n_fine` boundaries drawn from the piecewise-constant density
    /// implied by `weights` over `coarse` into the coarse boundaries.
    pub fn refine(&self, coarse: &[f64], weights: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let mut merged = coarse.to_vec();
        if self.n_fine == 0 {
            return merged;
        }
        // Max-then-average blur over neighbors: a sharp surface whose coarse midpoint
        // sample lands just above it still sends fine samples into its interval.
        let k = weights.len();
        let wpos = |i: usize| weights[i].max(0.0);
        let blurred: Vec<f64> = (0..k)
            .map(|i| {
                let left = if i > 0 { wpos(i - 1).max(wpos(i)) } else { wpos(i) };
                let right = if i + 1 < k { wpos(i + 1).max(wpos(i)) } else { wpos(i) };
                0.5 * (left + right)
            })
            .collect();
        let total: f64 = blurred.iter().sum();
        let mut pdf: Vec<f64> = coarse
            .windows(2)
            .zip(&blurred)
            .map(|(b, &w)| {
                let width = b[1] - b[0];
                if total > 0.0 {
                    (1.0 - UNIFORM_FLOOR) * w.max(0.0) / total + UNIFORM_FLOOR * width
                } else {
                    width
                }
            })
            .collect();
        let norm: f64 = pdf.iter().sum();
        pdf.iter_mut().for_each(|p| *p /= norm);
        let mut cdf = Vec::with_capacity(pdf.len() + 1);
        cdf.push(0.0);
        for p in &pdf {
            cdf.push(cdf.last().unwrap() + p);
        }
        let m = self.n_fine;
        let mut bin = 0;
        for j in 0..m {
            let offset = if self.jitter { rng.random::<f64>() } else { 0.5 };
            let u = ((j as f64 + offset) / m as f64).min(cdf[pdf.len()]);
            while bin + 1 < pdf.len() && cdf[bin + 1] < u {
                bin += 1;
            }
            let frac = if pdf[bin] > 0.0 { ((u - cdf[bin]) / pdf[bin]).clamp(0.0, 1.0) } else { 0.5 };
            merged.push(coarse[bin] + frac * (coarse[bin + 1] - coarse[bin]));
        }
        merged.sort_by(f64::total_cmp);
        merged
    }
}

/// Samples along a single ray together with the rendering quantities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    /// `K + 1` boundaries in scene units.
    pub t: Vec<f64>,
    /// The same boundaries in the normalized `[0, 1]` coordinate.
    pub s: Vec<f64>,
    pub midpoints: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub delta: Vec<f64>,
    pub density: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl RaySamples {
    pub fn from_boundaries(ray: &Ray, sampler: &Sampler, s: Vec<f64>) -> Self {
        let t: Vec<f64> = s.iter().map(|&v| sampler.t_of(v)).collect();
        let midpoints: Vec<f64> = t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let positions = midpoints.iter().map(|&m| ray.at(m)).collect();
        let mut delta = Vec::with_capacity(midpoints.len());
        sampler.deltas(&t, &mut delta);
        let k = midpoints.len();
        Self { t, s, midpoints, positions, delta, density: vec![0.0; k], color: vec![[0.0; 3]; k], weights: vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.midpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.midpoints.is_empty()
    }

    /// Writes `t, density, weight` rows (interval midpoints) as CSV.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "t,density,weight")?;
        for k in 0..self.len() {
            writeln!(out, "{},{},{}", self.midpoints[k], self.density[k], self.weights[k])?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: [f64; 3],
    pub accumulation: f64,
    pub expected_depth: f64,
    /// Distortion value on the normalized coordinate, before the angle factor and weight.
    pub distortion: f64,
}

/// Fills `samples.weights` from densities and returns the composited output.
pub fn composite(samples: &mut RaySamples) -> RenderOutput {
    let k = samples.len();
    samples.weights.resize(k, 0.0);
    weights_into(&samples.density, &samples.delta, &mut samples.weights);
    let mut rgb = [0.0; 3];
    let mut acc = 0.0;
    let mut depth = 0.0;
    for i in 0..k {
        let w = samples.weights[i];
        for c in 0..3 {
            rgb[c] += w * samples.color[i][c];
        }
        acc += w;
        depth += w * samples.midpoints[i];
    }
    RenderOutput {
        rgb,
        accumulation: acc,
        expected_depth: depth / (acc + DEPTH_EPS),
        distortion: crate::losses::distortion_value(&samples.weights, &samples.s),
    }
}

/// Hierarchically samples a single ray. `density` evaluates the coarse pass at world positions.
pub fn sample_ray(ray: &Ray, sampler: &Sampler, seed: u64, density: impl Fn(&[Vec3]) -> Vec<f64>) -> RaySamples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = SampleBatch::sample(std::slice::from_ref(ray), sampler, &mut rng, density);
    batch.ray_samples(0)
}

/// Sample boundaries for a batch of rays, all with the same count.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub rays: usize,
    /// Intervals per ray.
    pub k: usize,
    /// `rays x (k + 1)` normalized boundaries.
    pub s: Vec<f64>,
    /// `rays x (k + 1)` metric boundaries.
    pub t: Vec<f64>,
    /// `rays x k` interval midpoints (metric).
    pub midpoints: Vec<f64>,
    pub delta: Vec<f64>,
    /// `rays * k` sample positions.
    pub positions: Vec<Vec3>,
}

impl SampleBatch {
    pub fn from_s(rays: &[Ray], sampler: &Sampler, s: Vec<f64>) -> Self {
        Self::from_s_each(rays, &vec![*sampler; rays.len()], s)
    }

    /// As [`SampleBatch::from_s`] with one sampler per ray.
    pub fn from_s_each(rays: &[Ray], samplers: &[Sampler], s: Vec<f64>) -> Self {
        let n = rays.len();
        assert_eq!(samplers.len(), n);
        let k = if n == 0 { 0 } else { s.len() / n - 1 };
        let mut t = Vec::with_capacity(s.len());
        for (r, sampler) in samplers.iter().enumerate() {
            t.extend(s[r * (k + 1)..(r + 1) * (k + 1)].iter().map(|&v| sampler.t_of(v)));
        }
        let mut midpoints = Vec::with_capacity(n * k);
        let mut delta = Vec::with_capacity(n * k);
        let mut positions = Vec::with_capacity(n * k);
        for (r, ray) in rays.iter().enumerate() {
            let row = &t[r * (k + 1)..(r + 1) * (k + 1)];
            for w in row.windows(2) {
                let m = 0.5 * (w[0] + w[1]);
                midpoints.push(m);
                positions.push(ray.at(m));
            }
            samplers[r].deltas(row, &mut delta);
        }
        Self { rays: n, k, s, t, midpoints, delta, positions }
    }

    /// Coarse pass with `density` (batched over all rays), then refinement.
    pub fn sample(rays: &[Ray], sampler: &Sampler, rng: &mut impl Rng, density: impl Fn(&[Vec3]) -> Vec<f64>) -> Self {
        Self::sample_each(rays, &vec![*sampler; rays.len()], rng, density)
    }

    /// As [`SampleBatch::sample`] with one sampler per ray (all with equal sample counts).
    pub fn sample_each(rays: &[Ray], samplers: &[Sampler], rng: &mut impl Rng, density: impl Fn(&[Vec3]) -> Vec<f64>) -> Self {
        let coarse_s: Vec<f64> = samplers.iter().flat_map(|sm| sm.coarse(rng)).collect();
        let coarse = Self::from_s_each(rays, samplers, coarse_s);
        if rays.is_empty() || samplers[0].n_fine == 0 {
            return coarse;
        }
        let dens = density(&coarse.positions);
        let k = coarse.k;
        let mut w = vec![0.0; k];
        let mut fine = Vec::with_capacity(rays.len() * (samplers[0].samples_per_ray() + 1));
        for (r, sampler) in samplers.iter().enumerate() {
            weights_into(&dens[r * k..(r + 1) * k], &coarse.delta[r * k..(r + 1) * k], &mut w);
            fine.extend(sampler.refine(&coarse.s[r * (k + 1)..(r + 1) * (k + 1)], &w, rng));
        }
        Self::from_s_each(rays, samplers, fine)
    }

    pub fn ray_samples(&self, r: usize) -> RaySamples {
        let k = self.k;
        let (b, e) = (r * (k + 1), (r + 1) * (k + 1));
        RaySamples {
            t: self.t[b..e].to_vec(),
            s: self.s[b..e].to_vec(),
            midpoints: self.midpoints[r * k..(r + 1) * k].to_vec(),
            positions: self.positions[r * k..(r + 1) * k].to_vec(),
            delta: self.delta[r * k..(r + 1) * k].to_vec(),
            density: vec![0.0; k],
            color: vec![[0.0; 3]; k],
            weights: vec![0.0; k],
        }
    }
}

/// How per-sample colors are lit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingContext {
    pub hapke: HapkeParams,
    pub sun: SunGeometry,
    /// When false the color head receives an encoded view direction instead of Hapke lighting.
    pub use_hapke: bool,
}

/// Tape nodes produced by rendering one branch over a batch.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    /// `rays x 3`.
    pub rgb: Var,
    /// `rays x k`.
    pub weights: Var,
    /// `rays x k`.
    pub density: Var,
}

fn direction_block(rays: &[Ray], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(rays.len() * k * DIRECTION_ENCODING_DIM);
    for ray in rays {
        let enc = encode_direction(ray.direction);
        for _ in 0..k {
            data.extend_from_slice(&enc);
        }
    }
    Tensor::new(rays.len() * k, DIRECTION_ENCODING_DIM, data)
}

/// Colors `n*k x 3` from per-sample embeddings, lit per sample by `light` (`n*k x 1`) or by direction.
fn shade(
    tape: &mut Tape,
    head: &ColorHead,
    emb: Var,
    rays: &[Ray],
    k: usize,
    ctx: &ShadingContext,
    light: impl FnOnce(&mut Tape) -> Var,
) -> Var {
    if ctx.use_hapke {
        let albedo = head.tape_forward(tape, emb);
        let l = light(tape);
        tape.mul_col(albedo, l)
    } else {
        let dirs = tape.constant(direction_block(rays, k));
        let input = tape.concat_cols(&[emb, dirs]);
        head.tape_forward(tape, input)
    }
}

fn accumulate_rgb(tape: &mut Tape, colors: Var, weights: Var, n: usize, k: usize) -> Var {
    let wcol = tape.reshape(weights, n * k, 1);
    let weighted = tape.mul_col(colors, wcol);
    tape.segment_sum(weighted, k)
}

/// Branch A: radiance-field densities at contracted positions, colors lit with the up normal.
pub fn tape_branch_a(
    tape: &mut Tape,
    rays: &[Ray],
    batch: &SampleBatch,
    rf: &RadianceField,
    head: &ColorHead,
    ctx: &ShadingContext,
) -> BranchVars {
    let (n, k) = (rays.len(), batch.k);
    let (dens, emb) = rf.tape_query(tape, &batch.positions);
    let density = tape.reshape(dens, n, k);
    let weights = tape.render_weights(density, batch.delta.clone());
    let colors = shade(tape, head, emb, rays, k, ctx, |tape| {
        let normals = Tensor::new(n * k, 3, [0.0, 0.0, 1.0].repeat(n * k));
        let normals = tape.constant(normals);
        let view = rays.iter().flat_map(|r| std::iter::repeat_n(r.direction, k)).collect();
        tape.hapke(normals, ctx.hapke, &ctx.sun, view)
    });
    let rgb = accumulate_rgb(tape, colors, weights, n, k);
    BranchVars { rgb, weights, density }
}

/// Branch B: sigmoid densities below the height field, colors from the column
/// embedding at each sample's footprint, lit with the height-field normal.
/// With `normal_grad` false the lighting is held constant in the backward pass.
pub fn tape_branch_b(
    tape: &mut Tape,
    rays: &[Ray],
    batch: &SampleBatch,
    hf: &HeightField,
    head: &ColorHead,
    ctx: &ShadingContext,
    normal_grad: bool,
) -> BranchVars {
    let (n, k) = (rays.len(), batch.k);
    let xy: Vec<[f64; 2]> = batch.positions.iter().map(|p| [p[0], p[1]]).collect();
    let h = hf.tape_height(tape, &xy);
    let z = tape.constant(Tensor::column(batch.positions.iter().map(|p| p[2]).collect()));
    let gap = tape.sub(h, z);
    let gap = tape.scale(gap, hf.config.k1);
    let sig = tape.sigmoid(gap);
    let dens = tape.scale(sig, hf.config.k2);
    let density = tape.reshape(dens, n, k);
    let weights = tape.render_weights(density, batch.delta.clone());
    let emb = hf.tape_embedding(tape, &xy);
    let colors = shade(tape, head, emb, rays, k, ctx, |tape| {
        let slopes = hf.tape_slopes(tape, &xy);
        let slopes = if normal_grad { slopes } else { tape.detach(slopes) };
        let normals = tape.normals_from_slopes(slopes);
        let view = rays.iter().flat_map(|r| std::iter::repeat_n(r.direction, k)).collect();
        tape.hapke(normals, ctx.hapke, &ctx.sun, view)
    });
    let rgb = accumulate_rgb(tape, colors, weights, n, k);
    BranchVars { rgb, weights, density }
}

/// Normalized expected depth per ray (`rays x 1`).
pub fn tape_expected_depth(tape: &mut Tape, weights: Var, batch: &SampleBatch) -> Var {
    let mids = tape.constant(Tensor::new(batch.rays, batch.k, batch.midpoints.clone()));
    let wm = tape.mul(weights, mids);
    let num = tape.row_sum(wm);
    let den = tape.row_sum(weights);
    let den = tape.add_scalar(den, DEPTH_EPS);
    tape.div(num, den)
}

/// Which scene representation to render.
#[derive(Clone, Copy, Debug)]
pub enum Branch<'a> {
    Radiance(&'a RadianceField),
    Height(&'a HeightField),
}

/// Renders one ray through one branch, returning the filled samples and output.
pub fn render_branch(
    ray: &Ray,
    branch: Branch<'_>,
    head: &ColorHead,
    ctx: &ShadingContext,
    sampler: &Sampler,
    seed: u64,
) -> (RaySamples, RenderOutput) {
    let rays = std::slice::from_ref(ray);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = match branch {
        Branch::Radiance(rf) => SampleBatch::sample(rays, sampler, &mut rng, |p| rf.density_world(p)),
        Branch::Height(hf) => SampleBatch::sample(rays, sampler, &mut rng, |p| p.iter().map(|q| hf.density(q[0], q[1], q[2])).collect()),
    };
    let mut tape = Tape::new();
    let vars = match branch {
        Branch::Radiance(rf) => tape_branch_a(&mut tape, rays, &batch, rf, head, ctx),
        Branch::Height(hf) => tape_branch_b(&mut tape, rays, &batch, hf, head, ctx, false),
    };
    let mut samples = batch.ray_samples(0);
    samples.density = tape.value(vars.density).data.clone();
    let mut out = composite(&mut samples);
    let rgb = &tape.value(vars.rgb).data;
    out.rgb = [rgb[0], rgb[1], rgb[2]];
    (samples, out)
}

/// Expected depth of a vertical downward ray from `origin` through the radiance
/// field, sampled linearly over `depth_range`.
pub fn expected_depth_vertical(rf: &RadianceField, origin: Vec3, depth_range: (f64, f64), n_samples: usize) -> f64 {
    let ray = Ray { origin, direction: [0.0, 0.0, -1.0], theta_d: 0.0, pixel: (0.0, 0.0) };
    let sampler =
        Sampler::new(depth_range.0, depth_range.1, n_samples.max(2), 0, Spacing::Linear).expect("valid depth range").without_jitter();
    let mut samples = RaySamples::from_boundaries(&ray, &sampler, sampler.coarse(&mut ChaCha8Rng::seed_from_u64(0)));
    samples.density = rf.density_world(&samples.positions);
    composite(&mut samples).expected_depth
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ColorHeadConfig, HeightFieldConfig, IdAlloc, RadianceFieldConfig};
    use crate::params::Gradients;

    fn nadir_ray(z: f64) -> Ray {
        Ray { origin: [0.0, 0.0, z], direction: [0.0, 0.0, -1.0], theta_d: 0.0, pixel: (0.0, 0.0) }
    }

    fn uniform_samples(k: usize, length: f64, density: f64) -> RaySamples {
        let ray = nadir_ray(0.0);
        let sampler = Sampler::new(0.0, length, k, 0, Spacing::Linear).unwrap().without_jitter();
        let mut s = RaySamples::from_boundaries(&ray, &sampler, sampler.coarse(&mut ChaCha8Rng::seed_from_u64(0)));
        s.density = vec![density; k];
        s.color = vec![[1.0; 3]; k];
        s
    }

    #[test]
    fn log_spacing_midpoint() {
        let sampler = Sampler::new(1.0, 100.0, 2, 0, Spacing::Log).unwrap().without_jitter();
        let t: Vec<f64> = sampler.coarse(&mut ChaCha8Rng::seed_from_u64(0)).iter().map(|&s| sampler.t_of(s)).collect();
        assert_eq!(t.len(), 3);
        assert!((t[0] - 1.0).abs() < 1e-12 && (t[1] - 10.0).abs() < 1e-12 && (t[2] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert_eq!(Sampler::new(0.0, 10.0, 8, 0, Spacing::Log), Err(RenderError::InvalidRange { t_near: 0.0, t_far: 10.0 }));
        assert!(Sampler::new(5.0, 1.0, 8, 0, Spacing::Log).is_err());
        assert_eq!(Sampler::new(1.0, 10.0, 1, 0, Spacing::Log), Err(RenderError::TooFewSamples(1)));
    }

    #[test]
    fn boundaries_are_strictly_increasing_and_in_range() {
        let sampler = Sampler::new(0.15, 500.0, 16, 16, Spacing::Log).unwrap();
        let ray = nadir_ray(50.0);
        for seed in 0..20 {
            let s = sample_ray(&ray, &sampler, seed, |p| p.iter().map(|q| if q[2] < 0.0 { 5.0 } else { 0.0 }).collect());
            assert_eq!(s.len(), 32);
            assert!(s.t.windows(2).all(|w| w[1] > w[0]));
            assert!(s.t[0] >= 0.15 - 1e-12 && *s.t.last().unwrap() <= 500.0 + 1e-9);
        }
    }

    #[test]
    fn zero_density_gives_uniform_fine_samples() {
        let sampler = Sampler::new(1.0, 100.0, 4, 4, Spacing::Log).unwrap().without_jitter();
        let coarse = sampler.coarse(&mut ChaCha8Rng::seed_from_u64(0));
        let merged = sampler.refine(&coarse, &[0.0; 4], &mut ChaCha8Rng::seed_from_u64(0));
        let fine: Vec<f64> = merged.iter().copied().filter(|v| !coarse.contains(v)).collect();
        assert_eq!(fine, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn fine_samples_concentrate_in_opaque_slab() {
        let sampler = Sampler::new(1.0, 100.0, 64, 32, Spacing::Log).unwrap();
        let (near, far) = (10.0, 60.0);
        let mut inside = 0usize;
        let mut total = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let coarse = sampler.coarse(&mut rng);
            let ray = nadir_ray(0.0);
            let mut s = RaySamples::from_boundaries(&ray, &sampler, coarse.clone());
            s.density = s.midpoints.iter().map(|&t| if (near..far).contains(&t) { 0.05 } else { 0.0 }).collect();
            composite(&mut s);
            let merged = sampler.refine(&coarse, &s.weights, &mut rng);
            for v in merged.iter().filter(|v| !coarse.contains(v)) {
                total += 1;
                let t = sampler.t_of(*v);
                if (near..=far).contains(&t) {
                    inside += 1;
                }
            }
        }
        assert_eq!(total, 32_000);
        assert!(inside as f64 / total as f64 >= 0.9, "{inside}/{total}");
    }

    #[test]
    fn empty_space_composites_to_black() {
        let mut s = uniform_samples(16, 10.0, 0.0);
        let out = composite(&mut s);
        assert_eq!(out.rgb, [0.0; 3]);
        assert_eq!(out.accumulation, 0.0);
    }

    #[test]
    fn opaque_interval_limit() {
        let mut s = uniform_samples(8, 8.0, 0.0);
        s.density[3] = f64::INFINITY;
        s.color[3] = [1.0, 0.0, 0.0];
        let out = composite(&mut s);
        assert!((out.rgb[0] - 1.0).abs() < 1e-12 && out.rgb[1] == 0.0);
        assert!((out.accumulation - 1.0).abs() < 1e-12);
        assert!((out.expected_depth - s.midpoints[3]).abs() < 1e-9);
    }

    #[test]
    fn constant_density_matches_closed_form() {
        let (tau, l) = (0.3, 5.0);
        let mut s = uniform_samples(1000, l, tau);
        let out = composite(&mut s);
        assert!((out.accumulation - (1.0 - (-tau * l).exp())).abs() < 1e-3);
        assert!(s.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn quadrature_error_shrinks_with_refinement() {
        // Density varies linearly, so midpoint quadrature carries a real error.
        let l = 4.0;
        let exact = 1.0 - (-(0.1 * l + 0.5 * 0.2 * l * l) as f64).exp();
        let mut prev = f64::INFINITY;
        for k in [32, 64, 128, 256, 512] {
            let mut s = uniform_samples(k, l, 0.0);
            s.density = s.t.windows(2).map(|w| 0.1 + 0.2 * w[0]).collect();
            let err = (composite(&mut s).accumulation - exact).abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn splitting_an_interval_keeps_total_weight() {
        let mut a = uniform_samples(4, 4.0, 0.0);
        a.density = vec![0.2, 1.5, 0.7, 3.0];
        let out_a = composite(&mut a);
        let mut b = uniform_samples(8, 4.0, 0.0);
        b.density = vec![0.2, 0.2, 1.5, 1.5, 0.7, 0.7, 3.0, 3.0];
        let out_b = composite(&mut b);
        for i in 0..4 {
            assert!((a.weights[i] - b.weights[2 * i] - b.weights[2 * i + 1]).abs() < 1e-6);
        }
        assert!((out_a.accumulation - out_b.accumulation).abs() < 1e-12);
    }

    #[test]
    fn weights_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let density: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
        let delta: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.5)).collect();
        let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |d: &[f64]| {
            let mut w = vec![0.0; 8];
            weights_into(d, &delta, &mut w);
            w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut w = vec![0.0; 8];
        weights_into(&density, &delta, &mut w);
        let mut grad = vec![0.0; 8];
        weights_backward(&density, &delta, &w, &g, &mut grad);
        for j in 0..8 {
            let mut p = density.clone();
            let mut m = density.clone();
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - grad[j]).abs() <= 1e-3 * fd.abs().max(1e-6), "{j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // rgb.r + 0.5 rgb.g + depth through the tape against a plain re-evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let density: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.5)).collect();
        let colors: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = uniform_samples(8, 4.0, 0.0);
        let plain = |d: &[f64], c: &[f64]| {
            let mut s = base.clone();
            s.density = d.to_vec();
            s.color = c.chunks(3).map(|x| [x[0], x[1], x[2]]).collect();
            let o = composite(&mut s);
            o.rgb[0] + 0.5 * o.rgb[1] + o.expected_depth
        };
        let batch = SampleBatch::from_s(&[nadir_ray(0.0)], &Sampler::new(0.0, 4.0, 8, 0, Spacing::Linear).unwrap(), base.s.clone());
        let mut tape = Tape::new();
        let dp = crate::params::Param::new(crate::params::ParamId(0), "d", vec![1, 8], density.clone(), crate::params::ParamGroup::Dense);
        let cp = crate::params::Param::new(crate::params::ParamId(1), "c", vec![8, 3], colors.clone(), crate::params::ParamGroup::Dense);
        let d = tape.param(&dp);
        let c = tape.param(&cp);
        let w = tape.render_weights(d, batch.delta.clone());
        let rgb = accumulate_rgb(&mut tape, c, w, 1, 8);
        let depth = tape_expected_depth(&mut tape, w, &batch);
        let mix = tape.constant(Tensor::new(1, 3, vec![1.0, 0.5, 0.0]));
        let rgbm = tape.mul(rgb, mix);
        let a = tape.sum(rgbm);
        let b = tape.sum(depth);
        let loss = tape.add(a, b);
        assert!((tape.scalar(loss) - plain(&density, &colors)).abs() < 1e-12);
        let mut grads = Gradients::for_params([&dp, &cp]);
        tape.backward(loss, &mut grads).unwrap();
        for j in 0..8 {
            let (mut p, mut m) = (density.clone(), density.clone());
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (plain(&p, &colors) - plain(&m, &colors)) / 2e-6;
            let an = grads.get(dp.id)[j];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-4), "density {j}: {fd} vs {an}");
        }
        for j in 0..24 {
            let (mut p, mut m) = (colors.clone(), colors.clone());
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (plain(&density, &p) - plain(&density, &m)) / 2e-6;
            let an = grads.get(cp.id)[j];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-4), "color {j}: {fd} vs {an}");
        }
    }

    fn flat_heightfield(k: f64) -> HeightField {
        let cfg = HeightFieldConfig {
            x_range: [-50.0, 50.0],
            y_range: [-50.0, 50.0],
            grid_res: (8, 8),
            feature_dim: 4,
            h_scale: 20.0,
            h_offset: 0.0,
            k1: k,
            k2: k,
        };
        HeightField::new(cfg, &mut IdAlloc::default(), &mut ChaCha8Rng::seed_from_u64(1))
    }

    fn context() -> ShadingContext {
        ShadingContext { hapke: HapkeParams::default(), sun: SunGeometry::from_angles(0.0, 0.8, 1.0).unwrap(), use_hapke: true }
    }

    fn head(input: usize) -> ColorHead {
        ColorHead::new(
            ColorHeadConfig { embedding_dim: input, direction_dim: 0, hidden: 8 },
            &mut IdAlloc::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
    }

    #[test]
    fn branch_b_nadir_depth_on_flat_field() {
        // With k2 = k1 the sigmoid density integrates to a near step at the surface.
        let k = 50.0;
        let hf = flat_heightfield(k);
        let sampler = Sampler::new(1.0, 200.0, 64, 128, Spacing::Log).unwrap();
        let (_, out) = render_branch(&nadir_ray(100.0), Branch::Height(&hf), &head(4), &context(), &sampler, 3);
        assert!((out.expected_depth - 100.0).abs() < 2.0 / k, "{}", out.expected_depth);
        assert!((out.accumulation - 1.0).abs() < 1e-6);
    }

    #[test]
    fn branch_b_ray_short_of_surface_is_empty() {
        let hf = flat_heightfield(50.0);
        let sampler = Sampler::new(1.0, 60.0, 32, 32, Spacing::Log).unwrap();
        let (_, out) = render_branch(&nadir_ray(100.0), Branch::Height(&hf), &head(4), &context(), &sampler, 3);
        assert!(out.accumulation < 1e-9);
    }

    #[test]
    fn branch_a_zero_network_is_a_constant_slab() {
        let cfg = RadianceFieldConfig {
            levels: 2,
            base_resolution: 4,
            log2_table_size: 8,
            hidden: 8,
            hidden_layers: 1,
            embedding_dim: 3,
            ..Default::default()
        };
        let mut rf = RadianceField::new(cfg, &mut IdAlloc::default(), &mut ChaCha8Rng::seed_from_u64(4));
        for p in rf.density_net.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let sampler = Sampler::new(0.5, 3.0, 64, 0, Spacing::Log).unwrap();
        let (_, out) = render_branch(&nadir_ray(0.0), Branch::Radiance(&rf), &head(3), &context(), &sampler, 1);
        let tau = std::f64::consts::LN_2;
        let expected = 1.0 - (-tau * 2.5).exp();
        assert!((out.accumulation - expected).abs() < 1e-9);
        assert!(out.rgb.iter().all(|&c| c >= 0.0));
        let d = expected_depth_vertical(&rf, [0.0, 0.0, 0.0], (0.5, 3.0), 512);
        // Exponential distribution truncated to [0.5, 3].
        let len = 2.5;
        let mean = 1.0 / tau - len * (-tau * len).exp() / (1.0 - (-tau * len).exp());
        assert!((d - (0.5 + mean)).abs() < 1e-3, "{d}");
    }

    #[test]
    fn ray_dump_has_one_row_per_sample() {
        let mut s = uniform_samples(4, 2.0, 1.0);
        composite(&mut s);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("t,density,weight\n0.25,1,"));
    }
}
