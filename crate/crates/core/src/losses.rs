//! Training objectives: photometric losses, the angle-aware distortion
//! regularizer, height-consistency distillation and MVS supervision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Ray;
use crate::fields::{HeightField, RadianceField};
use crate::metrics::HeightMap;
use crate::render::{self, RaySamples, SampleBatch, Sampler, Spacing};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("MVS supervision requested but the map has no valid cells")]
    NoValidCells,
}

/// Piecewise-constant schedule: each entry `(start, value)` holds from its
/// start iteration until the next entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule(pub Vec<(u64, f64)>);

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Self(vec![(0, v)])
    }

    pub fn at(&self, iteration: u64) -> f64 {
        self.0.iter().take_while(|(start, _)| *start <= iteration).last().map_or(0.0, |&(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ca: f64,
    pub lambda_cb: f64,
    pub lambda_dist: f64,
    pub lambda_height: Schedule,
    pub lambda_mvs: Schedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ca: 1.0,
            lambda_cb: 0.001,
            lambda_dist: 0.01,
            lambda_height: Schedule(vec![(0, 0.0), (2000, 1.0), (4000, 0.001)]),
            lambda_mvs: Schedule(vec![(0, 1.0), (10_000, 0.01)]),
        }
    }
}

/// Horizontal grid at the top camera height from which vertical rays are cast.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightLossGrid {
    /// Minimum corner of the covered region.
    pub origin: [f64; 2],
    pub cell_size: [f64; 2],
    pub rows: usize,
    pub cols: usize,
    /// Ray origin height (the highest camera).
    pub h_k: f64,
    /// Depth interval sampled along each vertical ray.
    pub depth_range: (f64, f64),
    pub n_coarse: usize,
    pub n_fine: usize,
    pub seed: u64,
    /// The far end of the depth interval is solid ground.
    pub opaque_floor: bool,
}

impl HeightLossGrid {
    pub fn covering(x_range: [f64; 2], y_range: [f64; 2], rows: usize, cols: usize, h_k: f64, depth_range: (f64, f64)) -> Self {
        Self {
            origin: [x_range[0], y_range[0]],
            cell_size: [(x_range[1] - x_range[0]) / cols as f64, (y_range[1] - y_range[0]) / rows as f64],
            rows,
            cols,
            h_k,
            depth_range,
            n_coarse: 32,
            n_fine: 32,
            seed: 0,
            opaque_floor: false,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// One uniformly jittered point per cell, row-major; deterministic in `(seed, iteration)`.
    pub fn stratified_points(&self, iteration: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut pts = Vec::with_capacity(self.cells());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (jx, jy): (f64, f64) = (rng.random(), rng.random());
                pts.push([self.origin[0] + (c as f64 + jx) * self.cell_size[0], self.origin[1] + (r as f64 + jy) * self.cell_size[1]]);
            }
        }
        pts
    }

    pub fn sampler(&self) -> Sampler {
        let s = Sampler::new(self.depth_range.0, self.depth_range.1, self.n_coarse, self.n_fine, Spacing::Linear)
            .expect("height-loss depth range must be valid");
        if self.opaque_floor {
            s.with_opaque_end()
        } else {
            s
        }
    }
}

/// `weight * mean((clamp(pred, 0, 4) - target)^2)` over the three channels.
pub fn rgb_loss(pred: [f64; 3], target: [f64; 3], weight: f64) -> f64 {
    weight * pred.iter().zip(target).map(|(p, t)| (p.clamp(0.0, 4.0) - t).powi(2)).sum::<f64>() / 3.0
}

/// Batched [`rgb_loss`]: `pred` is `n x 3`, targets row-major.
pub fn tape_rgb_loss(tape: &mut Tape, pred: Var, target: &[[f64; 3]], weight: f64) -> Var {
    let clamped = tape.clamp(pred, 0.0, 4.0);
    let t = tape.constant(Tensor::new(target.len(), 3, target.iter().flatten().copied().collect()));
    let d = tape.sub(clamped, t);
    let sq = tape.square(d);
    let m = tape.mean(sq);
    tape.scale(m, weight)
}

/// Discrete distortion value on normalized boundaries `s` (`w.len() + 1` entries).
pub fn distortion_value(w: &[f64], s: &[f64]) -> f64 {
    let mut pair = 0.0;
    let (mut wsum, mut wm) = (0.0, 0.0);
    let mut intra = 0.0;
    for i in 0..w.len() {
        let m = 0.5 * (s[i] + s[i + 1]);
        pair += w[i] * (m * wsum - wm);
        wsum += w[i];
        wm += w[i] * m;
        intra += w[i] * w[i] * (s[i + 1] - s[i]);
    }
    2.0 * pair + intra / 3.0
}

/// Adds `factor * d(distortion)/dw` into `out`.
pub fn distortion_grad(w: &[f64], s: &[f64], factor: f64, out: &mut [f64]) {
    let k = w.len();
    let mids: Vec<f64> = (0..k).map(|i| 0.5 * (s[i] + s[i + 1])).collect();
    let total_w: f64 = w.iter().sum();
    let total_wm: f64 = w.iter().zip(&mids).map(|(a, b)| a * b).sum();
    let (mut below_w, mut below_wm) = (0.0, 0.0);
    for i in 0..k {
        let m = mids[i];
        let above_w = total_w - below_w - w[i];
        let above_wm = total_wm - below_wm - w[i] * m;
        let pair = (m * below_w - below_wm) + (above_wm - m * above_w);
        out[i] += factor * (2.0 * pair + 2.0 / 3.0 * w[i] * (s[i + 1] - s[i]));
        below_w += w[i];
        below_wm += w[i] * m;
    }
}

/// Distortion loss for one ray, scaled by `cos(theta_d)` and `lambda_dist`.
pub fn distortion_loss_angle(samples: &RaySamples, theta_d: f64, lambda_dist: f64) -> f64 {
    lambda_dist * theta_d.cos() * distortion_value(&samples.weights, &samples.s)
}

/// Where the height-consistency gradient is allowed to flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightGradientFlow {
    #[default]
    Both,
    HeightFieldOnly,
    RadianceFieldOnly,
}

fn vertical_rays(points: &[[f64; 2]], h_k: f64) -> Vec<Ray> {
    points.iter().map(|&[x, y]| Ray { origin: [x, y, h_k], direction: [0.0, 0.0, -1.0], theta_d: 0.0, pixel: (0.0, 0.0) }).collect()
}

/// Hierarchical samples along the vertical rays through `points`
/// (coarse density pass without gradients).
pub fn height_samples(rf: &RadianceField, grid: &HeightLossGrid, points: &[[f64; 2]], rng: &mut impl Rng) -> SampleBatch {
    let rays = vertical_rays(points, grid.h_k);
    SampleBatch::sample(&rays, &grid.sampler(), rng, |p| rf.density_world(p))
}

/// Records the height-consistency loss for `points` on precomputed vertical-ray samples.
#[allow(clippy::too_many_arguments)]
pub fn tape_height_consistency_on(
    tape: &mut Tape,
    rf: &RadianceField,
    hf: &HeightField,
    h_k: f64,
    points: &[[f64; 2]],
    batch: &SampleBatch,
    lambda: f64,
    flow: HeightGradientFlow,
) -> Var {
    let (dens, _) = rf.tape_query(tape, &batch.positions);
    let density = tape.reshape(dens, points.len(), batch.k);
    let weights = tape.render_weights(density, batch.delta.clone());
    let depth = render::tape_expected_depth(tape, weights, batch);
    let depth = if flow == HeightGradientFlow::HeightFieldOnly { tape.detach(depth) } else { depth };
    let h = hf.tape_height(tape, points);
    let h = if flow == HeightGradientFlow::RadianceFieldOnly { tape.detach(h) } else { h };
    // (h_k - depth) - h
    let neg = tape.add(depth, h);
    let diff = tape.add_scalar(neg, -h_k);
    let l1 = tape.abs(diff);
    let m = tape.mean(l1);
    tape.scale(m, lambda)
}

/// Samples the vertical rays through `points` and records the height-consistency loss.
#[allow(clippy::too_many_arguments)]
pub fn tape_height_consistency(
    tape: &mut Tape,
    rf: &RadianceField,
    hf: &HeightField,
    grid: &HeightLossGrid,
    points: &[[f64; 2]],
    lambda: f64,
    flow: HeightGradientFlow,
    rng: &mut impl Rng,
) -> Var {
    let batch = height_samples(rf, grid, points, rng);
    tape_height_consistency_on(tape, rf, hf, grid.h_k, points, &batch, lambda, flow)
}

/// Height-consistency loss at the stratified points of `iteration`.
pub fn height_consistency_loss(rf: &RadianceField, hf: &HeightField, grid: &HeightLossGrid, lambda: f64, iteration: u64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let points = grid.stratified_points(iteration);
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed.wrapping_add(iteration));
    let mut tape = Tape::new();
    let loss = tape_height_consistency(&mut tape, rf, hf, grid, &points, lambda, HeightGradientFlow::Both, &mut rng);
    tape.scalar(loss)
}

/// Valid MVS cells as planar centers and world elevations.
pub fn mvs_targets(mvs: &HeightMap) -> Result<(Vec<[f64; 2]>, Vec<f64>), LossError> {
    let mut xy = Vec::new();
    let mut z = Vec::new();
    for r in 0..mvs.rows {
        for c in 0..mvs.cols {
            let v = mvs.get(r, c);
            if v.is_finite() {
                xy.push(mvs.cell_center(r, c));
                z.push(v);
            }
        }
    }
    if z.is_empty() {
        return Err(LossError::NoValidCells);
    }
    Ok((xy, z))
}

/// `lambda * mean |mvs - h|` over the given targets.
pub fn tape_mvs_loss(tape: &mut Tape, hf: &HeightField, xy: &[[f64; 2]], z: &[f64], lambda: f64) -> Var {
    let h = hf.tape_height(tape, xy);
    let target = tape.constant(Tensor::column(z.to_vec()));
    let d = tape.sub(h, target);
    let a = tape.abs(d);
    let m = tape.mean(a);
    tape.scale(m, lambda)
}

/// MVS supervision against a map in world elevations (NaN cells skipped).
pub fn mvs_supervision_loss(hf: &HeightField, mvs: &HeightMap, lambda: f64) -> Result<f64, LossError> {
    let (xy, z) = mvs_targets(mvs)?;
    let total: f64 = xy.iter().zip(&z).map(|(&[x, y], &t)| (hf.height(x, y) - t).abs()).sum();
    Ok(lambda * total / z.len() as f64)
}

/// Per-term loss values for one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub c_a: f64,
    pub c_b: f64,
    pub dist: f64,
    pub height: f64,
    pub mvs: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.c_a + self.c_b + self.dist + self.height + self.mvs
    }

    pub fn is_finite(&self) -> bool {
        [self.c_a, self.c_b, self.dist, self.height, self.mvs].iter().all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "iteration,L_cA,L_cB,L_dist,L_height,L_mvs,total";

    pub fn csv_row(&self, iteration: u64) -> String {
        format!("{iteration},{},{},{},{},{},{}", self.c_a, self.c_b, self.dist, self.height, self.mvs, self.total())
    }
}

/// Sum of the recorded loss terms and their values.
pub fn total_loss(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{HeightFieldConfig, IdAlloc, RadianceFieldConfig};
    use crate::params::Gradients;

    #[test]
    fn rgb_loss_cases() {
        assert_eq!(rgb_loss([0.2, 0.4, 0.6], [0.2, 0.4, 0.6], 1.0), 0.0);
        assert_eq!(rgb_loss([1.0; 3], [0.0; 3], 1.0), 1.0);
        assert!((rgb_loss([1.0; 3], [0.0; 3], 0.001) - 0.001).abs() < 1e-18);
        assert_eq!(rgb_loss([9.0, 0.0, 0.0], [0.0; 3], 3.0), 16.0);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(2, 3, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.5]));
        let l = tape_rgb_loss(&mut tape, p, &[[0.0; 3], [0.5; 3]], 1.0);
        assert!((tape.scalar(l) - 0.5).abs() < 1e-15);
    }

    fn literal_distortion(w: &[f64], s: &[f64]) -> f64 {
        let m: Vec<f64> = (0..w.len()).map(|i| 0.5 * (s[i] + s[i + 1])).collect();
        let mut total = 0.0;
        for i in 0..w.len() {
            for j in 0..w.len() {
                total += w[i] * w[j] * (m[i] - m[j]).abs();
            }
        }
        for i in 0..w.len() {
            total += w[i] * w[i] * (s[i + 1] - s[i]) / 3.0;
        }
        total
    }

    #[test]
    fn distortion_delta_and_pair_cases() {
        let s = [0.0, 0.5, 0.5 + 1e-12, 1.0];
        assert!(distortion_value(&[0.0, 1.0, 0.0], &s) < 1e-12);
        let s = [0.2, 0.3, 0.7, 0.8];
        let v = distortion_value(&[0.5, 0.0, 0.5], &s);
        let pairwise = 2.0 * 0.5 * 0.5 * 0.5;
        let own = 2.0 * 0.25 * 0.1 / 3.0;
        assert!((v - (pairwise + own)).abs() < 1e-15);
    }

    #[test]
    fn distortion_matches_literal_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.random_range(1..20);
            let mut s: Vec<f64> = (0..=k).map(|_| rng.random::<f64>()).collect();
            s.sort_by(f64::total_cmp);
            let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() / k as f64).collect();
            assert!((distortion_value(&w, &s) - literal_distortion(&w, &s)).abs() < 1e-12);
        }
    }

    #[test]
    fn distortion_gradient_matches_finite_differences() {
        let s = [0.0, 0.1, 0.25, 0.3, 0.6, 0.9, 1.0];
        let w = [0.05, 0.2, 0.3, 0.1, 0.15, 0.05];
        let mut g = [0.0; 6];
        distortion_grad(&w, &s, 2.0, &mut g);
        for i in 0..6 {
            let (mut p, mut m) = (w, w);
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = 2.0 * (literal_distortion(&p, &s) - literal_distortion(&m, &s)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn angle_factor_is_exact_cosine() {
        let samples = RaySamples { s: vec![0.0, 0.3, 0.6, 1.0], weights: vec![0.2, 0.5, 0.1], ..Default::default() };
        let tilted = distortion_loss_angle(&samples, 60f64.to_radians(), 0.01);
        let straight = distortion_loss_angle(&samples, 0.0, 0.01);
        assert!((tilted / straight - 60f64.to_radians().cos()).abs() < 1e-15);
        assert!((tilted / straight - 0.5).abs() < 1e-12);
    }

    #[test]
    fn published_schedules() {
        let w = LossWeights::default();
        for (it, expected) in [(0, 0.0), (1000, 0.0), (1999, 0.0), (2000, 1.0), (3999, 1.0), (4000, 0.001), (99_999, 0.001)] {
            assert_eq!(w.lambda_height.at(it), expected, "iteration {it}");
        }
        assert_eq!(w.lambda_mvs.at(9999), 1.0);
        assert_eq!(w.lambda_mvs.at(10_000), 0.01);
    }

    fn slab_fields(slab_z: f64, hf_z: f64) -> (RadianceField, HeightField) {
        let mut ids = IdAlloc::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = RadianceFieldConfig {
            levels: 2,
            base_resolution: 4,
            log2_table_size: 8,
            hidden: 4,
            hidden_layers: 1,
            embedding_dim: 2,
            scene_scale: 100.0,
            ..Default::default()
        };
        let mut rf = RadianceField::new(cfg, &mut ids, &mut rng);
        // Level 0 is dense; store 100 * contracted z at its nodes so the first
        // encoded feature equals world z inside the unit ball.
        rf.tables.data.iter_mut().for_each(|v| *v = 0.0);
        let res = rf.config.level_resolution(0);
        let side = res + 1;
        for k in 0..side {
            for j in 0..side {
                for i in 0..side {
                    let idx = i + side * (j + side * k);
                    rf.tables.data[2 * idx] = ((k as f64 / res as f64) * 4.0 - 2.0) * 100.0;
                }
            }
        }
        for p in rf.density_net.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        // hidden = relu(-(level-0 z) + slab/scale) * 1, density = softplus(k * hidden - c)
        let (w0, b0) = &mut rf.density_net.layers[0];
        w0.data[0] = -1.0;
        b0.data[0] = slab_z;
        let (w1, b1) = &mut rf.density_net.layers[1];
        w1.data[0] = 50.0;
        b1.data[0] = -10.0;
        let hcfg = HeightFieldConfig {
            x_range: [-10.0, 10.0],
            y_range: [-10.0, 10.0],
            grid_res: (2, 2),
            feature_dim: 2,
            h_scale: 50.0,
            h_offset: 0.0,
            k1: 10.0,
            k2: 10.0,
        };
        let mut hf = HeightField::new(hcfg, &mut ids, &mut rng);
        hf.fit_nodes(|_, _| hf_z);
        (rf, hf)
    }

    fn grid() -> HeightLossGrid {
        let mut g = HeightLossGrid::covering([-10.0, 10.0], [-10.0, 10.0], 2, 2, 40.0, (1.0, 80.0));
        g.n_coarse = 64;
        g.n_fine = 128;
        g
    }

    #[test]
    fn height_consistency_with_matching_slab() {
        // Hidden unit relu(slab - z); density softplus(50 d - 10) rises sharply below the slab.
        let (rf, hf) = slab_fields(5.0, 5.0);
        let l = height_consistency_loss(&rf, &hf, &grid(), 1.0, 0);
        assert!(l < 0.5, "{l}");
        let (rf2, hf2) = slab_fields(5.0, 10.0);
        let l2 = height_consistency_loss(&rf2, &hf2, &grid(), 1.0, 0);
        assert!((l2 - l - 5.0).abs() < 1e-6, "{l} {l2}");
        assert_eq!(height_consistency_loss(&rf2, &hf2, &grid(), LossWeights::default().lambda_height.at(1000), 1000), 0.0);
    }

    #[test]
    fn mvs_cases() {
        let (_, hf) = slab_fields(0.0, 3.0);
        let mut map = hf.to_heightmap(4, 4);
        assert_eq!(mvs_supervision_loss(&hf, &map, 1.0).unwrap(), 0.0);
        for (i, v) in map.values.iter_mut().enumerate() {
            *v = if i % 2 == 0 { *v + 2.0 } else { f64::NAN };
        }
        assert!((mvs_supervision_loss(&hf, &map, 0.5).unwrap() - 1.0).abs() < 1e-12);
        map.values.iter_mut().for_each(|v| *v = f64::NAN);
        assert_eq!(mvs_supervision_loss(&hf, &map, 1.0), Err(LossError::NoValidCells));
    }

    #[test]
    fn total_is_additive() {
        assert_eq!(LossBreakdown::default().total(), 0.0);
        let b = LossBreakdown { c_a: 0.1, c_b: 0.2, dist: 0.3, height: 0.4, mvs: 0.0 };
        assert!((b.total() - 1.0).abs() < 1e-15);
        let with_mvs = LossBreakdown { mvs: 0.5, ..b };
        assert!((with_mvs.total() - 1.5).abs() < 1e-15);
        assert_eq!(b.csv_row(7).split(',').count(), LossBreakdown::CSV_HEADER.split(',').count());
        let mut tape = Tape::new();
        let parts: Vec<Var> = [0.1, 0.2, 0.3, 0.4].iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
        let t = total_loss(&mut tape, &parts);
        assert!((tape.scalar(t) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stratified_points_cover_each_cell() {
        let g = grid();
        let pts = g.stratified_points(3);
        assert_eq!(pts, g.stratified_points(3));
        assert_ne!(pts, g.stratified_points(4));
        for (i, p) in pts.iter().enumerate() {
            let (r, c) = (i / g.cols, i % g.cols);
            assert!(p[0] >= -10.0 + c as f64 * 10.0 && p[0] <= -10.0 + (c + 1) as f64 * 10.0);
            assert!(p[1] >= -10.0 + r as f64 * 10.0 && p[1] <= -10.0 + (r + 1) as f64 * 10.0);
        }
    }

    #[test]
    fn height_consistency_gradient_flow_switch() {
        let (rf, hf) = slab_fields(5.0, 8.0);
        let g = grid();
        let pts = g.stratified_points(0);
        for (flow, rf_grad, hf_grad) in [
            (HeightGradientFlow::Both, true, true),
            (HeightGradientFlow::HeightFieldOnly, false, true),
            (HeightGradientFlow::RadianceFieldOnly, true, false),
        ] {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let l = tape_height_consistency(&mut tape, &rf, &hf, &g, &pts, 1.0, flow, &mut rng);
            let mut grads = Gradients::for_params(rf.params().chain(hf.params()));
            tape.backward(l, &mut grads).unwrap();
            let nonzero = |id| grads.get(id).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero(rf.tables.id), rf_grad, "{flow:?}");
            assert_eq!(nonzero(hf.raw.id), hf_grad, "{flow:?}");
        }
    }
}
