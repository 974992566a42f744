//! Joint optimization of the radiance field, height field and color head
//! from posed fisheye frames, plus checkpoint and DEM export.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Ray;
use crate::dataset::Dataset;
use crate::fields::{
    ColorHead, ColorHeadConfig, HeightField, HeightFieldConfig, IdAlloc, RadianceField, RadianceFieldConfig, DIRECTION_ENCODING_DIM,
};
use crate::io::{self, IoError};
use crate::losses::{self, HeightGradientFlow, HeightLossGrid, LossBreakdown, LossWeights};
use crate::metrics::{self, EvalReport, HeightMap};
use crate::params::{Adam, AdamConfig, Gradients, Param, ParamGroup, ParameterSet};
use crate::render::{self, SampleBatch, Sampler, ShadingContext, Spacing};
use crate::tape::{Tape, TapeError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("missing training data: {0}")]
    DataMissing(String),
    #[error("non-finite loss at iteration {iteration}: {breakdown:?}")]
    NonFiniteLoss { iteration: u64, breakdown: LossBreakdown },
    #[error("non-finite parameter {name} at iteration {iteration}")]
    NonFiniteParameter { iteration: u64, name: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeightGridConfig {
    pub rows: usize,
    pub cols: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl Default for HeightGridConfig {
    fn default() -> Self {
        Self { rows: 32, cols: 32, n_coarse: 32, n_fine: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeightFieldSettings {
    /// `(rows, cols)` of the raw-height grid.
    pub grid_res: (usize, usize),
    /// Sigmoid sharpness (1/scene unit).
    pub k1: f64,
    /// Density plateau below the surface (1/scene unit).
    pub k2: f64,
    /// Extra room on each side of the dataset's height bounds, as a fraction of the planar extent.
    pub bound_margin: f64,
}

impl Default for HeightFieldSettings {
    fn default() -> Self {
        Self { grid_res: (128, 128), k1: 10_000.0, k2: 1_000.0, bound_margin: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub ray_batch_size: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub spacing: Spacing,
    /// Restrict samples to the dataset's elevation bounds (widened by `height_field.bound_margin`).
    pub slab_sampling: bool,
    pub lr_hash: f64,
    pub lr_grid: f64,
    pub lr_dense: f64,
    /// Cosine decay floor as a fraction of each initial rate.
    pub lr_final_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossWeights,
    pub height_grid: HeightGridConfig,
    pub height_flow: HeightGradientFlow,
    /// Iteration from which lighting gradients reach the height-field normals.
    pub normal_grad_start: u64,
    pub angle_aware_distortion: bool,
    pub hapke_lighting: bool,
    pub mvs_supervision: bool,
    /// MVS cells drawn per iteration.
    pub mvs_batch_size: usize,
    pub radiance: RadianceFieldConfig,
    /// Derive the radiance field's normalization from the dataset region.
    pub fit_scene_bounds: bool,
    pub height_field: HeightFieldSettings,
    pub color_hidden: usize,
    pub log_every: u64,
    pub dem_resolution: usize,
    /// Rays of frame 0 dumped as `t,density,weight` CSVs after training.
    pub dump_rays: usize,
    /// Run every parallel section on one worker thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            ray_batch_size: 1024,
            n_coarse: 64,
            n_fine: 64,
            t_near: 0.15,
            t_far: 500.0,
            spacing: Spacing::Log,
            slab_sampling: true,
            lr_hash: 1e-2,
            lr_grid: 1e-2,
            lr_dense: 1e-3,
            lr_final_fraction: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossWeights::default(),
            height_grid: HeightGridConfig::default(),
            height_flow: HeightGradientFlow::Both,
            normal_grad_start: 2000,
            angle_aware_distortion: true,
            hapke_lighting: true,
            mvs_supervision: false,
            mvs_batch_size: 1024,
            radiance: RadianceFieldConfig::default(),
            fit_scene_bounds: true,
            height_field: HeightFieldSettings::default(),
            color_hidden: 64,
            log_every: 100,
            dem_resolution: 256,
            dump_rays: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be > 0");
        }
        if !(self.t_near > 0.0 && self.t_near < self.t_far) {
            return bad("need 0 < t_near < t_far");
        }
        if self.ray_batch_size == 0 {
            return bad("ray_batch_size must be >= 1");
        }
        if self.n_coarse < 2 {
            return bad("n_coarse must be >= 2");
        }
        if self.height_grid.rows == 0 || self.height_grid.cols == 0 || self.height_grid.n_coarse < 2 {
            return bad("height grid needs at least one cell and two coarse samples");
        }
        if !(self.height_field.k1 > 0.0 && self.height_field.k2 > 0.0) {
            return bad("k1 and k2 must be > 0");
        }
        Ok(())
    }

    pub fn sampler(&self) -> Sampler {
        Sampler::new(self.t_near, self.t_far, self.n_coarse, self.n_fine, self.spacing).expect("validated config")
    }

    /// Learning rate of `group` at `iteration` under cosine decay.
    pub fn learning_rate(&self, group: ParamGroup, iteration: u64) -> f64 {
        let base = match group {
            ParamGroup::HashTable => self.lr_hash,
            ParamGroup::Grid => self.lr_grid,
            ParamGroup::Dense => self.lr_dense,
        };
        let progress = (iteration as f64 / self.iterations as f64).min(1.0);
        let f = self.lr_final_fraction;
        base * (f + (1.0 - f) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// All learnable state: radiance field, height field and the shared color head.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub radiance: RadianceField,
    pub height: HeightField,
    pub head: ColorHead,
}

impl ParameterSet for SceneModel {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.radiance.params().collect();
        v.extend(self.height.params());
        v.extend(self.head.net.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.radiance.params_mut().collect();
        v.extend(self.height.params_mut());
        v.extend(self.head.net.params_mut());
        v
    }
}

impl SceneModel {
    pub fn new(radiance: RadianceFieldConfig, height: HeightFieldConfig, color_hidden: usize, direction_encoding: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = IdAlloc::default();
        let embedding_dim = radiance.embedding_dim;
        let radiance = RadianceField::new(radiance, &mut ids, &mut rng);
        let height = HeightField::new(HeightFieldConfig { feature_dim: embedding_dim, ..height }, &mut ids, &mut rng);
        let head = ColorHead::new(
            ColorHeadConfig {
                embedding_dim,
                direction_dim: if direction_encoding { DIRECTION_ENCODING_DIM } else { 0 },
                hidden: color_hidden,
            },
            &mut ids,
            &mut rng,
        );
        Self { radiance, height, head }
    }

    /// Model sized for `ds` under `config`.
    pub fn for_dataset(ds: &Dataset, config: &TrainConfig) -> Self {
        let m = &ds.meta;
        let extent = (m.x_range[1] - m.x_range[0]).max(m.y_range[1] - m.y_range[0]);
        let mut rf = config.radiance.clone();
        let [lo, hi] = m.height_bounds;
        if config.fit_scene_bounds {
            rf.scene_center = [0.5 * (m.x_range[0] + m.x_range[1]), 0.5 * (m.y_range[0] + m.y_range[1]), 0.5 * (lo + hi)];
            rf.scene_scale = 0.5 * extent;
        }
        let margin = config.height_field.bound_margin * extent;
        let hf = HeightFieldConfig {
            x_range: m.x_range,
            y_range: m.y_range,
            grid_res: config.height_field.grid_res,
            feature_dim: rf.embedding_dim,
            h_scale: 0.5 * (hi - lo) + margin,
            h_offset: 0.5 * (lo + hi),
            k1: config.height_field.k1,
            k2: config.height_field.k2,
        };
        Self::new(rf, hf, config.color_hidden, !config.hapke_lighting, config.seed)
    }
}

/// Everything one optimization step needs besides the parameters; sampling
/// decisions are frozen here so the recorded loss is a smooth function of
/// the parameters.
#[derive(Clone, Debug)]
pub struct IterationBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
    pub samples_a: SampleBatch,
    pub samples_b: SampleBatch,
    pub height_points: Vec<[f64; 2]>,
    pub height_samples: Option<SampleBatch>,
    pub h_k: f64,
    pub mvs_xy: Vec<[f64; 2]>,
    pub mvs_z: Vec<f64>,
    pub lambda_height: f64,
    pub lambda_mvs: f64,
    pub normal_grad: bool,
}

/// Tape nodes of the loss terms (MVS only when active).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub c_a: Var,
    pub c_b: Var,
    pub dist: Var,
    pub height: Option<Var>,
    pub mvs: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            c_a: tape.scalar(self.c_a),
            c_b: tape.scalar(self.c_b),
            dist: tape.scalar(self.dist),
            height: self.height.map_or(0.0, |v| tape.scalar(v)),
            mvs: self.mvs.map_or(0.0, |v| tape.scalar(v)),
        }
    }

    /// Every recorded term, in the order c_a, c_b, dist, height, mvs.
    pub fn terms(&self) -> Vec<Var> {
        let mut v = vec![self.c_a, self.c_b, self.dist];
        v.extend(self.height);
        v.extend(self.mvs);
        v
    }
}

pub fn shading_context(ds_hapke: crate::shading::HapkeParams, sun: crate::shading::SunGeometry, config: &TrainConfig) -> ShadingContext {
    ShadingContext { hapke: ds_hapke, sun, use_hapke: config.hapke_lighting }
}

/// Records all loss terms of one iteration on `tape`.
pub fn record_losses(tape: &mut Tape, model: &SceneModel, batch: &IterationBatch, config: &TrainConfig, ctx: &ShadingContext) -> LossVars {
    let w = &config.loss;
    let a = render::tape_branch_a(tape, &batch.rays, &batch.samples_a, &model.radiance, &model.head, ctx);
    let b = render::tape_branch_b(tape, &batch.rays, &batch.samples_b, &model.height, &model.head, ctx, batch.normal_grad);
    let c_a = losses::tape_rgb_loss(tape, a.rgb, &batch.targets, w.lambda_ca);
    let c_b = losses::tape_rgb_loss(tape, b.rgb, &batch.targets, w.lambda_cb);
    let n = batch.rays.len() as f64;
    let scale = batch.rays.iter().map(|r| w.lambda_dist / n * if config.angle_aware_distortion { r.theta_d.cos() } else { 1.0 }).collect();
    let per_ray = tape.distortion(a.weights, batch.samples_a.s.clone(), scale);
    let dist = tape.sum(per_ray);
    let height = batch.height_samples.as_ref().map(|hs| {
        losses::tape_height_consistency_on(
            tape,
            &model.radiance,
            &model.height,
            batch.h_k,
            &batch.height_points,
            hs,
            batch.lambda_height,
            config.height_flow,
        )
    });
    let mvs = (!batch.mvs_z.is_empty()).then(|| losses::tape_mvs_loss(tape, &model.height, &batch.mvs_xy, &batch.mvs_z, batch.lambda_mvs));
    let mut vars = LossVars { c_a, c_b, dist, height, mvs, total: c_a };
    vars.total = losses::total_loss(tape, &vars.terms());
    vars
}

/// Per-iteration history entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SceneModel,
    /// Exported DEM in the top-camera datum.
    pub dem: HeightMap,
    pub history: Vec<IterationLog>,
    pub report: Option<EvalReport>,
}

/// Sampling state shared by all iterations.
struct Trainer<'a> {
    ds: &'a Dataset,
    config: &'a TrainConfig,
    ctx: ShadingContext,
    sampler: Sampler,
    slab: Option<(f64, f64)>,
    pixels: Vec<(u32, u32, u32)>,
    height_grid: HeightLossGrid,
    mvs: Option<(Vec<[f64; 2]>, Vec<f64>)>,
}

impl<'a> Trainer<'a> {
    fn new(ds: &'a Dataset, config: &'a TrainConfig, mvs_world: Option<&HeightMap>) -> Result<Self, TrainError> {
        let mut pixels = Vec::new();
        for (f, frame) in ds.frames.iter().enumerate() {
            let w = frame.mask.width;
            for (i, &v) in frame.mask.valid.iter().enumerate() {
                if v {
                    pixels.push((f as u32, i as u32 % w, i as u32 / w));
                }
            }
        }
        if pixels.is_empty() {
            return Err(TrainError::DataMissing("no valid pixels in any frame".into()));
        }
        let mvs = if config.mvs_supervision {
            let map = mvs_world.ok_or_else(|| TrainError::DataMissing("MVS supervision enabled without an MVS map".into()))?;
            Some(losses::mvs_targets(map).map_err(|e| TrainError::DataMissing(e.to_string()))?)
        } else {
            None
        };
        let h_k = ds.top_camera_height();
        let (lo, hi) = slab_bounds(ds, config);
        let depth_range = if config.slab_sampling {
            ((h_k - hi).max(0.0), h_k - lo)
        } else {
            let far = (h_k - lo) * 1.25;
            (config.t_near.min(0.5 * far), far)
        };
        let hg = &config.height_grid;
        let mut height_grid = HeightLossGrid::covering(ds.meta.x_range, ds.meta.y_range, hg.rows, hg.cols, h_k, depth_range);
        height_grid.n_coarse = hg.n_coarse;
        height_grid.n_fine = hg.n_fine;
        height_grid.seed = config.seed ^ 0x4845_4947_4854;
        height_grid.opaque_floor = config.slab_sampling;
        Ok(Self {
            ds,
            config,
            ctx: shading_context(ds.meta.hapke, ds.meta.sun, config),
            sampler: config.sampler(),
            slab: config.slab_sampling.then_some((lo, hi)),
            pixels,
            height_grid,
            mvs,
        })
    }

    fn batch(&self, model: &SceneModel, iteration: u64) -> IterationBatch {
        let config = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ iteration);
        let mut rays = Vec::with_capacity(config.ray_batch_size);
        let mut targets = Vec::with_capacity(config.ray_batch_size);
        while rays.len() < config.ray_batch_size {
            let (f, x, y) = self.pixels[rng.random_range(0..self.pixels.len())];
            let frame = &self.ds.frames[f as usize];
            let Ok(ray) = frame.camera.pixel_to_ray(x as f64 + 0.5, y as f64 + 0.5) else { continue };
            rays.push(ray);
            targets.push(frame.image.rgb(x as usize, y as usize));
        }
        let samplers: Vec<Sampler> = match self.slab {
            Some((lo, hi)) => rays.iter().map(|r| self.sampler.within_slab(r, lo, hi)).collect(),
            None => vec![self.sampler; rays.len()],
        };
        let samples_a = SampleBatch::sample_each(&rays, &samplers, &mut rng, |p| model.radiance.density_world(p));
        let hf = &model.height;
        let samples_b = SampleBatch::sample_each(&rays, &samplers, &mut rng, |p| p.iter().map(|q| hf.density(q[0], q[1], q[2])).collect());
        let lambda_height = config.loss.lambda_height.at(iteration);
        let (height_points, height_samples) = if lambda_height > 0.0 {
            let pts = self.height_grid.stratified_points(iteration);
            let hs = losses::height_samples(&model.radiance, &self.height_grid, &pts, &mut rng);
            (pts, Some(hs))
        } else {
            (Vec::new(), None)
        };
        let lambda_mvs = config.loss.lambda_mvs.at(iteration);
        let (mut mvs_xy, mut mvs_z) = (Vec::new(), Vec::new());
        if let Some((xy, z)) = &self.mvs {
            if lambda_mvs > 0.0 {
                for _ in 0..config.mvs_batch_size.min(z.len()) {
                    let i = rng.random_range(0..z.len());
                    mvs_xy.push(xy[i]);
                    mvs_z.push(z[i]);
                }
            }
        }
        IterationBatch {
            rays,
            targets,
            samples_a,
            samples_b,
            height_points,
            height_samples,
            h_k: self.height_grid.h_k,
            mvs_xy,
            mvs_z,
            lambda_height,
            lambda_mvs,
            normal_grad: iteration >= config.normal_grad_start,
        }
    }
}

/// Elevation slab `[lo, hi]` that contains the surface, widened by the configured margin.
pub fn slab_bounds(ds: &Dataset, config: &TrainConfig) -> (f64, f64) {
    let m = &ds.meta;
    let extent = (m.x_range[1] - m.x_range[0]).max(m.y_range[1] - m.y_range[0]);
    let margin = config.height_field.bound_margin * extent;
    (m.height_bounds[0] - margin, m.height_bounds[1] + margin)
}

fn check_parameters(model: &SceneModel, iteration: u64) -> Result<(), TrainError> {
    match model.params().into_iter().find(|p| !p.is_finite()) {
        Some(p) => Err(TrainError::NonFiniteParameter { iteration, name: p.name.clone() }),
        None => Ok(()),
    }
}

/// Runs the optimization. `mvs_world` holds MVS elevations in world units.
/// When `out_dir` is given, the loss CSV, checkpoint, DEM and (with ground
/// truth available) an evaluation report are written there.
pub fn train(
    ds: &Dataset,
    config: &TrainConfig,
    mvs_world: Option<&HeightMap>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if config.deterministic {
        let pool =
            rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| TrainError::InvalidConfig(format!("thread pool: {e}")))?;
        return pool.install(|| train_inner(ds, config, mvs_world, out_dir));
    }
    train_inner(ds, config, mvs_world, out_dir)
}

fn train_inner(
    ds: &Dataset,
    config: &TrainConfig,
    mvs_world: Option<&HeightMap>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let trainer = Trainer::new(ds, config, mvs_world)?;
    let mut model = SceneModel::for_dataset(ds, config);
    let mut adam = Adam::new(config.adam, &model);
    let mut grads = Gradients::for_set(&model);
    let mut history = Vec::with_capacity(config.iterations as usize);
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
            let path = dir.join("losses.csv");
            let mut f = BufWriter::new(File::create(&path).map_err(|e| IoError::io(&path, e))?);
            writeln!(f, "{}", LossBreakdown::CSV_HEADER).map_err(|e| IoError::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    for iteration in 0..config.iterations {
        let batch = trainer.batch(&model, iteration);
        let mut tape = Tape::new();
        let vars = record_losses(&mut tape, &model, &batch, config, &trainer.ctx);
        let breakdown = vars.breakdown(&tape);
        if !breakdown.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration, breakdown });
        }
        grads.zero();
        tape.backward(vars.total, &mut grads)?;
        adam.step(&mut model, &grads, |g| config.learning_rate(g, iteration));
        history.push(IterationLog { iteration, losses: breakdown });
        if (iteration + 1) % 100 == 0 || iteration + 1 == config.iterations {
            check_parameters(&model, iteration)?;
        }
        let log_now = config.log_every > 0 && (iteration % config.log_every == 0 || iteration + 1 == config.iterations);
        if log_now {
            log::info!("iteration {iteration}: total {:.6} {:?}", breakdown.total(), breakdown);
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{}", breakdown.csv_row(iteration)).map_err(|e| IoError::io(path, e))?;
            }
        }
    }
    if let Some((mut f, path)) = csv {
        f.flush().map_err(|e| IoError::io(&path, e))?;
    }
    let n = config.dem_resolution;
    let dem = ds.meta.to_datum(&model.height.to_heightmap(n, n));
    let report = match &ds.gt_dem {
        Some(gt) if gt.shape() == dem.shape() => metrics::evaluate(&dem, gt, 1000.0, 0.1).ok(),
        _ => None,
    };
    if let Some(dir) = out_dir {
        write_checkpoint(&dir.join("checkpoint.bin"), &model, config.iterations)?;
        io::write_heightmap_pfm(&dir.join("dem.pfm"), &dem)?;
        io::write_heightmap_png(&dir.join("dem.png"), &dem)?;
        io::write_json(&dir.join("config.json"), config)?;
        if let Some(r) = &report {
            io::write_json(&dir.join("report.json"), r)?;
        }
        if config.dump_rays > 0 {
            dump_rays(&dir.join("rays"), ds, &model, config, &trainer.ctx)?;
        }
    }
    Ok(TrainOutcome { model, dem, history, report })
}

/// Writes `t,density,weight` for evenly spaced valid pixels along the middle row of frame 0.
fn dump_rays(dir: &Path, ds: &Dataset, model: &SceneModel, config: &TrainConfig, ctx: &ShadingContext) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let frame = &ds.frames[0];
    let y = frame.camera.height / 2;
    let xs: Vec<u32> = (0..frame.camera.width).filter(|&x| frame.mask.is_valid(x, y)).collect();
    let (lo, hi) = slab_bounds(ds, config);
    for i in 0..config.dump_rays.min(xs.len()) {
        let x = xs[i * xs.len() / config.dump_rays.min(xs.len())];
        let Ok(ray) = frame.camera.pixel_to_ray(x as f64 + 0.5, y as f64 + 0.5) else { continue };
        let sampler = if config.slab_sampling { config.sampler().within_slab(&ray, lo, hi) } else { config.sampler() };
        let (samples, _) = render::render_branch(&ray, render::Branch::Radiance(&model.radiance), &model.head, ctx, &sampler, config.seed);
        let path = dir.join(format!("ray_{i:03}.csv"));
        let file = File::create(&path).map_err(|e| IoError::io(&path, e))?;
        samples.write_csv(BufWriter::new(file)).map_err(|e| IoError::io(&path, e))?;
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NDEMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub tensors: Vec<CheckpointTensor>,
}

pub fn write_checkpoint(path: &Path, model: &SceneModel, iteration: u64) -> Result<(), TrainError> {
    let io_err = |e| TrainError::Io(IoError::io(path, e));
    let mut f = BufWriter::new(File::create(path).map_err(io_err)?);
    let params = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(io_err)?;
    f.flush().map_err(io_err)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| IoError::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let iteration = cur.u64()?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = cur.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(CheckpointTensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { version, iteration, tensors })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Copies stored values into a model with matching tensor names and shapes.
    pub fn load_into(&self, model: &mut SceneModel) -> Result<(), TrainError> {
        let params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(TrainError::Checkpoint(format!("{} tensors stored, model has {}", self.tensors.len(), params.len())));
        }
        for (p, t) in params.into_iter().zip(&self.tensors) {
            if p.name != t.name || p.shape != t.shape {
                return Err(TrainError::Checkpoint(format!("tensor {} {:?} does not match {} {:?}", t.name, t.shape, p.name, p.shape)));
            }
            p.data.iter_mut().zip(&t.data).for_each(|(d, &v)| *d = v as f64);
        }
        Ok(())
    }
}
