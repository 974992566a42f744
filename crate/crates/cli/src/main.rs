use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nerfdem::dataset::Dataset;
use nerfdem::io;
use nerfdem::metrics::{self, HeightMap};
use nerfdem::simulator::{self, DescentTrajectory, SceneDescription, Terrain};
use nerfdem::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "nerfdem", version, about = "Elevation models from fisheye descent imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic descent dataset.
    Simulate {
        /// Terrain JSON (optionally with a `lighting` object).
        #[arg(long)]
        terrain: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write `mvs_dem.pfm`: ground truth with this fraction of cells removed.
        #[arg(long)]
        mvs_holes: Option<f64>,
        /// Elevation noise of `mvs_dem.pfm`.
        #[arg(long, default_value_t = 0.0)]
        mvs_noise: f64,
        #[arg(long, default_value_t = 0)]
        mvs_seed: u64,
    },
    /// Fit the scene and export a DEM.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// MVS elevation map (dataset DEM layout); enables MVS supervision.
        #[arg(long)]
        mvs: Option<PathBuf>,
        /// Run on a single worker thread so results are reproducible bit for bit.
        #[arg(long)]
        deterministic: bool,
        /// Dump `t,density,weight` for this many rays of frame 0.
        #[arg(long, default_value_t = 0)]
        dump_rays: usize,
    },
    /// Compare a predicted DEM against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        cell_size: f64,
        #[arg(long, default_value_t = 1000.0)]
        window: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        /// Report directory (defaults to the prediction's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate { terrain, trajectory, out, mvs_holes, mvs_noise, mvs_seed } => {
            simulate(&terrain, &trajectory, &out, mvs_holes.map(|h| (h, mvs_noise, mvs_seed)))
        }
        Command::Train { config, data, out, mvs, deterministic, dump_rays } => {
            let mut cfg: TrainConfig = io::read_json(&config)?;
            if dump_rays > 0 {
                cfg.dump_rays = dump_rays;
            }
            cfg.deterministic |= deterministic;
            run_train(cfg, &data, &out, mvs.as_deref())
        }
        Command::Eval { pred, gt, cell_size, window, tau, out } => eval(&pred, &gt, cell_size, window, tau, out),
    }
}

fn simulate(terrain: &Path, trajectory: &Path, out: &Path, mvs: Option<(f64, f64, u64)>) -> Result<()> {
    let scene: SceneDescription = io::read_json(terrain)?;
    let traj: DescentTrajectory = io::read_json(trajectory)?;
    let lighting = scene.lighting;
    let terrain = Terrain::new(scene.terrain)?;
    let meta = simulator::emit_dataset(&terrain, &traj, &lighting.hapke, &lighting.sun, out)?;
    log::info!("wrote {} frames to {}", traj.n_frames, out.display());
    if let Some((holes, noise, seed)) = mvs {
        if !(0.0..1.0).contains(&holes) {
            bail!("--mvs-holes must lie in [0, 1)");
        }
        let gt = meta.read_dem(&out.join("gt_dem.pfm"))?;
        let pseudo = simulator::make_pseudo_mvs(&gt, holes, noise, seed);
        io::write_heightmap_pfm(&out.join("mvs_dem.pfm"), &pseudo)?;
    }
    Ok(())
}

fn run_train(cfg: TrainConfig, data: &Path, out: &Path, mvs: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let mut cfg = cfg;
    let mvs_world = match mvs {
        Some(path) => {
            cfg.mvs_supervision = true;
            Some(ds.meta.to_world(&ds.meta.read_dem(path)?))
        }
        None => None,
    };
    let outcome = train::train(&ds, &cfg, mvs_world.as_ref(), Some(out))?;
    if let Some(r) = &outcome.report {
        print_report(r);
    }
    log::info!("outputs in {}", out.display());
    Ok(())
}

fn print_report(r: &metrics::EvalReport) {
    println!("{:<14} {:>12}", "metric", "value");
    println!("{:<14} {:>12.4}", "AED", r.aed);
    println!("{:<14} {:>12.4}", "RED", r.red);
    println!("{:<14} {:>12.4}", format!("Coverage@{}", r.tau), r.coverage);
}

fn load_map(path: &Path, cell_size: f64) -> Result<HeightMap> {
    let img = io::read_pfm(path)?;
    if img.channels != 1 {
        bail!("{} has {} channels, expected 1", path.display(), img.channels);
    }
    Ok(io::image_to_heightmap(&img, cell_size, [0.5 * cell_size, 0.5 * cell_size]))
}

fn eval(pred: &Path, gt: &Path, cell_size: f64, window: f64, tau: f64, out: Option<PathBuf>) -> Result<()> {
    if !(cell_size > 0.0 && window > 0.0 && tau >= 0.0) {
        bail!("cell size and window must be > 0, tau >= 0");
    }
    let p = load_map(pred, cell_size)?;
    let g = load_map(gt, cell_size)?;
    let report = metrics::evaluate(&p, &g, window, tau)?;
    print_report(&report);
    let dir = out.unwrap_or_else(|| pred.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    io::write_json(&dir.join("eval_report.json"), &report)?;
    let filled = metrics::nearest_fill(&p)?;
    let limit = g.values.iter().filter(|v| v.is_finite()).map(|v| v.abs()).fold(0.0, f64::max) * tau;
    io::write_difference_png(&dir.join("eval_diff.png"), &filled, &g, limit.max(1e-9))?;
    let radius = metrics::window_radius(window, cell_size);
    let rel_p = metrics::subtract_local_mean(&filled, radius);
    let rel_g = metrics::subtract_local_mean(&g, radius);
    io::write_difference_png(&dir.join("eval_relative_diff.png"), &rel_p, &rel_g, (report.red * 4.0).max(1e-9))?;
    Ok(())
}
