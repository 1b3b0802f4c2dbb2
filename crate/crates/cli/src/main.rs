use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use voxinst::config::PipelineConfig;
use voxinst::eval::{evaluate, occupancy_cdf};
use voxinst::geometry::{extract_ground_truth, voxelize};
use voxinst::gradcheck::{format_table, run_gradcheck};
use voxinst::losses::relative_errors;
use voxinst::oracle::emit_predictions;
use voxinst::pipeline::{bench, cluster, read_instances, run_pipeline, supervoxels, write_instances, write_json, GridStats};
use voxinst::ply::{read_grid, read_point_cloud, write_grid, write_point_cloud, GridLabels, PlyFormat};
use voxinst::prediction::Predictions;
use voxinst::scene::synth_scene;
use voxinst::supervoxel::SuperVoxelPartition;

#[derive(Parser)]
#[command(name = "voxinst", version, about = "Occupancy-aware instance segmentation on voxel grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; every field is optional.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Binary,
}

impl From<Format> for PlyFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Ascii => PlyFormat::Ascii,
            Format::Binary => PlyFormat::BinaryLittleEndian,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic room as a point cloud PLY.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
        #[command(flatten)]
        common: Common,
    },
    /// Voxelize a point cloud PLY into a grid PLY.
    Voxelize {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Emit oracle predictions for a labeled grid.
    Oracle {
        #[arg(short, long)]
        grid: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Over-segment a grid into supervoxels; writes a grid PLY with a `segment` property.
    Segment {
        #[arg(short, long)]
        grid: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster supervoxels into instances; writes instances.ply and instances.json.
    Cluster {
        #[arg(short, long)]
        grid: PathBuf,
        #[arg(short, long)]
        predictions: PathBuf,
        #[arg(short, long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score an instance PLY against a labeled grid.
    Eval {
        /// Grid PLY with ground-truth `label` and `instance`.
        #[arg(long)]
        gt: PathBuf,
        /// Instance PLY written by `cluster`.
        #[arg(long)]
        pred: PathBuf,
        /// Instance manifest; defaults to the `.json` next to the instance PLY when present.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Prediction file, needed for the occupancy error CDF.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Writes `x,fraction` CDF samples.
        #[arg(long)]
        cdf_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic loss gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Time the stages on a synthetic scene.
    Bench {
        #[arg(long, default_value_t = 100_000)]
        voxels: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full pipeline on synthetic scenes, one output directory per seed.
    Run {
        #[arg(short, long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenes: u64,
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Print the default configuration as TOML.
    Config,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { out, format, common } => {
            let cfg = common.load()?;
            let scene = synth_scene(&cfg.scene, cfg.resolution, cfg.seed)?;
            write_point_cloud(&out, &scene.cloud, format.into())?;
            println!("{} points, {} instances -> {}", scene.cloud.len(), scene.instances.len(), out.display());
        }
        Command::Voxelize { input, out, common } => {
            let cfg = common.load()?;
            let cloud = read_point_cloud(&input)?;
            let grid = voxelize(&cloud, cfg.resolution)?;
            write_grid(&out, &grid, GridLabels::default(), PlyFormat::BinaryLittleEndian)?;
            println!("{}", serde_json::to_string_pretty(&GridStats::of(&grid))?);
        }
        Command::Oracle { grid, out, common } => {
            let cfg = common.load()?;
            let grid = read_grid(&grid)?.grid;
            let gt = extract_ground_truth(&grid)?;
            let preds = emit_predictions(&grid, &gt, &cfg.oracle, &cfg.noise, cfg.seed)?;
            preds.write_file(&out)?;
            println!("{} voxel predictions -> {}", preds.len(), out.display());
        }
        Command::Segment { grid, out, common } => {
            let cfg = common.load()?;
            let grid = read_grid(&grid)?.grid;
            let t = Instant::now();
            let partition = supervoxels(&grid, &cfg.supervoxel)?;
            let secs = t.elapsed().as_secs_f64();
            let labels = GridLabels { segment: Some(&partition.assignment), ..Default::default() };
            write_grid(&out, &grid, labels, PlyFormat::BinaryLittleEndian)?;
            println!("{} voxels -> {} supervoxels in {secs:.3}s", grid.len(), partition.sizes.len());
        }
        Command::Cluster { grid, predictions, out_dir, common } => {
            let cfg = common.load()?;
            let file = read_grid(&grid)?;
            let preds = Predictions::read_file(&predictions)?;
            let partition = match file.segment {
                Some(labels) => SuperVoxelPartition::from_labels(&labels),
                None => supervoxels(&file.grid, &cfg.supervoxel)?,
            };
            let (pred, merges) = cluster(&file.grid, &partition, &preds, &cfg.cluster)?;
            std::fs::create_dir_all(&out_dir)?;
            write_instances(&out_dir, &file.grid, &pred)?;
            println!(
                "{} supervoxels, {merges} merges, {} instances -> {}",
                partition.sizes.len(),
                pred.instances.len(),
                out_dir.display()
            );
        }
        Command::Eval { gt, pred, manifest, predictions, out, cdf_out, common } => {
            let cfg = common.load()?;
            let gt_grid = read_grid(&gt)?.grid;
            let gt_instances = extract_ground_truth(&gt_grid)?;
            let manifest = manifest.or_else(|| Some(pred.with_extension("json")).filter(|p| p.exists()));
            let (pred_grid, instances) = read_instances(&pred, manifest.as_deref())?;
            if pred_grid.coords() != gt_grid.coords() {
                bail!("{} and {} are not on the same voxel grid", pred.display(), gt.display());
            }
            let mut report = evaluate(&instances, &gt_instances, gt_grid.len())?;
            if let Some(path) = predictions {
                let preds = Predictions::read_file(&path)?;
                if preds.len() != gt_grid.len() {
                    bail!("{} holds {} voxels, grid has {}", path.display(), preds.len(), gt_grid.len());
                }
                let errors = relative_errors(&preds, &gt_instances);
                report.occupancy_cdf = Some(occupancy_cdf(&errors, &cfg.eval.cdf_points)?);
            }
            print!("{}", report.table());
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            if let Some(path) = cdf_out {
                let cdf = report.occupancy_cdf.as_ref().context("--cdf-out needs --predictions")?;
                write_cdf(&path, &cdf.points, &cdf.fraction)?;
            }
        }
        Command::Gradcheck { cases, common } => {
            let cfg = common.load()?;
            let rows = run_gradcheck(cases, cfg.seed, &cfg.losses);
            print!("{}", format_table(&rows));
            if rows.iter().any(|r| !r.pass) {
                bail!("gradient check failed");
            }
        }
        Command::Bench { voxels, common } => {
            let cfg = common.load()?;
            let b = bench(&cfg, voxels)?;
            println!("voxels      {:>10}", b.voxels);
            println!("supervoxels {:>10}", b.supervoxels);
            println!("instances   {:>10}", b.instances);
            println!("merges      {:>10}", b.merges);
            println!("stage             seconds");
            for (name, secs) in [
                ("voxelize", b.timings.voxelize),
                ("network", b.timings.network),
                ("supervoxel", b.timings.supervoxel),
                ("clustering", b.timings.clustering),
                ("eval", b.timings.eval),
                ("segment+cluster", b.segment_and_cluster),
            ] {
                println!("{name:<16} {secs:>8.4}");
            }
        }
        Command::Run { out_dir, scenes, jobs, common } => {
            let cfg = common.load()?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
            let results: Vec<Result<(u64, f64, f64)>> = pool.install(|| {
                (0..scenes)
                    .into_par_iter()
                    .map(|k| {
                        let mut scene_cfg = cfg.clone();
                        scene_cfg.seed = cfg.seed + k;
                        let dir = out_dir.join(format!("scene_{:04}", scene_cfg.seed));
                        let run = run_pipeline(&scene_cfg, &dir)
                            .with_context(|| format!("scene with seed {}", scene_cfg.seed))?;
                        Ok((scene_cfg.seed, run.report.map, run.report.map50))
                    })
                    .collect()
            });
            for r in results {
                let (seed, map, map50) = r?;
                println!("seed {seed:>6}  mAP {map:.4}  mAP@0.5 {map50:.4}");
            }
        }
        Command::Config => print!("{}", PipelineConfig::default().to_toml_string()),
    }
    Ok(())
}

fn write_cdf(path: &Path, points: &[f64], fraction: &[f64]) -> Result<()> {
    let mut text = String::from("x,fraction\n");
    for (x, y) in points.iter().zip(fraction) {
        text.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}
