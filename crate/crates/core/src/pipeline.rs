//! End-to-end runs: synthesize or load a scene, predict, segment, cluster,
//! evaluate, and write the artifacts.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{aggregate, build_cluster_graph, finalize, merge_loop, ClusterParams, InstanceInfo, InstancePrediction};
use crate::config::{PipelineConfig, SupervoxelParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, occupancy_cdf, EvalReport, StageTimings};
use crate::geometry::{extract_ground_truth, voxelize, InstanceGroundTruth, VoxelGrid};
use crate::losses::relative_errors;
use crate::oracle::emit_predictions;
use crate::ply::{write_grid, GridLabels, PlyFormat};
use crate::prediction::Predictions;
use crate::scene::{synth_scene, SceneSpec, SynthScene};
use crate::supervoxel::{build_adjacency, segment, SuperVoxelPartition};

pub fn supervoxels(grid: &VoxelGrid, params: &SupervoxelParams) -> Result<SuperVoxelPartition> {
    let edges = build_adjacency(grid, params.connectivity, &params.weights)?;
    segment(&edges, grid.len(), params.k, params.min_size)
}

/// Clusters supervoxels into instances. Returns the prediction and the
/// number of merges performed.
pub fn cluster(
    grid: &VoxelGrid,
    partition: &SuperVoxelPartition,
    preds: &Predictions,
    params: &ClusterParams,
) -> Result<(InstancePrediction, usize)> {
    let stats = aggregate(partition, preds, grid)?;
    let graph = merge_loop(build_cluster_graph(stats, partition, grid, *params)?);
    Ok((finalize(&graph, grid.len()), graph.merge_log().len()))
}

/// Everything produced by one pipeline run.
#[derive(Debug, Clone)]
pub struct SceneRun {
    pub grid: VoxelGrid,
    pub gt: Vec<InstanceGroundTruth>,
    pub predictions: Predictions,
    pub partition: SuperVoxelPartition,
    pub instances: InstancePrediction,
    pub merges: usize,
    pub report: EvalReport,
    pub timings: StageTimings,
}

/// Runs the pipeline on a grid with oracle predictions.
pub fn run_on_grid(cfg: &PipelineConfig, grid: VoxelGrid, voxelize_secs: f64) -> Result<SceneRun> {
    let mut timings = StageTimings { voxelize: voxelize_secs, ..Default::default() };
    let gt = extract_ground_truth(&grid)?;

    let t = Instant::now();
    let predictions = emit_predictions(&grid, &gt, &cfg.oracle, &cfg.noise, cfg.seed)?;
    timings.network = t.elapsed().as_secs_f64();

    run_with_predictions(cfg, grid, gt, predictions, timings)
}

/// Runs segmentation, clustering and evaluation on given predictions.
pub fn run_with_predictions(
    cfg: &PipelineConfig,
    grid: VoxelGrid,
    gt: Vec<InstanceGroundTruth>,
    predictions: Predictions,
    mut timings: StageTimings,
) -> Result<SceneRun> {
    if predictions.len() != grid.len() {
        return Err(Error::Alignment { what: "predictions", expected: grid.len(), actual: predictions.len() });
    }
    let t = Instant::now();
    let partition = supervoxels(&grid, &cfg.supervoxel)?;
    timings.supervoxel = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (instances, merges) = cluster(&grid, &partition, &predictions, &cfg.cluster)?;
    timings.clustering = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut report = evaluate(&instances, &gt, grid.len())?;
    let errors: Vec<f64> = relative_errors(&predictions, &gt);
    report.occupancy_cdf = Some(occupancy_cdf(&errors, &cfg.eval.cdf_points)?);
    timings.eval = t.elapsed().as_secs_f64();

    Ok(SceneRun { grid, gt, predictions, partition, instances, merges, report, timings })
}

/// Voxelizes a synthetic scene and runs the pipeline on it.
pub fn run_scene(cfg: &PipelineConfig, scene: &SynthScene) -> Result<SceneRun> {
    let t = Instant::now();
    let grid = voxelize(&scene.cloud, cfg.resolution)?;
    let secs = t.elapsed().as_secs_f64();
    run_on_grid(cfg, grid, secs)
}

/// Synthesizes the configured scene from `cfg.seed` and runs the pipeline.
pub fn run_synthetic(cfg: &PipelineConfig) -> Result<SceneRun> {
    cfg.validate()?;
    let scene = synth_scene(&cfg.scene, cfg.resolution, cfg.seed)?;
    run_scene(cfg, &scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStats {
    pub voxels: usize,
    pub points: u64,
    pub resolution: f64,
    pub origin: [f64; 3],
    pub labeled_voxels: usize,
    pub instances: usize,
}

impl GridStats {
    pub fn of(grid: &VoxelGrid) -> Self {
        let o = grid.origin();
        let gt = extract_ground_truth(grid).map(|g| g.len()).unwrap_or(0);
        GridStats {
            voxels: grid.len(),
            points: grid.cells().iter().map(|c| c.point_count as u64).sum(),
            resolution: grid.resolution(),
            origin: [o.x, o.y, o.z],
            labeled_voxels: grid.labeled_count(),
            instances: gt,
        }
    }
}

/// JSON sidecar of an instance PLY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub voxels: usize,
    pub unassigned_voxels: usize,
    pub instances: Vec<InstanceInfo>,
}

impl InstanceManifest {
    pub fn of(pred: &InstancePrediction) -> Self {
        InstanceManifest {
            voxels: pred.assignment.len(),
            unassigned_voxels: pred.assignment.iter().filter(|a| a.is_none()).count(),
            instances: pred.instances.clone(),
        }
    }
}

/// Per-voxel class labels of a prediction, `None` where unassigned.
pub fn instance_classes(pred: &InstancePrediction) -> Vec<Option<u32>> {
    let classes: std::collections::HashMap<u32, u32> = pred.instances.iter().map(|i| (i.id, i.class)).collect();
    pred.assignment.iter().map(|a| a.and_then(|id| classes.get(&id).copied())).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_instances(dir: &Path, grid: &VoxelGrid, pred: &InstancePrediction) -> Result<()> {
    let classes = instance_classes(pred);
    let labels = GridLabels { semantic: Some(&classes), instance: Some(&pred.assignment), segment: None };
    write_grid(&dir.join("instances.ply"), grid, labels, PlyFormat::BinaryLittleEndian)?;
    write_json(&dir.join("instances.json"), &InstanceManifest::of(pred))
}

/// Writes every artifact of a run into `dir`:
/// `grid.ply`, `grid_stats.json`, `supervoxels.ply`, `instances.ply`,
/// `instances.json`, `report.json`, `report.txt` and `timings.json`.
/// Everything except `timings.json` is a deterministic function of the input.
pub fn write_artifacts(run: &SceneRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_grid(&dir.join("grid.ply"), &run.grid, GridLabels::default(), PlyFormat::BinaryLittleEndian)?;
    write_json(&dir.join("grid_stats.json"), &GridStats::of(&run.grid))?;
    let seg = GridLabels { segment: Some(&run.partition.assignment), ..Default::default() };
    write_grid(&dir.join("supervoxels.ply"), &run.grid, seg, PlyFormat::BinaryLittleEndian)?;
    write_instances(dir, &run.grid, &run.instances)?;
    write_json(&dir.join("report.json"), &run.report)?;
    std::fs::write(dir.join("report.txt"), run.report.table())?;
    write_json(&dir.join("timings.json"), &run.timings)
}

/// Synthesizes, runs and writes one scene.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path) -> Result<SceneRun> {
    let run = run_synthetic(cfg)?;
    write_artifacts(&run, dir)?;
    Ok(run)
}

/// Scene spec whose room is sized so the voxelized scene holds roughly
/// `voxels` voxels, with the object count scaled to the floor area.
pub fn bench_scene_spec(base: &SceneSpec, resolution: f64, voxels: usize) -> SceneSpec {
    let h = base.wall_height / resolution;
    // floor s² plus two walls 2·s·h, leaving a tenth for objects.
    let target = voxels as f64 * 0.9;
    let side_cells = -h + (h * h + target).sqrt();
    let side = side_cells * resolution;
    let area_ratio = side * side / (base.room_size[0] * base.room_size[1]);
    SceneSpec {
        room_size: [side, side],
        objects: ((base.objects as f64 * area_ratio).round() as usize).clamp(1, 60),
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub voxels: usize,
    pub supervoxels: usize,
    pub instances: usize,
    pub merges: usize,
    pub timings: StageTimings,
    /// Supervoxel segmentation plus clustering.
    pub segment_and_cluster: f64,
}

/// Times the pipeline on a synthetic scene of about `voxels` voxels.
pub fn bench(cfg: &PipelineConfig, voxels: usize) -> Result<BenchReport> {
    cfg.validate()?;
    let spec = bench_scene_spec(&cfg.scene, cfg.resolution, voxels);
    let scene = synth_scene(&spec, cfg.resolution, cfg.seed)?;
    let run = run_scene(cfg, &scene)?;
    Ok(BenchReport {
        voxels: run.grid.len(),
        supervoxels: run.partition.sizes.len(),
        instances: run.instances.instances.len(),
        merges: run.merges,
        timings: run.timings,
        segment_and_cluster: run.timings.supervoxel + run.timings.clustering,
    })
}

/// Reads an instance PLY written by [`write_instances`]. With a manifest the
/// instance classes, confidences and ratios come from it; without one every
/// instance gets the majority `label` of its voxels and confidence 1.
pub fn read_instances(ply: &Path, manifest: Option<&Path>) -> Result<(VoxelGrid, InstancePrediction)> {
    let file = crate::ply::read_grid(ply)?;
    let grid = file.grid;
    let assignment: Vec<Option<u32>> = grid.cells().iter().map(|c| c.instance_label).collect();
    let instances = match manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: crate::error::Location::Unknown,
                message: format!("cannot read: {e}"),
            })?;
            let m: InstanceManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: crate::error::Location::Line(e.line()),
                message: e.to_string(),
            })?;
            if m.voxels != grid.len() {
                return Err(Error::Alignment { what: "manifest voxel count", expected: grid.len(), actual: m.voxels });
            }
            m.instances
        }
        None => {
            let mut votes: std::collections::BTreeMap<u32, std::collections::BTreeMap<u32, usize>> = Default::default();
            for cell in grid.cells() {
                if let Some(id) = cell.instance_label {
                    let entry = votes.entry(id).or_default();
                    *entry.entry(cell.semantic_label.unwrap_or(0)).or_default() += 1;
                }
            }
            votes
                .into_iter()
                .map(|(id, classes)| {
                    let count = classes.values().sum();
                    let class = classes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map_or(0, |(c, _)| *c);
                    InstanceInfo { id, class, confidence: 1.0, voxel_count: count, ratio: 1.0 }
                })
                .collect()
        }
    };
    Ok((grid, InstancePrediction { assignment, instances }))
}
