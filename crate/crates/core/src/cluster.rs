//! Occupancy-aware agglomerative clustering over supervoxels.
//!
//! Each supervoxel carries averaged embeddings, covariances and a predicted
//! occupancy `O` (linear voxel count). Adjacent supervoxels are linked with
//!
//! ```text
//! w = exp(−(‖S_i − S_j‖/σ_s)² − (‖D_i − D_j‖/σ_d)²) / max(r, 0.5)
//! ```
//!
//! where `σ_s`, `σ_d` and `r` describe the virtual supervoxel formed by both
//! endpoints. The heaviest edge above the merge threshold is merged until no
//! such edge remains; surviving vertices whose occupancy ratio falls outside
//! the accepted band are rejected.
//!
//! The ratio used here is group size over predicted occupancy, `|Ω| / O`:
//! above 1 the group holds more voxels than its instance should, below 1 it
//! is still a fragment. With that orientation the denominator damps merges
//! that would overshoot the predicted size and the floor at 0.5 lets
//! fragments attract up to twice the embedding affinity.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::prediction::Predictions;
use crate::supervoxel::{neighbor_pairs, Connectivity, SuperVoxelPartition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    /// Merge threshold `T0`; edges must be strictly heavier to merge.
    pub merge_threshold: f64,
    /// Accepted occupancy ratio band, exclusive on both ends.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub min_voxels: usize,
    /// Only merge supervoxels whose majority classes agree.
    pub semantic_gating: bool,
    /// When false the ratio is fixed at 1 in the edge weight and the final
    /// ratio filter is skipped.
    pub use_occupancy: bool,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            merge_threshold: 0.5,
            ratio_min: 0.3,
            ratio_max: 2.0,
            min_voxels: 25,
            semantic_gating: false,
            use_occupancy: true,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.merge_threshold > 0.0 && self.merge_threshold < 2.0) {
            return Err(Error::config("cluster.merge_threshold", "must lie in (0, 2)"));
        }
        if !(self.ratio_min >= 0.0 && self.ratio_min < self.ratio_max) {
            return Err(Error::config("cluster.ratio_min", "must be >= 0 and below ratio_max"));
        }
        Ok(())
    }
}

/// Averaged predictions over a group of voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperVoxelStats {
    /// Sorted member voxel indices.
    pub members: Vec<usize>,
    /// Mean feature embedding `S`.
    pub feature: Vec<f64>,
    /// Mean predicted center `D = mean(d + μ)`.
    pub spatial: Vector3<f64>,
    /// Predicted instance size `O` in voxels.
    pub occupancy: f64,
    pub sigma_s: f64,
    pub sigma_d: f64,
    /// Per-class counts of member voxel argmax votes.
    pub class_votes: Vec<u32>,
}

impl SuperVoxelStats {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// `|Ω| / O`.
    pub fn ratio(&self) -> f64 {
        self.size() as f64 / self.occupancy
    }

    /// Majority class; ties go to the smaller id.
    pub fn class(&self) -> u32 {
        let mut best = 0;
        for (c, &v) in self.class_votes.iter().enumerate() {
            if v > self.class_votes[best] {
                best = c;
            }
        }
        best as u32
    }

    /// Size-weighted combination of two groups.
    pub fn merged(a: &Self, b: &Self) -> Self {
        let (na, nb) = (a.size() as f64, b.size() as f64);
        let n = na + nb;
        let mix = |x: f64, y: f64| (na * x + nb * y) / n;
        let mut members = Vec::with_capacity(a.members.len() + b.members.len());
        let (mut i, mut j) = (0, 0);
        while i < a.members.len() && j < b.members.len() {
            if a.members[i] < b.members[j] {
                members.push(a.members[i]);
                i += 1;
            } else {
                members.push(b.members[j]);
                j += 1;
            }
        }
        members.extend_from_slice(&a.members[i..]);
        members.extend_from_slice(&b.members[j..]);
        SuperVoxelStats {
            members,
            feature: a.feature.iter().zip(&b.feature).map(|(x, y)| mix(*x, *y)).collect(),
            spatial: (a.spatial * na + b.spatial * nb) / n,
            occupancy: mix(a.occupancy, b.occupancy),
            sigma_s: mix(a.sigma_s, b.sigma_s),
            sigma_d: mix(a.sigma_d, b.sigma_d),
            class_votes: a.class_votes.iter().zip(&b.class_votes).map(|(x, y)| x + y).collect(),
        }
    }
}

/// Averages voxel predictions over each supervoxel.
pub fn aggregate(
    partition: &SuperVoxelPartition,
    preds: &Predictions,
    grid: &VoxelGrid,
) -> Result<Vec<SuperVoxelStats>> {
    let n = grid.len();
    if preds.len() != n {
        return Err(Error::Alignment { what: "predictions", expected: n, actual: preds.len() });
    }
    if partition.assignment.len() != n {
        return Err(Error::Alignment {
            what: "supervoxel assignment",
            expected: n,
            actual: partition.assignment.len(),
        });
    }
    let classes = preds.class_count();
    let dim = preds.embedding_dim();
    Ok(partition
        .members()
        .into_iter()
        .map(|members| {
            let count = members.len() as f64;
            let mut feature = vec![0.0; dim];
            let mut spatial = Vector3::zeros();
            let mut log_occ = 0.0;
            let mut sigma_s = 0.0;
            let mut sigma_d = 0.0;
            let mut class_votes = vec![0u32; classes];
            for &v in &members {
                for (f, x) in feature.iter_mut().zip(preds.features.row(v)) {
                    *f += x;
                }
                spatial += grid.cell(v).centroid + preds.offset(v);
                log_occ += preds.occupancy[v];
                sigma_s += preds.covariance[[v, 0]];
                sigma_d += preds.covariance[[v, 1]];
                if classes > 0 {
                    class_votes[preds.predicted_class(v) as usize] += 1;
                }
            }
            feature.iter_mut().for_each(|f| *f /= count);
            SuperVoxelStats {
                members,
                feature,
                spatial: spatial / count,
                occupancy: (log_occ / count).exp(),
                sigma_s: sigma_s / count,
                sigma_d: sigma_d / count,
                class_votes,
            }
        })
        .collect())
}

/// The edge weight formula on already-reduced quantities.
pub fn edge_weight(feature_dist: f64, spatial_dist: f64, sigma_s: f64, sigma_d: f64, ratio: f64) -> f64 {
    let fs = feature_dist / sigma_s;
    let sd = spatial_dist / sigma_d;
    (-(fs * fs) - sd * sd).exp() / ratio.max(0.5)
}

/// Weight between two groups, evaluated on their virtual merge.
pub fn pair_weight(a: &SuperVoxelStats, b: &SuperVoxelStats, params: &ClusterParams) -> f64 {
    if params.semantic_gating && a.class() != b.class() {
        return 0.0;
    }
    let (na, nb) = (a.size() as f64, b.size() as f64);
    let n = na + nb;
    let mix = |x: f64, y: f64| (na * x + nb * y) / n;
    let sigma_s = mix(a.sigma_s, b.sigma_s);
    let sigma_d = mix(a.sigma_d, b.sigma_d);
    let ratio = if params.use_occupancy {
        n / mix(a.occupancy, b.occupancy)
    } else {
        1.0
    };
    let feature_dist = a
        .feature
        .iter()
        .zip(&b.feature)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    edge_weight(feature_dist, (a.spatial - b.spatial).norm(), sigma_s, sigma_d, ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    /// Endpoints, `a < b`.
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    /// Id of the vertex created by the merge.
    pub merged: usize,
}

/// Supervoxel graph. Merging retires both endpoints and appends a new
/// vertex, so vertex ids are never reused and a live vertex never changes.
#[derive(Debug, Clone)]
pub struct ClusterGraph {
    vertices: Vec<Option<SuperVoxelStats>>,
    adjacency: Vec<BTreeSet<usize>>,
    merge_log: Vec<MergeRecord>,
    params: ClusterParams,
}

impl ClusterGraph {
    /// Graph over `stats` with undirected `edges`. Self-loops and duplicates
    /// are dropped.
    pub fn new(
        stats: Vec<SuperVoxelStats>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        params: ClusterParams,
    ) -> Result<Self> {
        params.validate()?;
        let n = stats.len();
        let mut adjacency = vec![BTreeSet::new(); n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Alignment { what: "graph edge endpoint", expected: n, actual: a.max(b) });
            }
            if a != b {
                adjacency[a].insert(b);
                adjacency[b].insert(a);
            }
        }
        Ok(ClusterGraph {
            vertices: stats.into_iter().map(Some).collect(),
            adjacency,
            merge_log: Vec::new(),
            params,
        })
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn merge_log(&self) -> &[MergeRecord] {
        &self.merge_log
    }

    /// Live vertices with their ids, ascending.
    pub fn vertices(&self) -> impl Iterator<Item = (usize, &SuperVoxelStats)> {
        self.vertices.iter().enumerate().filter_map(|(i, v)| v.as_ref().map(|s| (i, s)))
    }

    pub fn vertex(&self, id: usize) -> Option<&SuperVoxelStats> {
        self.vertices.get(id).and_then(|v| v.as_ref())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.iter().filter(|v| v.is_some()).count()
    }

    pub fn neighbors(&self, id: usize) -> &BTreeSet<usize> {
        &self.adjacency[id]
    }

    /// Live edges `(a, b, w)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (a, sa) in self.vertices() {
            for &b in self.adjacency[a].range(a + 1..) {
                let sb = self.vertex(b).expect("adjacency only lists live vertices");
                out.push((a, b, pair_weight(sa, sb, &self.params)));
            }
        }
        out
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        Some(pair_weight(self.vertex(a)?, self.vertex(b)?, &self.params))
    }

    /// Merges live vertices `a` and `b` into a new vertex and returns its id.
    pub fn merge(&mut self, a: usize, b: usize, weight: f64) -> usize {
        let (a, b) = (a.min(b), a.max(b));
        let sa = self.vertices[a].take().expect("live vertex");
        let sb = self.vertices[b].take().expect("live vertex");
        let id = self.vertices.len();
        self.vertices.push(Some(SuperVoxelStats::merged(&sa, &sb)));
        let mut neighbors = std::mem::take(&mut self.adjacency[a]);
        neighbors.append(&mut std::mem::take(&mut self.adjacency[b]));
        neighbors.remove(&a);
        neighbors.remove(&b);
        for &n in &neighbors {
            let adj = &mut self.adjacency[n];
            adj.remove(&a);
            adj.remove(&b);
            adj.insert(id);
        }
        self.adjacency.push(neighbors);
        self.merge_log.push(MergeRecord { a, b, weight, merged: id });
        id
    }
}

/// Supervoxels are adjacent when any of their member voxels are 26-adjacent.
pub fn build_cluster_graph(
    stats: Vec<SuperVoxelStats>,
    partition: &SuperVoxelPartition,
    grid: &VoxelGrid,
    params: ClusterParams,
) -> Result<ClusterGraph> {
    if partition.assignment.len() != grid.len() {
        return Err(Error::Alignment {
            what: "supervoxel assignment",
            expected: grid.len(),
            actual: partition.assignment.len(),
        });
    }
    let edges = neighbor_pairs(grid, Connectivity::TwentySix)
        .into_iter()
        .map(|(i, j)| (partition.assignment[i], partition.assignment[j]))
        .filter(|(a, b)| a != b);
    ClusterGraph::new(stats, edges, params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    weight: f64,
    a: usize,
    b: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    // Max-heap on weight; among equal weights the smallest pair wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Repeatedly merges the heaviest edge above the threshold.
///
/// Uses a max-heap with lazy deletion: entries touching a retired vertex are
/// skipped when popped. Live vertices never change, so every other entry is
/// still exact, and edges at or below the threshold never need queueing.
pub fn merge_loop(mut graph: ClusterGraph) -> ClusterGraph {
    let threshold = graph.params.merge_threshold;
    let mut heap = BinaryHeap::new();
    for (a, b, w) in graph.edges() {
        if w > threshold {
            heap.push(HeapEntry { weight: w, a, b });
        }
    }
    while let Some(e) = heap.pop() {
        if graph.vertices[e.a].is_none() || graph.vertices[e.b].is_none() {
            continue;
        }
        let id = graph.merge(e.a, e.b, e.weight);
        let merged = graph.vertices[id].as_ref().expect("fresh vertex");
        for &n in &graph.adjacency[id] {
            let other = graph.vertices[n].as_ref().expect("live neighbor");
            let w = pair_weight(other, merged, &graph.params);
            if w > threshold {
                heap.push(HeapEntry { weight: w, a: n, b: id });
            }
        }
    }
    graph
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u32,
    pub class: u32,
    pub confidence: f64,
    pub voxel_count: usize,
    /// Final `|Ω| / O`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    /// Instance id per voxel, `None` for rejected or unassigned voxels.
    pub assignment: Vec<Option<u32>>,
    pub instances: Vec<InstanceInfo>,
}

impl InstancePrediction {
    /// Sorted voxel lists per instance, indexed like `instances`.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.instances.len()];
        let index: std::collections::HashMap<u32, usize> =
            self.instances.iter().enumerate().map(|(k, inst)| (inst.id, k)).collect();
        for (v, id) in self.assignment.iter().enumerate() {
            if let Some(k) = id.and_then(|id| index.get(&id)) {
                out[*k].push(v);
            }
        }
        out
    }
}

/// Labels surviving vertices as instances. Vertices outside the ratio band
/// or smaller than `min_voxels` are rejected. Instance ids follow the
/// smallest member voxel.
pub fn finalize(graph: &ClusterGraph, n_voxels: usize) -> InstancePrediction {
    let params = &graph.params;
    let mut live: Vec<&SuperVoxelStats> = graph.vertices().map(|(_, s)| s).collect();
    live.sort_by_key(|s| s.members.first().copied().unwrap_or(usize::MAX));

    let mut assignment = vec![None; n_voxels];
    let mut instances = Vec::new();
    for s in live {
        let ratio = s.ratio();
        let in_band = ratio > params.ratio_min && ratio < params.ratio_max;
        if (params.use_occupancy && !in_band) || s.size() < params.min_voxels {
            continue;
        }
        let class = s.class();
        let purity = s.class_votes.get(class as usize).copied().unwrap_or(0) as f64 / s.size() as f64;
        let fit = if params.use_occupancy { ratio.min(1.0 / ratio) } else { 1.0 };
        let confidence = (purity * fit).clamp(f64::MIN_POSITIVE, 1.0);
        let id = instances.len() as u32;
        for &v in &s.members {
            assignment[v] = Some(id);
        }
        instances.push(InstanceInfo {
            id,
            class,
            confidence,
            voxel_count: s.size(),
            ratio,
        });
    }
    InstancePrediction { assignment, instances }
}
