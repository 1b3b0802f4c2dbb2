//! Supervoxel over-segmentation.
//!
//! Voxels are grouped with the Felzenszwalb–Huttenlocher graph segmentation
//! on the voxel adjacency graph. Edge dissimilarity mixes color distance with
//! a normal-angle term that is amplified across concave creases, so object
//! boundaries against floors and walls are expensive to merge through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Offsets that are lexicographically greater than zero, so each
    /// unordered neighbor pair is visited once.
    pub fn forward_offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dx in -1..=1i32 {
            for dy in -1..=1i32 {
                for dz in -1..=1i32 {
                    let o = [dx, dy, dz];
                    if o <= [0, 0, 0] {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => manhattan <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push(o);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeWeights {
    /// Weight of the RGB distance.
    pub alpha: f64,
    /// Weight of the `1 - n_p·n_q` normal term.
    pub beta: f64,
    /// Concave edges have their normal term divided by this factor.
    pub gamma_concave: f64,
}

impl Default for EdgeWeights {
    fn default() -> Self {
        EdgeWeights {
            alpha: 1.0,
            beta: 4.0,
            gamma_concave: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacencyEdge {
    /// Always `a < b`.
    pub a: usize,
    pub b: usize,
    pub dissimilarity: f64,
}

/// Unweighted neighbor pairs `(i, j)` with `i < j` under `connectivity`.
pub fn neighbor_pairs(grid: &VoxelGrid, connectivity: Connectivity) -> Vec<(usize, usize)> {
    let offsets = connectivity.forward_offsets();
    let mut pairs = Vec::with_capacity(grid.len() * offsets.len() / 2);
    for (i, c) in grid.coords().iter().enumerate() {
        for o in &offsets {
            if let Some(j) = grid.index_of(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]) {
                pairs.push(if i < j { (i, j) } else { (j, i) });
            }
        }
    }
    pairs
}

pub fn build_adjacency(
    grid: &VoxelGrid,
    connectivity: Connectivity,
    weights: &EdgeWeights,
) -> Result<Vec<AdjacencyEdge>> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("voxel grid"));
    }
    let cells = grid.cells();
    Ok(neighbor_pairs(grid, connectivity)
        .into_iter()
        .map(|(a, b)| {
            let p = &cells[a];
            let q = &cells[b];
            let color = ((p.color[0] - q.color[0]).powi(2)
                + (p.color[1] - q.color[1]).powi(2)
                + (p.color[2] - q.color[2]).powi(2))
            .sqrt();
            let normal_term = (1.0 - p.normal.dot(&q.normal)).max(0.0);
            // Concave when the centroid offset opposes the normal difference.
            let concave = (p.normal - q.normal).dot(&(p.centroid - q.centroid)) < 0.0;
            let factor = if concave { 1.0 / weights.gamma_concave } else { 1.0 };
            AdjacencyEdge {
                a,
                b,
                dissimilarity: weights.alpha * color + weights.beta * normal_term * factor,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperVoxelPartition {
    /// Voxel index to supervoxel id.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl SuperVoxelPartition {
    /// Partition from arbitrary per-voxel labels. Ids are renumbered densely
    /// in order of each segment's smallest voxel.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut sizes = Vec::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let id = *remap.entry(*l).or_insert_with(|| {
                    sizes.push(0);
                    sizes.len() - 1
                });
                sizes[id] += 1;
                id
            })
            .collect();
        SuperVoxelPartition { assignment, sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Member voxel lists, each sorted ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (v, &s) in self.assignment.iter().enumerate() {
            out[s].push(v);
        }
        out
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(weight);
    }
}

/// Graph segmentation with scale parameter `k`, then absorption of segments
/// smaller than `min_size` into their cheapest neighbor.
pub fn segment(
    edges: &[AdjacencyEdge],
    n_voxels: usize,
    k: f64,
    min_size: usize,
) -> Result<SuperVoxelPartition> {
    if n_voxels == 0 {
        return Err(Error::EmptyInput("voxel count"));
    }
    if !(k > 0.0) {
        return Err(Error::config("supervoxel.k", "must be positive"));
    }
    if min_size == 0 {
        return Err(Error::config("supervoxel.min_size", "must be at least 1"));
    }
    let mut sorted: Vec<AdjacencyEdge> = edges
        .iter()
        .map(|e| AdjacencyEdge {
            a: e.a.min(e.b),
            b: e.a.max(e.b),
            dissimilarity: e.dissimilarity,
        })
        .collect();
    sorted.sort_by(|x, y| {
        x.dissimilarity
            .total_cmp(&y.dissimilarity)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });

    let mut set = DisjointSet::new(n_voxels);
    for e in &sorted {
        let ra = set.find(e.a);
        let rb = set.find(e.b);
        if ra == rb {
            continue;
        }
        let ta = set.internal[ra] + k / set.size[ra] as f64;
        let tb = set.internal[rb] + k / set.size[rb] as f64;
        if e.dissimilarity <= ta.min(tb) {
            set.union(ra, rb, e.dissimilarity);
        }
    }
    for e in &sorted {
        let ra = set.find(e.a);
        let rb = set.find(e.b);
        if ra != rb && (set.size[ra] < min_size || set.size[rb] < min_size) {
            set.union(ra, rb, e.dissimilarity);
        }
    }

    // Segment ids follow the smallest member voxel.
    let mut root_to_id = vec![usize::MAX; n_voxels];
    let mut assignment = Vec::with_capacity(n_voxels);
    let mut sizes = Vec::new();
    for v in 0..n_voxels {
        let r = set.find(v);
        if root_to_id[r] == usize::MAX {
            root_to_id[r] = sizes.len();
            sizes.push(0);
        }
        let id = root_to_id[r];
        sizes[id] += 1;
        assignment.push(id);
    }
    Ok(SuperVoxelPartition { assignment, sizes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{voxelize_with_origin, PointCloud};
    use nalgebra::Vector3;

    fn edge(a: usize, b: usize, w: f64) -> AdjacencyEdge {
        AdjacencyEdge { a, b, dissimilarity: w }
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.forward_offsets().len(), 3);
        assert_eq!(Connectivity::Eighteen.forward_offsets().len(), 9);
        assert_eq!(Connectivity::TwentySix.forward_offsets().len(), 13);
    }

    #[test]
    fn connectivity_rejects_other_values() {
        assert!(Connectivity::try_from(8).is_err());
    }

    fn two_cells(c0: [f64; 3], c1: [f64; 3], n0: [f64; 3], n1: [f64; 3]) -> VoxelGrid {
        let cloud = PointCloud {
            points: vec![Vector3::new(0.01, 0.01, 0.01), Vector3::new(0.03, 0.01, 0.01)],
            colors: vec![c0, c1],
            normals: Some(vec![Vector3::from(n0).normalize(), Vector3::from(n1).normalize()]),
            ..Default::default()
        };
        voxelize_with_origin(&cloud, 0.02, Vector3::zeros()).unwrap()
    }

    #[test]
    fn identical_cells_zero_dissimilarity() {
        let g = two_cells([0.2; 3], [0.2; 3], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]);
        let e = build_adjacency(&g, Connectivity::Six, &EdgeWeights::default()).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].dissimilarity, 0.0);
    }

    #[test]
    fn color_only_dissimilarity() {
        let g = two_cells([0.5, 0.2, 0.2], [0.0, 0.2, 0.2], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]);
        let w = EdgeWeights { alpha: 1.0, beta: 1.0, gamma_concave: 0.25 };
        let e = build_adjacency(&g, Connectivity::TwentySix, &w).unwrap();
        assert!((e[0].dissimilarity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn concave_edge_is_penalized() {
        // p at x=0.01 facing +x, q at x=0.03 facing -x: normals point at each
        // other, a concave configuration.
        let concave = two_cells([0.2; 3], [0.2; 3], [1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]);
        let convex = two_cells([0.2; 3], [0.2; 3], [-1.0, 0.0, 1.0], [1.0, 0.0, 1.0]);
        let w = EdgeWeights::default();
        let a = build_adjacency(&concave, Connectivity::Six, &w).unwrap()[0].dissimilarity;
        let b = build_adjacency(&convex, Connectivity::Six, &w).unwrap()[0].dissimilarity;
        assert!((a - 4.0 * b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn bridge_of_ten_k_separates() {
        let k = 0.06;
        let mut edges = Vec::new();
        for i in 0..4 {
            edges.push(edge(i, i + 1, 0.0));
            edges.push(edge(i + 5, i + 6, 0.0));
        }
        edges.push(edge(4, 5, 10.0 * k));
        let p = segment(&edges, 10, k, 1).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.assignment, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn zero_weights_follow_components() {
        let edges = vec![edge(0, 1, 0.0), edge(2, 3, 0.0), edge(3, 4, 0.0)];
        let p = segment(&edges, 6, 0.06, 1).unwrap();
        assert_eq!(p.assignment, vec![0, 0, 1, 1, 1, 2]);
    }

    #[test]
    fn single_voxel() {
        let p = segment(&[], 1, 0.06, 20).unwrap();
        assert_eq!(p.sizes, vec![1]);
        assert!(matches!(segment(&[], 0, 0.06, 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn small_segments_absorbed_by_cheapest_neighbor() {
        // 0-1-2 chain of zero-weight edges, 3 hangs on 2 with weight 1 and on
        // 4 (isolated from the rest) with weight 2.
        let edges = vec![edge(0, 1, 0.0), edge(1, 2, 0.0), edge(2, 3, 1.0), edge(3, 4, 2.0)];
        let p = segment(&edges, 5, 0.001, 2).unwrap();
        assert_eq!(p.assignment[3], p.assignment[2]);
        assert!(p.sizes.iter().all(|&s| s >= 2));
    }
}
