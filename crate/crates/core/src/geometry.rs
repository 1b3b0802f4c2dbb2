//! Point clouds, sparse voxel grids and ground-truth instance bookkeeping.
//!
//! A [`VoxelGrid`] is a sparse map from integer cell coordinates to averaged
//! point attributes. Cells are stored sorted by coordinate so that every
//! downstream stage sees the same voxel order for the same input.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub type Coord = [i32; 3];

/// Default voxel edge length in meters.
pub const DEFAULT_RESOLUTION: f64 = 0.02;

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub semantic_labels: Option<Vec<Option<u32>>>,
    /// `None` entries mark unlabeled points.
    pub instance_labels: Option<Vec<Option<u32>>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        let check_len = |what: &'static str, len: usize| {
            if len != n {
                Err(Error::Alignment {
                    what,
                    expected: n,
                    actual: len,
                })
            } else {
                Ok(())
            }
        };
        check_len("colors", self.colors.len())?;
        if let Some(normals) = &self.normals {
            check_len("normals", normals.len())?;
            for (i, nrm) in normals.iter().enumerate() {
                if (nrm.norm() - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::InvalidGeometry(format!(
                        "normal of point {i} has norm {}",
                        nrm.norm()
                    )));
                }
            }
        }
        if let Some(labels) = &self.semantic_labels {
            check_len("semantic labels", labels.len())?;
        }
        if let Some(labels) = &self.instance_labels {
            check_len("instance labels", labels.len())?;
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidGeometry(format!(
                    "point {i} has a non-finite coordinate"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    pub centroid: Vector3<f64>,
    pub color: [f64; 3],
    pub normal: Vector3<f64>,
    pub point_count: u32,
    pub semantic_label: Option<u32>,
    pub instance_label: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    resolution: f64,
    origin: Vector3<f64>,
    coords: Vec<Coord>,
    cells: Vec<VoxelCell>,
    lookup: HashMap<Coord, usize>,
}

impl VoxelGrid {
    /// Builds a grid from explicit cells. Cells are re-sorted by coordinate.
    pub fn from_cells(
        resolution: f64,
        origin: Vector3<f64>,
        mut cells: Vec<(Coord, VoxelCell)>,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        cells.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = cells.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidGeometry(format!(
                "duplicate voxel coordinate {:?}",
                w[0].0
            )));
        }
        let (coords, cells): (Vec<_>, Vec<_>) = cells.into_iter().unzip();
        let lookup = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(VoxelGrid {
            resolution,
            origin,
            coords,
            cells,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn cells(&self) -> &[VoxelCell] {
        &self.cells
    }

    pub fn cell(&self, index: usize) -> &VoxelCell {
        &self.cells[index]
    }

    pub fn index_of(&self, coord: &Coord) -> Option<usize> {
        self.lookup.get(coord).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Coord, &VoxelCell)> {
        self.coords.iter().zip(self.cells.iter())
    }

    /// Cell centroids in grid order; these are the voxel positions used by
    /// the losses and the clustering stage.
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.cells.iter().map(|c| c.centroid).collect()
    }

    /// Cell coordinate containing `p` under this grid's origin and resolution.
    pub fn coord_of(&self, p: &Vector3<f64>) -> Coord {
        coord_for(p, &self.origin, self.resolution)
    }

    /// Number of cells carrying an instance label.
    pub fn labeled_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| c.instance_label.is_some())
            .count()
    }
}

fn coord_for(p: &Vector3<f64>, origin: &Vector3<f64>, resolution: f64) -> Coord {
    let rel = (p - origin) / resolution;
    [
        rel.x.floor() as i32,
        rel.y.floor() as i32,
        rel.z.floor() as i32,
    ]
}

/// Component-wise minimum of the cloud snapped down to a resolution multiple.
pub fn default_origin(cloud: &PointCloud, resolution: f64) -> Vector3<f64> {
    let mut min = Vector3::repeat(f64::INFINITY);
    for p in &cloud.points {
        min = min.inf(p);
    }
    min.map(|v| (v / resolution).floor() * resolution)
}

pub fn voxelize(cloud: &PointCloud, resolution: f64) -> Result<VoxelGrid> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    cloud.validate()?;
    let origin = default_origin(cloud, resolution);
    voxelize_with_origin(cloud, resolution, origin)
}

#[derive(Default)]
struct CellAccum {
    position: Vector3<f64>,
    color: [f64; 3],
    normal: Vector3<f64>,
    count: u32,
    semantic_votes: Vec<(u32, u32)>,
    instance_votes: Vec<(u32, u32)>,
}

fn vote(votes: &mut Vec<(u32, u32)>, label: u32) {
    match votes.iter_mut().find(|(l, _)| *l == label) {
        Some((_, n)) => *n += 1,
        None => votes.push((label, 1)),
    }
}

/// Most frequent label; ties go to the smallest label id.
fn majority(votes: &[(u32, u32)]) -> Option<u32> {
    votes
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| *l)
}

pub fn voxelize_with_origin(
    cloud: &PointCloud,
    resolution: f64,
    origin: Vector3<f64>,
) -> Result<VoxelGrid> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidGeometry(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    cloud.validate()?;

    let mut accum: HashMap<Coord, CellAccum> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let cell = accum.entry(coord_for(p, &origin, resolution)).or_default();
        cell.position += p;
        for (c, v) in cell.color.iter_mut().zip(cloud.colors[i]) {
            *c += v;
        }
        if let Some(normals) = &cloud.normals {
            cell.normal += normals[i];
        }
        cell.count += 1;
        if let Some(Some(l)) = cloud.semantic_labels.as_ref().map(|v| v[i]) {
            vote(&mut cell.semantic_votes, l);
        }
        if let Some(Some(l)) = cloud.instance_labels.as_ref().map(|v| v[i]) {
            vote(&mut cell.instance_votes, l);
        }
    }

    let has_normals = cloud.normals.is_some();
    let cells: Vec<(Coord, VoxelCell)> = accum
        .into_iter()
        .map(|(coord, a)| {
            let n = a.count as f64;
            let normal = if has_normals {
                a.normal.try_normalize(1e-12).unwrap_or_else(Vector3::zeros)
            } else {
                Vector3::zeros()
            };
            let cell = VoxelCell {
                centroid: a.position / n,
                color: a.color.map(|c| (c / n).clamp(0.0, 1.0)),
                normal,
                point_count: a.count,
                semantic_label: majority(&a.semantic_votes),
                instance_label: majority(&a.instance_votes),
            };
            (coord, cell)
        })
        .collect();

    let mut grid = VoxelGrid::from_cells(resolution, origin, cells)?;
    // Cells without a usable normal (none in the input, or cancelling member
    // normals) get one from the local centroid distribution.
    let missing: Vec<usize> = (0..grid.len())
        .filter(|&i| grid.cells[i].normal == Vector3::zeros())
        .collect();
    let estimated: Vec<Vector3<f64>> = missing.iter().map(|&i| estimate_normal(&grid, i)).collect();
    for (i, n) in missing.into_iter().zip(estimated) {
        grid.cells[i].normal = n;
    }
    Ok(grid)
}

/// PCA normal over the centroids of the 26-neighborhood (plus the cell
/// itself): eigenvector of the smallest eigenvalue, oriented towards +z with
/// a lexicographic fallback for horizontal normals.
pub fn estimate_normal(grid: &VoxelGrid, index: usize) -> Vector3<f64> {
    let c = grid.coords[index];
    let mut pts = Vec::with_capacity(27);
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                if let Some(j) = grid.index_of(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                    pts.push(grid.cells[j].centroid);
                }
            }
        }
    }
    if pts.len() < 3 {
        return Vector3::z();
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("3 eigenvalues");
    let n: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
    match n.try_normalize(1e-12) {
        Some(n) => orient_normal(n),
        None => Vector3::z(),
    }
}

fn orient_normal(n: Vector3<f64>) -> Vector3<f64> {
    const EPS: f64 = 1e-9;
    if n.z > EPS {
        return n;
    }
    if n.z < -EPS {
        return -n;
    }
    for v in n.iter() {
        if *v > EPS {
            return n;
        }
        if *v < -EPS {
            return -n;
        }
    }
    n
}

/// One ground-truth instance over grid voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGroundTruth {
    pub id: u32,
    pub class: u32,
    /// Sorted voxel indices into the grid.
    pub voxels: Vec<usize>,
    /// Mean of member cell centroids.
    pub centroid: Vector3<f64>,
}

impl InstanceGroundTruth {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

/// Mean of `positions[i]` over `members`, summed in member order.
pub fn mean_position(positions: &[Vector3<f64>], members: &[usize]) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    for &i in members {
        sum += positions[i];
    }
    sum / members.len() as f64
}

/// Groups labeled cells by instance id. Unlabeled cells are left out; the
/// class of an instance is the majority semantic label of its cells (0 when
/// none of them carries one).
pub fn extract_ground_truth(grid: &VoxelGrid) -> Result<Vec<InstanceGroundTruth>> {
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, cell) in grid.cells.iter().enumerate() {
        if let Some(id) = cell.instance_label {
            groups.entry(id).or_default().push(i);
        }
    }
    if groups.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let positions = grid.positions();
    Ok(groups
        .into_iter()
        .map(|(id, voxels)| {
            let mut votes = Vec::new();
            for &v in &voxels {
                if let Some(l) = grid.cells[v].semantic_label {
                    vote(&mut votes, l);
                }
            }
            InstanceGroundTruth {
                id,
                class: majority(&votes).unwrap_or(0),
                centroid: mean_position(&positions, &voxels),
                voxels,
            }
        })
        .collect())
}
