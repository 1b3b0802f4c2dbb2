//! Synthetic indoor scenes with planted instances.
//!
//! Shapes live on the voxel lattice: every shape is described in integer cell
//! units and its surface points are emitted on a 2×2 sub-lattice inside each
//! surface cell (at 1/4 and 3/4 of the cell), so no point ever sits on a cell
//! boundary. The room is a floor one layer below `z = 0` and two walls one
//! layer outside `x = 0` and `y = 0`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Coord, PointCloud};

pub const CLASS_WALL: u32 = 0;
pub const CLASS_FLOOR: u32 = 1;
pub const CLASS_BOX: u32 = 2;
pub const CLASS_CYLINDER: u32 = 3;
pub const CLASS_PANEL: u32 = 4;

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Floor extent in meters along x and y.
    pub room_size: [f64; 2],
    pub wall_height: f64,
    pub walls: bool,
    pub objects: usize,
    /// Footprint side length range, meters.
    pub object_size: [f64; 2],
    pub object_height: [f64; 2],
    /// Minimum free space between objects and between objects and walls.
    pub gap: f64,
    /// Per-channel std of point color jitter.
    pub color_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            room_size: [3.0, 3.0],
            wall_height: 1.0,
            walls: true,
            objects: 8,
            object_size: [0.2, 0.5],
            object_height: [0.2, 0.8],
            gap: 0.1,
            color_noise: 0.02,
        }
    }
}

/// A shape in cell units, standing on the floor (`z = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box {
        min: [i32; 2],
        size: [i32; 3],
    },
    Cylinder {
        center: [i32; 2],
        radius: i32,
        height: i32,
    },
    /// One-cell-thick vertical slab.
    Panel {
        min: [i32; 2],
        length: i32,
        height: i32,
        along_x: bool,
    },
}

impl Shape {
    pub fn default_class(&self) -> u32 {
        match self {
            Shape::Box { .. } => CLASS_BOX,
            Shape::Cylinder { .. } => CLASS_CYLINDER,
            Shape::Panel { .. } => CLASS_PANEL,
        }
    }

    /// Inclusive-exclusive footprint rectangle `[x0, x1) × [y0, y1)`.
    pub fn footprint(&self) -> [i32; 4] {
        match *self {
            Shape::Box { min, size } => [min[0], min[1], min[0] + size[0], min[1] + size[1]],
            Shape::Cylinder { center, radius, .. } => [
                center[0] - radius,
                center[1] - radius,
                center[0] + radius + 1,
                center[1] + radius + 1,
            ],
            Shape::Panel { min, length, along_x, .. } => {
                if along_x {
                    [min[0], min[1], min[0] + length, min[1] + 1]
                } else {
                    [min[0], min[1], min[0] + 1, min[1] + length]
                }
            }
        }
    }

    /// Whether cell `c` belongs to the solid occupied by the shape.
    pub fn contains_cell(&self, c: Coord) -> bool {
        match *self {
            Shape::Box { min, size } => {
                c[0] >= min[0]
                    && c[0] < min[0] + size[0]
                    && c[1] >= min[1]
                    && c[1] < min[1] + size[1]
                    && c[2] >= 0
                    && c[2] < size[2]
            }
            Shape::Cylinder { center, radius, height } => {
                let dx = c[0] - center[0];
                let dy = c[1] - center[1];
                dx * dx + dy * dy <= radius * radius && c[2] >= 0 && c[2] < height
            }
            Shape::Panel { height, .. } => {
                let f = self.footprint();
                c[0] >= f[0] && c[0] < f[2] && c[1] >= f[1] && c[1] < f[3] && c[2] >= 0 && c[2] < height
            }
        }
    }

    fn height(&self) -> i32 {
        match *self {
            Shape::Box { size, .. } => size[2],
            Shape::Cylinder { height, .. } | Shape::Panel { height, .. } => height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    Floor,
    WallX,
    WallY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlantKind {
    Room(Surface),
    Object(Shape),
}

/// Placement record for one planted instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    pub id: u32,
    pub class: u32,
    pub kind: PlantKind,
    pub color: [f64; 3],
    pub point_count: usize,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    /// Labeled point cloud.
    pub cloud: PointCloud,
    pub instances: Vec<PlantedInstance>,
    /// Room extent in cells.
    pub cells: [i32; 2],
    pub resolution: f64,
}

/// Random scene: room surfaces plus `spec.objects` non-overlapping shapes.
pub fn synth_scene(spec: &SceneSpec, resolution: f64, seed: u64) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = place_objects(spec, resolution, &mut rng)?;
    render_scene(spec, resolution, &shapes, &mut rng)
}

/// Scene with caller-chosen shapes and classes. Shapes are not checked for
/// overlap.
pub fn build_scene(
    spec: &SceneSpec,
    resolution: f64,
    shapes: &[(Shape, u32)],
    seed: u64,
) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_scene(spec, resolution, shapes, &mut rng)
}

fn room_cells(spec: &SceneSpec, resolution: f64) -> [i32; 2] {
    [
        (spec.room_size[0] / resolution).round() as i32,
        (spec.room_size[1] / resolution).round() as i32,
    ]
}

fn to_cells(range: [f64; 2], resolution: f64) -> (i32, i32) {
    let lo = ((range[0] / resolution).round() as i32).max(1);
    let hi = ((range[1] / resolution).round() as i32).max(lo);
    (lo, hi)
}

fn place_objects(spec: &SceneSpec, resolution: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(Shape, u32)>> {
    let cells = room_cells(spec, resolution);
    let gap = (spec.gap / resolution).ceil() as i32;
    let (smin, smax) = to_cells(spec.object_size, resolution);
    let (hmin, hmax) = to_cells(spec.object_height, resolution);
    let mut placed: Vec<(Shape, u32)> = Vec::with_capacity(spec.objects);
    for object in 0..spec.objects {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let height = rng.random_range(hmin..=hmax);
            let shape = match rng.random_range(0..3) {
                0 => {
                    let sx = rng.random_range(smin..=smax);
                    let sy = rng.random_range(smin..=smax);
                    let x = rng.random_range(0..cells[0].max(1));
                    let y = rng.random_range(0..cells[1].max(1));
                    Shape::Box { min: [x, y], size: [sx, sy, height] }
                }
                1 => {
                    let radius = (rng.random_range(smin..=smax) / 2).max(1);
                    let x = rng.random_range(0..cells[0].max(1));
                    let y = rng.random_range(0..cells[1].max(1));
                    Shape::Cylinder { center: [x, y], radius, height }
                }
                _ => {
                    let length = rng.random_range(smin..=smax);
                    let x = rng.random_range(0..cells[0].max(1));
                    let y = rng.random_range(0..cells[1].max(1));
                    Shape::Panel { min: [x, y], length, height, along_x: rng.random_bool(0.5) }
                }
            };
            let f = shape.footprint();
            let inside = f[0] >= gap && f[1] >= gap && f[2] <= cells[0] - gap && f[3] <= cells[1] - gap;
            if !inside {
                continue;
            }
            let clear = placed.iter().all(|(other, _)| {
                let g = other.footprint();
                f[2] + gap <= g[0] || g[2] + gap <= f[0] || f[3] + gap <= g[1] || g[3] + gap <= f[1]
            });
            if clear {
                placed.push((shape, shape.default_class()));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::PackingFailed { object, attempts: MAX_PLACEMENT_ATTEMPTS });
        }
    }
    Ok(placed)
}

struct Emitter<'a> {
    cloud: &'a mut PointCloud,
    normals: Vec<Vector3<f64>>,
    semantic: Vec<Option<u32>>,
    instance: Vec<Option<u32>>,
    resolution: f64,
}

impl Emitter<'_> {
    /// Emits the 2×2 sub-lattice of a cell on the plane through the cell
    /// center perpendicular to `axis`.
    fn face(&mut self, cell: Coord, axis: usize, normal: Vector3<f64>, label: (u32, u32), color: [f64; 3]) {
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for fu in [0.25, 0.75] {
            for fv in [0.25, 0.75] {
                let mut p = Vector3::new(cell[0] as f64 + 0.5, cell[1] as f64 + 0.5, cell[2] as f64 + 0.5);
                p[u] = cell[u] as f64 + fu;
                p[v] = cell[v] as f64 + fv;
                self.push(p * self.resolution, normal, label, color);
            }
        }
    }

    /// Two points stacked along z through the cell center.
    fn column(&mut self, cell: Coord, normal: Vector3<f64>, label: (u32, u32), color: [f64; 3]) {
        for fz in [0.25, 0.75] {
            let p = Vector3::new(cell[0] as f64 + 0.5, cell[1] as f64 + 0.5, cell[2] as f64 + fz);
            self.push(p * self.resolution, normal, label, color);
        }
    }

    fn push(&mut self, p: Vector3<f64>, normal: Vector3<f64>, label: (u32, u32), color: [f64; 3]) {
        self.cloud.points.push(p);
        self.cloud.colors.push(color);
        self.normals.push(normal);
        self.semantic.push(Some(label.1));
        self.instance.push(Some(label.0));
    }
}

fn distinct_color(rng: &mut ChaCha8Rng, taken: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.5; 3];
    let mut best_d = -1.0;
    for _ in 0..64 {
        let c = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        let d = taken
            .iter()
            .map(|t| ((c[0] - t[0]).powi(2) + (c[1] - t[1]).powi(2) + (c[2] - t[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        if d >= 0.3 {
            return c;
        }
        if d > best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn render_scene(
    spec: &SceneSpec,
    resolution: f64,
    shapes: &[(Shape, u32)],
    rng: &mut ChaCha8Rng,
) -> Result<SynthScene> {
    if !(resolution > 0.0) {
        return Err(Error::config("resolution", "must be positive"));
    }
    let cells = room_cells(spec, resolution);
    let wall_cells = (spec.wall_height / resolution).round() as i32;

    let mut kinds: Vec<(PlantKind, u32)> = vec![(PlantKind::Room(Surface::Floor), CLASS_FLOOR)];
    if spec.walls {
        kinds.push((PlantKind::Room(Surface::WallX), CLASS_WALL));
        kinds.push((PlantKind::Room(Surface::WallY), CLASS_WALL));
    }
    kinds.extend(shapes.iter().map(|(s, class)| (PlantKind::Object(*s), *class)));

    let mut colors: Vec<[f64; 3]> = Vec::new();
    for _ in &kinds {
        let c = distinct_color(rng, &colors);
        colors.push(c);
    }

    let mut cloud = PointCloud::default();
    let mut em = Emitter {
        cloud: &mut cloud,
        normals: Vec::new(),
        semantic: Vec::new(),
        instance: Vec::new(),
        resolution,
    };
    let mut counts = Vec::with_capacity(kinds.len());
    for (id, (kind, class)) in kinds.iter().enumerate() {
        let label = (id as u32, *class);
        let color = colors[id];
        let before = em.cloud.points.len();
        match kind {
            PlantKind::Room(Surface::Floor) => {
                for x in 0..cells[0] {
                    for y in 0..cells[1] {
                        let under = shapes.iter().any(|(s, _)| s.contains_cell([x, y, 0]));
                        if !under {
                            em.face([x, y, -1], 2, Vector3::z(), label, color);
                        }
                    }
                }
            }
            PlantKind::Room(Surface::WallX) => {
                for y in 0..cells[1] {
                    for z in 0..wall_cells {
                        em.face([-1, y, z], 0, Vector3::x(), label, color);
                    }
                }
            }
            PlantKind::Room(Surface::WallY) => {
                for x in 0..cells[0] {
                    for z in 0..wall_cells {
                        em.face([x, -1, z], 1, Vector3::y(), label, color);
                    }
                }
            }
            PlantKind::Object(shape) => render_shape(&mut em, shape, label, color),
        }
        counts.push(em.cloud.points.len() - before);
    }

    let Emitter { normals, semantic, instance, .. } = em;
    let jitter = Normal::new(0.0, spec.color_noise.max(0.0)).expect("finite std");
    if spec.color_noise > 0.0 {
        for c in cloud.colors.iter_mut() {
            for v in c.iter_mut() {
                *v = (*v + jitter.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    cloud.normals = Some(normals);
    cloud.semantic_labels = Some(semantic);
    cloud.instance_labels = Some(instance);

    let instances = kinds
        .into_iter()
        .enumerate()
        .map(|(id, (kind, class))| PlantedInstance {
            id: id as u32,
            class,
            kind,
            color: colors[id],
            point_count: counts[id],
        })
        .collect();
    Ok(SynthScene { cloud, instances, cells, resolution })
}

fn render_shape(em: &mut Emitter<'_>, shape: &Shape, label: (u32, u32), color: [f64; 3]) {
    let f = shape.footprint();
    let height = shape.height();
    match shape {
        Shape::Box { .. } | Shape::Panel { .. } => {
            // Exposed faces of boundary cells, except the bottom. A panel is
            // a single sheet and is only seen from its positive side.
            let dirs: &[(usize, i32)] = match shape {
                Shape::Panel { along_x: true, .. } => &[(0, -1), (0, 1), (1, 1), (2, 1)],
                Shape::Panel { along_x: false, .. } => &[(0, 1), (1, -1), (1, 1), (2, 1)],
                _ => &[(0, -1), (0, 1), (1, -1), (1, 1), (2, 1)],
            };
            for x in f[0]..f[2] {
                for y in f[1]..f[3] {
                    for z in 0..height {
                        let c = [x, y, z];
                        for &(axis, sign) in dirs {
                            let mut n = c;
                            n[axis] += sign;
                            if !shape.contains_cell(n) {
                                let mut normal = Vector3::zeros();
                                normal[axis] = sign as f64;
                                em.face(c, axis, normal, label, color);
                            }
                        }
                    }
                }
            }
        }
        Shape::Cylinder { center, .. } => {
            for x in f[0]..f[2] {
                for y in f[1]..f[3] {
                    if !shape.contains_cell([x, y, 0]) {
                        continue;
                    }
                    let side = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .any(|(dx, dy)| !shape.contains_cell([x + dx, y + dy, 0]));
                    if side {
                        let radial = Vector3::new((x - center[0]) as f64, (y - center[1]) as f64, 0.0)
                            .try_normalize(1e-12)
                            .unwrap_or_else(Vector3::x);
                        for z in 0..height {
                            em.column([x, y, z], radial, label, color);
                        }
                    }
                    em.face([x, y, height - 1], 2, Vector3::z(), label, color);
                }
            }
        }
    }
}
