//! PLY input and output for point clouds and voxel grids.
//!
//! The reader accepts `ascii` and `binary_little_endian` files. Only the
//! `vertex` element is kept; other elements are skipped. Recognized vertex
//! properties are `x y z`, `red green blue` (integer types are scaled by
//! 1/255, float types taken as is), optional `nx ny nz`, and optional
//! integer `label`, `instance` and `segment` where negative values mean
//! "unlabeled".
//!
//! Grid files are ordinary PLYs with one vertex per voxel at its centroid.
//! They add integer cell coordinates `ix iy iz`, a `count` property and
//! two header comments, `voxel_resolution <r>` and `voxel_origin <x> <y> <z>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Location, Result};
use crate::geometry::{Coord, PointCloud, VoxelCell, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            ScalarType::I8 => out.push(v as i8 as u8),
            ScalarType::U8 => out.push(v as u8),
            ScalarType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            ScalarType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            ScalarType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            ScalarType::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            ScalarType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            ScalarType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(ScalarType),
    List(ScalarType, ScalarType),
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Vertex table of a PLY file.
#[derive(Debug, Clone, Default)]
pub struct PlyVertices {
    pub comments: Vec<String>,
    /// Scalar vertex properties in file order.
    pub properties: Vec<(String, ScalarType)>,
    pub columns: HashMap<String, Vec<f64>>,
    pub count: usize,
}

impl PlyVertices {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(|v| v.as_slice())
    }

    fn scalar_type(&self, name: &str) -> Option<ScalarType> {
        self.properties.iter().find(|(n, _)| n == name).map(|(_, t)| *t)
    }

    /// Value following `key` in a `comment key value...` header line.
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        self.comments.iter().find_map(|c| {
            let rest = c.strip_prefix(key)?;
            rest.starts_with(' ').then(|| rest.trim())
        })
    }
}

struct Reader<'a> {
    path: &'a Path,
}

impl Reader<'_> {
    fn at_line(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), location: Location::Line(line), message: message.into() }
    }

    fn at_byte(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), location: Location::Byte(offset as u64), message: message.into() }
    }
}

/// Parses PLY bytes. `path` is only used in error messages.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<PlyVertices> {
    let r = Reader { path };
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Option<(usize, String)> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| *pos + i);
        let line = String::from_utf8_lossy(&bytes[*pos..end]).trim_end_matches('\r').to_string();
        *pos = (end + 1).min(bytes.len().max(end + 1));
        line_no += 1;
        Some((line_no, line))
    };

    match next_line(&mut pos) {
        Some((_, l)) if l == "ply" => {}
        _ => return Err(r.at_line(1, "missing `ply` magic")),
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    let header_end_line = loop {
        let Some((n, line)) = next_line(&mut pos) else {
            return Err(r.at_line(line_no + 1, "header ends without `end_header`"));
        };
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match (tok.next(), tok.next()) {
                    (Some("ascii"), Some("1.0")) => PlyFormat::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyFormat::BinaryLittleEndian,
                    (Some(f), _) => return Err(r.at_line(n, format!("unsupported format `{f}`"))),
                    _ => return Err(r.at_line(n, "malformed format line")),
                });
            }
            Some("comment") | Some("obj_info") => {
                comments.push(line.split_once(' ').map_or("", |(_, c)| c).trim().to_string());
            }
            Some("element") => {
                let (Some(name), Some(count)) = (tok.next(), tok.next()) else {
                    return Err(r.at_line(n, "malformed element line"));
                };
                let count = count.parse().map_err(|_| r.at_line(n, format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new() });
            }
            Some("property") => {
                let Some(el) = elements.last_mut() else {
                    return Err(r.at_line(n, "property before any element"));
                };
                let words: Vec<&str> = tok.collect();
                let ty = |s: &str| ScalarType::parse(s).ok_or_else(|| r.at_line(n, format!("unknown type `{s}`")));
                let prop = match words.as_slice() {
                    ["list", c, i, name] => Property { name: name.to_string(), kind: PropertyKind::List(ty(c)?, ty(i)?) },
                    [t, name] => Property { name: name.to_string(), kind: PropertyKind::Scalar(ty(t)?) },
                    _ => return Err(r.at_line(n, "malformed property line")),
                };
                el.properties.push(prop);
            }
            Some("end_header") => break n,
            None => {}
            Some(other) => return Err(r.at_line(n, format!("unexpected header keyword `{other}`"))),
        }
    };
    let format = format.ok_or_else(|| r.at_line(header_end_line, "missing format line"))?;

    let mut out = PlyVertices { comments, ..Default::default() };
    match format {
        PlyFormat::Ascii => {
            let text = &bytes[pos.min(bytes.len())..];
            let mut lines = text
                .split(|&b| b == b'\n')
                .enumerate()
                .map(|(i, l)| (header_end_line + 1 + i, String::from_utf8_lossy(l).trim().to_string()))
                .filter(|(_, l)| !l.is_empty());
            for el in &elements {
                let keep = el.name == "vertex";
                if keep {
                    start_vertex_table(&mut out, el);
                }
                for k in 0..el.count {
                    let Some((n, line)) = lines.next() else {
                        return Err(r.at_line(
                            header_end_line + 1,
                            format!("file ends after {k} of {} `{}` records", el.count, el.name),
                        ));
                    };
                    let mut tok = line.split_whitespace();
                    let mut value = |what: &str| -> Result<f64> {
                        let t = tok.next().ok_or_else(|| r.at_line(n, format!("missing value for `{what}`")))?;
                        t.parse::<f64>().map_err(|_| r.at_line(n, format!("bad number `{t}` for `{what}`")))
                    };
                    for p in &el.properties {
                        match p.kind {
                            PropertyKind::Scalar(_) => {
                                let v = value(&p.name)?;
                                if keep {
                                    out.columns.get_mut(&p.name).unwrap().push(v);
                                }
                            }
                            PropertyKind::List(..) => {
                                let len = value(&p.name)?;
                                for _ in 0..len as usize {
                                    value(&p.name)?;
                                }
                            }
                        }
                    }
                    if tok.next().is_some() {
                        return Err(r.at_line(n, "extra values in record"));
                    }
                }
            }
            if let Some((n, _)) = lines.next() {
                return Err(r.at_line(n, "data after last record"));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut off = pos;
            let take = |off: &mut usize, size: usize, what: &str| -> Result<&[u8]> {
                if *off + size > bytes.len() {
                    return Err(r.at_byte(*off, format!("truncated while reading `{what}`")));
                }
                let s = &bytes[*off..*off + size];
                *off += size;
                Ok(s)
            };
            for el in &elements {
                let keep = el.name == "vertex";
                if keep {
                    start_vertex_table(&mut out, el);
                }
                for _ in 0..el.count {
                    for p in &el.properties {
                        match p.kind {
                            PropertyKind::Scalar(t) => {
                                let v = t.decode(take(&mut off, t.size(), &p.name)?);
                                if keep {
                                    out.columns.get_mut(&p.name).unwrap().push(v);
                                }
                            }
                            PropertyKind::List(c, i) => {
                                let len = c.decode(take(&mut off, c.size(), &p.name)?);
                                if !(len >= 0.0) {
                                    return Err(r.at_byte(off - c.size(), "negative list length"));
                                }
                                take(&mut off, len as usize * i.size(), &p.name)?;
                            }
                        }
                    }
                }
            }
            if off != bytes.len() {
                return Err(r.at_byte(off, "trailing bytes after last record"));
            }
        }
    }
    Ok(out)
}

fn start_vertex_table(out: &mut PlyVertices, el: &Element) {
    out.count = el.count;
    for p in &el.properties {
        if let PropertyKind::Scalar(t) = p.kind {
            out.properties.push((p.name.clone(), t));
            out.columns.insert(p.name.clone(), Vec::with_capacity(el.count));
        }
    }
}

pub fn read_ply(path: &Path) -> Result<PlyVertices> {
    let bytes = std::fs::read(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: Location::Unknown,
        message: format!("cannot read: {e}"),
    })?;
    parse_ply(&bytes, path)
}

fn missing(path: &Path, name: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: Location::Line(1),
        message: format!("missing vertex property `{name}`"),
    }
}

fn required<'a>(ply: &'a PlyVertices, path: &Path, name: &str) -> Result<&'a [f64]> {
    ply.column(name).ok_or_else(|| missing(path, name))
}

fn labels(ply: &PlyVertices, name: &str) -> Option<Vec<Option<u32>>> {
    ply.column(name)
        .map(|c| c.iter().map(|&v| if v < 0.0 { None } else { Some(v as u32) }).collect())
}

fn colors(ply: &PlyVertices, path: &Path) -> Result<Vec<[f64; 3]>> {
    let mut channels = Vec::with_capacity(3);
    for name in ["red", "green", "blue"] {
        let col = required(ply, path, name)?;
        let scale = if ply.scalar_type(name).is_some_and(|t| t.is_float()) { 1.0 } else { 1.0 / 255.0 };
        channels.push(col.iter().map(move |v| v * scale).collect::<Vec<f64>>());
    }
    Ok((0..ply.count).map(|i| [channels[0][i], channels[1][i], channels[2][i]]).collect())
}

/// Normal columns, rescaled to unit length when `renormalize` is set.
fn normals(ply: &PlyVertices, path: &Path, renormalize: bool) -> Result<Option<Vec<Vector3<f64>>>> {
    let (Some(x), Some(y), Some(z)) = (ply.column("nx"), ply.column("ny"), ply.column("nz")) else {
        return Ok(None);
    };
    (0..ply.count)
        .map(|i| {
            let n = Vector3::new(x[i], y[i], z[i]);
            let n = if renormalize { n.try_normalize(1e-12) } else { Some(n).filter(|n| n.norm() > 1e-12) };
            n.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                location: Location::Unknown,
                message: format!("zero normal on vertex {i}"),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn positions(ply: &PlyVertices, path: &Path) -> Result<Vec<Vector3<f64>>> {
    let (x, y, z) = (required(ply, path, "x")?, required(ply, path, "y")?, required(ply, path, "z")?);
    Ok((0..ply.count).map(|i| Vector3::new(x[i], y[i], z[i])).collect())
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let ply = read_ply(path)?;
    let cloud = PointCloud {
        points: positions(&ply, path)?,
        colors: colors(&ply, path)?,
        normals: normals(&ply, path, true)?,
        semantic_labels: labels(&ply, "label"),
        instance_labels: labels(&ply, "instance"),
    };
    cloud.validate()?;
    Ok(cloud)
}

struct Column {
    name: &'static str,
    ty: ScalarType,
    values: Vec<f64>,
}

fn encode_ply(format: PlyFormat, comments: &[String], count: usize, columns: &[Column]) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    for c in comments {
        let _ = writeln!(header, "comment {c}");
    }
    let _ = writeln!(header, "element vertex {count}");
    for c in columns {
        let _ = writeln!(header, "property {} {}", c.ty.name(), c.name);
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for i in 0..count {
                line.clear();
                for (k, c) in columns.iter().enumerate() {
                    if k > 0 {
                        line.push(' ');
                    }
                    let v = c.values[i];
                    match c.ty {
                        ScalarType::F64 => write!(line, "{v:?}"),
                        ScalarType::F32 => write!(line, "{:?}", v as f32),
                        _ => write!(line, "{}", v as i64),
                    }
                    .expect("writing to a String");
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for i in 0..count {
                for c in columns {
                    c.ty.encode(c.values[i], &mut out);
                }
            }
        }
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn label_column(name: &'static str, values: &[Option<u32>]) -> Column {
    Column { name, ty: ScalarType::I32, values: values.iter().map(|v| v.map_or(-1.0, |v| v as f64)).collect() }
}

/// Encodes a point cloud with float positions and normals and 8-bit colors.
pub fn encode_point_cloud(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut cols = vec![
        Column { name: "x", ty: ScalarType::F64, values: cloud.points.iter().map(|p| p.x).collect() },
        Column { name: "y", ty: ScalarType::F64, values: cloud.points.iter().map(|p| p.y).collect() },
        Column { name: "z", ty: ScalarType::F64, values: cloud.points.iter().map(|p| p.z).collect() },
    ];
    for (k, name) in ["red", "green", "blue"].into_iter().enumerate() {
        cols.push(Column {
            name,
            ty: ScalarType::U8,
            values: cloud.colors.iter().map(|c| (c[k].clamp(0.0, 1.0) * 255.0).round()).collect(),
        });
    }
    if let Some(n) = &cloud.normals {
        for (k, name) in ["nx", "ny", "nz"].into_iter().enumerate() {
            cols.push(Column { name, ty: ScalarType::F32, values: n.iter().map(|v| v[k]).collect() });
        }
    }
    if let Some(l) = &cloud.semantic_labels {
        cols.push(label_column("label", l));
    }
    if let Some(l) = &cloud.instance_labels {
        cols.push(label_column("instance", l));
    }
    encode_ply(format, &[], cloud.len(), &cols)
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    write_bytes(path, &encode_point_cloud(cloud, format))
}

/// Per-voxel labels written alongside the grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridLabels<'a> {
    /// Replaces the cells' semantic labels.
    pub semantic: Option<&'a [Option<u32>]>,
    /// Replaces the cells' instance labels.
    pub instance: Option<&'a [Option<u32>]>,
    /// Adds a `segment` property.
    pub segment: Option<&'a [usize]>,
}

/// Encodes a grid losslessly: doubles for every real attribute.
pub fn encode_grid(grid: &VoxelGrid, labels: GridLabels<'_>, format: PlyFormat) -> Vec<u8> {
    let cells = grid.cells();
    let real = |name: &'static str, f: &dyn Fn(&VoxelCell) -> f64| Column {
        name,
        ty: ScalarType::F64,
        values: cells.iter().map(f).collect(),
    };
    let coord = |name: &'static str, k: usize| Column {
        name,
        ty: ScalarType::I32,
        values: grid.coords().iter().map(|c| c[k] as f64).collect(),
    };
    let mut cols = vec![
        real("x", &|c| c.centroid.x),
        real("y", &|c| c.centroid.y),
        real("z", &|c| c.centroid.z),
        real("red", &|c| c.color[0]),
        real("green", &|c| c.color[1]),
        real("blue", &|c| c.color[2]),
        real("nx", &|c| c.normal.x),
        real("ny", &|c| c.normal.y),
        real("nz", &|c| c.normal.z),
        coord("ix", 0),
        coord("iy", 1),
        coord("iz", 2),
        Column { name: "count", ty: ScalarType::U32, values: cells.iter().map(|c| c.point_count as f64).collect() },
    ];
    let own_sem: Vec<Option<u32>>;
    let semantic = match labels.semantic {
        Some(s) => s,
        None => {
            own_sem = cells.iter().map(|c| c.semantic_label).collect();
            &own_sem
        }
    };
    let own_inst: Vec<Option<u32>>;
    let instance = match labels.instance {
        Some(s) => s,
        None => {
            own_inst = cells.iter().map(|c| c.instance_label).collect();
            &own_inst
        }
    };
    cols.push(label_column("label", semantic));
    cols.push(label_column("instance", instance));
    if let Some(seg) = labels.segment {
        cols.push(Column { name: "segment", ty: ScalarType::I32, values: seg.iter().map(|&s| s as f64).collect() });
    }
    let o = grid.origin();
    let comments = vec![
        format!("voxel_resolution {:?}", grid.resolution()),
        format!("voxel_origin {:?} {:?} {:?}", o.x, o.y, o.z),
    ];
    encode_ply(format, &comments, grid.len(), &cols)
}

pub fn write_grid(path: &Path, grid: &VoxelGrid, labels: GridLabels<'_>, format: PlyFormat) -> Result<()> {
    write_bytes(path, &encode_grid(grid, labels, format))
}

/// A grid file read back, with any per-voxel extras.
#[derive(Debug, Clone)]
pub struct GridFile {
    pub grid: VoxelGrid,
    pub segment: Option<Vec<usize>>,
}

pub fn grid_from_ply(ply: &PlyVertices, path: &Path) -> Result<GridFile> {
    let header_err = |message: String| Error::Parse { path: path.to_path_buf(), location: Location::Line(1), message };
    let resolution: f64 = ply
        .comment_value("voxel_resolution")
        .ok_or_else(|| header_err("missing `voxel_resolution` comment".into()))?
        .parse()
        .map_err(|_| header_err("bad `voxel_resolution` comment".into()))?;
    let origin: Vec<f64> = ply
        .comment_value("voxel_origin")
        .ok_or_else(|| header_err("missing `voxel_origin` comment".into()))?
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| header_err("bad `voxel_origin` comment".into()))?;
    if origin.len() != 3 {
        return Err(header_err("`voxel_origin` needs three values".into()));
    }
    let points = positions(ply, path)?;
    let colors = colors(ply, path)?;
    let normals = normals(ply, path, false)?.ok_or_else(|| missing(path, "nx"))?;
    let (ix, iy, iz) = (required(ply, path, "ix")?, required(ply, path, "iy")?, required(ply, path, "iz")?);
    let count = required(ply, path, "count")?;
    let semantic = labels(ply, "label");
    let instance = labels(ply, "instance");
    let cells: Vec<(Coord, VoxelCell)> = (0..ply.count)
        .map(|i| {
            (
                [ix[i] as i32, iy[i] as i32, iz[i] as i32],
                VoxelCell {
                    centroid: points[i],
                    color: colors[i],
                    normal: normals[i],
                    point_count: count[i] as u32,
                    semantic_label: semantic.as_ref().and_then(|s| s[i]),
                    instance_label: instance.as_ref().and_then(|s| s[i]),
                },
            )
        })
        .collect();
    let grid = VoxelGrid::from_cells(resolution, Vector3::new(origin[0], origin[1], origin[2]), cells)?;
    let segment = ply.column("segment").map(|c| c.iter().map(|&v| v as usize).collect());
    Ok(GridFile { grid, segment })
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    grid_from_ply(&read_ply(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::voxelize;

    fn cloud() -> PointCloud {
        PointCloud {
            points: vec![Vector3::new(0.01, 0.01, 0.01), Vector3::new(0.05, 0.01, 0.01), Vector3::new(0.051, 0.012, 0.013)],
            colors: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            normals: Some(vec![Vector3::z(); 3]),
            semantic_labels: Some(vec![Some(2), None, Some(1)]),
            instance_labels: Some(vec![Some(0), Some(1), Some(1)]),
        }
    }

    #[test]
    fn point_cloud_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let path = dir.path().join("c.ply");
            write_point_cloud(&path, &cloud(), format).unwrap();
            let back = read_point_cloud(&path).unwrap();
            assert_eq!(back, cloud());
        }
    }

    #[test]
    fn grid_round_trip_is_exact() {
        let grid = voxelize(&cloud(), 0.02).unwrap();
        let seg = vec![3usize, 4];
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let bytes = encode_grid(&grid, GridLabels { segment: Some(&seg), ..Default::default() }, format);
            let back = grid_from_ply(&parse_ply(&bytes, Path::new("g.ply")).unwrap(), Path::new("g.ply")).unwrap();
            assert_eq!(back.grid.cells(), grid.cells());
            assert_eq!(back.grid.coords(), grid.coords());
            assert_eq!(back.grid.origin(), grid.origin());
            assert_eq!(back.segment, Some(seg.clone()));
        }
    }

    #[test]
    fn ascii_errors_carry_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 oops 0\n";
        match parse_ply(text.as_bytes(), Path::new("bad.ply")) {
            Err(Error::Parse { location: Location::Line(9), .. }) => {}
            other => panic!("{other:?}"),
        }
        let missing_end = "ply\nformat ascii 1.0\nelement vertex 2\n";
        assert!(matches!(parse_ply(missing_end.as_bytes(), Path::new("b")), Err(Error::Parse { .. })));
    }

    #[test]
    fn binary_truncation_carries_offset() {
        let mut bytes = encode_point_cloud(&cloud(), PlyFormat::BinaryLittleEndian);
        let header_len = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        bytes.truncate(bytes.len() - 2);
        match parse_ply(&bytes, Path::new("b.ply")) {
            Err(Error::Parse { location: Location::Byte(off), .. }) => assert!(off as usize >= header_len),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn skips_faces_and_scales_uchar_colors() {
        let text = "ply\nformat ascii 1.0\ncomment hello\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 0 51\n3 0 0 0\n";
        let ply = parse_ply(text.as_bytes(), Path::new("f.ply")).unwrap();
        assert_eq!(ply.count, 1);
        assert_eq!(colors(&ply, Path::new("f.ply")).unwrap()[0], [1.0, 0.0, 0.2]);
        assert_eq!(ply.comments, vec!["hello".to_string()]);
    }

    #[test]
    fn missing_position_is_reported() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_point_cloud(&path), Err(Error::Parse { .. })));
        assert!(matches!(read_point_cloud(&dir.path().join("nope.ply")), Err(Error::Parse { .. })));
    }
}
