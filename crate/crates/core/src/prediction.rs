//! Per-voxel network outputs and their flat binary file format.
//!
//! File layout (all little-endian):
//!
//! ```text
//! magic      8 bytes  "VXPRED01"
//! voxels     u64
//! classes    u32      C
//! dim        u32      K
//! records    voxels × { logits: C×f32, feature: K×f32, offset: 3×f32,
//!                       sigma_s: f32, sigma_d: f32, occupancy: f32 }
//! ```
//!
//! Records follow grid iteration order.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array1, Array2};

use crate::error::{Error, Location, Result};

pub const MAGIC: &[u8; 8] = b"VXPRED01";
const HEADER_LEN: u64 = 24;

/// Prediction bundle for a single voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPrediction {
    pub semantic_logits: Vec<f64>,
    pub feature_embedding: Vec<f64>,
    /// Offset from the voxel to its instance center, meters.
    pub spatial_offset: Vector3<f64>,
    /// `(sigma_s, sigma_d)`.
    pub covariance: (f64, f64),
    /// Natural log of the predicted instance voxel count.
    pub occupancy: f64,
}

/// Column store of per-voxel predictions, row `i` belongs to grid voxel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub logits: Array2<f64>,
    pub features: Array2<f64>,
    pub offsets: Array2<f64>,
    /// Columns: sigma_s, sigma_d.
    pub covariance: Array2<f64>,
    pub occupancy: Array1<f64>,
}

impl Predictions {
    pub fn zeros(voxels: usize, classes: usize, dim: usize) -> Self {
        Predictions {
            logits: Array2::zeros((voxels, classes)),
            features: Array2::zeros((voxels, dim)),
            offsets: Array2::zeros((voxels, 3)),
            covariance: Array2::ones((voxels, 2)),
            occupancy: Array1::zeros(voxels),
        }
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.logits.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn offset(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.offsets[[i, 0]], self.offsets[[i, 1]], self.offsets[[i, 2]])
    }

    pub fn voxel(&self, i: usize) -> VoxelPrediction {
        VoxelPrediction {
            semantic_logits: self.logits.row(i).to_vec(),
            feature_embedding: self.features.row(i).to_vec(),
            spatial_offset: self.offset(i),
            covariance: (self.covariance[[i, 0]], self.covariance[[i, 1]]),
            occupancy: self.occupancy[i],
        }
    }

    pub fn set_voxel(&mut self, i: usize, p: &VoxelPrediction) {
        self.logits.row_mut(i).assign(&Array1::from(p.semantic_logits.clone()));
        self.features.row_mut(i).assign(&Array1::from(p.feature_embedding.clone()));
        for a in 0..3 {
            self.offsets[[i, a]] = p.spatial_offset[a];
        }
        self.covariance[[i, 0]] = p.covariance.0;
        self.covariance[[i, 1]] = p.covariance.1;
        self.occupancy[i] = p.occupancy;
    }

    /// Argmax of the logits; ties resolve to the smaller class id.
    pub fn predicted_class(&self, i: usize) -> u32 {
        let row = self.logits.row(i);
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (what, rows) in [
            ("logit rows", self.logits.nrows()),
            ("feature rows", self.features.nrows()),
            ("offset rows", self.offsets.nrows()),
            ("covariance rows", self.covariance.nrows()),
        ] {
            if rows != n {
                return Err(Error::Alignment { what, expected: n, actual: rows });
            }
        }
        let finite = self.logits.iter().all(|v| v.is_finite())
            && self.features.iter().all(|v| v.is_finite())
            && self.offsets.iter().all(|v| v.is_finite())
            && self.occupancy.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidGeometry("non-finite prediction value".into()));
        }
        for (i, row) in self.covariance.rows().into_iter().enumerate() {
            for &s in row {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Covariance { instance: i, value: s });
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.class_count() as u32).to_le_bytes())?;
        w.write_all(&(self.embedding_dim() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * (self.class_count() + self.embedding_dim() + 6));
        for i in 0..self.len() {
            buf.clear();
            let values = self
                .logits
                .row(i)
                .into_iter()
                .chain(self.features.row(i))
                .chain(self.offsets.row(i))
                .chain(self.covariance.row(i))
                .chain(std::iter::once(&self.occupancy[i]));
            for v in values {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let parse_err = |offset: u64, message: String| Error::Parse {
            path: path.to_path_buf(),
            location: Location::Byte(offset),
            message,
        };
        let mut header = [0u8; HEADER_LEN as usize];
        r.read_exact(&mut header)
            .map_err(|e| parse_err(0, format!("truncated header: {e}")))?;
        if &header[..8] != MAGIC {
            return Err(parse_err(0, "bad magic, not a prediction file".into()));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let record = classes + dim + 6;
        let mut out = Predictions::zeros(n, classes, dim);
        let mut buf = vec![0u8; record * 4];
        let mut values = vec![0f64; record];
        for i in 0..n {
            let offset = HEADER_LEN + (i * record * 4) as u64;
            r.read_exact(&mut buf)
                .map_err(|e| parse_err(offset, format!("truncated record {i}: {e}")))?;
            for (v, chunk) in values.iter_mut().zip(buf.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            let (logits, rest) = values.split_at(classes);
            let (feature, rest) = rest.split_at(dim);
            out.logits.row_mut(i).assign(&ndarray::ArrayView1::from(logits));
            out.features.row_mut(i).assign(&ndarray::ArrayView1::from(feature));
            for a in 0..3 {
                out.offsets[[i, a]] = rest[a];
            }
            out.covariance[[i, 0]] = rest[3];
            out.covariance[[i, 1]] = rest[4];
            out.occupancy[i] = rest[5];
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            let end = HEADER_LEN + (n * record * 4) as u64;
            return Err(parse_err(end, "trailing bytes after last record".into()));
        }
        out.validate()?;
        Ok(out)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: Location::Unknown,
            message: format!("cannot open: {e}"),
        })?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Predictions {
        let mut p = Predictions::zeros(3, 4, 5);
        for i in 0..3 {
            p.set_voxel(
                i,
                &VoxelPrediction {
                    semantic_logits: vec![0.5, -1.0, 2.0 + i as f64, 0.0],
                    feature_embedding: vec![0.25 * i as f64; 5],
                    spatial_offset: Vector3::new(0.5, -0.25, 0.125),
                    covariance: (0.3, 0.4),
                    occupancy: (100.0f64).ln(),
                },
            );
        }
        p
    }

    #[test]
    fn round_trip_within_f32() {
        let p = sample();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 3 * (4 + 5 + 6) * 4);
        let q = Predictions::read_from(&bytes[..], Path::new("mem")).unwrap();
        for (a, b) in p.features.iter().zip(q.features.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((q.occupancy[1] - p.occupancy[1]).abs() < 1e-6);
        assert_eq!(q.predicted_class(2), 2);
    }

    #[test]
    fn truncated_record_reports_offset() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        match Predictions::read_from(&bytes[..], Path::new("mem")) {
            Err(Error::Parse { location: Location::Byte(off), .. }) => {
                assert_eq!(off, 24 + 2 * 15 * 4)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let bytes = [0u8; 32];
        assert!(matches!(
            Predictions::read_from(&bytes[..], Path::new("mem")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let mut p = sample();
        p.covariance[[1, 0]] = 0.0;
        assert!(matches!(p.validate(), Err(Error::Covariance { .. })));
    }
}
