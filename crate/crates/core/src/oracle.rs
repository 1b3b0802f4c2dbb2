//! Stand-in for the trained network: per-voxel predictions derived from the
//! ground truth, optionally corrupted with isotropic Gaussian noise.
//!
//! The noise-free output sits at the optimum of every loss term: offsets
//! point exactly at the instance centroid, occupancy is `ln N_c`, and
//! feature codes are at least `2 * delta_d` apart.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{InstanceGroundTruth, VoxelGrid};
use crate::prediction::Predictions;

/// Coordinate magnitude of the feature codes. Codes sit on `±CODE_SCALE·e_k`,
/// so distinct codes are at least `CODE_SCALE·√2 ≈ 3.11` apart.
pub const CODE_SCALE: f64 = 2.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleNoiseSpec {
    pub feature: f64,
    /// Meters.
    pub offset: f64,
    /// Std of the log-occupancy noise.
    pub occupancy: f64,
    pub logit: f64,
}

impl Default for OracleNoiseSpec {
    fn default() -> Self {
        OracleNoiseSpec {
            feature: 0.0,
            offset: 0.0,
            occupancy: 0.0,
            logit: 0.0,
        }
    }
}

impl OracleNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("oracle.noise.feature", self.feature),
            ("oracle.noise.offset", self.offset),
            ("oracle.noise.occupancy", self.occupancy),
            ("oracle.noise.logit", self.logit),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("std must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Fixed output parameters of the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub class_count: usize,
    pub embedding_dim: usize,
    pub sigma_s: f64,
    /// Meters.
    pub sigma_d: f64,
    /// Logit of the true class; every other class gets 0.
    pub logit_margin: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            class_count: 18,
            embedding_dim: 32,
            sigma_s: 0.3,
            sigma_d: 0.3,
            logit_margin: 10.0,
        }
    }
}

/// Feature code of the `index`-th instance: signed axis vectors.
pub fn feature_code(index: usize, dim: usize) -> Result<Vec<f64>> {
    if index >= 2 * dim {
        return Err(Error::config(
            "embedding_dim",
            format!("{dim} dimensions hold at most {} feature codes, need {}", 2 * dim, index + 1),
        ));
    }
    let mut code = vec![0.0; dim];
    code[index / 2] = if index % 2 == 0 { CODE_SCALE } else { -CODE_SCALE };
    Ok(code)
}

/// Predictions for every voxel of `grid`. Noise draws come from stream 1 of
/// the ChaCha generator seeded with `seed`.
pub fn emit_predictions(
    grid: &VoxelGrid,
    gt: &[InstanceGroundTruth],
    params: &OracleParams,
    noise: &OracleNoiseSpec,
    seed: u64,
) -> Result<Predictions> {
    noise.validate()?;
    let n = grid.len();
    let mut owner = vec![usize::MAX; n];
    for (c, inst) in gt.iter().enumerate() {
        for &v in &inst.voxels {
            owner[v] = c;
        }
    }
    if let Some(v) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::Coverage(v));
    }
    for inst in gt {
        if inst.class as usize >= params.class_count {
            return Err(Error::Label {
                voxel: inst.voxels[0],
                label: inst.class,
                classes: params.class_count,
            });
        }
    }
    let codes = (0..gt.len())
        .map(|c| feature_code(c, params.embedding_dim))
        .collect::<Result<Vec<_>>>()?;
    let log_sizes: Vec<f64> = gt.iter().map(|g| (g.size() as f64).ln()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |std: f64| if std > 0.0 { std * std_normal.sample(&mut rng) } else { 0.0 };

    let mut out = Predictions::zeros(n, params.class_count, params.embedding_dim);
    for (i, cell) in grid.cells().iter().enumerate() {
        let c = owner[i];
        let inst = &gt[c];
        for k in 0..params.class_count {
            let base = if k as u32 == inst.class { params.logit_margin } else { 0.0 };
            out.logits[[i, k]] = base + draw(noise.logit);
        }
        for k in 0..params.embedding_dim {
            out.features[[i, k]] = codes[c][k] + draw(noise.feature);
        }
        let offset: Vector3<f64> = inst.centroid - cell.centroid;
        for a in 0..3 {
            out.offsets[[i, a]] = offset[a] + draw(noise.offset);
        }
        out.covariance[[i, 0]] = params.sigma_s;
        out.covariance[[i, 1]] = params.sigma_d;
        out.occupancy[i] = log_sizes[c] + draw(noise.occupancy);
    }
    Ok(out)
}
