//! Pipeline configuration, read from and written to TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterParams;
use crate::error::{Error, Location, Result};
use crate::eval::default_cdf_points;
use crate::geometry::DEFAULT_RESOLUTION;
use crate::losses::LossParams;
use crate::oracle::{OracleNoiseSpec, OracleParams};
use crate::scene::SceneSpec;
use crate::supervoxel::{Connectivity, EdgeWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervoxelParams {
    /// Scale parameter of the graph segmentation.
    pub k: f64,
    pub min_size: usize,
    pub connectivity: Connectivity,
    pub weights: EdgeWeights,
}

impl Default for SupervoxelParams {
    fn default() -> Self {
        SupervoxelParams {
            k: 0.06,
            min_size: 20,
            connectivity: Connectivity::TwentySix,
            weights: EdgeWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    /// Abscissae of the reported occupancy error CDF.
    pub cdf_points: Vec<f64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { cdf_points: default_cdf_points() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Voxel edge length, meters.
    pub resolution: f64,
    /// Drives scene synthesis and oracle noise.
    pub seed: u64,
    pub supervoxel: SupervoxelParams,
    pub cluster: ClusterParams,
    pub losses: LossParams,
    pub oracle: OracleParams,
    pub noise: OracleNoiseSpec,
    pub scene: SceneSpec,
    pub eval: EvalParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            resolution: DEFAULT_RESOLUTION,
            seed: 0,
            supervoxel: SupervoxelParams::default(),
            cluster: ClusterParams::default(),
            losses: LossParams::default(),
            oracle: OracleParams::default(),
            noise: OracleNoiseSpec::default(),
            scene: SceneSpec::default(),
            eval: EvalParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive("resolution", self.resolution)?;
        positive("supervoxel.k", self.supervoxel.k)?;
        if self.supervoxel.min_size == 0 {
            return Err(Error::config("supervoxel.min_size", "must be at least 1"));
        }
        let w = &self.supervoxel.weights;
        if !(w.alpha >= 0.0 && w.beta >= 0.0) {
            return Err(Error::config("supervoxel.weights", "alpha and beta must be >= 0"));
        }
        positive("supervoxel.weights.gamma_concave", w.gamma_concave)?;
        self.cluster.validate()?;
        positive("losses.delta_v", self.losses.delta_v)?;
        positive("losses.delta_d", self.losses.delta_d)?;
        if !(self.losses.prob_clamp > 0.0 && self.losses.prob_clamp < 0.5) {
            return Err(Error::config("losses.prob_clamp", "must lie in (0, 0.5)"));
        }
        if self.oracle.class_count == 0 {
            return Err(Error::config("oracle.class_count", "must be at least 1"));
        }
        if self.oracle.embedding_dim == 0 {
            return Err(Error::config("oracle.embedding_dim", "must be at least 1"));
        }
        positive("oracle.sigma_s", self.oracle.sigma_s)?;
        positive("oracle.sigma_d", self.oracle.sigma_d)?;
        self.noise.validate()?;
        let s = &self.scene;
        positive("scene.room_size", s.room_size[0].min(s.room_size[1]))?;
        if !(s.object_size[0] > 0.0 && s.object_size[0] <= s.object_size[1]) {
            return Err(Error::config("scene.object_size", "need 0 < min <= max"));
        }
        if !(s.object_height[0] > 0.0 && s.object_height[0] <= s.object_height[1]) {
            return Err(Error::config("scene.object_height", "need 0 < min <= max"));
        }
        if !(s.gap >= 0.0 && s.color_noise >= 0.0) {
            return Err(Error::config("scene", "gap and color_noise must be >= 0"));
        }
        if self.eval.cdf_points.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("eval.cdf_points", "must be finite"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => Location::Line(text[..span.start].matches('\n').count() + 1),
                None => Location::Unknown,
            };
            Error::Parse { path: path.to_path_buf(), location, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: Location::Unknown,
            message: format!("cannot read: {e}"),
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_constants() {
        let c = PipelineConfig::from_toml_str("", Path::new("empty.toml")).unwrap();
        assert_eq!(c.resolution, 0.02);
        assert_eq!(c.cluster.merge_threshold, 0.5);
        assert_eq!(c.cluster.ratio_min, 0.3);
        assert_eq!(c.cluster.ratio_max, 2.0);
        assert_eq!(c.losses.delta_v, 0.1);
        assert_eq!(c.losses.delta_d, 1.5);
        assert_eq!(c.oracle.embedding_dim, 32);
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = PipelineConfig::default();
        c.seed = 17;
        c.noise.feature = 0.3;
        c.cluster.semantic_gating = true;
        c.supervoxel.connectivity = Connectivity::Six;
        let text = c.to_toml_string();
        assert_eq!(PipelineConfig::from_toml_str(&text, Path::new("c.toml")).unwrap(), c);
    }

    #[test]
    fn errors_name_the_field() {
        let e = PipelineConfig::from_toml_str("[cluster]\nmerge_threshold = 3.0\n", Path::new("c.toml"));
        match e {
            Err(Error::Config { field, .. }) => assert_eq!(field, "cluster.merge_threshold"),
            other => panic!("{other:?}"),
        }
        let e = PipelineConfig::from_toml_str("seed = 1\n[cluster]\nbogus = 1\n", Path::new("c.toml"));
        assert!(matches!(e, Err(Error::Parse { location: Location::Line(3), .. })), "{e:?}");
        let e = PipelineConfig::from_toml_str("[supervoxel]\nconnectivity = 7\n", Path::new("c.toml"));
        assert!(matches!(e, Err(Error::Parse { .. })));
    }
}
