//! Multi-task training losses with analytic gradients.
//!
//! `L_joint = L_c + L_e + L_o`, with the embedding loss
//! `L_e = L_sp + (L_var + L_dist + L_reg) + L_cov`.
//!
//! Instance-level terms average over instances first and over member voxels
//! second. Gradients are taken with respect to every predicted quantity,
//! including the indirect paths through instance means (`u_c`, `e_c`, and the
//! averaged covariances). Norm terms use the subgradient 0 at their kink.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mean_position, InstanceGroundTruth};
use crate::prediction::Predictions;

pub const DELTA_V: f64 = 0.1;
pub const DELTA_D: f64 = 1.5;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Variance hinge margin.
    pub delta_v: f64,
    /// Distance hinge margin; codes are pushed `2 * delta_d` apart.
    pub delta_d: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` inside the BCE.
    pub prob_clamp: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            delta_v: DELTA_V,
            delta_d: DELTA_D,
            prob_clamp: PROB_CLAMP,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub spatial: f64,
    pub variance: f64,
    pub distance: f64,
    pub regularization: f64,
    pub covariance: f64,
    pub occupancy: f64,
}

impl LossBreakdown {
    /// `L_se = L_var + L_dist + L_reg`.
    pub fn feature(&self) -> f64 {
        self.variance + self.distance + self.regularization
    }

    /// `L_e = L_sp + L_se + L_cov`.
    pub fn embedding(&self) -> f64 {
        self.spatial + self.feature() + self.covariance
    }

    pub fn joint(&self) -> f64 {
        self.semantic + self.embedding() + self.occupancy
    }
}

/// Gradient of `L_joint` with respect to each prediction column block.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub logits: Array2<f64>,
    pub features: Array2<f64>,
    pub offsets: Array2<f64>,
    pub covariance: Array2<f64>,
    pub occupancy: Array1<f64>,
}

fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-instance mean of the rows of `values`.
fn instance_means(values: ArrayView2<f64>, instances: &[Vec<usize>]) -> Vec<Vec<f64>> {
    instances
        .iter()
        .map(|members| {
            let mut sum = vec![0.0; values.ncols()];
            for &i in members {
                for (s, v) in sum.iter_mut().zip(values.row(i)) {
                    *s += v;
                }
            }
            let n = members.len() as f64;
            sum.into_iter().map(|s| s / n).collect()
        })
        .collect()
}

/// Mean cross-entropy over voxels. Gradient is `(softmax - onehot) / N`.
pub fn semantic_loss(logits: ArrayView2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::Alignment { what: "semantic labels", expected: n, actual: labels.len() });
    }
    let mut grad = Array2::zeros((n, classes));
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        if label as usize >= classes {
            return Err(Error::Label { voxel: i, label, classes });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label as usize];
        for (k, v) in row.iter().enumerate() {
            let soft = (v - log_z).exp();
            let target = if k == label as usize { 1.0 } else { 0.0 };
            grad[[i, k]] = (soft - target) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Spatial regression to the instance center:
/// `(1/C) Σ_c (1/N_c) Σ_i ‖d_i + μ_i − mean_c(μ)‖`.
pub fn spatial_loss(
    offsets: ArrayView2<f64>,
    positions: &[Vector3<f64>],
    instances: &[Vec<usize>],
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(offsets.dim());
    let c_count = instances.len();
    if c_count == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for members in instances {
        let center = mean_position(positions, members);
        let weight = 1.0 / (c_count * members.len()) as f64;
        for &i in members {
            // Residual d_i − (center − μ_i); zero exactly when the offset
            // equals the target offset.
            let target = center - positions[i];
            let r = Vector3::new(
                offsets[[i, 0]] - target.x,
                offsets[[i, 1]] - target.y,
                offsets[[i, 2]] - target.z,
            );
            let norm = r.norm();
            total += weight * norm;
            if norm > 0.0 {
                for a in 0..3 {
                    grad[[i, a]] += weight * r[a] / norm;
                }
            }
        }
    }
    (total, grad)
}

/// Discriminative feature loss terms and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLoss {
    pub variance: f64,
    pub distance: f64,
    pub regularization: f64,
    pub grad_variance: Array2<f64>,
    pub grad_distance: Array2<f64>,
    pub grad_regularization: Array2<f64>,
}

pub fn feature_loss(features: ArrayView2<f64>, instances: &[Vec<usize>], params: &LossParams) -> FeatureLoss {
    let dim = features.ncols();
    let mut out = FeatureLoss {
        variance: 0.0,
        distance: 0.0,
        regularization: 0.0,
        grad_variance: Array2::zeros(features.dim()),
        grad_distance: Array2::zeros(features.dim()),
        grad_regularization: Array2::zeros(features.dim()),
    };
    let c_count = instances.len();
    if c_count == 0 {
        return out;
    }
    let means = instance_means(features, instances);
    let cf = c_count as f64;

    // Gradient of each term with respect to u_c, spread over members later.
    let mut du_dist = vec![vec![0.0; dim]; c_count];
    let mut du_reg = vec![vec![0.0; dim]; c_count];

    for (c, members) in instances.iter().enumerate() {
        let u = &means[c];
        let weight = 1.0 / (cf * members.len() as f64);
        let mut direct_sum = vec![0.0; dim];
        for &i in members {
            let diff: Vec<f64> = features.row(i).iter().zip(u).map(|(s, m)| s - m).collect();
            let dist = row_norm(&diff);
            let hinge = (dist - params.delta_v).max(0.0);
            out.variance += weight * hinge * hinge;
            if hinge > 0.0 {
                let scale = 2.0 * weight * hinge / dist;
                for k in 0..dim {
                    let g = scale * diff[k];
                    out.grad_variance[[i, k]] += g;
                    direct_sum[k] += g;
                }
            }
        }
        let n = members.len() as f64;
        for &i in members {
            for k in 0..dim {
                out.grad_variance[[i, k]] -= direct_sum[k] / n;
            }
        }

        let norm = row_norm(u);
        out.regularization += norm / cf;
        if norm > 0.0 {
            for k in 0..dim {
                du_reg[c][k] = u[k] / (cf * norm);
            }
        }
    }

    if c_count > 1 {
        let pair_weight = 1.0 / (cf * (cf - 1.0));
        for a in 0..c_count {
            for b in a + 1..c_count {
                let diff: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect();
                let dist = row_norm(&diff);
                let hinge = (2.0 * params.delta_d - dist).max(0.0);
                out.distance += pair_weight * hinge * hinge;
                if hinge > 0.0 && dist > 0.0 {
                    let scale = 2.0 * pair_weight * hinge / dist;
                    for k in 0..dim {
                        du_dist[a][k] -= scale * diff[k];
                        du_dist[b][k] += scale * diff[k];
                    }
                }
            }
        }
    }

    for (c, members) in instances.iter().enumerate() {
        let n = members.len() as f64;
        for &i in members {
            for k in 0..dim {
                out.grad_distance[[i, k]] += du_dist[c][k] / n;
                out.grad_regularization[[i, k]] += du_reg[c][k] / n;
            }
        }
    }
    out
}

/// Clustering kernel of one instance: mean feature `u_c`, predicted spatial
/// center `e_c`, and averaged covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceKernel {
    pub feature_center: Vec<f64>,
    pub spatial_center: Vector3<f64>,
    pub sigma_s: f64,
    pub sigma_d: f64,
}

pub fn instance_kernels(
    features: ArrayView2<f64>,
    offsets: ArrayView2<f64>,
    covariance: ArrayView2<f64>,
    positions: &[Vector3<f64>],
    instances: &[Vec<usize>],
) -> Result<Vec<InstanceKernel>> {
    let feature_means = instance_means(features, instances);
    let sigma_means = instance_means(covariance, instances);
    instances
        .iter()
        .enumerate()
        .map(|(c, members)| {
            let mut center = Vector3::zeros();
            for &i in members {
                center += positions[i] + Vector3::new(offsets[[i, 0]], offsets[[i, 1]], offsets[[i, 2]]);
            }
            center /= members.len() as f64;
            for &s in &sigma_means[c] {
                if !(s > 0.0) {
                    return Err(Error::Covariance { instance: c, value: s });
                }
            }
            Ok(InstanceKernel {
                feature_center: feature_means[c].clone(),
                spatial_center: center,
                sigma_s: sigma_means[c][0],
                sigma_d: sigma_means[c][1],
            })
        })
        .collect()
}

/// `p_i = exp(−(‖s_i − u_c‖/σ_s)² − (‖μ_i + d_i − e_c‖/σ_d)²)`.
pub fn membership_probability(
    feature: &[f64],
    offset: &Vector3<f64>,
    position: &Vector3<f64>,
    kernel: &InstanceKernel,
) -> f64 {
    membership_probability_grad(feature, offset, position, kernel).probability
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrad {
    pub probability: f64,
    pub feature: Vec<f64>,
    pub offset: Vector3<f64>,
    pub sigma_s: f64,
    pub sigma_d: f64,
}

/// `p_i` and its gradient with the kernel's centers held fixed.
pub fn membership_probability_grad(
    feature: &[f64],
    offset: &Vector3<f64>,
    position: &Vector3<f64>,
    kernel: &InstanceKernel,
) -> ProbabilityGrad {
    let diff: Vec<f64> = feature.iter().zip(&kernel.feature_center).map(|(s, u)| s - u).collect();
    let a: f64 = diff.iter().map(|x| x * x).sum();
    let v = position + offset - kernel.spatial_center;
    let q = v.norm_squared();
    let (ss, sd) = (kernel.sigma_s, kernel.sigma_d);
    let p = (-(a / (ss * ss)) - q / (sd * sd)).exp();
    ProbabilityGrad {
        probability: p,
        feature: diff.iter().map(|x| -2.0 * p * x / (ss * ss)).collect(),
        offset: v * (-2.0 * p / (sd * sd)),
        sigma_s: 2.0 * p * a / (ss * ss * ss),
        sigma_d: 2.0 * p * q / (sd * sd * sd),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceLoss {
    pub value: f64,
    pub grad_features: Array2<f64>,
    pub grad_offsets: Array2<f64>,
    pub grad_covariance: Array2<f64>,
}

/// Binary cross-entropy of `p_i` against instance membership, evaluated for
/// every instance over all `N` voxels.
pub fn covariance_loss(
    features: ArrayView2<f64>,
    offsets: ArrayView2<f64>,
    covariance: ArrayView2<f64>,
    positions: &[Vector3<f64>],
    instances: &[Vec<usize>],
    params: &LossParams,
) -> Result<CovarianceLoss> {
    let n = positions.len();
    let dim = features.ncols();
    let mut out = CovarianceLoss {
        value: 0.0,
        grad_features: Array2::zeros(features.dim()),
        grad_offsets: Array2::zeros(offsets.dim()),
        grad_covariance: Array2::zeros(covariance.dim()),
    };
    if instances.is_empty() || n == 0 {
        return Ok(out);
    }
    let kernels = instance_kernels(features, offsets, covariance, positions, instances)?;
    let mut owner = vec![usize::MAX; n];
    for (c, members) in instances.iter().enumerate() {
        for &i in members {
            owner[i] = c;
        }
    }
    let eps = params.prob_clamp;
    let weight = 1.0 / (instances.len() * n) as f64;
    let mut diff = vec![0.0; dim];

    for (c, members) in instances.iter().enumerate() {
        let k = &kernels[c];
        let (ss, sd) = (k.sigma_s, k.sigma_d);
        let mut feature_acc = vec![0.0; dim];
        let mut spatial_acc = Vector3::zeros();
        let mut sigma_s_acc = 0.0;
        let mut sigma_d_acc = 0.0;
        for i in 0..n {
            let mut a = 0.0;
            for (j, d) in diff.iter_mut().enumerate() {
                *d = features[[i, j]] - k.feature_center[j];
                a += *d * *d;
            }
            let v = positions[i]
                + Vector3::new(offsets[[i, 0]], offsets[[i, 1]], offsets[[i, 2]])
                - k.spatial_center;
            let q = v.norm_squared();
            let z = a / (ss * ss) + q / (sd * sd);
            let p = (-z).exp();
            let clamped = p.clamp(eps, 1.0 - eps);
            let member = owner[i] == c;
            out.value -= weight * if member { clamped.ln() } else { (1.0 - clamped).ln() };

            if p < eps || p > 1.0 - eps {
                continue;
            }
            // dBCE/dz: 1 for members, −p/(1−p) otherwise.
            let g = weight * if member { 1.0 } else { -p / (1.0 - p) };
            let fs = 2.0 * g / (ss * ss);
            for j in 0..dim {
                out.grad_features[[i, j]] += fs * diff[j];
                feature_acc[j] += g * diff[j];
            }
            let fd = 2.0 * g / (sd * sd);
            for ax in 0..3 {
                out.grad_offsets[[i, ax]] += fd * v[ax];
            }
            spatial_acc += v * g;
            sigma_s_acc -= 2.0 * g * a / (ss * ss * ss);
            sigma_d_acc -= 2.0 * g * q / (sd * sd * sd);
        }
        // Paths through u_c, e_c and the averaged covariances.
        let nc = members.len() as f64;
        for &i in members {
            for j in 0..dim {
                out.grad_features[[i, j]] -= 2.0 * feature_acc[j] / (ss * ss * nc);
            }
            for ax in 0..3 {
                out.grad_offsets[[i, ax]] -= 2.0 * spatial_acc[ax] / (sd * sd * nc);
            }
            out.grad_covariance[[i, 0]] += sigma_s_acc / nc;
            out.grad_covariance[[i, 1]] += sigma_d_acc / nc;
        }
    }
    Ok(out)
}

/// `(1/C) Σ_c (1/N_c) Σ_i |o_i − ln N_c|`.
pub fn occupancy_loss(occupancy: ArrayView1<f64>, instances: &[Vec<usize>]) -> (f64, Array1<f64>) {
    let mut grad = Array1::zeros(occupancy.len());
    if instances.is_empty() {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for members in instances {
        let target = (members.len() as f64).ln();
        let weight = 1.0 / (instances.len() * members.len()) as f64;
        for &i in members {
            let r = occupancy[i] - target;
            total += weight * r.abs();
            if r != 0.0 {
                grad[i] += weight * r.signum();
            }
        }
    }
    (total, grad)
}

/// Relative occupancy error `|N_c − exp(mean o)| / N_c` of one instance.
pub fn relative_error(occupancy: impl IntoIterator<Item = f64>, size: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for o in occupancy {
        sum += o;
        count += 1;
    }
    let n = size as f64;
    let mean = if count == 0 { 0.0 } else { sum / count as f64 };
    (n - mean.exp()).abs() / n
}

/// `R_c` for every ground-truth instance.
pub fn relative_errors(preds: &Predictions, gt: &[InstanceGroundTruth]) -> Vec<f64> {
    gt.iter()
        .map(|g| relative_error(g.voxels.iter().map(|&i| preds.occupancy[i]), g.size()))
        .collect()
}

/// Evaluates every term of `L_joint` on one scene. Every voxel must belong
/// to a ground-truth instance; semantic targets are the instance classes.
pub fn evaluate_losses(
    preds: &Predictions,
    positions: &[Vector3<f64>],
    gt: &[InstanceGroundTruth],
    params: &LossParams,
) -> Result<(LossBreakdown, LossGradients)> {
    let n = preds.len();
    if positions.len() != n {
        return Err(Error::Alignment { what: "voxel positions", expected: n, actual: positions.len() });
    }
    preds.validate()?;
    let mut labels = vec![u32::MAX; n];
    for g in gt {
        for &v in &g.voxels {
            labels[v] = g.class;
        }
    }
    if let Some(v) = labels.iter().position(|&l| l == u32::MAX) {
        return Err(Error::Coverage(v));
    }
    let instances: Vec<Vec<usize>> = gt.iter().map(|g| g.voxels.clone()).collect();

    let (semantic, grad_logits) = semantic_loss(preds.logits.view(), &labels)?;
    let (spatial, grad_spatial) = spatial_loss(preds.offsets.view(), positions, &instances);
    let feat = feature_loss(preds.features.view(), &instances, params);
    let cov = covariance_loss(
        preds.features.view(),
        preds.offsets.view(),
        preds.covariance.view(),
        positions,
        &instances,
        params,
    )?;
    let (occupancy, grad_occupancy) = occupancy_loss(preds.occupancy.view(), &instances);

    let breakdown = LossBreakdown {
        semantic,
        spatial,
        variance: feat.variance,
        distance: feat.distance,
        regularization: feat.regularization,
        covariance: cov.value,
        occupancy,
    };
    let grads = LossGradients {
        logits: grad_logits,
        features: feat.grad_variance + &feat.grad_distance + &feat.grad_regularization + &cov.grad_features,
        offsets: grad_spatial + &cov.grad_offsets,
        covariance: cov.grad_covariance,
        occupancy: grad_occupancy,
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Array2::zeros((4, 18));
        let (l, _) = semantic_loss(logits.view(), &[0, 3, 17, 5]).unwrap();
        assert!((l - 18f64.ln()).abs() < 1e-12);
        assert!((l - 2.8904).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_near_zero() {
        let logits = array![[1000.0, 0.0, 0.0], [0.0, 0.0, 1000.0]];
        let (l, _) = semantic_loss(logits.view(), &[0, 2]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Array2::zeros((1, 3));
        assert!(matches!(semantic_loss(logits.view(), &[3]), Err(Error::Label { .. })));
    }

    #[test]
    fn spatial_single_voxel() {
        let offsets = array![[0.3, 0.0, 0.0]];
        let (l, g) = spatial_loss(offsets.view(), &[Vector3::new(1.0, 2.0, 3.0)], &[vec![0]]);
        assert!((l - 0.3).abs() < 1e-15);
        assert_eq!(g[[0, 0]], 1.0);
    }

    #[test]
    fn distance_pair_normalization() {
        // Two single-voxel instances two units apart: [3 − 2]² / (2·1) = 0.5.
        let mut f = Array2::zeros((2, 4));
        f[[0, 0]] = 1.0;
        f[[1, 0]] = -1.0;
        let out = feature_loss(f.view(), &[vec![0], vec![1]], &LossParams::default());
        assert!((out.distance - 0.5).abs() < 1e-15);
        assert_eq!(out.variance, 0.0);
        assert!((out.regularization - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_instance_has_no_distance_term() {
        let f = array![[0.0, 0.0], [0.05, 0.0]];
        let out = feature_loss(f.view(), &[vec![0, 1]], &LossParams::default());
        assert_eq!(out.distance, 0.0);
        assert!(out.grad_distance.iter().all(|v| *v == 0.0));
    }

    fn kernel(sigma_s: f64) -> InstanceKernel {
        InstanceKernel {
            feature_center: vec![1.0, 0.0],
            spatial_center: Vector3::new(0.5, 0.5, 0.5),
            sigma_s,
            sigma_d: 0.3,
        }
    }

    #[test]
    fn probability_at_center_is_one() {
        let k = kernel(0.3);
        let p = membership_probability(&[1.0, 0.0], &Vector3::new(0.5, 0.5, 0.0), &Vector3::new(0.0, 0.0, 0.5), &k);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn probability_one_sigma_away() {
        let k = kernel(0.3);
        let p = membership_probability(&[1.3, 0.0], &Vector3::zeros(), &Vector3::new(0.5, 0.5, 0.5), &k);
        assert!((p - (-1f64).exp()).abs() < 1e-12);
        assert!((p - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn nonpositive_sigma_is_error() {
        let f = Array2::zeros((1, 2));
        let o = Array2::zeros((1, 3));
        let b = array![[0.0, 0.3]];
        let r = covariance_loss(f.view(), o.view(), b.view(), &[Vector3::zeros()], &[vec![0]], &LossParams::default());
        assert!(matches!(r, Err(Error::Covariance { .. })));
    }

    #[test]
    fn occupancy_analytic() {
        let n = 20;
        let o = Array1::zeros(n);
        let (l, g) = occupancy_loss(o.view(), &[(0..n).collect()]);
        assert!((l - 20f64.ln()).abs() < 1e-12);
        assert!((l - 2.9957).abs() < 1e-4);
        assert!((g[0] + 1.0 / 20.0).abs() < 1e-15);
        let o = Array1::from_elem(n, 20f64.ln());
        assert_eq!(occupancy_loss(o.view(), &[(0..n).collect()]).0, 0.0);
    }

    #[test]
    fn relative_error_values() {
        assert!(relative_error([100f64.ln(); 3], 100) < 1e-12);
        let r = relative_error([130f64.ln()], 100);
        assert!((r - 0.30).abs() < 1e-12);
    }
}
