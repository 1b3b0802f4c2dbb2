//! Finite-difference verification of the analytic loss gradients.
//!
//! Random small scenes are drawn until every hinge, norm kink and
//! probability clamp is at least [`MARGIN`] away, so central differences
//! see a smooth function. Each gradient is compared as a whole with the
//! relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.

use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::losses::{
    covariance_loss, feature_loss, instance_kernels, membership_probability, membership_probability_grad,
    occupancy_loss, semantic_loss, spatial_loss, LossParams,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Minimum distance of a sampled case from any nonsmooth point.
pub const MARGIN: f64 = 1e-3;

/// One random scene for gradient checks.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub logits: Array2<f64>,
    pub labels: Vec<u32>,
    pub features: Array2<f64>,
    pub offsets: Array2<f64>,
    pub covariance: Array2<f64>,
    pub occupancy: Array1<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub instances: Vec<Vec<usize>>,
}

const CLASSES: usize = 5;
const DIM: usize = 4;

fn draw_case(rng: &mut ChaCha8Rng) -> GradCase {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let c_count = rng.random_range(2..=3);
    let mut instances = vec![Vec::new(); c_count];
    let n = rng.random_range(c_count * 2..=10);
    for i in 0..n {
        // Every instance gets at least two voxels.
        let c = if i < 2 * c_count { i / 2 } else { rng.random_range(0..c_count) };
        instances[c].push(i);
    }
    let centers: Vec<Vec<f64>> = (0..c_count).map(|_| (0..DIM).map(|_| 0.8 * normal.sample(rng)).collect()).collect();
    let mut owner = vec![0; n];
    for (c, m) in instances.iter().enumerate() {
        for &i in m {
            owner[i] = c;
        }
    }
    let features = Array2::from_shape_fn((n, DIM), |(i, k)| centers[owner[i]][k] + 0.3 * normal.sample(rng));
    let positions: Vec<Vector3<f64>> =
        (0..n).map(|_| Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)) * 0.3).collect();
    GradCase {
        logits: Array2::from_shape_fn((n, CLASSES), |_| 2.0 * normal.sample(rng)),
        labels: (0..n).map(|_| rng.random_range(0..CLASSES as u32)).collect(),
        features,
        offsets: Array2::from_shape_fn((n, 3), |_| 0.2 * normal.sample(rng)),
        covariance: Array2::from_shape_fn((n, 2), |_| rng.random_range(0.5..1.5)),
        occupancy: Array1::from_shape_fn(n, |_| rng.random_range(0.0..3.0)),
        positions,
        instances,
    }
}

fn row_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn means(values: &Array2<f64>, instances: &[Vec<usize>]) -> Vec<Vec<f64>> {
    instances
        .iter()
        .map(|m| {
            let mut s = vec![0.0; values.ncols()];
            for &i in m {
                for (k, v) in s.iter_mut().enumerate() {
                    *v += values[[i, k]];
                }
            }
            s.iter().map(|v| v / m.len() as f64).collect()
        })
        .collect()
}

/// True when no nonsmooth point of any loss lies within [`MARGIN`].
pub fn is_smooth(case: &GradCase, params: &LossParams) -> bool {
    let u = means(&case.features, &case.instances);
    for (c, m) in case.instances.iter().enumerate() {
        for &i in m {
            let d = row_dist(case.features.row(i).as_slice().expect("standard layout"), &u[c]);
            if (d - params.delta_v).abs() < MARGIN {
                return false;
            }
        }
        let target = (m.len() as f64).ln();
        if m.iter().any(|&i| (case.occupancy[i] - target).abs() < MARGIN) {
            return false;
        }
        let center: Vector3<f64> = m.iter().map(|&i| case.positions[i]).sum::<Vector3<f64>>() / m.len() as f64;
        for &i in m {
            let d = Vector3::new(case.offsets[[i, 0]], case.offsets[[i, 1]], case.offsets[[i, 2]]);
            if (d + case.positions[i] - center).norm() < MARGIN {
                return false;
            }
        }
    }
    for a in 0..u.len() {
        for b in a + 1..u.len() {
            let d = row_dist(&u[a], &u[b]);
            if (2.0 * params.delta_d - d).abs() < MARGIN || d < MARGIN {
                return false;
            }
        }
    }
    if u.iter().any(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt() < MARGIN) {
        return false;
    }
    let Ok(kernels) = instance_kernels(
        case.features.view(),
        case.offsets.view(),
        case.covariance.view(),
        &case.positions,
        &case.instances,
    ) else {
        return false;
    };
    let eps = params.prob_clamp;
    for k in &kernels {
        for i in 0..case.positions.len() {
            let d = Vector3::new(case.offsets[[i, 0]], case.offsets[[i, 1]], case.offsets[[i, 2]]);
            let p = membership_probability(case.features.row(i).as_slice().expect("standard layout"), &d, &case.positions[i], k);
            let near = |bound: f64| (p - bound).abs() < MARGIN * bound.max(1e-12);
            if near(eps) || near(1.0 - eps) {
                return false;
            }
        }
    }
    true
}

/// Draws a case that passes [`is_smooth`].
pub fn random_case(rng: &mut ChaCha8Rng, params: &LossParams) -> GradCase {
    loop {
        let case = draw_case(rng);
        if is_smooth(&case, params) {
            return case;
        }
    }
}

fn numeric_grad(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    Array2::from_shape_fn(x.dim(), |idx| {
        let orig = probe[idx];
        probe[idx] = orig + STEP;
        let up = f(&probe);
        probe[idx] = orig - STEP;
        let down = f(&probe);
        probe[idx] = orig;
        (up - down) / (2.0 * STEP)
    })
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn compare(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    relative_error(
        analytic.as_slice().expect("standard layout"),
        numeric.as_slice().expect("standard layout"),
    )
}

/// Relative gradient errors of one case, as `(term, argument, error)`.
pub fn check_case(case: &GradCase, params: &LossParams) -> Vec<(&'static str, &'static str, f64)> {
    let mut out = Vec::new();
    let GradCase { logits, labels, features, offsets, covariance, occupancy, positions, instances } = case;

    let (_, g) = semantic_loss(logits.view(), labels).expect("valid labels");
    let n = numeric_grad(logits, &|x| semantic_loss(x.view(), labels).expect("valid labels").0);
    out.push(("L_c", "logits", compare(&g, &n)));

    let (_, g) = spatial_loss(offsets.view(), positions, instances);
    let n = numeric_grad(offsets, &|x| spatial_loss(x.view(), positions, instances).0);
    out.push(("L_sp", "offsets", compare(&g, &n)));

    let fl = feature_loss(features.view(), instances, params);
    let n = numeric_grad(features, &|x| feature_loss(x.view(), instances, params).variance);
    out.push(("L_var", "features", compare(&fl.grad_variance, &n)));
    let n = numeric_grad(features, &|x| feature_loss(x.view(), instances, params).distance);
    out.push(("L_dist", "features", compare(&fl.grad_distance, &n)));
    let n = numeric_grad(features, &|x| feature_loss(x.view(), instances, params).regularization);
    out.push(("L_reg", "features", compare(&fl.grad_regularization, &n)));

    let cov = |f: &Array2<f64>, d: &Array2<f64>, b: &Array2<f64>| {
        covariance_loss(f.view(), d.view(), b.view(), positions, instances, params).expect("positive sigma")
    };
    let cl = cov(features, offsets, covariance);
    out.push(("L_cov", "features", compare(&cl.grad_features, &numeric_grad(features, &|x| cov(x, offsets, covariance).value))));
    out.push(("L_cov", "offsets", compare(&cl.grad_offsets, &numeric_grad(offsets, &|x| cov(features, x, covariance).value))));
    out.push((
        "L_cov",
        "covariance",
        compare(&cl.grad_covariance, &numeric_grad(covariance, &|x| cov(features, offsets, x).value)),
    ));

    let occ2 = occupancy.clone().insert_axis(ndarray::Axis(1));
    let (_, g) = occupancy_loss(occupancy.view(), instances);
    let n = numeric_grad(&occ2, &|x| occupancy_loss(x.column(0), instances).0);
    out.push(("L_o", "occupancy", relative_error(g.as_slice().expect("contiguous"), n.as_slice().expect("contiguous"))));

    // p_i of voxel 0 under every instance kernel, with the kernel fixed.
    let kernels = instance_kernels(features.view(), offsets.view(), covariance.view(), positions, instances)
        .expect("positive sigma");
    let mut p_errors = [0.0f64; 3];
    for kernel in &kernels {
        let s: Array2<f64> = features.row(0).to_owned().insert_axis(ndarray::Axis(0));
        let d = Array2::from_shape_fn((1, 3), |(_, a)| offsets[[0, a]]);
        let b = Array2::from_shape_fn((1, 2), |(_, a)| if a == 0 { kernel.sigma_s } else { kernel.sigma_d });
        let mu = positions[0];
        let as_vec = |d: &Array2<f64>| Vector3::new(d[[0, 0]], d[[0, 1]], d[[0, 2]]);
        let g = membership_probability_grad(s.row(0).as_slice().expect("row"), &as_vec(&d), &mu, kernel);
        let ns = numeric_grad(&s, &|x| membership_probability(x.row(0).as_slice().expect("row"), &as_vec(&d), &mu, kernel));
        let nd = numeric_grad(&d, &|x| membership_probability(s.row(0).as_slice().expect("row"), &as_vec(x), &mu, kernel));
        let nb = numeric_grad(&b, &|x| {
            let mut k = kernel.clone();
            k.sigma_s = x[[0, 0]];
            k.sigma_d = x[[0, 1]];
            membership_probability(s.row(0).as_slice().expect("row"), &as_vec(&d), &mu, &k)
        });
        p_errors[0] = p_errors[0].max(relative_error(&g.feature, ns.as_slice().expect("row")));
        p_errors[1] = p_errors[1].max(relative_error(g.offset.as_slice(), nd.as_slice().expect("row")));
        p_errors[2] = p_errors[2].max(relative_error(&[g.sigma_s, g.sigma_d], nb.as_slice().expect("row")));
    }
    out.push(("p_i", "features", p_errors[0]));
    out.push(("p_i", "offsets", p_errors[1]));
    out.push(("p_i", "covariance", p_errors[2]));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub term: String,
    pub argument: String,
    pub cases: usize,
    pub max_relative_error: f64,
    pub pass: bool,
}

/// Worst relative error per term and argument over `cases` random cases.
pub fn run_gradcheck(cases: usize, seed: u64, params: &LossParams) -> Vec<GradRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<GradRow> = Vec::new();
    for _ in 0..cases {
        let case = random_case(&mut rng, params);
        for (term, argument, err) in check_case(&case, params) {
            match rows.iter_mut().find(|r| r.term == term && r.argument == argument) {
                Some(r) => r.max_relative_error = r.max_relative_error.max(err),
                None => rows.push(GradRow {
                    term: term.to_string(),
                    argument: argument.to_string(),
                    cases: 0,
                    max_relative_error: err,
                    pass: false,
                }),
            }
        }
    }
    for r in &mut rows {
        r.cases = cases;
        r.pass = r.max_relative_error < TOLERANCE;
    }
    rows
}

pub fn format_table(rows: &[GradRow]) -> String {
    let mut out = format!("{:<6} {:<11} {:>6} {:>12}  result\n", "term", "argument", "cases", "max rel err");
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:<11} {:>6} {:>12.3e}  {}\n",
            r.term,
            r.argument,
            r.cases,
            r.max_relative_error,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn small_run_passes() {
        let rows = run_gradcheck(5, 3, &LossParams::default());
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
    }
}
