use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;
use ndarray::Array2;
use proptest::prelude::*;

use voxinst::cluster::{aggregate, build_cluster_graph, finalize, merge_loop, ClusterParams, SuperVoxelStats};
use voxinst::eval::{average_precision, evaluate_instances, ScoredInstance};
use voxinst::geometry::{voxelize, voxelize_with_origin, InstanceGroundTruth, PointCloud, VoxelGrid};
use voxinst::losses::{feature_loss, instance_kernels, membership_probability, LossParams};
use voxinst::prediction::Predictions;
use voxinst::supervoxel::{build_adjacency, neighbor_pairs, segment, Connectivity, EdgeWeights, SuperVoxelPartition};

fn cloud_from(points: Vec<Vector3<f64>>) -> PointCloud {
    let colors = points.iter().map(|p| [p.x.fract().abs(), p.y.fract().abs(), 0.5]).collect();
    PointCloud { points, colors, ..Default::default() }
}

/// Points on a 1/64 lattice, so shifts by multiples of 0.25 are exact.
fn lattice_points() -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec((0i32..256, 0i32..256, 0i32..128), 1..300)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vector3::new(x as f64, y as f64, z as f64) / 64.0).collect())
}

fn grid_of(points: Vec<Vector3<f64>>, resolution: f64) -> VoxelGrid {
    voxelize(&cloud_from(points), resolution).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn voxelization_commutes_with_cell_aligned_shifts(points in lattice_points(), shift in (-8i32..8, -8i32..8, -8i32..8)) {
        let res = 0.25;
        let t = Vector3::new(shift.0 as f64, shift.1 as f64, shift.2 as f64) * res;
        let a = grid_of(points.clone(), res);
        let b = grid_of(points.iter().map(|p| p + t).collect(), res);
        prop_assert_eq!(a.coords(), b.coords());
        prop_assert_eq!(b.origin(), a.origin() + t);
        for (ca, cb) in a.cells().iter().zip(b.cells()) {
            prop_assert_eq!(ca.point_count, cb.point_count);
            prop_assert!((ca.centroid + t - cb.centroid).norm() < 1e-12);
        }
    }

    #[test]
    fn voxelizing_centroids_is_idempotent(points in lattice_points()) {
        let res = 0.25;
        let a = grid_of(points, res);
        let centroids = cloud_from(a.cells().iter().map(|c| c.centroid).collect());
        let b = voxelize_with_origin(&centroids, res, a.origin()).unwrap();
        prop_assert_eq!(a.coords(), b.coords());
        prop_assert!(b.cells().iter().all(|c| c.point_count == 1));
    }

    #[test]
    fn every_point_lands_in_one_cell(points in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..2000)) {
        let n = points.len();
        let grid = grid_of(points.into_iter().map(Vector3::from).collect(), 0.02);
        let total: u64 = grid.cells().iter().map(|c| c.point_count as u64).sum();
        prop_assert_eq!(total, n as u64);
    }
}

#[test]
fn ten_thousand_points_are_all_counted() {
    let points: Vec<Vector3<f64>> = (0..10_000)
        .map(|i| {
            let f = i as f64;
            Vector3::new((f * 0.618).fract(), (f * 0.414).fract(), (f * 0.732).fract())
        })
        .collect();
    let grid = grid_of(points, 0.02);
    assert_eq!(grid.cells().iter().map(|c| c.point_count as usize).sum::<usize>(), 10_000);
}

/// Random blob of voxels with smoothly varying colors.
fn blob() -> impl Strategy<Value = VoxelGrid> {
    prop::collection::btree_set((0i32..12, 0i32..12, 0i32..4), 30..250).prop_map(|cells| {
        let points = cells
            .iter()
            .map(|&(x, y, z)| Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * 0.02)
            .collect::<Vec<_>>();
        let colors = cells
            .iter()
            .map(|&(x, y, z)| [x as f64 / 12.0, y as f64 / 12.0, (x * y + z) as f64 % 5.0 / 5.0 + 1e-3 * x as f64])
            .collect();
        voxelize(&PointCloud { points, colors, ..Default::default() }, 0.02).unwrap()
    })
}

fn connected(grid: &VoxelGrid, members: &[usize]) -> bool {
    let set: BTreeSet<usize> = members.iter().copied().collect();
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for (a, b) in neighbor_pairs(grid, Connectivity::TwentySix) {
        if set.contains(&a) && set.contains(&b) {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
    }
    let mut seen = BTreeSet::from([members[0]]);
    let mut stack = vec![members[0]];
    while let Some(v) = stack.pop() {
        for &n in adj.get(&v).into_iter().flatten() {
            if seen.insert(n) {
                stack.push(n);
            }
        }
    }
    seen.len() == set.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn segmentation_ignores_edge_order(grid in blob(), seed in any::<u64>()) {
        let mut edges = build_adjacency(&grid, Connectivity::TwentySix, &EdgeWeights::default()).unwrap();
        let a = segment(&edges, grid.len(), 0.06, 5).unwrap();
        let mut rng = seed;
        for i in (1..edges.len()).rev() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            edges.swap(i, (rng >> 33) as usize % (i + 1));
        }
        for e in &mut edges {
            if rng & 1 == 0 {
                std::mem::swap(&mut e.a, &mut e.b);
            }
            rng = rng.rotate_left(1);
        }
        prop_assert_eq!(segment(&edges, grid.len(), 0.06, 5).unwrap(), a);
    }

    #[test]
    fn supervoxels_are_connected_and_large_enough(grid in blob()) {
        let edges = build_adjacency(&grid, Connectivity::TwentySix, &EdgeWeights::default()).unwrap();
        let min_size = 8;
        let p = segment(&edges, grid.len(), 0.06, min_size).unwrap();
        prop_assert_eq!(p.sizes.iter().sum::<usize>(), grid.len());
        for members in p.members() {
            prop_assert!(connected(&grid, &members));
            // Only a whole connected component may stay below min_size.
            if members.len() < min_size {
                let comp_edges = edges.iter().filter(|e| members.contains(&e.a) != members.contains(&e.b)).count();
                prop_assert_eq!(comp_edges, 0);
            }
        }
    }
}

fn feature_case() -> impl Strategy<Value = (Array2<f64>, Vec<Vec<usize>>)> {
    (2usize..5, 2usize..6).prop_flat_map(|(c, per)| {
        prop::collection::vec(-2.0f64..2.0, c * per * 3).prop_map(move |v| {
            let features = Array2::from_shape_vec((c * per, 3), v).unwrap();
            let instances = (0..c).map(|k| (k * per..(k + 1) * per).collect()).collect();
            (features, instances)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_loss_ignores_instance_and_voxel_order((features, instances) in feature_case()) {
        let params = LossParams::default();
        let a = feature_loss(features.view(), &instances, &params);
        let mut shuffled: Vec<Vec<usize>> = instances.iter().rev().map(|m| m.iter().rev().copied().collect()).collect();
        shuffled.rotate_left(1);
        let b = feature_loss(features.view(), &shuffled, &params);
        prop_assert!((a.variance - b.variance).abs() < 1e-12);
        prop_assert!((a.distance - b.distance).abs() < 1e-12);
        prop_assert!((a.regularization - b.regularization).abs() < 1e-12);
    }

    #[test]
    fn variance_and_distance_are_translation_invariant((features, instances) in feature_case(), t in prop::array::uniform3(-3.0f64..3.0)) {
        let params = LossParams::default();
        let shifted = Array2::from_shape_fn(features.dim(), |(i, k)| features[[i, k]] + t[k]);
        let a = feature_loss(features.view(), &instances, &params);
        let b = feature_loss(shifted.view(), &instances, &params);
        prop_assert!((a.variance - b.variance).abs() < 1e-9);
        prop_assert!((a.distance - b.distance).abs() < 1e-9);
    }

    #[test]
    fn membership_grows_with_bandwidth(f in prop::collection::vec(-1.0f64..1.0, 4), d in prop::array::uniform3(-1.0f64..1.0), scale in 1.01f64..4.0) {
        let features = Array2::from_shape_vec((2, 2), f).unwrap();
        let offsets = Array2::from_shape_fn((2, 3), |(i, a)| if i == 0 { d[a] } else { 0.0 });
        let cov = Array2::from_elem((2, 2), 0.5);
        let pos = vec![Vector3::zeros(), Vector3::new(0.3, 0.0, 0.0)];
        let k = instance_kernels(features.view(), offsets.view(), cov.view(), &pos, &[vec![0, 1]]).unwrap().remove(0);
        let mut wide = k.clone();
        wide.sigma_s *= scale;
        wide.sigma_d *= scale;
        let off = Vector3::new(d[0], d[1], d[2]);
        let row = features.row(0).to_vec();
        prop_assert!(membership_probability(&row, &off, &pos[0], &wide) >= membership_probability(&row, &off, &pos[0], &k));
    }
}

#[test]
fn regularization_is_not_translation_invariant() {
    let features = ndarray::array![[0.0, 0.0], [0.1, 0.0], [2.0, 0.0], [2.1, 0.0]];
    let instances = vec![vec![0, 1], vec![2, 3]];
    let params = LossParams::default();
    let a = feature_loss(features.view(), &instances, &params);
    let b = feature_loss((features + 5.0).view(), &instances, &params);
    assert!((a.regularization - b.regularization).abs() > 1.0);
}

#[test]
fn distance_term_example() {
    // Two centers at distance 2 with delta_d 1.5: hinge (3 - 2)^2 = 1 over the
    // pair, normalized by C(C-1) = 2.
    let features = ndarray::array![[0.0, 0.0], [2.0, 0.0]];
    let l = feature_loss(features.view(), &[vec![0], vec![1]], &LossParams::default());
    assert!((l.distance - 0.5).abs() < 1e-12);
}

/// Predictions on a line of voxels, with random per-voxel values.
fn stats_case() -> impl Strategy<Value = (VoxelGrid, Predictions, Vec<usize>)> {
    (4usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n * 8),
            prop::collection::vec(0usize..4, n),
        )
            .prop_map(move |(vals, labels)| {
                let points: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(i as f64 * 0.02 + 0.01, 0.01, 0.01)).collect();
                let grid = voxelize(&cloud_from(points), 0.02).unwrap();
                let mut p = Predictions::zeros(n, 3, 2);
                for i in 0..n {
                    let v = &vals[i * 8..i * 8 + 8];
                    p.logits[[i, 0]] = v[0];
                    p.logits[[i, 1]] = v[1];
                    p.features[[i, 0]] = v[2];
                    p.features[[i, 1]] = v[3];
                    p.offsets[[i, 0]] = v[4];
                    p.covariance[[i, 0]] = 1.0 + v[5];
                    p.covariance[[i, 1]] = 1.0 + v[6];
                    p.occupancy[i] = 2.0 + v[7];
                }
                (grid, p, labels)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_stats_match_aggregating_the_union((grid, preds, labels) in stats_case()) {
        let split = SuperVoxelPartition::from_labels(&labels);
        prop_assume!(split.len() >= 2);
        let parts = aggregate(&split, &preds, &grid).unwrap();
        let mut merged = parts[0].clone();
        for s in &parts[1..] {
            merged = SuperVoxelStats::merged(&merged, s);
        }
        let whole = aggregate(&SuperVoxelPartition::from_labels(&vec![0; grid.len()]), &preds, &grid).unwrap().remove(0);
        prop_assert_eq!(&merged.members, &whole.members);
        prop_assert_eq!(&merged.class_votes, &whole.class_votes);
        prop_assert!((merged.spatial - whole.spatial).norm() < 1e-12);
        for (a, b) in merged.feature.iter().zip(&whole.feature) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((merged.sigma_s - whole.sigma_s).abs() < 1e-12);
        prop_assert!((merged.sigma_d - whole.sigma_d).abs() < 1e-12);
        // Arithmetic mean of geometric means bounds the overall geometric mean.
        prop_assert!(merged.occupancy >= whole.occupancy * (1.0 - 1e-12));
    }

    #[test]
    fn clustering_conserves_voxels((grid, preds, labels) in stats_case(), t in 0.05f64..0.9) {
        let partition = SuperVoxelPartition::from_labels(&labels);
        let params = ClusterParams { merge_threshold: t, min_voxels: 1, ..Default::default() };
        let stats = aggregate(&partition, &preds, &grid).unwrap();
        let graph = merge_loop(build_cluster_graph(stats, &partition, &grid, params).unwrap());
        let total: usize = graph.vertices().map(|(_, s)| s.size()).sum();
        prop_assert_eq!(total, grid.len());
        let pred = finalize(&graph, grid.len());
        let assigned = pred.assignment.iter().filter(|a| a.is_some()).count();
        prop_assert_eq!(assigned, pred.instances.iter().map(|i| i.voxel_count).sum::<usize>());
        // Supervoxels are never split.
        for members in partition.members() {
            let ids: BTreeSet<_> = members.iter().map(|&v| pred.assignment[v]).collect();
            prop_assert_eq!(ids.len(), 1);
        }
    }
}

fn eval_case() -> impl Strategy<Value = (Vec<ScoredInstance>, Vec<InstanceGroundTruth>)> {
    let gt = prop::collection::vec((0u32..3, 2usize..10), 1..8);
    let preds = prop::collection::vec((0u32..3, 0usize..80, 1usize..12, 1u32..20), 0..12);
    (gt, preds).prop_map(|(gt, preds)| {
        let mut next = 0;
        let gt = gt
            .into_iter()
            .enumerate()
            .map(|(i, (class, size))| {
                let voxels = (next..next + size).collect();
                next += size;
                InstanceGroundTruth { id: i as u32, class, voxels, centroid: Vector3::zeros() }
            })
            .collect();
        let preds = preds
            .into_iter()
            .enumerate()
            .map(|(i, (class, start, len, c))| ScoredInstance {
                id: i as u32,
                class,
                confidence: c as f64 / 20.0,
                voxels: (start..start + len).collect(),
            })
            .collect();
        (preds, gt)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ap_does_not_grow_with_threshold((preds, gt) in eval_case(), class in 0u32..3) {
        let mut prev = f64::INFINITY;
        for t in [0.1, 0.25, 0.5, 0.75, 0.95] {
            let Some(ap) = average_precision(&preds, &gt, class, t).unwrap() else { return Ok(()) };
            prop_assert!(ap <= prev + 1e-12);
            prev = ap;
        }
    }

    #[test]
    fn a_lowest_ranked_false_positive_never_helps((mut preds, gt) in eval_case()) {
        let before = evaluate_instances(&preds, &gt).unwrap();
        let far = 10_000;
        for class in 0..3 {
            preds.push(ScoredInstance { id: 1000 + class, class, confidence: 0.0, voxels: vec![far + class as usize] });
        }
        let after = evaluate_instances(&preds, &gt).unwrap();
        prop_assert!(after.map <= before.map + 1e-12);
        prop_assert!(after.map50 <= before.map50 + 1e-12);
    }

    #[test]
    fn relabeling_classes_changes_nothing((preds, gt) in eval_case()) {
        let relabel = |c: u32| [7u32, 2, 5][c as usize];
        let before = evaluate_instances(&preds, &gt).unwrap();
        let preds2: Vec<_> = preds.iter().cloned().map(|mut p| { p.class = relabel(p.class); p }).collect();
        let gt2: Vec<_> = gt.iter().cloned().rev().map(|mut g| { g.class = relabel(g.class); g }).collect();
        let after = evaluate_instances(&preds2, &gt2).unwrap();
        prop_assert!((before.map - after.map).abs() < 1e-12);
        prop_assert!((before.map50 - after.map50).abs() < 1e-12);
        prop_assert!((before.mean_precision - after.mean_precision).abs() < 1e-12);
        let by_class: BTreeMap<u32, f64> = before.per_class.iter().map(|c| (relabel(c.class), c.ap)).collect();
        for c in &after.per_class {
            prop_assert!((by_class[&c.class] - c.ap).abs() < 1e-12);
        }
    }
}
