//! Instance segmentation metrics.
//!
//! Predictions are matched to ground truth greedily in order of decreasing
//! confidence: each prediction takes the unmatched ground-truth instance of
//! its class with the highest IoU, provided the IoU reaches the threshold.
//! Average precision is the area under the all-point interpolated
//! precision-recall curve.

use serde::{Deserialize, Serialize};

use crate::cluster::InstancePrediction;
use crate::error::{Error, Result};
use crate::geometry::InstanceGroundTruth;

pub const IOU_50: f64 = 0.5;
pub const IOU_25: f64 = 0.25;

/// `0.50, 0.55, ..., 0.95`.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Abscissae at which the occupancy error CDF is sampled by default.
pub fn default_cdf_points() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// A predicted instance ready for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub id: u32,
    pub class: u32,
    pub confidence: f64,
    /// Sorted voxel indices.
    pub voxels: Vec<usize>,
}

pub fn scored_instances(pred: &InstancePrediction) -> Vec<ScoredInstance> {
    pred.instances
        .iter()
        .zip(pred.members())
        .map(|(info, voxels)| ScoredInstance {
            id: info.id,
            class: info.class,
            confidence: info.confidence,
            voxels,
        })
        .collect()
}

/// `|A ∩ B| / |A ∪ B|` on sorted voxel lists.
pub fn instance_iou(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::EmptyInstance);
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

/// Predictions and ground truth of one class with their IoU matrix.
struct ClassTable {
    /// Prediction ranks: confidence descending, then id ascending.
    ranked: Vec<usize>,
    gt_count: usize,
    /// `iou[p][g]` for ranked prediction `p`.
    iou: Vec<Vec<f64>>,
}

impl ClassTable {
    fn new(preds: &[ScoredInstance], gt: &[InstanceGroundTruth], class: u32) -> Result<Self> {
        let mut ranked: Vec<usize> = (0..preds.len()).filter(|&p| preds[p].class == class).collect();
        ranked.sort_by(|&a, &b| {
            preds[b]
                .confidence
                .total_cmp(&preds[a].confidence)
                .then(preds[a].id.cmp(&preds[b].id))
        });
        let gts: Vec<&InstanceGroundTruth> = gt.iter().filter(|g| g.class == class).collect();
        let iou = ranked
            .iter()
            .map(|&p| gts.iter().map(|g| instance_iou(&preds[p].voxels, &g.voxels)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(ClassTable { ranked, gt_count: gts.len(), iou })
    }

    /// True-positive flag per ranked prediction.
    fn matches(&self, threshold: f64) -> Vec<bool> {
        let mut taken = vec![false; self.gt_count];
        self.iou
            .iter()
            .map(|row| {
                let mut best: Option<usize> = None;
                for (g, &v) in row.iter().enumerate() {
                    if !taken[g] && v >= threshold && best.is_none_or(|b| v > row[b]) {
                        best = Some(g);
                    }
                }
                if let Some(g) = best {
                    taken[g] = true;
                }
                best.is_some()
            })
            .collect()
    }
}

/// All-point interpolated AP from ranked true-positive flags.
pub fn ap_from_matches(tp: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / gt_count as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP of one class, `None` when the class has no ground truth.
pub fn average_precision(
    preds: &[ScoredInstance],
    gt: &[InstanceGroundTruth],
    class: u32,
    iou_threshold: f64,
) -> Result<Option<f64>> {
    let table = ClassTable::new(preds, gt, class)?;
    if table.gt_count == 0 {
        return Ok(None);
    }
    Ok(Some(ap_from_matches(&table.matches(iou_threshold), table.gt_count)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u32,
    pub gt_count: usize,
    pub pred_count: usize,
    /// Mean AP over the 0.50:0.05:0.95 thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub precision50: f64,
    pub recall50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyCdf {
    pub points: Vec<f64>,
    /// `P(R_c <= x)` per point.
    pub fraction: Vec<f64>,
    /// `P(R_c <= 0.3)`.
    pub at_0_3: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub map50: f64,
    pub map25: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub per_class: Vec<ClassReport>,
    pub occupancy_cdf: Option<OccupancyCdf>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("class   gt  pred      AP    AP50    AP25  Prec50   Rec50\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{:>5} {:>4} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
                c.class, c.gt_count, c.pred_count, c.ap, c.ap50, c.ap25, c.precision50, c.recall50
            ));
        }
        out.push_str(&format!(
            "mean            {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
            self.map, self.map50, self.map25, self.mean_precision, self.mean_recall
        ));
        if let Some(cdf) = &self.occupancy_cdf {
            out.push_str(&format!(
                "occupancy: {:.4} of {} instances within relative error 0.3\n",
                cdf.at_0_3, cdf.instances
            ));
        }
        out
    }
}

/// Scores `preds` against `gt`. Classes without ground truth are left out of
/// every mean.
pub fn evaluate_instances(preds: &[ScoredInstance], gt: &[InstanceGroundTruth]) -> Result<EvalReport> {
    let mut classes: Vec<u32> = gt.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let thresholds = map_thresholds();
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let table = ClassTable::new(preds, gt, class)?;
        let ap_at = |t: f64| ap_from_matches(&table.matches(t), table.gt_count);
        let ap = thresholds.iter().map(|&t| ap_at(t)).sum::<f64>() / thresholds.len() as f64;
        let tp50 = table.matches(IOU_50).iter().filter(|&&t| t).count();
        let pred_count = table.ranked.len();
        per_class.push(ClassReport {
            class,
            gt_count: table.gt_count,
            pred_count,
            ap,
            ap50: ap_at(IOU_50),
            ap25: ap_at(IOU_25),
            precision50: if pred_count == 0 { 0.0 } else { tp50 as f64 / pred_count as f64 },
            recall50: tp50 as f64 / table.gt_count as f64,
        });
    }
    let mean = |f: fn(&ClassReport) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        map: mean(|c| c.ap),
        map50: mean(|c| c.ap50),
        map25: mean(|c| c.ap25),
        mean_precision: mean(|c| c.precision50),
        mean_recall: mean(|c| c.recall50),
        per_class,
        occupancy_cdf: None,
    })
}

/// Scores a clustering result on a grid of `n_voxels` voxels.
pub fn evaluate(pred: &InstancePrediction, gt: &[InstanceGroundTruth], n_voxels: usize) -> Result<EvalReport> {
    if pred.assignment.len() != n_voxels {
        return Err(Error::Alignment {
            what: "predicted voxel labels",
            expected: n_voxels,
            actual: pred.assignment.len(),
        });
    }
    if let Some(v) = gt.iter().flat_map(|g| g.voxels.iter()).find(|&&v| v >= n_voxels) {
        return Err(Error::Alignment { what: "ground-truth voxel index", expected: n_voxels, actual: *v });
    }
    evaluate_instances(&scored_instances(pred), gt)
}

/// Empirical CDF `P(R <= x)` of relative occupancy errors.
pub fn occupancy_cdf(values: &[f64], points: &[f64]) -> Result<OccupancyCdf> {
    if values.is_empty() {
        return Err(Error::EmptyInput("relative occupancy errors"));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidValue(format!("relative error must be >= 0, got {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let at = |x: f64| sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64;
    Ok(OccupancyCdf {
        points: points.to_vec(),
        fraction: points.iter().map(|&x| at(x)).collect(),
        at_0_3: at(0.3),
        instances: values.len(),
    })
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub voxelize: f64,
    /// Oracle predictions or prediction file loading.
    pub network: f64,
    pub supervoxel: f64,
    pub clustering: f64,
    pub eval: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.voxelize + self.network + self.supervoxel + self.clustering + self.eval
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn gt(id: u32, class: u32, voxels: Vec<usize>) -> InstanceGroundTruth {
        InstanceGroundTruth { id, class, voxels, centroid: Vector3::zeros() }
    }

    fn pred(id: u32, class: u32, confidence: f64, voxels: Vec<usize>) -> ScoredInstance {
        ScoredInstance { id, class, confidence, voxels }
    }

    #[test]
    fn iou_cases() {
        let a: Vec<usize> = (0..10).collect();
        let b: Vec<usize> = (5..15).collect();
        assert_eq!(instance_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(instance_iou(&a, &(20..30).collect::<Vec<_>>()).unwrap(), 0.0);
        assert!((instance_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(instance_iou(&[], &[]), Err(Error::EmptyInstance)));
        assert_eq!(instance_iou(&[], &a).unwrap(), 0.0);
    }

    #[test]
    fn single_perfect_and_missed() {
        let g = vec![gt(0, 1, (0..10).collect())];
        let p = vec![pred(0, 1, 0.9, (0..10).collect())];
        assert_eq!(average_precision(&p, &g, 1, 0.5).unwrap(), Some(1.0));
        let low = vec![pred(0, 1, 0.9, (0..4).collect())];
        assert_eq!(average_precision(&low, &g, 1, 0.5).unwrap(), Some(0.0));
        assert_eq!(average_precision(&p, &g, 2, 0.5).unwrap(), None);
    }

    #[test]
    fn all_point_interpolation() {
        // TP, FP, TP against two ground-truth instances.
        let ap = ap_from_matches(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(ap_from_matches(&[], 3), 0.0);
    }

    #[test]
    fn perfect_report_and_empty_report() {
        let g = vec![gt(0, 1, (0..10).collect()), gt(1, 2, (10..30).collect())];
        let p: Vec<ScoredInstance> = g.iter().map(|g| pred(g.id, g.class, 1.0, g.voxels.clone())).collect();
        let r = evaluate_instances(&p, &g).unwrap();
        assert_eq!((r.map, r.map50, r.map25, r.mean_precision, r.mean_recall), (1.0, 1.0, 1.0, 1.0, 1.0));
        let r = evaluate_instances(&[], &g).unwrap();
        assert_eq!((r.map, r.map50, r.map25, r.mean_precision, r.mean_recall), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(matches!(evaluate_instances(&p, &[]), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn cdf_cases() {
        let c = occupancy_cdf(&[0.0; 4], &[0.3]).unwrap();
        assert_eq!(c.at_0_3, 1.0);
        let c = occupancy_cdf(&[0.1, 0.5], &default_cdf_points()).unwrap();
        assert_eq!(c.at_0_3, 0.5);
        assert_eq!(*c.fraction.last().unwrap(), 1.0);
        assert!(c.fraction.windows(2).all(|w| w[0] <= w[1]));
        assert!(matches!(occupancy_cdf(&[], &[0.3]), Err(Error::EmptyInput(_))));
        assert!(matches!(occupancy_cdf(&[-0.1], &[0.3]), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn thresholds() {
        let t = map_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }
}
