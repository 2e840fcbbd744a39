//! Matching predicted instances to ground truth and scoring them.
//!
//! Pixels are pooled over every evaluated frame and view before per-instance
//! metrics are formed; accuracy is binary per instance over the full image.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hungarian::assign_max;
use crate::inference::ClusterResult;
use crate::model::Scene;
use crate::raster::{labels_from_render, render, render_labels, Camera, SegmentationMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub gt: u32,
    pub pred: Option<u32>,
    pub iou: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub macc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub recall_dyn: f64,
    pub instances: Vec<InstanceMetrics>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mIoU,mAcc,Recall,Precision,F1,Recall_dyn";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.miou, self.macc, self.recall, self.precision, self.f1, self.recall_dyn
        )
    }
}

fn check_shapes(pred: &[SegmentationMap], gt: &[SegmentationMap]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted vs {} ground-truth masks", pred.len(), gt.len())));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.width != g.width || p.height != g.height {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                p.width, p.height, g.width, g.height
            )));
        }
    }
    Ok(())
}

/// Pooled co-occurrence counts `(gt, pred) -> pixels`, plus per-label totals.
struct Counts {
    joint: BTreeMap<(u32, u32), u64>,
    gt: BTreeMap<u32, u64>,
    pred: BTreeMap<u32, u64>,
    total: u64,
}

fn count(pred: &[SegmentationMap], gt: &[SegmentationMap]) -> Counts {
    let mut c = Counts {
        joint: BTreeMap::new(),
        gt: BTreeMap::new(),
        pred: BTreeMap::new(),
        total: 0,
    };
    for (p, g) in pred.iter().zip(gt) {
        for (&lp, &lg) in p.labels.iter().zip(&g.labels) {
            c.total += 1;
            if lg != 0 {
                *c.gt.entry(lg).or_default() += 1;
            }
            if lp != 0 {
                *c.pred.entry(lp).or_default() += 1;
            }
            if lg != 0 && lp != 0 {
                *c.joint.entry((lg, lp)).or_default() += 1;
            }
        }
    }
    c
}

/// One-to-one assignment of predicted labels to ground-truth labels
/// maximizing the summed sequence-level IoU. Keys are ground-truth ids.
pub fn match_labels(pred: &[SegmentationMap], gt: &[SegmentationMap]) -> Result<BTreeMap<u32, Option<u32>>> {
    check_shapes(pred, gt)?;
    let c = count(pred, gt);
    Ok(match_counts(&c))
}

fn match_counts(c: &Counts) -> BTreeMap<u32, Option<u32>> {
    let gt_ids: Vec<u32> = c.gt.keys().copied().collect();
    let pred_ids: Vec<u32> = c.pred.keys().copied().collect();
    let iou: Vec<Vec<f64>> = gt_ids
        .iter()
        .map(|g| {
            pred_ids
                .iter()
                .map(|p| {
                    let inter = c.joint.get(&(*g, *p)).copied().unwrap_or(0) as f64;
                    inter / (c.gt[g] as f64 + c.pred[p] as f64 - inter)
                })
                .collect()
        })
        .collect();
    let assign = assign_max(&iou);
    gt_ids
        .iter()
        .zip(assign)
        .enumerate()
        .map(|(r, (g, a))| (*g, a.filter(|&k| iou[r][k] > 0.0).map(|k| pred_ids[k])))
        .collect()
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn score(c: &Counts, gt: u32, pred: Option<u32>) -> InstanceMetrics {
    let n_gt = c.gt[&gt];
    let (tp, n_pred) = match pred {
        Some(p) => (c.joint.get(&(gt, p)).copied().unwrap_or(0), c.pred.get(&p).copied().unwrap_or(0)),
        None => (0, 0),
    };
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    let recall = ratio(tp, n_gt);
    let precision = ratio(tp, n_pred);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    InstanceMetrics {
        gt,
        pred,
        iou: ratio(tp, tp + fp + fn_),
        accuracy: ratio(c.total - fp - fn_, c.total),
        recall,
        precision,
        f1,
    }
}

/// Matches, then scores every ground-truth instance; `Recall_dyn` averages
/// recall over `dynamic_ids` that occur in the ground truth.
pub fn compute_metrics(pred: &[SegmentationMap], gt: &[SegmentationMap], dynamic_ids: &[u32]) -> Result<MetricReport> {
    check_shapes(pred, gt)?;
    let c = count(pred, gt);
    if c.gt.is_empty() {
        return Err(Error::InvalidConfig("ground truth contains no instances".into()));
    }
    let mapping = match_counts(&c);
    let instances: Vec<InstanceMetrics> = mapping.iter().map(|(g, p)| score(&c, *g, *p)).collect();
    let mean = |f: &dyn Fn(&InstanceMetrics) -> f64| instances.iter().map(f).sum::<f64>() / instances.len() as f64;
    let dyn_recalls: Vec<f64> = instances
        .iter()
        .filter(|m| dynamic_ids.contains(&m.gt))
        .map(|m| m.recall)
        .collect();
    Ok(MetricReport {
        miou: mean(&|m| m.iou),
        macc: mean(&|m| m.accuracy),
        recall: mean(&|m| m.recall),
        precision: mean(&|m| m.precision),
        f1: mean(&|m| m.f1),
        recall_dyn: if dyn_recalls.is_empty() {
            0.0
        } else {
            dyn_recalls.iter().sum::<f64>() / dyn_recalls.len() as f64
        },
        instances,
    })
}

/// Predicted masks for every `(view, frame)`, indexed `view * T + frame`.
pub fn render_predictions(
    scene: &Scene,
    result: &ClusterResult,
    cams: &[Camera],
    times: &[f64],
    tau_fg: f64,
) -> Result<Vec<SegmentationMap>> {
    let labels = result.render_labels();
    let keys: Vec<(usize, usize)> = (0..cams.len())
        .flat_map(|v| (0..times.len()).map(move |f| (v, f)))
        .collect();
    keys.par_iter()
        .map(|&(v, f)| render_labels(scene, &labels, &cams[v], times[f], tau_fg))
        .collect()
}

/// Temporal variance of instance features: for each dynamic instance and
/// view, the per-frame mean of unit-normalized rendered features over the
/// instance's ground-truth mask, its variance over frames, averaged over all
/// (instance, view) pairs seen in at least two frames.
pub fn temporal_feature_variance(
    scene: &Scene,
    cams: &[Camera],
    times: &[f64],
    gt: &[SegmentationMap],
    dynamic_ids: &[u32],
) -> Result<f64> {
    let t_count = times.len();
    if gt.len() != cams.len() * t_count {
        return Err(Error::Shape(format!("{} masks for {}x{} frames", gt.len(), cams.len(), t_count)));
    }
    let d = scene.feature_dim;
    // means[v][id] = per-frame mean feature
    let per_view: Vec<BTreeMap<u32, Vec<Vec<f64>>>> = (0..cams.len())
        .into_par_iter()
        .map(|v| -> Result<_> {
            let mut acc: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
            for (f, &t) in times.iter().enumerate() {
                let out = render(scene, &cams[v], t)?;
                for (id, pixels) in gt[v * t_count + f].pixels_by_label() {
                    if !dynamic_ids.contains(&id) {
                        continue;
                    }
                    let mut m = vec![0.0; d];
                    for &p in &pixels {
                        let x = out.features.pixel(p);
                        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for (o, a) in m.iter_mut().zip(x) {
                                *o += a / norm;
                            }
                        }
                    }
                    m.iter_mut().for_each(|o| *o /= pixels.len() as f64);
                    acc.entry(id).or_default().push(m);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for acc in &per_view {
        for means in acc.values().filter(|m| m.len() >= 2) {
            let n = means.len() as f64;
            let mut bar = vec![0.0; d];
            for m in means {
                for (b, x) in bar.iter_mut().zip(m) {
                    *b += x / n;
                }
            }
            let var = means
                .iter()
                .map(|m| m.iter().zip(&bar).map(|(x, b)| (x - b) * (x - b)).sum::<f64>())
                .sum::<f64>()
                / n;
            total += var;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Labels of the current render, for callers that already hold one.
pub fn predicted_mask(out: &crate::raster::RenderOutput, result: &ClusterResult, tau_fg: f64) -> SegmentationMap {
    labels_from_render(out, &result.render_labels(), tau_fg)
}
