//! Detection matching and 40-point interpolated average precision.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{rotated_3d_iou, rotated_bev_iou, Box3d};

pub const RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: String,
    pub bbox: Box3d,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    Bev,
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box3d, b: &Box3d) -> f64 {
        match self {
            IouKind::Bev => rotated_bev_iou(a, b),
            IouKind::ThreeD => rotated_3d_iou(a, b),
        }
    }
}

/// Orders detections by descending score; equal scores keep input order.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy matching of score-sorted detections: each takes the unmatched GT
/// of its scene with the highest IoU and is a true positive iff that IoU
/// reaches `iou_thr`.
pub fn match_detections(
    dets: &[Detection],
    gts: &HashMap<String, Vec<Box3d>>,
    iou_thr: f64,
    kind: IouKind,
) -> Vec<bool> {
    let mut used: HashMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    dets.iter()
        .map(|d| {
            let (Some(scene_gts), Some(taken)) =
                (gts.get(&d.scene), used.get_mut(d.scene.as_str()))
            else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in scene_gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = kind.iou(&d.bbox, gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= iou_thr => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Interpolated precision at recall `r/40`, `r = 1..=40`.
pub fn precision_at_recall_points(
    flags: &[bool],
    scores: &[f64],
    num_gt: usize,
) -> [f64; RECALL_POINTS] {
    let mut out = [0.0; RECALL_POINTS];
    if num_gt == 0 || flags.is_empty() {
        return out;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        tp += usize::from(flags[i]);
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // running max of precision from the tail
    let mut best = 0.0f64;
    let mut envelope = vec![0.0; curve.len()];
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        envelope[k] = best;
    }
    for (r, slot) in out.iter_mut().enumerate() {
        let target = (r + 1) as f64 / RECALL_POINTS as f64;
        if let Some(k) = curve.iter().position(|&(rec, _)| rec >= target - 1e-12) {
            *slot = envelope[k];
        }
    }
    out
}

/// Mean of the 40 interpolated precision samples; 0 when there is nothing to find.
pub fn average_precision_40(flags: &[bool], scores: &[f64], num_gt: usize) -> f64 {
    precision_at_recall_points(flags, scores, num_gt)
        .iter()
        .sum::<f64>()
        / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class: String,
    pub iou_kind: IouKind,
    pub iou_threshold: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
    pub ap: f64,
    pub precision: Vec<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.iou_kind {
            IouKind::Bev => "bev",
            IouKind::ThreeD => "3d",
        };
        let _ = writeln!(
            s,
            "class={} iou={kind}@{} gt={} det={} tp={} ap40={:.4}",
            self.class,
            self.iou_threshold,
            self.num_gt,
            self.num_detections,
            self.true_positives,
            self.ap
        );
        for (r, p) in self.precision.iter().enumerate() {
            let _ = writeln!(
                s,
                "pr recall={:.3} precision={:.4}",
                (r + 1) as f64 / RECALL_POINTS as f64,
                p
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores a detection set against per-scene ground truth.
pub fn evaluate(
    dets: &[Detection],
    gts: &HashMap<String, Vec<Box3d>>,
    iou_thr: f64,
    kind: IouKind,
    class: &str,
) -> EvalReport {
    let mut sorted = dets.to_vec();
    sort_by_score(&mut sorted);
    let flags = match_detections(&sorted, gts, iou_thr, kind);
    let scores: Vec<f64> = sorted.iter().map(|d| d.score).collect();
    let num_gt = gts.values().map(Vec::len).sum();
    let precision = precision_at_recall_points(&flags, &scores, num_gt);
    EvalReport {
        class: class.to_string(),
        iou_kind: kind,
        iou_threshold: iou_thr,
        num_gt,
        num_detections: sorted.len(),
        true_positives: flags.iter().filter(|&&f| f).count(),
        ap: precision.iter().sum::<f64>() / RECALL_POINTS as f64,
        precision: precision.to_vec(),
    }
}
