//! Anchors, target assignment, residual coding, detection losses and
//! decoding with rotated NMS.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::difftensor::{smooth_l1_value, ParamStore, Tape, Tensor, Var};
use crate::error::{HvprError, Result};
pub use crate::geometry::rotated_bev_iou;
use crate::geometry::{normalize_angle, Box3d};
use crate::nn::{Conv2d, Fwd};
use crate::pillars::GridSpec;

pub const RESIDUALS: usize = 7;
pub const HEADINGS: usize = 2;
/// Regression channels per anchor: residuals followed by two direction logits.
pub const REG_PER_ANCHOR: usize = RESIDUALS + 2;
/// Feature stride of the head relative to the pseudo image.
pub const HEAD_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub anchor_size: [f64; 3],
    pub anchor_z: f64,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    /// `(reg, dir, cls, mem)` loss weights.
    pub lambdas: [f64; 4],
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            anchor_size: [1.6, 3.9, 1.5],
            anchor_z: -1.0,
            pos_threshold: 0.6,
            neg_threshold: 0.45,
            nms_threshold: 0.1,
            score_threshold: 0.3,
            max_detections: 100,
            lambdas: [2.0, 0.2, 1.0, 1.0],
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Anchors at every head cell center, two headings per cell. Anchor
/// `cell * 2 + h` has heading `h * pi / 2`; cells are row-major.
pub fn generate_anchors(grid: &GridSpec, size: [f64; 3], z_center: f64) -> Vec<Box3d> {
    let (rows, cols) = (grid.head_rows(), grid.head_cols());
    let (vx, vy) = (
        grid.voxel[0] * HEAD_STRIDE as f64,
        grid.voxel[1] * HEAD_STRIDE as f64,
    );
    let mut out = Vec::with_capacity(rows * cols * HEADINGS);
    for r in 0..rows {
        for c in 0..cols {
            let x = grid.x_range[0] + (c as f64 + 0.5) * vx;
            let y = grid.y_range[0] + (r as f64 + 0.5) * vy;
            for h in 0..HEADINGS {
                out.push(Box3d::new(
                    x,
                    y,
                    z_center,
                    size[0],
                    size[1],
                    size[2],
                    h as f64 * FRAC_PI_2,
                ));
            }
        }
    }
    out
}

/// Horizontal anchor diagonal `sqrt(w^2 + l^2)`.
pub fn anchor_diagonal(a: &Box3d) -> f64 {
    a.size[0].hypot(a.size[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedTargets {
    pub labels: Vec<Label>,
    /// Matched ground-truth index, set for positives.
    pub matched: Vec<Option<usize>>,
    pub num_pos: usize,
    /// Direction bin per anchor (meaningful for positives): 1 iff the matched
    /// heading is non-negative.
    pub dir_targets: Vec<usize>,
}

impl AssignedTargets {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matched
            .iter()
            .enumerate()
            .filter_map(|(a, m)| m.map(|g| (a, g)))
    }
}

/// Threshold assignment on BEV IoU plus best-anchor forcing for every GT.
pub fn match_anchors(
    anchors: &[Box3d],
    gts: &[Box3d],
    pos_thr: f64,
    neg_thr: f64,
) -> AssignedTargets {
    let n = anchors.len();
    let mut best_iou = vec![0.0; n];
    let mut best_gt = vec![None; n];
    let mut gt_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let iou = rotated_bev_iou(anchor, gt);
            if iou > best_iou[a] {
                best_iou[a] = iou;
                best_gt[a] = Some(g);
            }
            if iou > gt_best[g].0 {
                gt_best[g] = (iou, Some(a));
            }
        }
    }
    let mut labels = vec![Label::Negative; n];
    let mut matched = vec![None; n];
    for a in 0..n {
        if best_iou[a] > pos_thr {
            labels[a] = Label::Positive;
            matched[a] = best_gt[a];
        } else if best_iou[a] >= neg_thr {
            labels[a] = Label::Ignored;
        }
    }
    for (g, &(_, a)) in gt_best.iter().enumerate() {
        if let Some(a) = a {
            labels[a] = Label::Positive;
            matched[a] = Some(g);
        }
    }
    let dir_targets = matched
        .iter()
        .map(|m| m.map_or(0, |g| usize::from(gts[g].heading >= 0.0)))
        .collect();
    let num_pos = labels.iter().filter(|&&l| l == Label::Positive).count();
    AssignedTargets {
        labels,
        matched,
        num_pos,
        dir_targets,
    }
}

/// Residuals `(dx, dy, dz, dw, dl, dh, dtheta)` of `gt` relative to `anchor`.
pub fn encode_residuals(gt: &Box3d, anchor: &Box3d) -> Result<[f64; RESIDUALS]> {
    if gt.size.iter().any(|&s| !(s > 0.0)) {
        return Err(HvprError::InvalidArgument(format!(
            "non-positive box size {:?}",
            gt.size
        )));
    }
    let d = anchor_diagonal(anchor);
    Ok([
        (gt.center[0] - anchor.center[0]) / d,
        (gt.center[1] - anchor.center[1]) / d,
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
        (gt.heading - anchor.heading).sin(),
    ])
}

/// Inverse of [`encode_residuals`]; `flip` adds pi to the decoded heading.
pub fn decode_residuals(res: &[f64; RESIDUALS], anchor: &Box3d, flip: bool) -> Box3d {
    let d = anchor_diagonal(anchor);
    let mut heading = anchor.heading + res[6].clamp(-1.0, 1.0).asin();
    if flip {
        heading += PI;
    }
    Box3d {
        center: [
            anchor.center[0] + res[0] * d,
            anchor.center[1] + res[1] * d,
            anchor.center[2] + res[2] * anchor.size[2],
        ],
        size: [
            anchor.size[0] * res[3].exp(),
            anchor.size[1] * res[4].exp(),
            anchor.size[2] * res[5].exp(),
        ],
        heading: normalize_angle(heading),
    }
}

/// Elementwise smooth-L1 summed over components.
pub fn smooth_l1(x: &[f64]) -> f64 {
    x.iter().map(|&v| smooth_l1_value(v)).sum()
}

fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// Reference sigmoid focal loss over plain values.
pub fn focal_loss(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let z = z.clamp(-30.0, 30.0);
            let p = 1.0 / (1.0 + (-z).exp());
            let (pt, at) = if t > 0.5 {
                (p, alpha)
            } else {
                (1.0 - p, 1.0 - alpha)
            };
            let log_pt = if t > 0.5 {
                log_sigmoid(z)
            } else {
                log_sigmoid(-z)
            };
            -at * (1.0 - pt).powf(gamma) * log_pt
        })
        .sum()
}

/// Two-bin softmax cross-entropy summed over rows.
pub fn direction_loss(logits: &[[f64; 2]], targets: &[usize]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(l, &t)| {
            let mx = l[0].max(l[1]);
            let lse = mx + ((l[0] - mx).exp() + (l[1] - mx).exp()).ln();
            lse - l[t]
        })
        .sum()
}

/// `(l_reg*reg + l_dir*dir + l_cls*cls + l_mem*mem) / max(N_pos, 1)`.
pub fn total_loss(
    reg: f64,
    dir: f64,
    cls: f64,
    mem: f64,
    num_pos: usize,
    lambdas: [f64; 4],
) -> f64 {
    (lambdas[0] * reg + lambdas[1] * dir + lambdas[2] * cls + lambdas[3] * mem)
        / num_pos.max(1) as f64
}

/// Same combination on the tape; `mem` may be absent.
pub fn total_loss_var(
    tape: &mut Tape,
    terms: [Option<Var>; 4],
    num_pos: usize,
    lambdas: [f64; 4],
) -> Var {
    let mut acc: Option<Var> = None;
    for (t, lam) in terms.into_iter().zip(lambdas) {
        let Some(t) = t else { continue };
        let s = tape.scale(t, lam);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    let acc = acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    tape.scale(acc, 1.0 / num_pos.max(1) as f64)
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy rotated-BEV NMS; returns kept indices in descending score order.
pub fn nms(boxes: &[Box3d], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept
            .iter()
            .all(|&k| rotated_bev_iou(&boxes[k], &boxes[i]) <= iou_thr)
        {
            kept.push(i);
        }
    }
    kept
}

/// Two 1x1 convolution branches over the fused map.
#[derive(Debug, Clone, Copy)]
pub struct DetectionHead {
    pub reg: Conv2d,
    pub cls: Conv2d,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, rng: &mut impl Rng) -> Result<Self> {
        let reg = Conv2d::new(
            store,
            &format!("{name}.reg"),
            ci,
            HEADINGS * REG_PER_ANCHOR,
            1,
            1,
            0,
            true,
            rng,
        )?;
        let cls = Conv2d::new(
            store,
            &format!("{name}.cls"),
            ci,
            HEADINGS,
            1,
            1,
            0,
            true,
            rng,
        )?;
        // start from a low foreground prior
        let prior: f64 = 0.01;
        let b = store.get_mut(cls.bias.expect("cls bias")).tensor.data_mut();
        b.iter_mut()
            .for_each(|v| *v = -((1.0 - prior) / prior).ln());
        Ok(DetectionHead { reg, cls })
    }

    /// `(reg [2*9, Hh, Wh], cls [2, Hh, Wh])`.
    pub fn forward(&self, f: &mut Fwd, fused: Var) -> (Var, Var) {
        (self.reg.forward(f, fused), self.cls.forward(f, fused))
    }
}

fn reg_index(anchor: usize, j: usize, cells: usize) -> usize {
    let (cell, h) = (anchor / HEADINGS, anchor % HEADINGS);
    (h * REG_PER_ANCHOR + j) * cells + cell
}

fn cls_index(anchor: usize, cells: usize) -> usize {
    let (cell, h) = (anchor / HEADINGS, anchor % HEADINGS);
    h * cells + cell
}

pub struct HeadLosses {
    pub reg: Var,
    pub dir: Var,
    pub cls: Var,
}

/// Unnormalized regression, direction and classification losses.
pub fn head_losses(
    tape: &mut Tape,
    reg_out: Var,
    cls_out: Var,
    anchors: &[Box3d],
    gts: &[Box3d],
    targets: &AssignedTargets,
    config: &HeadConfig,
) -> Result<HeadLosses> {
    let rs = tape.shape(reg_out).to_vec();
    let cells = rs[1] * rs[2];
    if rs[0] != HEADINGS * REG_PER_ANCHOR
        || cells * HEADINGS != anchors.len()
        || tape.shape(cls_out)[0] != HEADINGS
    {
        return Err(HvprError::shape(
            "head_losses",
            format!("head output {rs:?} for {} anchors", anchors.len()),
        ));
    }
    let pos: Vec<(usize, usize)> = targets.positives().collect();
    let p = pos.len();
    let mut reg_idx = Vec::with_capacity(RESIDUALS * p);
    let mut reg_tgt = Vec::with_capacity(RESIDUALS * p);
    for j in 0..RESIDUALS {
        for &(a, g) in &pos {
            reg_idx.push(reg_index(a, j, cells));
            reg_tgt.push(encode_residuals(&gts[g], &anchors[a])?[j]);
        }
    }
    let pred = tape.gather_flat(reg_out, &reg_idx, &[RESIDUALS, p]);
    let tgt = tape.constant(Tensor::new(&[RESIDUALS, p], reg_tgt)?);
    let diff = tape.sub(pred, tgt);
    let sl1 = tape.smooth_l1(diff);
    let reg = tape.sum(sl1);

    let mut dir_idx = Vec::with_capacity(2 * p);
    for &(a, _) in &pos {
        dir_idx.push(reg_index(a, RESIDUALS, cells));
        dir_idx.push(reg_index(a, RESIDUALS + 1, cells));
    }
    let dir_logits = tape.gather_flat(reg_out, &dir_idx, &[p, 2]);
    let dir_t: Vec<usize> = pos.iter().map(|&(a, _)| targets.dir_targets[a]).collect();
    let dir = tape.softmax_cross_entropy(dir_logits, &dir_t, &vec![1.0; p]);

    let cls_idx: Vec<usize> = (0..anchors.len()).map(|a| cls_index(a, cells)).collect();
    let logits = tape.gather_flat(cls_out, &cls_idx, &[anchors.len()]);
    let cls_t: Vec<f64> = targets
        .labels
        .iter()
        .map(|&l| if l == Label::Positive { 1.0 } else { 0.0 })
        .collect();
    let cls_w: Vec<f64> = targets
        .labels
        .iter()
        .map(|&l| if l == Label::Ignored { 0.0 } else { 1.0 })
        .collect();
    let cls = tape.sigmoid_focal(
        logits,
        &cls_t,
        &cls_w,
        config.focal_alpha,
        config.focal_gamma,
    );
    Ok(HeadLosses { reg, dir, cls })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Box3d,
    pub score: f64,
}

/// Decodes every anchor whose score exceeds `score_threshold`, then NMS.
pub fn predict(
    reg: &Tensor,
    cls: &Tensor,
    anchors: &[Box3d],
    config: &HeadConfig,
) -> Vec<ScoredBox> {
    let cells = cls.numel() / HEADINGS;
    let (rv, cv) = (reg.data(), cls.data());
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let score = 1.0 / (1.0 + (-cv[cls_index(a, cells)]).exp());
        if !(score > config.score_threshold) {
            continue;
        }
        let res: [f64; RESIDUALS] = std::array::from_fn(|j| rv[reg_index(a, j, cells)]);
        let dir_bin = usize::from(
            rv[reg_index(a, RESIDUALS + 1, cells)] > rv[reg_index(a, RESIDUALS, cells)],
        );
        let plain = decode_residuals(&res, anchor, false);
        let flip = usize::from(plain.heading >= 0.0) != dir_bin;
        let b = if flip {
            decode_residuals(&res, anchor, true)
        } else {
            plain
        };
        if b.is_finite() {
            boxes.push(b);
            scores.push(score);
        }
    }
    let mut kept = nms(&boxes, &scores, config.nms_threshold);
    kept.truncate(config.max_detections);
    kept.into_iter()
        .map(|i| ScoredBox {
            bbox: boxes[i],
            score: scores[i],
        })
        .collect()
}
