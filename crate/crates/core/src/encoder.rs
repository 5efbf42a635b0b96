//! Voxel stream (tiny PointNet over pillars), point stream (two set
//! abstraction and two feature propagation layers), and the top-K
//! correlation fusion between them.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::difftensor::ParamStore;
use crate::difftensor::{Tape, Tensor, Var};
use crate::error::{HvprError, Result};
use crate::nn::{BatchNorm, Fwd, Linear};
use crate::pillars::{scatter_to_pseudo_image, GridSpec, POINT_FEATURES};

/// Linear + batch norm + ReLU applied to every column, followed by a max
/// over column groups.
#[derive(Debug, Clone, Copy)]
pub struct TinyPointNet {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl TinyPointNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TinyPointNet {
            linear: Linear::new(store, &format!("{name}.linear"), ci, co, false, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), co)?,
        })
    }

    /// Per-column embedding `[Ci, P]` -> `[Co, P]`.
    pub fn embed(&self, f: &mut Fwd, x: Var) -> Var {
        let y = self.linear.forward(f, x);
        let y = self.bn.forward(f, y);
        f.tape.relu(y)
    }

    /// Embeds `x: [Ci, P]` and max-pools the columns of each group given by
    /// CSR `offsets` over `0..P`.
    pub fn forward(&self, f: &mut Fwd, x: Var, offsets: &[usize]) -> Var {
        let e = self.embed(f, x);
        let members: Vec<usize> = (0..*offsets.last().unwrap_or(&0)).collect();
        f.tape.group_max(e, offsets, &members)
    }
}

/// Per-pillar voxel features `[C, N]` from packed point features `[9, P]`.
pub fn tiny_pointnet_forward(
    f: &mut Fwd,
    net: &TinyPointNet,
    packed: Var,
    offsets: &[usize],
) -> Result<Var> {
    let shape = f.tape.shape(packed);
    if shape.len() != 2 || shape[0] != POINT_FEATURES || shape[1] != *offsets.last().unwrap_or(&0) {
        return Err(HvprError::shape(
            "tiny_pointnet_forward",
            format!("features {shape:?}"),
        ));
    }
    Ok(net.forward(f, packed, offsets))
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest point sampling from `start`; ties go to the lowest index.
pub fn farthest_point_sampling(
    positions: &[[f64; 3]],
    count: usize,
    start: usize,
) -> Result<Vec<usize>> {
    let m = positions.len();
    if count > m {
        return Err(HvprError::InvalidArgument(format!(
            "farthest_point_sampling: count {count} exceeds {m} points"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if start >= m {
        return Err(HvprError::InvalidArgument(format!(
            "start index {start} out of range"
        )));
    }
    let mut chosen = Vec::with_capacity(count);
    let mut mind = vec![f64::INFINITY; m];
    let mut cur = start;
    for _ in 0..count {
        chosen.push(cur);
        let pc = positions[cur];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in positions.iter().enumerate() {
            let d = dist2(*p, pc);
            if d < mind[i] {
                mind[i] = d;
            }
            if mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(chosen)
}

/// Up to `max_samples` point indices within `radius` of each center, in
/// index order; a center with no neighbor gets its nearest point.
pub fn ball_query(
    centers: &[[f64; 3]],
    positions: &[[f64; 3]],
    radius: f64,
    max_samples: usize,
) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    centers
        .iter()
        .map(|&c| {
            let mut group: Vec<usize> = positions
                .iter()
                .enumerate()
                .filter(|(_, p)| dist2(**p, c) <= r2)
                .map(|(i, _)| i)
                .take(max_samples)
                .collect();
            if group.is_empty() && !positions.is_empty() {
                let nearest = (0..positions.len())
                    .min_by(|&a, &b| dist2(positions[a], c).total_cmp(&dist2(positions[b], c)))
                    .unwrap();
                group.push(nearest);
            }
            group
        })
        .collect()
}

const INTERP_EPS: f64 = 1e-8;

/// Three-nearest inverse-distance weights: `(indices, weights)` row-major
/// with `k = min(3, sources)` entries per query.
pub fn fp_weights(
    queries: &[[f64; 3]],
    sources: &[[f64; 3]],
) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if sources.is_empty() {
        return Err(HvprError::InvalidArgument(
            "fp_interpolate needs at least one source".into(),
        ));
    }
    let k = sources.len().min(3);
    let mut idx = Vec::with_capacity(queries.len() * k);
    let mut w = Vec::with_capacity(queries.len() * k);
    for &q in queries {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, &s) in sources.iter().enumerate() {
            let d = dist2(q, s);
            if best.len() < k || d < best[k - 1].0 {
                let at = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(at, (d, i));
                best.truncate(k);
            }
        }
        let inv: Vec<f64> = best
            .iter()
            .map(|&(d, _)| 1.0 / (d.sqrt() + INTERP_EPS))
            .collect();
        let total: f64 = inv.iter().sum();
        for (&(_, i), v) in best.iter().zip(&inv) {
            idx.push(i);
            w.push(v / total);
        }
    }
    Ok((idx, w, k))
}

/// Interpolates `source_features: [C, S]` onto the query positions -> `[C, Q]`.
pub fn fp_interpolate(
    tape: &mut Tape,
    queries: &[[f64; 3]],
    sources: &[[f64; 3]],
    source_features: Var,
) -> Result<Var> {
    let (idx, w, k) = fp_weights(queries, sources)?;
    let weights = tape.constant(Tensor::new(&[queries.len(), k], w)?);
    Ok(tape.weighted_gather(source_features, weights, &idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointStreamConfig {
    /// Each SA layer keeps `1 / ratio` of the original points (at least one).
    pub sa_ratio: [usize; 2],
    pub radius: [f64; 2],
    pub nsample: usize,
}

impl Default for PointStreamConfig {
    fn default() -> Self {
        PointStreamConfig {
            sa_ratio: [4, 16],
            radius: [0.5, 1.0],
            nsample: 16,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PointStream {
    pub sa: [TinyPointNet; 2],
    pub fp1: TinyPointNet,
    pub fp2: Linear,
}

/// Raw point channels fed to the point stream: `(x, y, z, reflectance)`.
const RAW_CHANNELS: usize = 4;

impl PointStream {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(PointStream {
            sa: [
                TinyPointNet::new(store, &format!("{name}.sa1"), 3 + RAW_CHANNELS, c, rng)?,
                TinyPointNet::new(store, &format!("{name}.sa2"), 3 + c, c, rng)?,
            ],
            fp1: TinyPointNet::new(store, &format!("{name}.fp1"), 2 * c, c, rng)?,
            fp2: Linear::new(
                store,
                &format!("{name}.fp2"),
                c + RAW_CHANNELS,
                c,
                true,
                rng,
            )?,
        })
    }
}

/// Gathers grouped columns of `features` and prepends center-relative
/// offsets, returning `[3 + C, G]` and CSR offsets.
fn grouped_input(
    f: &mut Fwd,
    centers: &[[f64; 3]],
    positions: &[[f64; 3]],
    features: Var,
    groups: &[Vec<usize>],
) -> Result<(Var, Vec<usize>)> {
    let members: Vec<usize> = groups.iter().flatten().copied().collect();
    let g = members.len();
    let mut rel = vec![0.0; 3 * g];
    let mut offsets = vec![0];
    let mut j = 0;
    for (c, group) in centers.iter().zip(groups) {
        for &i in group {
            for d in 0..3 {
                rel[d * g + j] = positions[i][d] - c[d];
            }
            j += 1;
        }
        offsets.push(j);
    }
    let rel = f.constant(Tensor::new(&[3, g], rel)?);
    let gathered = f.tape.gather_cols(features, &members);
    Ok((f.tape.concat_rows(rel, gathered), offsets))
}

/// Counts calls into the point-level path; inference must leave them at zero.
#[derive(Debug, Default)]
pub struct StreamCounters {
    pub point_stream: AtomicUsize,
    pub point_correlation: AtomicUsize,
    pub memory_read: AtomicUsize,
}

impl StreamCounters {
    pub fn point_stream_calls(&self) -> usize {
        self.point_stream.load(Ordering::Relaxed)
    }

    pub fn point_correlation_calls(&self) -> usize {
        self.point_correlation.load(Ordering::Relaxed)
    }

    pub fn memory_read_calls(&self) -> usize {
        self.memory_read.load(Ordering::Relaxed)
    }
}

/// Per-point features `[C, M]` for the `(x, y, z, reflectance)` points.
pub fn point_stream_forward(
    f: &mut Fwd,
    net: &PointStream,
    points: &[[f64; 4]],
    config: &PointStreamConfig,
) -> Result<Var> {
    let m = points.len();
    if m == 0 {
        return Err(HvprError::InvalidArgument(
            "point stream needs at least one point".into(),
        ));
    }
    let pos: Vec<[f64; 3]> = points.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let mut raw = vec![0.0; RAW_CHANNELS * m];
    for (i, p) in points.iter().enumerate() {
        for d in 0..RAW_CHANNELS {
            raw[d * m + i] = p[d];
        }
    }
    let raw = f.constant(Tensor::new(&[RAW_CHANNELS, m], raw)?);

    let m1 = (m / config.sa_ratio[0].max(1)).max(1);
    let idx1 = farthest_point_sampling(&pos, m1, 0)?;
    let pos1: Vec<[f64; 3]> = idx1.iter().map(|&i| pos[i]).collect();
    let groups1 = ball_query(&pos1, &pos, config.radius[0], config.nsample);
    let (x1, off1) = grouped_input(f, &pos1, &pos, raw, &groups1)?;
    let f1 = net.sa[0].forward(f, x1, &off1);

    let m2 = (m / config.sa_ratio[1].max(1)).max(1).min(m1);
    let idx2 = farthest_point_sampling(&pos1, m2, 0)?;
    let pos2: Vec<[f64; 3]> = idx2.iter().map(|&i| pos1[i]).collect();
    let groups2 = ball_query(&pos2, &pos1, config.radius[1], config.nsample);
    let (x2, off2) = grouped_input(f, &pos2, &pos1, f1, &groups2)?;
    let f2 = net.sa[1].forward(f, x2, &off2);

    let up1 = fp_interpolate(f.tape, &pos1, &pos2, f2)?;
    let cat1 = f.tape.concat_rows(up1, f1);
    let h1 = net.fp1.embed(f, cat1);

    let up0 = fp_interpolate(f.tape, &pos, &pos1, h1)?;
    let cat0 = f.tape.concat_rows(up0, raw);
    Ok(net.fp2.forward(f, cat0))
}

/// `[N, M]` matrix of dot products between voxel and point features.
pub fn correlation(tape: &mut Tape, f_vox: Var, f_pts: Var) -> Result<Var> {
    let (a, b) = (tape.shape(f_vox), tape.shape(f_pts));
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(HvprError::shape(
            "correlation",
            format!("channel mismatch {a:?} vs {b:?}"),
        ));
    }
    Ok(tape.matmul_tn(f_vox, f_pts))
}

/// Row-wise top-`k` with a softmax over the kept scores. Returns the
/// probabilities `[N, k]` and the selected columns (row-major).
pub fn topk_softmax(tape: &mut Tape, corr: Var, k: usize) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(corr);
    if shape.len() != 2 || k == 0 || k > shape[1] {
        return Err(HvprError::InvalidArgument(format!(
            "top-k with k={k} over rows of {shape:?}"
        )));
    }
    let (scores, idx) = tape.topk_rows(corr, k);
    Ok((tape.softmax_rows(scores), idx))
}

/// Convex combination of the selected columns of `features: [C, M]` -> `[C, N]`.
pub fn aggregate(tape: &mut Tape, features: Var, probs: Var, idx: &[usize]) -> Var {
    tape.weighted_gather(features, probs, idx)
}

/// Concatenates `[f_vox; g]` per pillar and scatters into a `2C` image.
pub fn build_voxel_point_image(
    tape: &mut Tape,
    f_vox: Var,
    g: Var,
    coords: &[(usize, usize)],
    grid: &GridSpec,
) -> Result<Var> {
    if tape.shape(f_vox) != tape.shape(g) {
        return Err(HvprError::shape(
            "build_voxel_point_image",
            format!("{:?} vs {:?}", tape.shape(f_vox), tape.shape(g)),
        ));
    }
    let cat = tape.concat_rows(f_vox, g);
    scatter_to_pseudo_image(tape, cat, coords, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_collinear() {
        let pos: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(farthest_point_sampling(&pos, 3, 0).unwrap(), vec![0, 9, 4]);
        assert_eq!(farthest_point_sampling(&pos, 1, 7).unwrap(), vec![7]);
        assert!(farthest_point_sampling(&pos, 11, 0).is_err());
    }

    #[test]
    fn ball_query_fallback_and_cap() {
        let pos = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(ball_query(&[[0.0; 3]], &pos, 100.0, 2), vec![vec![0, 1]]);
        assert_eq!(ball_query(&[[1.6, 0.0, 0.0]], &pos, 0.1, 2), vec![vec![2]]);
    }

    #[test]
    fn fp_weights_hand_case() {
        let sources = [
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 4.0],
            [9.0, 9.0, 9.0],
        ];
        let (idx, w, k) = fp_weights(&[[0.0; 3]], &sources).unwrap();
        assert_eq!((k, idx), (3, vec![0, 1, 2]));
        // inverse distances 1, 1/2, 1/4 sum to 7/4
        let want = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn topk_softmax_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 4], vec![3.0, 1.0, 2.0, 0.0]).unwrap());
        let (p, idx) = topk_softmax(&mut tape, x, 2).unwrap();
        assert_eq!(idx, vec![0, 2]);
        let e = 1f64.exp();
        let probs = tape.value(p).data();
        assert!((probs[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((probs[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!(topk_softmax(&mut tape, x, 5).is_err());
    }

    #[test]
    fn aggregate_hand_case() {
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let probs = tape.constant(Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap());
        let g = aggregate(&mut tape, feats, probs, &[0, 1]);
        assert_eq!(tape.value(g).data(), &[0.25, 0.75]);
    }
}
