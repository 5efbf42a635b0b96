//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the parents.
//! Shapes follow a channel-first convention: feature matrices are `[C, N]`
//! (one column per pillar or point) and images are `[C, H, W]`.

use std::cmp::Ordering;

use crate::difftensor::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterCols {
        x: Var,
        cells: Vec<usize>,
    },
    ConcatRows(Var, Var),
    TopKRows {
        x: Var,
        idx: Vec<usize>,
    },
    SoftmaxRows(Var),
    WeightedGather {
        features: Var,
        weights: Var,
        idx: Vec<usize>,
    },
    ColNorms(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    MulChannelBroadcast(Var, Var),
    SmoothL1(Var),
    SigmoidFocal {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    GatherFlat {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
    /// Per-channel (mean, biased variance) recorded by training-mode batch norm.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const FOCAL_LOGIT_CLAMP: f64 = 30.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let r = t.shape()[0];
    (r, if r == 0 { 0 } else { t.numel() / r })
}

fn conv_out(extent: usize, k: usize, spec: Conv2dSpec) -> usize {
    (extent + 2 * spec.padding - k) / spec.stride + 1
}

/// Output positions `o` in `[0, out)` with `0 <= o*s + k - p < extent`.
fn valid_range(extent: usize, out: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi_num = extent as isize - 1 + p as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / s + 1).min(out);
    (lo.min(hi), hi)
}

fn ranked_topk(row: &[f64], k: usize) -> Vec<usize> {
    let cmp = |&a: &usize, &b: &usize| -> Ordering { row[b].total_cmp(&row[a]).then(a.cmp(&b)) };
    let mut order: Vec<usize> = (0..row.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics recorded by a training-mode [`Tape::batch_norm`].
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        self.nodes[v.0]
            .batch_stats
            .as_ref()
            .map(|(m, s)| (m.as_slice(), s.as_slice()))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter from the store as a leaf tied back to its id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.tensor(id);
        let mut value = Tensor::from_parts(p.shape(), p.data().to_vec());
        value.requires_grad = p.requires_grad;
        let needs_grad = p.requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param: Some(id),
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddChannelBias(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulTn(a, b)
            | Op::ConcatRows(a, b)
            | Op::MulChannelBroadcast(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::ColNorms(a)
            | Op::Sum(a)
            | Op::ChannelMean(a)
            | Op::SmoothL1(a)
            | Op::Reshape(a) => vec![a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::GroupMax { x, .. }
            | Op::GatherCols { x, .. }
            | Op::ScatterCols { x, .. }
            | Op::TopKRows { x, .. }
            | Op::ChannelMax { x, .. }
            | Op::GatherFlat { x, .. } => vec![x],
            Op::WeightedGather {
                features, weights, ..
            } => vec![features, weights],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::SigmoidFocal { logits, .. } | Op::SoftmaxCrossEntropy { logits, .. } => {
                vec![logits]
            }
        }
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_check("add", a, b);
        let data = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::from_parts(self.shape(a), data);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_check("sub", a, b);
        let data = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor::from_parts(self.shape(a), data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_check("mul", a, b);
        let data = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::from_parts(self.shape(a), data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.val(a).iter().map(|x| x * s).collect();
        let v = Tensor::from_parts(self.shape(a), data);
        self.push(v, Op::Scale(a, s))
    }

    /// `x[c, ..] + bias[c]` for `x` of shape `[C, ..]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (c, s) = rows_cols(self.value(x));
        assert_eq!(self.value(bias).numel(), c, "add_channel_bias: bias length");
        let b = self.val(bias);
        let mut data = self.val(x).to_vec();
        for (ci, row) in data.chunks_mut(s.max(1)).enumerate().take(c) {
            row.iter_mut().for_each(|v| *v += b[ci]);
        }
        let v = Tensor::from_parts(self.shape(x), data);
        self.push(v, Op::AddChannelBias(x, bias))
    }

    /// `[R, K] x [K, C] -> [R, C]`. The right operand may have trailing axes
    /// (e.g. `[K, H, W]`); they are flattened and restored in the output.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = rows_cols(self.value(a));
        let (kb, c) = rows_cols(self.value(b));
        assert_eq!(k, kb, "matmul: inner extents differ");
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * c..(p + 1) * c];
                orow.iter_mut()
                    .zip(brow)
                    .for_each(|(o, &bb)| *o += aip * bb);
            }
        }
        let mut shape = self.shape(b).to_vec();
        shape[0] = r;
        let v = Tensor::from_parts(&shape, out);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a^T b` for `a: [K, R]`, `b: [K, C]` giving `[R, C]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (k, r) = rows_cols(self.value(a));
        let (kb, c) = rows_cols(self.value(b));
        assert_eq!(k, kb, "matmul_tn: inner extents differ");
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = vec![0.0; r * c];
        for p in 0..k {
            let brow = &bv[p * c..(p + 1) * c];
            for i in 0..r {
                let api = av[p * r + i];
                out[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(brow)
                    .for_each(|(o, &bb)| *o += api * bb);
            }
        }
        let v = Tensor::from_parts(&[r, c], out);
        self.push(v, Op::MatMulTn(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(self.value(a));
        let av = self.val(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let v = Tensor::from_parts(&[c, r], out);
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.val(a).iter().map(|&x| x.max(0.0)).collect();
        let v = Tensor::from_parts(self.shape(a), data);
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.val(a).iter().map(|&x| sigmoid(x)).collect();
        let v = Tensor::from_parts(self.shape(a), data);
        self.push(v, Op::Sigmoid(a))
    }

    /// Per-channel normalization of `x: [C, ..]` with batch statistics.
    ///
    /// Mean and biased variance over the trailing axes are recorded and can be
    /// read back with [`Tape::batch_stats`].
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (c, s) = rows_cols(self.value(x));
        let xv = self.val(x);
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; c * s];
        for ci in 0..c {
            let row = &xv[ci * s..(ci + 1) * s];
            let mean = row.iter().sum::<f64>() / s as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (h, &v) in xhat[ci * s..(ci + 1) * s].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            means[ci] = mean;
            vars[ci] = var;
            inv_std[ci] = is;
        }
        let out = self.affine_from_xhat(&xhat, c, s, gamma, beta);
        let v = Tensor::from_parts(self.shape(x), out);
        let var = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
        );
        self.nodes[var.0].batch_stats = Some((means, vars));
        var
    }

    /// Per-channel normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let (c, s) = rows_cols(self.value(x));
        let xv = self.val(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; c * s];
        for ci in 0..c {
            for j in 0..s {
                xhat[ci * s + j] = (xv[ci * s + j] - mean[ci]) * inv_std[ci];
            }
        }
        let out = self.affine_from_xhat(&xhat, c, s, gamma, beta);
        let v = Tensor::from_parts(self.shape(x), out);
        self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
        )
    }

    fn affine_from_xhat(
        &self,
        xhat: &[f64],
        c: usize,
        s: usize,
        gamma: Var,
        beta: Var,
    ) -> Vec<f64> {
        let (g, b) = (self.val(gamma), self.val(beta));
        let mut out = vec![0.0; c * s];
        for ci in 0..c {
            for j in 0..s {
                out[ci * s + j] = xhat[ci * s + j] * g[ci] + b[ci];
            }
        }
        out
    }

    /// Max over column groups: `x: [R, P]` and groups given as CSR
    /// (`offsets` of length `G + 1` into `members`) produce `[R, G]`.
    /// Ties resolve to the earliest member in group order.
    pub fn group_max(&mut self, x: Var, offsets: &[usize], members: &[usize]) -> Var {
        let (r, p) = rows_cols(self.value(x));
        let g = offsets.len() - 1;
        let xv = self.val(x);
        let mut out = vec![0.0; r * g];
        let mut argmax = vec![0usize; r * g];
        for gi in 0..g {
            let group = &members[offsets[gi]..offsets[gi + 1]];
            assert!(!group.is_empty(), "group_max: empty group {gi}");
            for ri in 0..r {
                let row = &xv[ri * p..(ri + 1) * p];
                let mut best = group[0];
                for &m in &group[1..] {
                    if row[m] > row[best] {
                        best = m;
                    }
                }
                out[ri * g + gi] = row[best];
                argmax[ri * g + gi] = ri * p + best;
            }
        }
        let v = Tensor::from_parts(&[r, g], out);
        self.push(v, Op::GroupMax { x, argmax })
    }

    /// Column gather: `x: [R, M]` -> `[R, idx.len()]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, m) = rows_cols(self.value(x));
        let xv = self.val(x);
        let n = idx.len();
        let mut out = vec![0.0; r * n];
        for ri in 0..r {
            for (j, &i) in idx.iter().enumerate() {
                out[ri * n + j] = xv[ri * m + i];
            }
        }
        let v = Tensor::from_parts(&[r, n], out);
        self.push(
            v,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Column scatter into a zero canvas: `x: [R, N]` -> `out_shape` with
    /// `out_shape[0] == R`; column `n` lands at flat cell `cells[n]`.
    pub fn scatter_cols(&mut self, x: Var, cells: &[usize], out_shape: &[usize]) -> Var {
        let (r, n) = rows_cols(self.value(x));
        assert_eq!(out_shape[0], r, "scatter_cols: row count");
        assert_eq!(cells.len(), n, "scatter_cols: one cell per column");
        let total: usize = out_shape[1..].iter().product();
        let xv = self.val(x);
        let mut out = vec![0.0; r * total];
        for ri in 0..r {
            for (j, &cell) in cells.iter().enumerate() {
                out[ri * total + cell] += xv[ri * n + j];
            }
        }
        let v = Tensor::from_parts(out_shape, out);
        self.push(
            v,
            Op::ScatterCols {
                x,
                cells: cells.to_vec(),
            },
        )
    }

    /// Stacks `a: [R1, ..]` on top of `b: [R2, ..]` along the first axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            &self.shape(a)[1..],
            &self.shape(b)[1..],
            "concat_rows: trailing shapes differ"
        );
        let mut data = self.val(a).to_vec();
        data.extend_from_slice(self.val(b));
        let mut shape = self.shape(a).to_vec();
        shape[0] += self.shape(b)[0];
        let v = Tensor::from_parts(&shape, data);
        self.push(v, Op::ConcatRows(a, b))
    }

    /// Row-wise top-`k` selection of `x: [N, M]`, ties broken by lowest column.
    ///
    /// Returns the selected scores `[N, k]` in descending order and the
    /// selected column indices (row-major, `N * k`). The selection itself is
    /// piecewise constant; gradients flow only through the selected scores.
    pub fn topk_rows(&mut self, x: Var, k: usize) -> (Var, Vec<usize>) {
        let (n, m) = rows_cols(self.value(x));
        assert!(k <= m, "topk_rows: k={k} exceeds row length {m}");
        let xv = self.val(x);
        let mut cols = Vec::with_capacity(n * k);
        let mut flat = Vec::with_capacity(n * k);
        let mut out = Vec::with_capacity(n * k);
        for ri in 0..n {
            let row = &xv[ri * m..(ri + 1) * m];
            for c in ranked_topk(row, k) {
                cols.push(c);
                flat.push(ri * m + c);
                out.push(row[c]);
            }
        }
        let v = Tensor::from_parts(&[n, k], out);
        let var = self.push(v, Op::TopKRows { x, idx: flat });
        (var, cols)
    }

    /// Softmax along the last axis of `x: [N, K]`, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, k) = rows_cols(self.value(x));
        let xv = self.val(x);
        let mut out = vec![0.0; n * k];
        for ri in 0..n {
            let row = &xv[ri * k..(ri + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[ri * k..(ri + 1) * k];
            let mut z = 0.0;
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - mx).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let v = Tensor::from_parts(&[n, k], out);
        self.push(v, Op::SoftmaxRows(x))
    }

    /// `out[:, n] = sum_k weights[n, k] * features[:, idx[n*K + k]]`.
    pub fn weighted_gather(&mut self, features: Var, weights: Var, idx: &[usize]) -> Var {
        let (c, m) = rows_cols(self.value(features));
        let (n, k) = rows_cols(self.value(weights));
        assert_eq!(idx.len(), n * k, "weighted_gather: index count");
        let (fv, wv) = (self.val(features), self.val(weights));
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            let frow = &fv[ci * m..(ci + 1) * m];
            for ni in 0..n {
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += wv[ni * k + ki] * frow[idx[ni * k + ki]];
                }
                out[ci * n + ni] = acc;
            }
        }
        let v = Tensor::from_parts(&[c, n], out);
        self.push(
            v,
            Op::WeightedGather {
                features,
                weights,
                idx: idx.to_vec(),
            },
        )
    }

    /// Euclidean norm of every column of `x: [C, N]` -> `[N]`.
    pub fn col_norms(&mut self, x: Var) -> Var {
        let (c, n) = rows_cols(self.value(x));
        let xv = self.val(x);
        let mut out = vec![0.0; n];
        for ci in 0..c {
            for ni in 0..n {
                out[ni] += xv[ci * n + ni] * xv[ci * n + ni];
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let v = Tensor::from_parts(&[n], out);
        self.push(v, Op::ColNorms(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// 2D convolution of `x: [Ci, H, W]` with `w: [Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: input must be [C, H, W]");
        assert_eq!(ws[1], xs[0], "conv2d: input channels");
        let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
        let (co_n, k) = (ws[0], ws[2]);
        assert!(h + 2 * spec.padding >= k && wd + 2 * spec.padding >= k);
        let (ho, wo) = (conv_out(h, k, spec), conv_out(wd, k, spec));
        let (xv, wv) = (self.val(x), self.val(w));
        let s = spec.stride;
        let p = spec.padding;
        let mut out = vec![0.0; co_n * ho * wo];
        for co in 0..co_n {
            let oplane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data()[co];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..ci_n {
                let xplane = &xv[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(h, ho, s, ky, p);
                    for kx in 0..k {
                        let wval = wv[((co * ci_n + ci) * k + ky) * k + kx];
                        if wval == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(wd, wo, s, kx, p);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let xrow = &xplane[iy * wd..(iy + 1) * wd];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                orow[ox] += wval * xrow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_parts(&[co_n, ho, wo], out);
        self.push(v, Op::Conv2d { x, w, b, spec })
    }

    /// Transposed convolution without padding: `x: [Ci, H, W]`,
    /// `w: [Ci, Co, k, k]` -> `[Co, (H-1)*stride + k, (W-1)*stride + k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], xs[0], "conv_transpose2d: input channels");
        let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
        let (co_n, k) = (ws[1], ws[2]);
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let (xv, wv) = (self.val(x), self.val(w));
        let mut out = vec![0.0; co_n * ho * wo];
        if let Some(b) = b {
            let bv = self.val(b);
            for co in 0..co_n {
                out[co * ho * wo..(co + 1) * ho * wo]
                    .iter_mut()
                    .for_each(|v| *v = bv[co]);
            }
        }
        for ci in 0..ci_n {
            let xplane = &xv[ci * h * wd..(ci + 1) * h * wd];
            for co in 0..co_n {
                let oplane = &mut out[co * ho * wo..(co + 1) * ho * wo];
                for ky in 0..k {
                    for kx in 0..k {
                        let wval = wv[((ci * co_n + co) * k + ky) * k + kx];
                        for iy in 0..h {
                            let orow = (iy * stride + ky) * wo;
                            for ix in 0..wd {
                                oplane[orow + ix * stride + kx] += wval * xplane[iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_parts(&[co_n, ho, wo], out);
        self.push(v, Op::ConvTranspose2d { x, w, b, stride })
    }

    /// Max over channels of `x: [C, ..]` -> `[1, ..]`; ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (c, s) = rows_cols(self.value(x));
        let xv = self.val(x);
        let mut out = vec![f64::NEG_INFINITY; s];
        let mut argmax = vec![0usize; s];
        for ci in 0..c {
            for j in 0..s {
                let v = xv[ci * s + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = ci * s + j;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = 1;
        let v = Tensor::from_parts(&shape, out);
        self.push(v, Op::ChannelMax { x, argmax })
    }

    /// Mean over channels of `x: [C, ..]` -> `[1, ..]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, s) = rows_cols(self.value(x));
        let xv = self.val(x);
        let mut out = vec![0.0; s];
        for ci in 0..c {
            for j in 0..s {
                out[j] += xv[ci * s + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        let mut shape = self.shape(x).to_vec();
        shape[0] = 1;
        let v = Tensor::from_parts(&shape, out);
        self.push(v, Op::ChannelMean(x))
    }

    /// `f[c, ..] * a[0, ..]` with `a` broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, f: Var, a: Var) -> Var {
        let (c, s) = rows_cols(self.value(f));
        assert_eq!(
            self.value(a).numel(),
            s,
            "mul_channel_broadcast: spatial size"
        );
        let (fv, av) = (self.val(f), self.val(a));
        let mut out = vec![0.0; c * s];
        for ci in 0..c {
            for j in 0..s {
                out[ci * s + j] = fv[ci * s + j] * av[j];
            }
        }
        let v = Tensor::from_parts(self.shape(f), out);
        self.push(v, Op::MulChannelBroadcast(f, a))
    }

    /// Elementwise smooth-L1 (Huber with unit transition).
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let data = self.val(x).iter().map(|&v| smooth_l1_value(v)).collect();
        let v = Tensor::from_parts(self.shape(x), data);
        self.push(v, Op::SmoothL1(x))
    }

    /// Weighted sigmoid focal loss summed to a scalar.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: &[f64],
        weights: &[f64],
        alpha: f64,
        gamma: f64,
    ) -> Var {
        let lv = self.val(logits);
        assert_eq!(lv.len(), targets.len());
        assert_eq!(lv.len(), weights.len());
        let mut terms = Vec::with_capacity(lv.len());
        for ((&z, &t), &w) in lv.iter().zip(targets).zip(weights) {
            if w == 0.0 {
                terms.push(0.0);
                continue;
            }
            let z = z.clamp(-FOCAL_LOGIT_CLAMP, FOCAL_LOGIT_CLAMP);
            let (u, alpha_t) = if t > 0.5 {
                (z, alpha)
            } else {
                (-z, 1.0 - alpha)
            };
            let q = sigmoid(-u);
            terms.push(w * alpha_t * q.powf(gamma) * softplus(-u));
        }
        let total = crate::difftensor::tensor::pairwise_sum(&terms);
        self.push(
            Tensor::scalar(total),
            Op::SigmoidFocal {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                alpha,
                gamma,
            },
        )
    }

    /// Weighted softmax cross-entropy over the last axis of `logits: [N, B]`,
    /// summed to a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Var {
        let (n, b) = rows_cols(self.value(logits));
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let lv = self.val(logits);
        let mut terms = Vec::with_capacity(n);
        for ri in 0..n {
            let row = &lv[ri * b..(ri + 1) * b];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            terms.push(weights[ri] * (lse - row[targets[ri]]));
        }
        let total = crate::difftensor::tensor::pairwise_sum(&terms);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Gathers flat elements of `x` into a new tensor of `shape`.
    pub fn gather_flat(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), idx.len());
        let xv = self.val(x);
        let data = idx.iter().map(|&i| xv[i]).collect();
        let v = Tensor::from_parts(shape, data);
        self.push(
            v,
            Op::GatherFlat {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(x).numel());
        let v = Tensor::from_parts(shape, self.val(x).to_vec());
        self.push(v, Op::Reshape(x))
    }

    /// Reverse sweep from a scalar `loss` (seeded with gradient 1).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter leaf that the loss depends on, in tape order.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients,
    ) -> impl Iterator<Item = (ParamId, &'a [f64])> {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let id = n.param?;
            if !n.needs_grad {
                return None;
            }
            grads.grads[i].as_deref().map(|g| (id, g))
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if let Some(ga) = self.acc(grads, a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            &Op::AddChannelBias(x, b) => {
                let (c, s) = rows_cols(self.value(x));
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ci in 0..c {
                        gb[ci] += g[ci * s..(ci + 1) * s].iter().sum::<f64>();
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (r, k) = rows_cols(self.value(a));
                let (_, c) = rows_cols(self.value(b));
                let (av, bv) = (self.val(a), self.val(b));
                if let Some(ga) = self.acc(grads, a) {
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let brow = &bv[p * c..(p + 1) * c];
                            ga[ii * k + p] +=
                                grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let aip = av[ii * k + p];
                            gb[p * c..(p + 1) * c]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(x, y)| *x += aip * y);
                        }
                    }
                }
            }
            &Op::MatMulTn(a, b) => {
                let (k, r) = rows_cols(self.value(a));
                let (_, c) = rows_cols(self.value(b));
                let (av, bv) = (self.val(a), self.val(b));
                if let Some(ga) = self.acc(grads, a) {
                    for p in 0..k {
                        let brow = &bv[p * c..(p + 1) * c];
                        for ii in 0..r {
                            let grow = &g[ii * c..(ii + 1) * c];
                            ga[p * r + ii] +=
                                grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for p in 0..k {
                        for ii in 0..r {
                            let api = av[p * r + ii];
                            let grow = &g[ii * c..(ii + 1) * c];
                            gb[p * c..(p + 1) * c]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(x, y)| *x += api * y);
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = rows_cols(self.value(a));
                if let Some(ga) = self.acc(grads, a) {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += g[j * r + ii];
                        }
                    }
                }
            }
            &Op::Relu(a) => {
                let av = self.val(a);
                if let Some(ga) = self.acc(grads, a) {
                    for j in 0..g.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (c, s) = rows_cols(self.value(*x));
                let gv = self.val(*gamma);
                if let Some(ggam) = self.acc(grads, *gamma) {
                    for ci in 0..c {
                        ggam[ci] += (0..s)
                            .map(|j| g[ci * s + j] * xhat[ci * s + j])
                            .sum::<f64>();
                    }
                }
                if let Some(gbet) = self.acc(grads, *beta) {
                    for ci in 0..c {
                        gbet[ci] += g[ci * s..(ci + 1) * s].iter().sum::<f64>();
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for ci in 0..c {
                        let gs = &g[ci * s..(ci + 1) * s];
                        let xh = &xhat[ci * s..(ci + 1) * s];
                        let scale = gv[ci] * inv_std[ci];
                        if *training {
                            let sum_g: f64 = gs.iter().sum();
                            let sum_gx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
                            let sf = s as f64;
                            for j in 0..s {
                                gx[ci * s + j] +=
                                    scale * (gs[j] - sum_g / sf - xh[j] * sum_gx / sf);
                            }
                        } else {
                            for j in 0..s {
                                gx[ci * s + j] += scale * gs[j];
                            }
                        }
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (j, &src) in argmax.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                let (r, m) = rows_cols(self.value(*x));
                let n = idx.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for ri in 0..r {
                        for (j, &col) in idx.iter().enumerate() {
                            gx[ri * m + col] += g[ri * n + j];
                        }
                    }
                }
            }
            Op::ScatterCols { x, cells } => {
                let (r, n) = rows_cols(self.value(*x));
                let total = out.len() / r.max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for ri in 0..r {
                        for (j, &cell) in cells.iter().enumerate() {
                            gx[ri * n + j] += g[ri * total + cell];
                        }
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let na = self.value(a).numel();
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(&g[..na]).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(&g[na..]).for_each(|(x, y)| *x += y);
                }
            }
            Op::TopKRows { x, idx } | Op::GatherFlat { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (j, &src) in idx.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let (n, k) = rows_cols(&node.value);
                if let Some(ga) = self.acc(grads, a) {
                    for ri in 0..n {
                        let y = &out[ri * k..(ri + 1) * k];
                        let gy = &g[ri * k..(ri + 1) * k];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            ga[ri * k + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::WeightedGather {
                features,
                weights,
                idx,
            } => {
                let (c, m) = rows_cols(self.value(*features));
                let (n, k) = rows_cols(self.value(*weights));
                let (fv, wv) = (self.val(*features), self.val(*weights));
                if let Some(gf) = self.acc(grads, *features) {
                    for ci in 0..c {
                        for ni in 0..n {
                            let go = g[ci * n + ni];
                            for ki in 0..k {
                                gf[ci * m + idx[ni * k + ki]] += wv[ni * k + ki] * go;
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *weights) {
                    for ci in 0..c {
                        for ni in 0..n {
                            let go = g[ci * n + ni];
                            for ki in 0..k {
                                gw[ni * k + ki] += go * fv[ci * m + idx[ni * k + ki]];
                            }
                        }
                    }
                }
            }
            &Op::ColNorms(a) => {
                let (c, n) = rows_cols(self.value(a));
                let av = self.val(a);
                if let Some(ga) = self.acc(grads, a) {
                    for ci in 0..c {
                        for ni in 0..n {
                            if out[ni] > 0.0 {
                                ga[ci * n + ni] += g[ni] * av[ci * n + ni] / out[ni];
                            }
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Conv2d { x, w, b, spec } => self.conv2d_backward(x, w, b, spec, g, grads),
            &Op::ConvTranspose2d { x, w, b, stride } => {
                self.conv_transpose2d_backward(x, w, b, stride, g, grads)
            }
            Op::ChannelMax { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (j, &src) in argmax.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            &Op::ChannelMean(a) => {
                let (c, s) = rows_cols(self.value(a));
                if let Some(ga) = self.acc(grads, a) {
                    for ci in 0..c {
                        for j in 0..s {
                            ga[ci * s + j] += g[j] / c as f64;
                        }
                    }
                }
            }
            &Op::MulChannelBroadcast(f, a) => {
                let (c, s) = rows_cols(self.value(f));
                let (fv, av) = (self.val(f), self.val(a));
                if let Some(gf) = self.acc(grads, f) {
                    for ci in 0..c {
                        for j in 0..s {
                            gf[ci * s + j] += g[ci * s + j] * av[j];
                        }
                    }
                }
                if let Some(ga) = self.acc(grads, a) {
                    for ci in 0..c {
                        for j in 0..s {
                            ga[j] += g[ci * s + j] * fv[ci * s + j];
                        }
                    }
                }
            }
            &Op::SmoothL1(a) => {
                let av = self.val(a);
                if let Some(ga) = self.acc(grads, a) {
                    for j in 0..g.len() {
                        let v = av[j];
                        let d = if v.abs() < 1.0 { v } else { v.signum() };
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::SigmoidFocal {
                logits,
                targets,
                weights,
                alpha,
                gamma,
            } => {
                let lv = self.val(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    for j in 0..lv.len() {
                        let z = lv[j];
                        if weights[j] == 0.0 || z.abs() > FOCAL_LOGIT_CLAMP {
                            continue;
                        }
                        let positive = targets[j] > 0.5;
                        let (u, alpha_t, sign) = if positive {
                            (z, *alpha, 1.0)
                        } else {
                            (-z, 1.0 - *alpha, -1.0)
                        };
                        let q = sigmoid(-u);
                        let sp = softplus(-u);
                        // d/du [alpha_t q^gamma sp] with dq/du = -q(1-q), dsp/du = -q
                        let qg = q.powf(*gamma);
                        let dq_term = if *gamma == 0.0 {
                            0.0
                        } else {
                            gamma * q.powf(gamma - 1.0) * (-q * (1.0 - q)) * sp
                        };
                        let du = alpha_t * (dq_term - qg * q);
                        gl[j] += g[0] * weights[j] * du * sign;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let (n, b) = rows_cols(self.value(*logits));
                let lv = self.val(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    for ri in 0..n {
                        if weights[ri] == 0.0 {
                            continue;
                        }
                        let row = &lv[ri * b..(ri + 1) * b];
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..b {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j == targets[ri] { 1.0 } else { 0.0 };
                            gl[ri * b + j] += g[0] * weights[ri] * (p - onehot);
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
        let (co_n, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out(h, k, spec), conv_out(wd, k, spec));
        let (s, p) = (spec.stride, spec.padding);
        let (xv, wv) = (self.val(x), self.val(w));
        if let Some(b) = b {
            if let Some(gb) = self.acc(grads, b) {
                for co in 0..co_n {
                    gb[co] += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                }
            }
        }
        if let Some(gw) = self.acc(grads, w) {
            for co in 0..co_n {
                let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                for ci in 0..ci_n {
                    let xplane = &xv[ci * h * wd..(ci + 1) * h * wd];
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(h, ho, s, ky, p);
                        for kx in 0..k {
                            let (ox0, ox1) = valid_range(wd, wo, s, kx, p);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let xrow = &xplane[iy * wd..(iy + 1) * wd];
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * s + kx - p];
                                }
                            }
                            gw[((co * ci_n + ci) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }
        if let Some(gx) = self.acc(grads, x) {
            for co in 0..co_n {
                let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                for ci in 0..ci_n {
                    let xg = &mut gx[ci * h * wd..(ci + 1) * h * wd];
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(h, ho, s, ky, p);
                        for kx in 0..k {
                            let wval = wv[((co * ci_n + ci) * k + ky) * k + kx];
                            let (ox0, ox1) = valid_range(wd, wo, s, kx, p);
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                let xrow = &mut xg[iy * wd..(iy + 1) * wd];
                                for ox in ox0..ox1 {
                                    xrow[ox * s + kx - p] += wval * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
        let (co_n, k) = (ws[1], ws[2]);
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let (xv, wv) = (self.val(x), self.val(w));
        if let Some(b) = b {
            if let Some(gb) = self.acc(grads, b) {
                for co in 0..co_n {
                    gb[co] += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                }
            }
        }
        if let Some(gw) = self.acc(grads, w) {
            for ci in 0..ci_n {
                let xplane = &xv[ci * h * wd..(ci + 1) * h * wd];
                for co in 0..co_n {
                    let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for iy in 0..h {
                                let orow = (iy * stride + ky) * wo;
                                for ix in 0..wd {
                                    acc += gplane[orow + ix * stride + kx] * xplane[iy * wd + ix];
                                }
                            }
                            gw[((ci * co_n + co) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }
        if let Some(gx) = self.acc(grads, x) {
            for ci in 0..ci_n {
                for co in 0..co_n {
                    let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wval = wv[((ci * co_n + co) * k + ky) * k + kx];
                            for iy in 0..h {
                                let orow = (iy * stride + ky) * wo;
                                for ix in 0..wd {
                                    gx[ci * h * wd + iy * wd + ix] +=
                                        wval * gplane[orow + ix * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Resolves parameter ids to tape variables, loading each parameter at most
/// once per tape.
///
/// Gradient checks pre-bind parameters to caller-owned leaves with
/// [`ParamBinder::bind`] so that perturbations reach the module under test.
pub struct ParamBinder<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> ParamBinder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        ParamBinder {
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.index()] = Some(var);
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = tape.param(self.store, id);
        self.bound[id.index()] = Some(v);
        v
    }
}

/// `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn sigmoid_value(x: f64) -> f64 {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.get(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let m = tape.mul(a, b);
        let s = tape.sum(m);
        let g = tape.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn topk_orders_and_breaks_ties_low() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 5], &[1.0, 3.0, 3.0, 0.0, 2.0]));
        let (_, idx) = tape.topk_rows(x, 3);
        assert_eq!(idx, vec![1, 2, 4]);
    }

    #[test]
    fn conv_padding_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 8, 8], 1.0));
        let w = tape.leaf(Tensor::full(&[2, 1, 3, 3], 1.0));
        let y = tape.conv2d(
            x,
            w,
            None,
            Conv2dSpec {
                stride: 2,
                padding: 1,
            },
        );
        assert_eq!(tape.shape(y), &[2, 4, 4]);
        // top-left output sees a 2x2 patch of ones, interior sees 3x3
        assert_eq!(tape.value(y).at(&[0, 0, 0]), 4.0);
        assert_eq!(tape.value(y).at(&[0, 1, 1]), 9.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -100.0, 0.0, 100.0]));
        let y = tape.softmax_rows(x);
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn valid_range_covers_padding() {
        // extent 4, out 2, stride 2, kernel offset 0, pad 1: ox*2 - 1 in [0,4) => ox in {1}
        assert_eq!(valid_range(4, 2, 2, 0, 1), (1, 2));
        assert_eq!(valid_range(4, 2, 2, 1, 1), (0, 2));
        assert_eq!(valid_range(4, 2, 2, 2, 1), (0, 2));
    }
}
