//! Pillar voxelization and pseudo-image scatter/gather.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::difftensor::{Tape, Tensor, Var};
use crate::error::{HvprError, Result};
use crate::scene::PointCloud;

/// Number of per-point features after augmentation.
pub const POINT_FEATURES: usize = 9;

/// Scene ranges and pillar size. Columns run along x, rows along y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    /// `(v_W, v_H, v_L)`; `v_L` spans the whole z range.
    pub voxel: [f64; 3],
}

fn extent(range: [f64; 2], v: f64) -> Result<usize> {
    let n = (range[1] - range[0]) / v;
    let r = n.round();
    if !(range[1] > range[0] && v > 0.0) || (n - r).abs() > 1e-9 * n.max(1.0) || r < 1.0 {
        return Err(HvprError::Config(format!(
            "range {range:?} is not divisible by voxel size {v}"
        )));
    }
    Ok(r as usize)
}

impl GridSpec {
    pub fn full() -> Self {
        GridSpec {
            x_range: [0.0, 70.4],
            y_range: [-40.0, 40.0],
            z_range: [-3.0, 1.0],
            voxel: [0.16, 0.16, 4.0],
        }
    }

    pub fn desk() -> Self {
        GridSpec {
            x_range: [4.0, 14.24],
            y_range: [-5.12, 5.12],
            z_range: [-3.0, 1.0],
            voxel: [0.32, 0.32, 4.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        extent(self.x_range, self.voxel[0])?;
        extent(self.y_range, self.voxel[1])?;
        if extent(self.z_range, self.voxel[2])? != 1 {
            return Err(HvprError::Config(
                "pillars need a single vertical cell".into(),
            ));
        }
        Ok(())
    }

    /// `W'`, the number of columns.
    pub fn cols(&self) -> usize {
        extent(self.x_range, self.voxel[0]).expect("validated grid")
    }

    /// `H'`, the number of rows.
    pub fn rows(&self) -> usize {
        extent(self.y_range, self.voxel[1]).expect("validated grid")
    }

    /// `H'` rounded up to a multiple of 8 so the three stride-2 stages
    /// divide evenly; the backbone sees the pseudo image zero padded to this.
    pub fn image_rows(&self) -> usize {
        self.rows().next_multiple_of(8)
    }

    /// `W'` rounded up to a multiple of 8.
    pub fn image_cols(&self) -> usize {
        self.cols().next_multiple_of(8)
    }

    /// Rows of the detection head output, `ceil(H' / 2)`.
    pub fn head_rows(&self) -> usize {
        self.rows().div_ceil(2)
    }

    pub fn head_cols(&self) -> usize {
        self.cols().div_ceil(2)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| {
            let r = [self.x_range, self.y_range, self.z_range][k];
            p[k] >= r[0] && p[k] < r[1]
        })
    }

    /// `(row, col)` of a point already known to be inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x - self.x_range[0]) / self.voxel[0]).floor() as usize;
        let row = ((y - self.y_range[0]) / self.voxel[1]).floor() as usize;
        (row.min(self.rows() - 1), col.min(self.cols() - 1))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range[0] + (col as f64 + 0.5) * self.voxel[0],
            self.y_range[0] + (row as f64 + 0.5) * self.voxel[1],
        )
    }
}

/// Voxelized scene. Pillar `n` owns `points[n * n_vox .. n * n_vox + counts[n]]`;
/// the remaining slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarBatch {
    pub n_vox: usize,
    pub points: Vec<[f64; 4]>,
    pub coords: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
}

impl PillarBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn pillar_points(&self, n: usize) -> &[[f64; 4]] {
        &self.points[n * self.n_vox..n * self.n_vox + self.counts[n]]
    }

    /// Every kept point, pillar by pillar.
    pub fn kept_points(&self) -> Vec<[f64; 4]> {
        (0..self.len())
            .flat_map(|n| self.pillar_points(n).iter().copied())
            .collect()
    }

    /// CSR offsets over [`PillarBatch::kept_points`].
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.len() + 1);
        off.push(0);
        for &c in &self.counts {
            off.push(off.last().unwrap() + c);
        }
        off
    }

    /// Flat cell index `row * W' + col` per pillar.
    pub fn cells(&self, grid: &GridSpec) -> Vec<usize> {
        let w = grid.cols();
        self.coords.iter().map(|&(r, c)| r * w + c).collect()
    }
}

fn sorted_sample(rng: &mut impl Rng, len: usize, amount: usize) -> Vec<usize> {
    let mut idx = index::sample(rng, len, amount).into_vec();
    idx.sort_unstable();
    idx
}

/// Bins points into pillars. Over-full pillars and pillar sets larger than
/// `max_pillars` are uniformly subsampled with `rng` (pillars first, then
/// points per pillar in pillar order).
pub fn voxelize(
    cloud: &PointCloud,
    grid: &GridSpec,
    n_vox: usize,
    max_pillars: usize,
    rng: &mut impl Rng,
) -> PillarBatch {
    let mut bins: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if grid.contains([p[0], p[1], p[2]]) {
            bins.entry(grid.cell_of(p[0], p[1])).or_default().push(i);
        }
    }
    let mut pillars: Vec<((usize, usize), Vec<usize>)> = bins.into_iter().collect();
    if pillars.len() > max_pillars {
        let keep = sorted_sample(rng, pillars.len(), max_pillars);
        let mut all = std::mem::take(&mut pillars)
            .into_iter()
            .map(Some)
            .collect::<Vec<_>>();
        pillars = keep.into_iter().map(|k| all[k].take().unwrap()).collect();
    }
    let mut batch = PillarBatch {
        n_vox,
        points: vec![[0.0; 4]; pillars.len() * n_vox],
        coords: Vec::with_capacity(pillars.len()),
        counts: Vec::with_capacity(pillars.len()),
    };
    for (n, (coord, members)) in pillars.into_iter().enumerate() {
        let chosen = if members.len() > n_vox {
            sorted_sample(rng, members.len(), n_vox)
                .into_iter()
                .map(|k| members[k])
                .collect()
        } else {
            members
        };
        for (slot, &i) in chosen.iter().enumerate() {
            batch.points[n * n_vox + slot] = cloud.points[i];
        }
        batch.coords.push(coord);
        batch.counts.push(chosen.len());
    }
    batch
}

fn point_features(batch: &PillarBatch, grid: &GridSpec, n: usize) -> Vec<[f64; POINT_FEATURES]> {
    let pts = batch.pillar_points(n);
    let k = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in pts {
        for d in 0..3 {
            mean[d] += p[d] / k;
        }
    }
    let (row, col) = batch.coords[n];
    let (cx, cy) = grid.cell_center(row, col);
    pts.iter()
        .map(|p| {
            [
                p[0],
                p[1],
                p[2],
                p[3],
                p[0] - mean[0],
                p[1] - mean[1],
                p[2] - mean[2],
                p[0] - cx,
                p[1] - cy,
            ]
        })
        .collect()
}

/// Padded per-point features `[N, N_vox, 9]`.
pub fn augment_point_features(batch: &PillarBatch, grid: &GridSpec) -> Tensor {
    let (n, nv) = (batch.len(), batch.n_vox);
    let mut data = vec![0.0; n * nv * POINT_FEATURES];
    for p in 0..n {
        for (slot, f) in point_features(batch, grid, p).into_iter().enumerate() {
            let at = (p * nv + slot) * POINT_FEATURES;
            data[at..at + POINT_FEATURES].copy_from_slice(&f);
        }
    }
    Tensor::new(&[n, nv, POINT_FEATURES], data).expect("consistent shape")
}

/// Channel-first features of the kept points only, `[9, P]`, ordered as
/// [`PillarBatch::kept_points`].
pub fn packed_point_features(batch: &PillarBatch, grid: &GridSpec) -> Tensor {
    let total: usize = batch.counts.iter().sum();
    let mut data = vec![0.0; POINT_FEATURES * total];
    let mut j = 0;
    for n in 0..batch.len() {
        for f in point_features(batch, grid, n) {
            for (d, v) in f.iter().enumerate() {
                data[d * total + j] = *v;
            }
            j += 1;
        }
    }
    Tensor::new(&[POINT_FEATURES, total], data).expect("consistent shape")
}

fn check_coords(coords: &[(usize, usize)], grid: &GridSpec) -> Result<Vec<usize>> {
    let (h, w) = (grid.rows(), grid.cols());
    let mut seen = vec![false; h * w];
    coords
        .iter()
        .map(|&(row, col)| {
            if row >= h || col >= w {
                return Err(HvprError::InvalidArgument(format!(
                    "pillar ({row}, {col}) outside a {h}x{w} grid"
                )));
            }
            let cell = row * w + col;
            if std::mem::replace(&mut seen[cell], true) {
                return Err(HvprError::DuplicateCoords { row, col });
            }
            Ok(cell)
        })
        .collect()
}

/// Places column `n` of `features: [C, N]` at pillar `coords[n]` of a zero
/// `[C, H', W']` image.
pub fn scatter_to_pseudo_image(
    tape: &mut Tape,
    features: Var,
    coords: &[(usize, usize)],
    grid: &GridSpec,
) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != coords.len() {
        return Err(HvprError::shape(
            "scatter_to_pseudo_image",
            format!("features {shape:?} vs {} coords", coords.len()),
        ));
    }
    let cells = check_coords(coords, grid)?;
    Ok(tape.scatter_cols(features, &cells, &[shape[0], grid.rows(), grid.cols()]))
}

/// Reads the columns at `coords` back out of an image `[C, H', W']`.
pub fn gather_from_image(
    tape: &mut Tape,
    image: Var,
    coords: &[(usize, usize)],
    grid: &GridSpec,
) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[1] != grid.rows() || shape[2] != grid.cols() {
        return Err(HvprError::shape(
            "gather_from_image",
            format!("image {shape:?}"),
        ));
    }
    let cells: Vec<usize> = coords.iter().map(|&(r, c)| r * grid.cols() + c).collect();
    let flat = tape.reshape(image, &[shape[0], shape[1] * shape[2]]);
    Ok(tape.gather_cols(flat, &cells))
}
