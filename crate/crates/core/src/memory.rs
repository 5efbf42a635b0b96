//! Trainable memory of point-level prototypes, read with voxel features as
//! queries.

use std::sync::atomic::Ordering;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::difftensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{
    aggregate, build_voxel_point_image, correlation, topk_softmax, StreamCounters,
};
use crate::error::{HvprError, Result};
use crate::nn::Fwd;
use crate::pillars::GridSpec;

pub const MEMORY_PARAM: &str = "memory.items";

/// Handle to the `T x C` item matrix stored under [`MEMORY_PARAM`].
#[derive(Debug, Clone, Copy)]
pub struct MemoryBank {
    pub items: ParamId,
}

impl MemoryBank {
    pub fn size(&self, store: &ParamStore) -> (usize, usize) {
        let s = store.tensor(self.items).shape();
        (s[0], s[1])
    }
}

/// Unit-norm items with i.i.d. normal directions.
pub fn init_memory_tensor(t: usize, c: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if t == 0 || c == 0 {
        return Err(HvprError::InvalidArgument("memory needs T, C > 0".into()));
    }
    let mut data: Vec<f64> = (0..t * c).map(|_| rng.sample(StandardNormal)).collect();
    for row in data.chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(&[t, c], data)
}

pub fn init_memory(
    store: &mut ParamStore,
    t: usize,
    c: usize,
    rng: &mut impl Rng,
) -> Result<MemoryBank> {
    let items = store.add(MEMORY_PARAM, init_memory_tensor(t, c, rng)?)?;
    Ok(MemoryBank { items })
}

pub struct MemoryReadout {
    /// Aggregated items per pillar, `[C, N]`.
    pub g_mem: Var,
    pub probs: Var,
    pub indices: Vec<usize>,
}

/// Scores every pillar against every item, keeps the top `k` and returns
/// their softmax-weighted combination.
pub fn memory_read(
    f: &mut Fwd,
    bank: &MemoryBank,
    f_vox: Var,
    k: usize,
    counters: Option<&StreamCounters>,
) -> Result<MemoryReadout> {
    if let Some(c) = counters {
        c.memory_read.fetch_add(1, Ordering::Relaxed);
    }
    let (t, _) = bank.size(f.binder.store());
    if k > t {
        return Err(HvprError::InvalidArgument(format!(
            "memory read with K={k} > T={t}"
        )));
    }
    let items = f.param(bank.items);
    let columns = f.tape.transpose(items);
    let scores = correlation(f.tape, f_vox, columns)?;
    let (probs, indices) = topk_softmax(f.tape, scores, k)?;
    let g_mem = aggregate(f.tape, columns, probs, &indices);
    Ok(MemoryReadout {
        g_mem,
        probs,
        indices,
    })
}

/// Sum over pillars of `|| g_pts(n) - g_mem(n) ||_2`.
pub fn memory_loss(tape: &mut Tape, g_pts: Var, g_mem: Var) -> Result<Var> {
    if tape.shape(g_pts) != tape.shape(g_mem) || tape.shape(g_pts).len() != 2 {
        return Err(HvprError::shape(
            "memory_loss",
            format!("{:?} vs {:?}", tape.shape(g_pts), tape.shape(g_mem)),
        ));
    }
    let d = tape.sub(g_pts, g_mem);
    let norms = tape.col_norms(d);
    Ok(tape.sum(norms))
}

/// `[f_vox; g_mem]` scattered to a `2C` image.
pub fn build_voxel_memory_image(
    tape: &mut Tape,
    f_vox: Var,
    g_mem: Var,
    coords: &[(usize, usize)],
    grid: &GridSpec,
) -> Result<Var> {
    build_voxel_point_image(tape, f_vox, g_mem, coords, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_norm_and_deterministic() {
        let a = init_memory_tensor(20, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_memory_tensor(20, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for row in a.data().chunks(8) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_hand_norm() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[3, 1], vec![3.0, 4.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3, 1]));
        let l = memory_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).data()[0], 5.0);
        let l0 = memory_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l0).data()[0], 0.0);
    }
}
