use hvpr::backbone::amfm_refine;
use hvpr::difftensor::{ParamBinder, ParamStore, Tape, Tensor};
use hvpr::encoder::{correlation, topk_softmax};
use hvpr::memory::{init_memory, memory_loss, memory_read};
use hvpr::nn::{Fwd, Mode};
use hvpr::pillars::{scatter_to_pseudo_image, voxelize, GridSpec};
use hvpr::scene::PointCloud;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_points() -> impl Strategy<Value = Vec<[f64; 4]>> {
    // slightly wider than the desk grid so some points fall outside
    prop::collection::vec(
        (3.0..15.0f64, -6.0..6.0f64, -3.5..1.5f64, 0.0..1.0f64),
        0..400,
    )
    .prop_map(|v| v.into_iter().map(|(x, y, z, r)| [x, y, z, r]).collect())
}

fn distinct_coords(grid: &GridSpec, n: usize, seed: u64) -> Vec<(usize, usize)> {
    use rand::seq::SliceRandom;
    let mut cells: Vec<usize> = (0..grid.rows() * grid.cols()).collect();
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    cells[..n]
        .iter()
        .map(|&q| (q / grid.cols(), q % grid.cols()))
        .collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
}

proptest! {
    #[test]
    fn voxelization_is_idempotent_on_kept_points(points in desk_points(), seed in any::<u64>()) {
        let grid = GridSpec::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = voxelize(&PointCloud::new(points), &grid, 4, 64, &mut rng);
        let again = voxelize(&PointCloud::new(first.kept_points()), &grid, 4, 64, &mut rng);
        prop_assert_eq!(&first.coords, &again.coords);
        prop_assert_eq!(&first.counts, &again.counts);
        prop_assert!(first.counts.iter().all(|&c| (1..=4).contains(&c)));
        prop_assert!(first.len() <= 64);
        for p in first.kept_points() {
            prop_assert!(grid.contains([p[0], p[1], p[2]]));
        }
    }

    #[test]
    fn scatter_is_linear((c, n, f, g) in (1usize..4, 1usize..20).prop_flat_map(|(c, n)| (Just(c), Just(n), matrix(c, n), matrix(c, n))),
                         a in -2.0..2.0f64, b in -2.0..2.0f64, seed in any::<u64>()) {
        let grid = GridSpec::desk();
        let coords = distinct_coords(&grid, n, seed);
        let mut tape = Tape::new();
        let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let [fv, gv, mv] = [f, g, mix].map(|d| tape.leaf(Tensor::new(&[c, n], d).unwrap()));
        let [fi, gi, mi] = [fv, gv, mv].map(|v| scatter_to_pseudo_image(&mut tape, v, &coords, &grid).unwrap());
        let (fi, gi, mi) = (tape.value(fi).data(), tape.value(gi).data(), tape.value(mi).data());
        for k in 0..mi.len() {
            prop_assert!((mi[k] - (a * fi[k] + b * gi[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_softmax_ignores_row_shifts_and_column_order(
        (n, m, data) in (1usize..5, 2usize..12).prop_flat_map(|(n, m)| (Just(n), Just(m), matrix(n, m))),
        shift in -50.0..50.0f64,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let k = (m / 2).max(1);
        let mut tape = Tape::new();
        let base = tape.leaf(Tensor::new(&[n, m], data.clone()).unwrap());
        let (p0, i0) = topk_softmax(&mut tape, base, k).unwrap();

        let shifted = tape.leaf(Tensor::new(&[n, m], data.iter().map(|v| v + shift).collect()).unwrap());
        let (p1, i1) = topk_softmax(&mut tape, shifted, k).unwrap();
        prop_assert_eq!(&i0, &i1);
        for (a, b) in tape.value(p0).data().iter().zip(tape.value(p1).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        // continuous random data has no ties, so a column permutation only relabels indices
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<f64> = (0..n).flat_map(|r| perm.iter().map(move |&j| (r, j))).map(|(r, j)| data[r * m + j]).collect();
        let pv = tape.leaf(Tensor::new(&[n, m], permuted).unwrap());
        let (p2, i2) = topk_softmax(&mut tape, pv, k).unwrap();
        let relabeled: Vec<usize> = i2.iter().map(|&j| perm[j]).collect();
        prop_assert_eq!(&i0, &relabeled);
        for (a, b) in tape.value(p0).data().iter().zip(tape.value(p2).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_read_stays_in_item_envelope(n in 1usize..10, k in 1usize..6, seed in any::<u64>()) {
        let (c, t) = (4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bank = init_memory(&mut store, t, c, &mut rng).unwrap();
        let items = store.tensor(bank.items).data().to_vec();
        let f_vox = Tensor::glorot(&[c, n], &mut rng);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store);
        let mut f = Fwd::new(&mut tape, &mut binder, Mode::Eval);
        let x = f.tape.leaf(f_vox);
        let read = memory_read(&mut f, &bank, x, k, None).unwrap();
        let g = tape.value(read.g_mem).data();
        for col in 0..n {
            let picked = &read.indices[col * k..(col + 1) * k];
            for ch in 0..c {
                let vals = picked.iter().map(|&i| items[i * c + ch]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                let v = g[ch * n + col];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn refined_features_between_one_and_two_times(
        (c, h, w, feats, logits) in (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            (Just(c), Just(h), Just(w), prop::collection::vec(0.0..5.0f64, c * h * w), prop::collection::vec(0.0..1.0f64, h * w))
        }),
    ) {
        let mut tape = Tape::new();
        let fv = tape.leaf(Tensor::new(&[c, h, w], feats.clone()).unwrap());
        let av = tape.leaf(Tensor::new(&[1, h, w], logits).unwrap());
        let out = amfm_refine(&mut tape, fv, av).unwrap();
        for (o, f) in tape.value(out).data().iter().zip(&feats) {
            prop_assert!(*o >= *f && *o <= 2.0 * f);
        }
    }
}

#[test]
fn memory_loss_gradient_is_a_unit_vector() {
    let mut tape = Tape::new();
    let g_pts = tape.leaf(Tensor::new(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 2.0, 0.0]).unwrap());
    let g_mem = tape.leaf(Tensor::new(&[3, 2], vec![0.0, 0.0, 0.0, 0.0, 0.0, 3.0]).unwrap());
    let loss = memory_loss(&mut tape, g_pts, g_mem).unwrap();
    // column 0 differs by (1, 2, 2), column 1 by (0, 0, -3)
    assert!((tape.value(loss).data()[0] - 6.0).abs() < 1e-12);
    let grads = tape.backward(loss);
    let d = grads.get(g_mem).unwrap();
    let want = [-1.0 / 3.0, 0.0, -2.0 / 3.0, 0.0, -2.0 / 3.0, 1.0];
    for (a, b) in d.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{d:?}");
    }
}

#[test]
fn correlation_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[3, 2]));
    let b = tape.leaf(Tensor::zeros(&[4, 5]));
    assert!(correlation(&mut tape, a, b).is_err());
}
