//! Registry of finite-difference checks covering every differentiable
//! building block of the detector, run on small randomized shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{
    amfm_attention, amfm_forward, amfm_refine, backbone_forward, downsample_scale_feature,
    fuse_multiscale, scale_feature_map, Amfm, AmfmMode, Backbone, SCALE_DESCRIPTOR,
};
use crate::config::RunConfig;
use crate::difftensor::{
    check_module_with, finite_difference_check_with, GradCheckOptions, GradReport, ParamBinder,
    ParamStore, Tape, Tensor, Var,
};
use crate::encoder::{
    aggregate, build_voxel_point_image, correlation, point_stream_forward, tiny_pointnet_forward,
    topk_softmax, PointStream, PointStreamConfig, TinyPointNet,
};
use crate::error::Result;
use crate::geometry::Box3d;
use crate::head::{
    generate_anchors, head_losses, match_anchors, total_loss_var, DetectionHead, HeadConfig,
    HEADINGS, REG_PER_ANCHOR,
};
use crate::memory::{init_memory, memory_loss, memory_read};
use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, Fwd, Linear, Mode};
use crate::pillars::{scatter_to_pseudo_image, GridSpec, POINT_FEATURES};

/// Sizes the checks are drawn around.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteShapes {
    pub channels: usize,
    pub k: usize,
    pub memory_size: usize,
}

impl SuiteShapes {
    pub fn from_config(config: &RunConfig) -> Self {
        SuiteShapes {
            channels: config.model.channels,
            k: config.model.k,
            memory_size: config.model.memory_size,
        }
    }
}

impl Default for SuiteShapes {
    fn default() -> Self {
        SuiteShapes::from_config(&RunConfig::desk())
    }
}

/// Options used by the suite: relative tolerance 1e-4, a handful of probes
/// per tensor so large modules stay cheap.
pub fn suite_options() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        tol: 1e-4,
        max_per_input: 6,
    }
}

type CaseFn = fn(&mut ChaCha8Rng, &SuiteShapes, &GradCheckOptions) -> Result<GradReport>;

pub struct GradCase {
    pub name: &'static str,
    run: CaseFn,
}

impl GradCase {
    pub fn run(
        &self,
        rng: &mut ChaCha8Rng,
        shapes: &SuiteShapes,
        options: &GradCheckOptions,
    ) -> Result<GradReport> {
        (self.run)(rng, shapes, options)
    }
}

pub fn registry() -> Vec<GradCase> {
    let cases: [(&'static str, CaseFn); 25] = [
        ("linear", case_linear),
        ("batch_norm", case_batch_norm),
        ("tiny_pointnet", case_tiny_pointnet),
        ("point_stream", case_point_stream),
        ("correlation", case_correlation),
        ("topk_softmax", case_topk_softmax),
        ("aggregate", case_aggregate),
        ("memory_read", case_memory_read),
        ("memory_loss", case_memory_loss),
        ("scatter_to_pseudo_image", case_scatter),
        ("voxel_point_image", case_voxel_point_image),
        ("conv2d", case_conv2d),
        ("conv_transpose2d", case_conv_transpose),
        ("backbone", case_backbone),
        ("fuse_multiscale", case_fuse),
        ("scale_feature_map", case_scale_map),
        ("downsample_scale_feature", case_downsample),
        ("amfm_attention", case_attention),
        ("amfm_refine", case_refine),
        ("amfm_forward", case_amfm_forward),
        ("detection_head", case_head),
        ("loss.reg", case_loss_reg),
        ("loss.dir", case_loss_dir),
        ("loss.cls", case_loss_cls),
        ("loss.total", case_loss_total),
    ];
    cases
        .into_iter()
        .map(|(name, run)| GradCase { name, run })
        .collect()
}

/// Runs every registered check; case `i` draws from stream `i` of `seed`.
pub fn run_gradcheck(
    seed: u64,
    shapes: &SuiteShapes,
    options: &GradCheckOptions,
) -> Result<Vec<GradReport>> {
    registry()
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let report = case.run(&mut rng, shapes, options)?;
            log::info!(
                "{}: rel {:.2e} abs {:.2e} {}",
                report.op_name,
                report.max_rel_error,
                report.max_abs_error,
                if report.passed { "ok" } else { "FAIL" }
            );
            Ok(report)
        })
        .collect()
}

/// A deliberately wrong gradient: `sum(x * detach(x))` reports `x` where
/// the true derivative is `2x`. The checker must flag it.
pub fn broken_gradient_fixture(options: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = randn(&mut rng, &[4, 3]);
    finite_difference_check_with(
        "broken_gradient",
        |tape, v| {
            let frozen = tape.constant(tape.value(v[0]).clone());
            let y = tape.mul(v[0], frozen);
            tape.sum(y)
        },
        &[x],
        options,
    )
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Random weighted sum of every element of `out`; the weights are a fixed
/// function of `seed` so every re-evaluation sees the same scalarization.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = randn(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = tape.constant(w);
    let y = tape.mul(out, w);
    tape.sum(y)
}

fn check<F>(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    options: &GradCheckOptions,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Fwd, &[Var]) -> Result<Var>,
{
    check_module_with(
        name,
        store,
        inputs,
        options,
        |tape: &mut Tape, binder: &mut ParamBinder<'_>, vars: &[Var]| {
            let mut fwd = Fwd::new(tape, binder, Mode::Train);
            let out = f(&mut fwd, vars).expect("gradient-check forward");
            weighted(fwd.tape, out, 0x5ca1a5)
        },
    )
}

/// `count` distinct cells of a `rows x cols` grid in random order.
fn distinct_coords(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    count: usize,
) -> Vec<(usize, usize)> {
    rand::seq::index::sample(rng, rows * cols, count)
        .into_iter()
        .map(|c| (c / cols, c % cols))
        .collect()
}

fn small_grid(rows: usize, cols: usize) -> GridSpec {
    GridSpec {
        x_range: [0.0, cols as f64 * 0.32],
        y_range: [0.0, rows as f64 * 0.32],
        z_range: [-3.0, 1.0],
        voxel: [0.32, 0.32, 4.0],
    }
}

fn case_linear(rng: &mut ChaCha8Rng, s: &SuiteShapes, o: &GradCheckOptions) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", s.channels, s.channels, true, rng)?;
    let cols = rng.random_range(4..16);
    let x = randn(rng, &[s.channels, cols]);
    check("linear", &store, &[x], o, |f, v| Ok(lin.forward(f, v[0])))
}

fn case_batch_norm(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", s.channels)?;
    let cols = rng.random_range(4..16);
    let x = randn(rng, &[s.channels, cols]);
    check(
        "batch_norm",
        &store,
        &[x],
        o,
        |f, v| Ok(bn.forward(f, v[0])),
    )
}

fn case_tiny_pointnet(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let net = TinyPointNet::new(&mut store, "vfe", POINT_FEATURES, s.channels, rng)?;
    let mut offsets = vec![0];
    for _ in 0..rng.random_range(3..8) {
        offsets.push(offsets.last().unwrap() + rng.random_range(1..6));
    }
    let x = randn(rng, &[POINT_FEATURES, *offsets.last().unwrap()]);
    check("tiny_pointnet", &store, &[x], o, |f, v| {
        tiny_pointnet_forward(f, &net, v[0], &offsets)
    })
}

fn case_point_stream(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let net = PointStream::new(&mut store, "points", s.channels, rng)?;
    // enough points that the second SA level has several groups to normalize over
    let m = rng.random_range(128..192);
    let points: Vec<[f64; 4]> = (0..m)
        .map(|_| {
            [
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
                rng.random_range(-1.0..0.0),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let cfg = PointStreamConfig::default();
    check("point_stream", &store, &[], o, |f, _| {
        point_stream_forward(f, &net, &points, &cfg)
    })
}

fn case_correlation(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let n_vox = rng.random_range(3..10);
    let a = randn(rng, &[s.channels, n_vox]);
    let n_pts = rng.random_range(3..10);
    let b = randn(rng, &[s.channels, n_pts]);
    check("correlation", &ParamStore::new(), &[a, b], o, |f, v| {
        correlation(f.tape, v[0], v[1])
    })
}

fn case_topk_softmax(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let m = rng.random_range(s.k + 1..3 * s.k + 2);
    let rows = rng.random_range(3..8);
    let corr = randn(rng, &[rows, m]);
    check("topk_softmax", &ParamStore::new(), &[corr], o, |f, v| {
        Ok(topk_softmax(f.tape, v[0], s.k)?.0)
    })
}

fn case_aggregate(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let (n, m, k) = (
        rng.random_range(3..8),
        rng.random_range(s.k..2 * s.k + 1),
        s.k,
    );
    let feats = randn(rng, &[s.channels, m]);
    let probs = randn(rng, &[n, k]);
    let idx: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..m)).collect();
    check(
        "aggregate",
        &ParamStore::new(),
        &[feats, probs],
        o,
        |f, v| Ok(aggregate(f.tape, v[0], v[1], &idx)),
    )
}

fn case_memory_read(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let bank = init_memory(&mut store, s.memory_size, s.channels, rng)?;
    let pillars = rng.random_range(3..8);
    let f_vox = randn(rng, &[s.channels, pillars]);
    check("memory_read", &store, &[f_vox], o, |f, v| {
        Ok(memory_read(f, &bank, v[0], s.k, None)?.g_mem)
    })
}

fn case_memory_loss(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let n = rng.random_range(3..10);
    let a = randn(rng, &[s.channels, n]);
    let b = randn(rng, &[s.channels, n]);
    check("memory_loss", &ParamStore::new(), &[a, b], o, |f, v| {
        memory_loss(f.tape, v[0], v[1])
    })
}

fn case_scatter(rng: &mut ChaCha8Rng, s: &SuiteShapes, o: &GradCheckOptions) -> Result<GradReport> {
    let grid = small_grid(8, 8);
    let count = rng.random_range(3..20);
    let coords = distinct_coords(rng, 8, 8, count);
    let x = randn(rng, &[s.channels, coords.len()]);
    check(
        "scatter_to_pseudo_image",
        &ParamStore::new(),
        &[x],
        o,
        |f, v| scatter_to_pseudo_image(f.tape, v[0], &coords, &grid),
    )
}

fn case_voxel_point_image(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let grid = small_grid(8, 8);
    let count = rng.random_range(3..20);
    let coords = distinct_coords(rng, 8, 8, count);
    let a = randn(rng, &[s.channels, coords.len()]);
    let b = randn(rng, &[s.channels, coords.len()]);
    check(
        "voxel_point_image",
        &ParamStore::new(),
        &[a, b],
        o,
        |f, v| build_voxel_point_image(f.tape, v[0], v[1], &coords, &grid),
    )
}

fn case_conv2d(rng: &mut ChaCha8Rng, s: &SuiteShapes, o: &GradCheckOptions) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let stride = rng.random_range(1..=2);
    let conv = Conv2d::new(
        &mut store, "conv", s.channels, s.channels, 3, stride, 1, true, rng,
    )?;
    let x = randn(rng, &[s.channels, 8, 8]);
    check("conv2d", &store, &[x], o, |f, v| Ok(conv.forward(f, v[0])))
}

fn case_conv_transpose(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let stride = 1 << rng.random_range(0..3);
    let up = ConvTranspose2d::new(&mut store, "up", s.channels, s.channels, stride, rng)?;
    let x = randn(rng, &[s.channels, 4, 4]);
    check("conv_transpose2d", &store, &[x], o, |f, v| {
        Ok(up.forward(f, v[0]))
    })
}

fn case_backbone(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "backbone", 2 * s.channels, s.channels, 2, rng)?;
    // desk-sized image so the stride-8 level still normalizes over 16 cells
    let side = RunConfig::desk().grid.rows();
    let x = randn(rng, &[2 * s.channels, side, side]);
    check("backbone", &store, &[x], o, |f, v| {
        let levels = backbone_forward(f, &bb, v[0])?;
        fuse_multiscale(f, &bb, &levels)
    })
}

fn case_fuse(rng: &mut ChaCha8Rng, s: &SuiteShapes, o: &GradCheckOptions) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "backbone", s.channels, s.channels, 1, rng)?;
    let c = s.channels;
    let levels = [
        randn(rng, &[c, 8, 8]),
        randn(rng, &[2 * c, 4, 4]),
        randn(rng, &[4 * c, 2, 2]),
    ];
    check("fuse_multiscale", &store, &levels, o, |f, v| {
        fuse_multiscale(f, &bb, v)
    })
}

fn random_descriptors(rng: &mut impl Rng, n: usize) -> Vec<[f64; SCALE_DESCRIPTOR]> {
    (0..n)
        .map(|_| {
            let (x, y, z): (f64, f64, f64) = (
                rng.random_range(0.0..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..0.0),
            );
            [
                rng.random_range(1.0..16.0),
                x,
                y,
                z,
                (x * x + y * y + z * z).sqrt(),
            ]
        })
        .collect()
}

fn case_scale_map(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let amfm = Amfm::new(&mut store, "amfm", AmfmMode::Scale, s.channels, rng)?;
    let grid = small_grid(8, 8);
    let count = rng.random_range(3..20);
    let coords = distinct_coords(rng, 8, 8, count);
    let desc = random_descriptors(rng, coords.len());
    check("scale_feature_map", &store, &[], o, |f, _| {
        scale_feature_map(f, &amfm, &desc, &coords, &grid)
    })
}

fn case_downsample(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let amfm = Amfm::new(&mut store, "amfm", AmfmMode::Scale, s.channels, rng)?;
    let level = rng.random_range(0..3);
    let map = randn(rng, &[s.channels, 16, 16]);
    let side = 16 >> (level + 1);
    check("downsample_scale_feature", &store, &[map], o, |f, v| {
        downsample_scale_feature(f, &amfm, v[0], level, &[side, side])
    })
}

fn case_attention(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "attention", 2, 1, 7, 1, 3, true, rng)?;
    let x = randn(rng, &[s.channels, 8, 8]);
    check("amfm_attention", &store, &[x], o, |f, v| {
        Ok(amfm_attention(f, &conv, v[0]))
    })
}

fn case_refine(rng: &mut ChaCha8Rng, s: &SuiteShapes, o: &GradCheckOptions) -> Result<GradReport> {
    let x = randn(rng, &[s.channels, 6, 6]);
    let a = randn(rng, &[1, 6, 6]);
    check("amfm_refine", &ParamStore::new(), &[x, a], o, |f, v| {
        amfm_refine(f.tape, v[0], v[1])
    })
}

fn case_amfm_forward(
    rng: &mut ChaCha8Rng,
    s: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let amfm = Amfm::new(&mut store, "amfm", AmfmMode::Scale, s.channels, rng)?;
    let c = s.channels;
    let inputs = [
        randn(rng, &[c, 8, 8]),
        randn(rng, &[2 * c, 4, 4]),
        randn(rng, &[4 * c, 2, 2]),
        randn(rng, &[c, 16, 16]),
    ];
    check("amfm_forward", &store, &inputs, o, |f, v| {
        let refined = amfm_forward(f, &amfm, &v[..3], Some(v[3]))?;
        let mut acc = f.tape.sum(refined[0]);
        for &r in &refined[1..] {
            let w = weighted(f.tape, r, 7);
            acc = f.tape.add(acc, w);
        }
        Ok(acc)
    })
}

fn case_head(rng: &mut ChaCha8Rng, s: &SuiteShapes, o: &GradCheckOptions) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let head = DetectionHead::new(&mut store, "head", 6 * s.channels, rng)?;
    let x = randn(rng, &[6 * s.channels, 4, 4]);
    check("detection_head", &store, &[x], o, |f, v| {
        let (reg, cls) = head.forward(f, v[0]);
        let r = weighted(f.tape, reg, 1);
        let c = weighted(f.tape, cls, 2);
        Ok(f.tape.add(r, c))
    })
}

/// Head outputs on a 4x4 head grid with two ground truths near anchors.
struct LossFixture {
    anchors: Vec<Box3d>,
    gts: Vec<Box3d>,
    reg: Tensor,
    cls: Tensor,
}

fn loss_fixture(rng: &mut ChaCha8Rng) -> LossFixture {
    let grid = GridSpec {
        x_range: [0.0, 10.24],
        y_range: [0.0, 10.24],
        z_range: [-3.0, 1.0],
        voxel: [1.28, 1.28, 4.0],
    };
    let cfg = HeadConfig::default();
    let anchors = generate_anchors(&grid, cfg.anchor_size, cfg.anchor_z);
    let gts = (0..2)
        .map(|i| {
            let a = anchors[rng.random_range(0..anchors.len() / 2) * 2 + i];
            Box3d::new(
                a.center[0] + rng.random_range(-0.2..0.2),
                a.center[1] + rng.random_range(-0.2..0.2),
                a.center[2] + rng.random_range(-0.1..0.1),
                a.size[0] * rng.random_range(0.9..1.1),
                a.size[1] * rng.random_range(0.9..1.1),
                a.size[2] * rng.random_range(0.9..1.1),
                a.heading
                    + rng.random_range(-0.2..0.2)
                    + if rng.random_bool(0.5) {
                        std::f64::consts::PI
                    } else {
                        0.0
                    },
            )
        })
        .collect();
    let (hh, wh) = (grid.head_rows(), grid.head_cols());
    LossFixture {
        anchors,
        gts,
        reg: randn(rng, &[HEADINGS * REG_PER_ANCHOR, hh, wh]),
        cls: randn(rng, &[HEADINGS, hh, wh]),
    }
}

fn loss_case(
    rng: &mut ChaCha8Rng,
    o: &GradCheckOptions,
    name: &str,
    pick: usize,
) -> Result<GradReport> {
    let fx = loss_fixture(rng);
    let cfg = HeadConfig::default();
    let targets = match_anchors(&fx.anchors, &fx.gts, cfg.pos_threshold, cfg.neg_threshold);
    let inputs = [fx.reg.clone(), fx.cls.clone(), randn(rng, &[1])];
    // only a few entries touch a positive anchor; sparse probes would miss them
    let o = &GradCheckOptions {
        max_per_input: usize::MAX,
        ..*o
    };
    finite_difference_check_with(
        name,
        |tape, v| {
            let l = head_losses(tape, v[0], v[1], &fx.anchors, &fx.gts, &targets, &cfg)
                .expect("loss fixture is consistent");
            match pick {
                0 => l.reg,
                1 => l.dir,
                2 => l.cls,
                _ => {
                    let mem = tape.mul(v[2], v[2]);
                    let mem = tape.sum(mem);
                    total_loss_var(
                        tape,
                        [Some(l.reg), Some(l.dir), Some(l.cls), Some(mem)],
                        targets.num_pos,
                        cfg.lambdas,
                    )
                }
            }
        },
        &inputs,
        o,
    )
}

fn case_loss_reg(
    rng: &mut ChaCha8Rng,
    _: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    loss_case(rng, o, "loss.reg", 0)
}

fn case_loss_dir(
    rng: &mut ChaCha8Rng,
    _: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    loss_case(rng, o, "loss.dir", 1)
}

fn case_loss_cls(
    rng: &mut ChaCha8Rng,
    _: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    loss_case(rng, o, "loss.cls", 2)
}

fn case_loss_total(
    rng: &mut ChaCha8Rng,
    _: &SuiteShapes,
    o: &GradCheckOptions,
) -> Result<GradReport> {
    loss_case(rng, o, "loss.total", 3)
}
