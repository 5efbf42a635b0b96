//! The assembled detector: encoders, fusion, memory, backbone and head.

use std::sync::atomic::Ordering;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    amfm_forward, backbone_forward, compute_scale_descriptors, fuse_multiscale, scale_feature_map,
    Amfm, AmfmMode, Backbone,
};
use crate::config::{PointSource, RunConfig, TrainImage};
use crate::difftensor::{ParamBinder, ParamStore, Tape, Tensor, Var};
use crate::encoder::{
    aggregate, build_voxel_point_image, correlation, point_stream_forward, tiny_pointnet_forward,
    topk_softmax, PointStream, StreamCounters, TinyPointNet,
};
use crate::error::Result;
use crate::geometry::Box3d;
use crate::head::{
    generate_anchors, head_losses, match_anchors, predict, total_loss_var, DetectionHead, ScoredBox,
};
use crate::memory::{build_voxel_memory_image, init_memory, memory_loss, memory_read, MemoryBank};
use crate::nn::{Fwd, Mode};
use crate::pillars::{
    packed_point_features, scatter_to_pseudo_image, voxelize, GridSpec, PillarBatch, POINT_FEATURES,
};
use crate::scene::{GroundTruthBox, PointCloud};

/// Class trained and evaluated by the single-class head.
pub const TARGET_CLASS: &str = "Car";

/// Seed of the voxelization RNG used at inference.
const INFER_SEED: u64 = 0x5eed;

pub struct Detector {
    pub config: RunConfig,
    vfe: TinyPointNet,
    point_stream: Option<PointStream>,
    memory: Option<MemoryBank>,
    amfm: Amfm,
    backbone: Backbone,
    head: DetectionHead,
    pub anchors: Vec<Box3d>,
    pub counters: StreamCounters,
}

/// Which point-level source fills the lower half of the pseudo image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    /// Point stream + memory (training).
    Train,
    /// Memory only (inference).
    Infer,
}

/// Tape handles produced by one scene's forward pass.
pub struct SceneOutput {
    pub reg: Var,
    pub cls: Var,
    pub g_pts: Option<Var>,
    pub g_mem: Option<Var>,
    pub mem_loss: Option<Var>,
    pub num_pillars: usize,
}

/// Loss handles and plain values for one scene.
pub struct SceneLoss {
    pub total: Var,
    pub components: LossComponents,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub reg: f64,
    pub dir: f64,
    pub cls: f64,
    pub mem: f64,
    pub total: f64,
    pub num_pos: usize,
}

/// Zero pads `[C, H', W']` on the high side to extents divisible by 8.
fn pad_image(tape: &mut Tape, image: Var, grid: &GridSpec) -> Var {
    let (h, w, ph, pw) = (
        grid.rows(),
        grid.cols(),
        grid.image_rows(),
        grid.image_cols(),
    );
    if (h, w) == (ph, pw) {
        return image;
    }
    let c = tape.shape(image)[0];
    let flat = tape.reshape(image, &[c, h * w]);
    let cells: Vec<usize> = (0..h)
        .flat_map(|r| (0..w).map(move |col| r * pw + col))
        .collect();
    tape.scatter_cols(flat, &cells, &[c, ph, pw])
}

/// Drops head cells that only cover padding.
fn crop_head(tape: &mut Tape, out: Var, grid: &GridSpec) -> Var {
    let shape = tape.shape(out).to_vec();
    let (hh, wh) = (grid.head_rows(), grid.head_cols());
    if (shape[1], shape[2]) == (hh, wh) {
        return out;
    }
    let (sh, sw) = (shape[1], shape[2]);
    let idx: Vec<usize> = (0..shape[0])
        .flat_map(|ch| (0..hh).flat_map(move |r| (0..wh).map(move |col| (ch * sh + r) * sw + col)))
        .collect();
    tape.gather_flat(out, &idx, &[shape[0], hh, wh])
}

pub fn target_boxes(boxes: &[GroundTruthBox]) -> Vec<Box3d> {
    boxes
        .iter()
        .filter(|b| b.class == TARGET_CLASS)
        .map(|b| b.bbox)
        .collect()
}

impl Detector {
    /// Registers every parameter in `store`; names are stable across runs.
    pub fn new(config: &RunConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let c = m.channels;
        let vfe = TinyPointNet::new(store, "vfe", POINT_FEATURES, c, rng)?;
        let (point_stream, memory) = if m.hybrid {
            (
                Some(PointStream::new(store, "points", c, rng)?),
                Some(init_memory(store, m.memory_size, c, rng)?),
            )
        } else {
            (None, None)
        };
        let image_channels = if m.hybrid { 2 * c } else { c };
        let backbone = Backbone::new(store, "backbone", image_channels, c, m.backbone_depth, rng)?;
        let amfm = Amfm::new(store, "amfm", m.amfm, c, rng)?;
        let head = DetectionHead::new(store, "head", backbone.fused_channels(), rng)?;
        let anchors = generate_anchors(&config.grid, config.head.anchor_size, config.head.anchor_z);
        Ok(Detector {
            config: config.clone(),
            vfe,
            point_stream,
            memory,
            amfm,
            backbone,
            head,
            anchors,
            counters: StreamCounters::default(),
        })
    }

    pub fn voxelize(&self, cloud: &PointCloud, rng: &mut impl Rng) -> PillarBatch {
        let m = &self.config.model;
        voxelize(cloud, &self.config.grid, m.n_vox, m.max_pillars, rng)
    }

    fn point_input(&self, batch: &PillarBatch, cloud: &PointCloud) -> Vec<[f64; 4]> {
        match self.config.model.point_source {
            PointSource::Voxelized => batch.kept_points(),
            PointSource::Raw => cloud
                .points
                .iter()
                .filter(|p| self.config.grid.contains([p[0], p[1], p[2]]))
                .copied()
                .collect(),
        }
    }

    /// Forward pass for one voxelized scene.
    pub fn forward(
        &self,
        f: &mut Fwd,
        batch: &PillarBatch,
        cloud: &PointCloud,
        path: Path,
    ) -> Result<SceneOutput> {
        let grid = &self.config.grid;
        let m = &self.config.model;
        let c = m.channels;
        let n = batch.len();
        let packed = f.constant(packed_point_features(batch, grid));
        let f_vox = tiny_pointnet_forward(f, &self.vfe, packed, &batch.offsets())?;

        let mut g_pts = None;
        let mut g_mem = None;
        let mut mem_loss = None;
        let image = match (&self.memory, n) {
            (Some(_), 0) => f.constant(Tensor::zeros(&[2 * c, grid.rows(), grid.cols()])),
            (Some(bank), _) => {
                let readout = memory_read(f, bank, f_vox, m.k, Some(&self.counters))?;
                g_mem = Some(readout.g_mem);
                if path == Path::Train {
                    let stream = self
                        .point_stream
                        .as_ref()
                        .expect("hybrid model has a point stream");
                    let pts = self.point_input(batch, cloud);
                    self.counters.point_stream.fetch_add(1, Ordering::Relaxed);
                    let f_pts = point_stream_forward(f, stream, &pts, &m.point_stream)?;
                    self.counters
                        .point_correlation
                        .fetch_add(1, Ordering::Relaxed);
                    let corr = correlation(f.tape, f_vox, f_pts)?;
                    let k = m.k.min(pts.len());
                    let (probs, idx) = topk_softmax(f.tape, corr, k)?;
                    let g = aggregate(f.tape, f_pts, probs, &idx);
                    mem_loss = Some(memory_loss(f.tape, g, readout.g_mem)?);
                    g_pts = Some(g);
                }
                match (path, m.train_head_on) {
                    (Path::Train, TrainImage::VoxelPoint) => {
                        build_voxel_point_image(f.tape, f_vox, g_pts.unwrap(), &batch.coords, grid)?
                    }
                    _ => {
                        build_voxel_memory_image(f.tape, f_vox, readout.g_mem, &batch.coords, grid)?
                    }
                }
            }
            (None, _) => scatter_to_pseudo_image(f.tape, f_vox, &batch.coords, grid)?,
        };

        let image = pad_image(f.tape, image, grid);
        let levels = backbone_forward(f, &self.backbone, image)?;
        let scale_map = if self.amfm.mode == AmfmMode::Scale {
            let desc = compute_scale_descriptors(batch, m.sensor_origin);
            let map = scale_feature_map(f, &self.amfm, &desc, &batch.coords, grid)?;
            Some(pad_image(f.tape, map, grid))
        } else {
            None
        };
        let refined = amfm_forward(f, &self.amfm, &levels, scale_map)?;
        let fused = fuse_multiscale(f, &self.backbone, &refined)?;
        let (reg, cls) = self.head.forward(f, fused);
        let (reg, cls) = (crop_head(f.tape, reg, grid), crop_head(f.tape, cls, grid));
        Ok(SceneOutput {
            reg,
            cls,
            g_pts,
            g_mem,
            mem_loss,
            num_pillars: n,
        })
    }

    /// Training objective for one scene: weighted head losses plus memory
    /// alignment, normalized by the positive-anchor count.
    pub fn scene_loss(
        &self,
        tape: &mut Tape,
        out: &SceneOutput,
        gts: &[Box3d],
    ) -> Result<SceneLoss> {
        let h = &self.config.head;
        let targets = match_anchors(&self.anchors, gts, h.pos_threshold, h.neg_threshold);
        let losses = head_losses(tape, out.reg, out.cls, &self.anchors, gts, &targets, h)?;
        let total = total_loss_var(
            tape,
            [
                Some(losses.reg),
                Some(losses.dir),
                Some(losses.cls),
                out.mem_loss,
            ],
            targets.num_pos,
            h.lambdas,
        );
        let val = |v: Var| tape.value(v).data()[0];
        let components = LossComponents {
            reg: val(losses.reg),
            dir: val(losses.dir),
            cls: val(losses.cls),
            mem: out.mem_loss.map_or(0.0, val),
            total: val(total),
            num_pos: targets.num_pos,
        };
        Ok(SceneLoss { total, components })
    }

    /// Inference on one cloud: memory path only, running statistics.
    pub fn detect(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Vec<ScoredBox>> {
        let mut rng = ChaCha8Rng::seed_from_u64(INFER_SEED);
        let batch = self.voxelize(cloud, &mut rng);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(store);
        let mut f = Fwd::new(&mut tape, &mut binder, Mode::Eval);
        let out = self.forward(&mut f, &batch, cloud, Path::Infer)?;
        let (reg, cls) = (tape.value(out.reg), tape.value(out.cls));
        reg.check_finite("predict")?;
        cls.check_finite("predict")?;
        Ok(predict(reg, cls, &self.anchors, &self.config.head))
    }

    /// Mean per-pillar `|| g_pts - g_mem ||_2` over `scenes` (running statistics, no augmentation).
    pub fn alignment_gap(&self, store: &ParamStore, clouds: &[PointCloud]) -> Result<f64> {
        let mut total = 0.0;
        let mut pillars = 0usize;
        for cloud in clouds {
            let mut rng = ChaCha8Rng::seed_from_u64(INFER_SEED);
            let batch = self.voxelize(cloud, &mut rng);
            if batch.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(store);
            let mut f = Fwd::new(&mut tape, &mut binder, Mode::Eval);
            let out = self.forward(&mut f, &batch, cloud, Path::Train)?;
            if let Some(l) = out.mem_loss {
                total += tape.value(l).data()[0];
                pillars += out.num_pillars;
            }
        }
        Ok(if pillars == 0 {
            0.0
        } else {
            total / pillars as f64
        })
    }
}
