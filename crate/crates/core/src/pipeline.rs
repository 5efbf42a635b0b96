//! Training, inference and evaluation runs, datasets on disk, and the
//! metrics log.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig, SynthJob};
use crate::difftensor::checkpoint::{decode, encode};
use crate::difftensor::{
    adam_step, cosine_lr, AdamConfig, AdamState, ParamBinder, ParamStore, Tape,
};
use crate::error::{HvprError, Result};
use crate::eval::{evaluate, Detection, EvalReport, IouKind};
use crate::head::ScoredBox;
use crate::model::{target_boxes, Detector, LossComponents, Path};
use crate::nn::{apply_bn_updates, Fwd, Mode};
use crate::scene::{
    augment_scene, boxes_to_kitti_labels, generate_synthetic_scene, kitti_label_to_lidar_boxes,
    parse_calib, parse_velodyne_bin, serialize_velodyne, CalibMatrices, SampleBank, Scene,
};

pub const METRICS_SCHEMA: u32 = 1;
/// BEV IoU needed for a true positive.
pub const EVAL_IOU: f64 = 0.7;

/// RNG streams split from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_VOXEL: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema: u32,
    pub step: usize,
    pub lr: f64,
    pub reg: f64,
    pub dir: f64,
    pub cls: f64,
    pub mem: f64,
    pub total: f64,
    pub num_pos: usize,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub optimizer: AdamState,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode(
            &self.store,
            Some(&self.optimizer),
            Some(&self.detector.config.to_toml()),
        )
    }
}

fn data_err(path: &FsPath, e: std::io::Error) -> HvprError {
    HvprError::io(path, e)
}

/// Scene ids found under `dir/velodyne`, sorted.
fn kitti_ids(dir: &FsPath) -> Result<Vec<String>> {
    let vel = dir.join("velodyne");
    let mut ids: Vec<String> = fs::read_dir(&vel)
        .map_err(|e| data_err(&vel, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "bin" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    Ok(ids)
}

fn read_text(path: &FsPath) -> Result<String> {
    fs::read_to_string(path).map_err(|e| data_err(path, e))
}

/// Loads `velodyne/`, `label_2/` and `calib/` of a KITTI-layout directory.
pub fn load_kitti_dir(dir: &FsPath) -> Result<Vec<Scene>> {
    kitti_ids(dir)?
        .into_iter()
        .map(|id| {
            let bin = dir.join("velodyne").join(format!("{id}.bin"));
            let bytes = fs::read(&bin).map_err(|e| data_err(&bin, e))?;
            let cloud = parse_velodyne_bin(&bytes)?;
            let calib = parse_calib(&read_text(&dir.join("calib").join(format!("{id}.txt")))?)?;
            let labels = read_text(&dir.join("label_2").join(format!("{id}.txt")))?;
            let boxes = kitti_label_to_lidar_boxes(&labels, &calib)?;
            Ok(Scene { id, cloud, boxes })
        })
        .collect()
}

/// Synthetic scenes `0..num`; scene `i` uses seed `spec.seed + i`.
pub fn synthetic_scenes(job: &SynthJob) -> Result<Vec<Scene>> {
    (0..job.num_scenes)
        .map(|i| {
            let spec = crate::scene::SceneSpec {
                seed: job.scene.seed.wrapping_add(i as u64),
                ..job.scene.clone()
            };
            let (cloud, boxes) = generate_synthetic_scene(&spec)?;
            Ok(Scene {
                id: format!("{i:06}"),
                cloud,
                boxes,
            })
        })
        .collect()
}

pub fn load_scenes(data: &DataSource) -> Result<Vec<Scene>> {
    match data {
        DataSource::Synthetic { num_scenes, scene } => synthetic_scenes(&SynthJob {
            num_scenes: *num_scenes,
            scene: scene.clone(),
        }),
        DataSource::Kitti { dir } => load_kitti_dir(dir),
    }
}

/// Writes scenes in KITTI layout with an axis-swap calibration.
pub fn write_kitti_dir(dir: &FsPath, scenes: &[Scene]) -> Result<()> {
    let calib = CalibMatrices::axis_swap();
    for sub in ["velodyne", "label_2", "calib"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| data_err(&p, e))?;
    }
    for s in scenes {
        let write =
            |path: PathBuf, bytes: &[u8]| fs::write(&path, bytes).map_err(|e| data_err(&path, e));
        write(
            dir.join("velodyne").join(format!("{}.bin", s.id)),
            &serialize_velodyne(&s.cloud),
        )?;
        write(
            dir.join("label_2").join(format!("{}.txt", s.id)),
            boxes_to_kitti_labels(&s.boxes, &calib).as_bytes(),
        )?;
        write(
            dir.join("calib").join(format!("{}.txt", s.id)),
            calib.to_text().as_bytes(),
        )?;
    }
    Ok(())
}

fn total_steps(config: &RunConfig, num_scenes: usize) -> usize {
    let per_epoch = num_scenes.div_ceil(config.optim.batch_size).max(1);
    config
        .optim
        .max_steps
        .unwrap_or(config.optim.epochs * per_epoch)
}

/// Trains on `config.data`, writing the metrics log and checkpoints to
/// `out_dir` when given.
pub fn run_train(config: &RunConfig, out_dir: Option<&FsPath>) -> Result<TrainOutcome> {
    config.validate()?;
    let scenes = load_scenes(&config.data)?;
    train_on_scenes(config, &scenes, out_dir)
}

/// The training loop proper; everything random is drawn from streams of `config.seed`.
pub fn train_on_scenes(
    config: &RunConfig,
    scenes: &[Scene],
    out_dir: Option<&FsPath>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(HvprError::InvalidArgument("no training scenes".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((fs::File::create(&p).map_err(|e| data_err(&p, e))?, p))
        }
        None => None,
    };

    let mut store = ParamStore::new();
    let detector = Detector::new(config, &mut store, &mut stream(config.seed, STREAM_INIT))?;
    let mut optimizer = AdamState::new(&store);
    let adam = AdamConfig {
        weight_decay: config.optim.weight_decay,
        ..AdamConfig::default()
    };
    let bank = if config.augment.paste_count > 0 {
        SampleBank::from_scenes(scenes)
    } else {
        SampleBank::default()
    };
    let mut order_rng = stream(config.seed, STREAM_ORDER);
    let mut aug_rng = stream(config.seed, STREAM_AUGMENT);
    let mut vox_rng = stream(config.seed, STREAM_VOXEL);

    let steps = total_steps(config, scenes.len());
    let batch_size = config.optim.batch_size.min(scenes.len());
    let mut queue: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut picks = Vec::with_capacity(batch_size);
        while picks.len() < batch_size {
            if queue.is_empty() {
                queue = (0..scenes.len()).collect();
                queue.shuffle(&mut order_rng);
                queue.reverse();
            }
            picks.push(queue.pop().unwrap());
        }

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store);
        let mut f = Fwd::new(&mut tape, &mut binder, Mode::Train);
        let mut sum = LossComponents::default();
        let mut loss = None;
        for &i in &picks {
            let s = &scenes[i];
            let (cloud, boxes) =
                augment_scene(&s.cloud, &s.boxes, &config.augment, &bank, &mut aug_rng);
            let batch = detector.voxelize(&cloud, &mut vox_rng);
            let out = detector.forward(&mut f, &batch, &cloud, Path::Train)?;
            let l = detector.scene_loss(f.tape, &out, &target_boxes(&boxes))?;
            let c = l.components;
            sum.reg += c.reg;
            sum.dir += c.dir;
            sum.cls += c.cls;
            sum.mem += c.mem;
            sum.num_pos += c.num_pos;
            loss = Some(match loss {
                Some(acc) => f.tape.add(acc, l.total),
                None => l.total,
            });
        }
        let bn_updates = f.take_bn_updates();
        let loss = tape.scale(loss.expect("non-empty batch"), 1.0 / picks.len() as f64);
        let total = tape.value(loss).data()[0];
        if !total.is_finite() {
            return Err(HvprError::NumericFailure {
                op: format!("training loss at step {}", step + 1),
            });
        }
        let grads = tape.backward(loss);
        let owned: Vec<_> = tape
            .param_grads(&grads)
            .map(|(id, g)| (id, g.to_vec()))
            .collect();
        drop(binder);
        store.zero_grads();
        for (id, g) in &owned {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(HvprError::NumericFailure {
                    op: format!("gradient of {} at step {}", store.get(*id).name, step + 1),
                });
            }
            store.accumulate_grad(*id, g);
        }
        // parameters off this step's graph (e.g. memory with no occupied pillars)
        for p in store.iter_mut() {
            if p.tensor.requires_grad && p.tensor.grad.is_none() {
                p.tensor.grad = Some(vec![0.0; p.tensor.numel()]);
            }
        }
        let lr = cosine_lr(step, steps, config.optim.lr, config.optim.lr_min)?;
        adam_step(&mut store, &mut optimizer, lr, &adam)?;
        apply_bn_updates(&mut store, &tape, &bn_updates);

        let n = picks.len() as f64;
        let record = StepRecord {
            schema: METRICS_SCHEMA,
            step: step + 1,
            lr,
            reg: sum.reg / n,
            dir: sum.dir / n,
            cls: sum.cls / n,
            mem: sum.mem / n,
            total,
            num_pos: sum.num_pos,
        };
        log::debug!("{}", record.to_line());
        if let Some((file, path)) = log.as_mut() {
            writeln!(file, "{}", record.to_line()).map_err(|e| data_err(path, e))?;
        }
        records.push(record);
        let every = config.optim.checkpoint_every;
        if let (Some(dir), true) = (
            out_dir,
            every > 0 && (step + 1) % every == 0 && step + 1 < steps,
        ) {
            let p = dir.join(format!("step_{:06}.ckpt", step + 1));
            let bytes = encode(&store, Some(&optimizer), Some(&config.to_toml()));
            fs::write(&p, bytes).map_err(|e| data_err(&p, e))?;
        }
    }
    let outcome = TrainOutcome {
        detector,
        store,
        optimizer,
        records,
    };
    if let Some(dir) = out_dir {
        let p = dir.join("final.ckpt");
        fs::write(&p, outcome.checkpoint_bytes()).map_err(|e| data_err(&p, e))?;
    }
    Ok(outcome)
}

/// Rebuilds the detector described by a checkpoint's embedded config.
pub fn load_detector(bytes: &[u8]) -> Result<(Detector, ParamStore)> {
    let ckpt = decode(bytes)?;
    let text = ckpt
        .config
        .as_deref()
        .ok_or_else(|| HvprError::Checkpoint("checkpoint carries no config".into()))?;
    let config = RunConfig::from_toml(text)?;
    let mut store = ParamStore::new();
    let detector = Detector::new(&config, &mut store, &mut stream(config.seed, STREAM_INIT))?;
    ckpt.load_into(&mut store)?;
    Ok((detector, store))
}

pub fn run_infer(bytes: &[u8], cloud: &crate::scene::PointCloud) -> Result<Vec<ScoredBox>> {
    let (detector, store) = load_detector(bytes)?;
    let boxes = detector.detect(&store, cloud)?;
    assert_eq!(
        detector.counters.point_stream_calls(),
        0,
        "inference touched the point stream"
    );
    Ok(boxes)
}

/// Runs inference over `scenes` and scores the detections at BEV IoU 0.7.
pub fn evaluate_detector(
    detector: &Detector,
    store: &ParamStore,
    scenes: &[Scene],
) -> Result<EvalReport> {
    let mut dets = Vec::new();
    let mut gts = HashMap::new();
    for s in scenes {
        for b in detector.detect(store, &s.cloud)? {
            dets.push(Detection {
                scene: s.id.clone(),
                bbox: b.bbox,
                score: b.score,
            });
        }
        gts.insert(s.id.clone(), target_boxes(&s.boxes));
    }
    Ok(evaluate(
        &dets,
        &gts,
        EVAL_IOU,
        IouKind::Bev,
        crate::model::TARGET_CLASS,
    ))
}

pub fn run_eval(bytes: &[u8], data_dir: &FsPath) -> Result<EvalReport> {
    let (detector, store) = load_detector(bytes)?;
    let scenes = load_kitti_dir(data_dir)?;
    evaluate_detector(&detector, &store, &scenes)
}
