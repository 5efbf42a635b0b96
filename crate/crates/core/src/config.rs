//! Run configuration with full-scale and desk-scale profiles.
//!
//! A config file names a `profile` and overrides any subset of its fields:
//!
//! ```toml
//! profile = "desk"
//! seed = 7
//! [optim]
//! max_steps = 50
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::AmfmMode;
use crate::encoder::PointStreamConfig;
use crate::error::{HvprError, Result};
use crate::head::HeadConfig;
use crate::pillars::GridSpec;
use crate::scene::{AugmentConfig, SceneSpec};

/// Which voxel-level image feeds the detection head during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainImage {
    VoxelPoint,
    VoxelMemory,
}

/// Points given to the point stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    /// The points kept by voxelization.
    Voxelized,
    /// Every in-range point of the cloud.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels `C` of voxel, point and memory features.
    pub channels: usize,
    /// Top-K used for both point fusion and memory reads.
    pub k: usize,
    pub n_vox: usize,
    pub max_pillars: usize,
    /// Point stream during training and memory at inference; off means voxel features only.
    pub hybrid: bool,
    /// Memory items `T`.
    pub memory_size: usize,
    pub amfm: AmfmMode,
    pub backbone_depth: usize,
    pub train_head_on: TrainImage,
    pub point_source: PointSource,
    pub point_stream: PointStreamConfig,
    pub sensor_origin: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the number of optimizer steps regardless of `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthJob {
    pub num_scenes: usize,
    pub scene: SceneSpec,
}

impl SynthJob {
    /// `num_scenes` plus a `[scene]` table of generator settings.
    pub fn from_toml(text: &str) -> Result<Self> {
        let job: SynthJob = toml::from_str(text).map_err(|e| HvprError::Config(e.to_string()))?;
        job.scene.validate()?;
        Ok(job)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth job serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { num_scenes: usize, scene: SceneSpec },
    Kitti { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub data: DataSource,
}

impl RunConfig {
    /// Full-range KITTI-scale settings.
    pub fn full() -> Self {
        RunConfig {
            profile: "full".into(),
            seed: 0,
            grid: GridSpec::full(),
            model: ModelConfig {
                channels: 64,
                k: 20,
                n_vox: 32,
                max_pillars: 12000,
                hybrid: true,
                memory_size: 2000,
                amfm: AmfmMode::Scale,
                backbone_depth: 4,
                train_head_on: TrainImage::VoxelPoint,
                point_source: PointSource::Voxelized,
                point_stream: PointStreamConfig::default(),
                sensor_origin: [0.0; 3],
            },
            head: HeadConfig::default(),
            augment: AugmentConfig {
                paste_count: 10,
                ..AugmentConfig::default()
            },
            optim: OptimConfig {
                lr: 3e-3,
                lr_min: 3e-6,
                weight_decay: 1e-2,
                epochs: 100,
                batch_size: 8,
                max_steps: None,
                checkpoint_every: 1000,
            },
            data: DataSource::Kitti {
                dir: PathBuf::from("data/kitti/training"),
            },
        }
    }

    /// Small grid and model that train in minutes on one core.
    pub fn desk() -> Self {
        let full = RunConfig::full();
        RunConfig {
            profile: "desk".into(),
            grid: GridSpec::desk(),
            model: ModelConfig {
                channels: 16,
                k: 8,
                n_vox: 16,
                max_pillars: 256,
                memory_size: 128,
                backbone_depth: 2,
                ..full.model
            },
            head: HeadConfig {
                anchor_z: -0.95,
                ..HeadConfig::default()
            },
            augment: AugmentConfig {
                rotation_range: [0.0, 0.0],
                paste_count: 0,
                ..AugmentConfig::default()
            },
            optim: OptimConfig {
                epochs: 20,
                batch_size: 2,
                checkpoint_every: 0,
                ..full.optim
            },
            data: DataSource::Synthetic {
                num_scenes: 8,
                scene: SceneSpec {
                    num_objects: 2,
                    ground_density: 0.5,
                    ..SceneSpec::default()
                },
            },
            ..full
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(RunConfig::full()),
            "desk" => Ok(RunConfig::desk()),
            other => Err(HvprError::Config(format!("unknown profile `{other}`"))),
        }
    }

    /// Parses a profile name plus overrides.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HvprError::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(HvprError::Config("`profile` must be a string".into())),
            None => "desk".to_string(),
        };
        let base = RunConfig::profile(&profile)?;
        let mut merged =
            toml::Table::try_from(&base).map_err(|e| HvprError::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| HvprError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(HvprError::Config(m));
        let m = &self.model;
        if m.channels == 0 || m.k == 0 || m.n_vox == 0 || m.max_pillars == 0 {
            return bad("channels, k, n_vox and max_pillars must be positive".into());
        }
        if m.hybrid && m.k > m.memory_size {
            return bad(format!("k = {} exceeds memory size {}", m.k, m.memory_size));
        }
        let h = &self.head;
        if !(0.0 < h.neg_threshold && h.neg_threshold <= h.pos_threshold && h.pos_threshold < 1.0) {
            return bad("need 0 < neg_threshold <= pos_threshold < 1".into());
        }
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0) {
            return bad("batch_size and lr must be positive".into());
        }
        if let DataSource::Synthetic { scene, .. } = &self.data {
            scene.validate()?;
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(b, &o) => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Switching an internally tagged table to another variant replaces it wholesale.
fn is_tagged(base: &toml::Table, over: &toml::Table) -> bool {
    matches!((base.get("kind"), over.get("kind")), (Some(a), Some(b)) if a != b)
}
