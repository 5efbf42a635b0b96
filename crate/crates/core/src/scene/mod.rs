//! Point clouds, ground-truth boxes, KITTI container parsing, synthetic scene
//! generation, and training-time augmentation.

pub mod augment;
pub mod kitti;
pub mod synth;
pub mod velodyne;

use serde::{Deserialize, Serialize};

use crate::geometry::Box3d;

pub use augment::{augment_scene, AugmentConfig, SampleBank};
pub use kitti::{boxes_to_kitti_labels, kitti_label_to_lidar_boxes, parse_calib, CalibMatrices};
pub use synth::{generate_synthetic_scene, SceneSpec};
pub use velodyne::{parse_velodyne_bin, serialize_velodyne};

/// LiDAR returns as `(x, y, z, reflectance)` in the sensor frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.points.iter().map(|p| [p[0], p[1], p[2]])
    }
}

/// Annotated object. `difficulty` passes through the label's occlusion tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: Box3d,
    pub class: String,
    pub difficulty: i32,
}

impl GroundTruthBox {
    pub fn car(bbox: Box3d) -> Self {
        GroundTruthBox {
            bbox,
            class: "Car".to_string(),
            difficulty: 0,
        }
    }
}

/// A cloud with its annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    pub boxes: Vec<GroundTruthBox>,
}
