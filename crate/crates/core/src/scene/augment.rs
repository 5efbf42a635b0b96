//! Training-time scene augmentation: ground-truth paste, flip, rotation and
//! global scaling.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{bev_intersection, normalize_angle};
use crate::scene::{GroundTruthBox, PointCloud, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    pub rotation_range: [f64; 2],
    /// Samples drawn from the bank per scene; rejected draws are not retried.
    pub paste_count: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            scale_range: [0.95, 1.05],
            rotation_range: [-FRAC_PI_4, FRAC_PI_4],
            paste_count: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            scale_range: [1.0, 1.0],
            rotation_range: [0.0, 0.0],
            paste_count: 0,
        }
    }
}

/// Annotated objects with their interior points, collected from training scenes.
#[derive(Debug, Clone, Default)]
pub struct SampleBank {
    pub samples: Vec<(GroundTruthBox, Vec<[f64; 4]>)>,
}

impl SampleBank {
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let mut samples = Vec::new();
        for s in scenes {
            for b in &s.boxes {
                let pts: Vec<[f64; 4]> = s
                    .cloud
                    .points
                    .iter()
                    .filter(|p| b.bbox.contains([p[0], p[1], p[2]], 0.0))
                    .copied()
                    .collect();
                if !pts.is_empty() {
                    samples.push((b.clone(), pts));
                }
            }
        }
        SampleBank { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Mirrors across the x-axis: `y -> -y`, `theta -> -theta`.
pub fn flip_y(cloud: &mut PointCloud, boxes: &mut [GroundTruthBox]) {
    for p in &mut cloud.points {
        p[1] = -p[1];
    }
    for b in boxes {
        b.bbox.center[1] = -b.bbox.center[1];
        b.bbox.heading = normalize_angle(-b.bbox.heading);
    }
}

/// Rotates points and box centers about the z-axis by `angle`.
pub fn rotate_z(cloud: &mut PointCloud, boxes: &mut [GroundTruthBox], angle: f64) {
    let (s, c) = angle.sin_cos();
    let rot = |x: f64, y: f64| (x * c - y * s, x * s + y * c);
    for p in &mut cloud.points {
        (p[0], p[1]) = rot(p[0], p[1]);
    }
    for b in boxes {
        let [x, y, _] = b.bbox.center;
        (b.bbox.center[0], b.bbox.center[1]) = rot(x, y);
        b.bbox.heading = normalize_angle(b.bbox.heading + angle);
    }
}

/// Multiplies coordinates, box centers and sizes by `factor`.
pub fn scale_scene(cloud: &mut PointCloud, boxes: &mut [GroundTruthBox], factor: f64) {
    for p in &mut cloud.points {
        for v in &mut p[..3] {
            *v *= factor;
        }
    }
    for b in boxes {
        for v in b.bbox.center.iter_mut().chain(b.bbox.size.iter_mut()) {
            *v *= factor;
        }
    }
}

/// Pastes up to `count` bank samples. A draw is rejected if its box overlaps
/// any box already present; accepted samples replace the scene points inside
/// the pasted box.
pub fn paste_ground_truth(
    cloud: &mut PointCloud,
    boxes: &mut Vec<GroundTruthBox>,
    bank: &SampleBank,
    count: usize,
    rng: &mut impl Rng,
) {
    if bank.is_empty() {
        return;
    }
    for _ in 0..count {
        let (cand, pts) = &bank.samples[rng.random_range(0..bank.len())];
        if boxes
            .iter()
            .any(|b| bev_intersection(&b.bbox, &cand.bbox) > 0.0)
        {
            continue;
        }
        cloud
            .points
            .retain(|p| !cand.bbox.contains([p[0], p[1], p[2]], 0.0));
        cloud.points.extend_from_slice(pts);
        boxes.push(cand.clone());
    }
}

fn sample_range(r: [f64; 2], rng: &mut impl Rng) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Applies paste, flip, rotation and scaling in that order.
pub fn augment_scene(
    cloud: &PointCloud,
    boxes: &[GroundTruthBox],
    config: &AugmentConfig,
    bank: &SampleBank,
    rng: &mut impl Rng,
) -> (PointCloud, Vec<GroundTruthBox>) {
    let mut cloud = cloud.clone();
    let mut boxes = boxes.to_vec();
    paste_ground_truth(&mut cloud, &mut boxes, bank, config.paste_count, rng);
    if config.flip_prob > 0.0 && rng.random::<f64>() < config.flip_prob {
        flip_y(&mut cloud, &mut boxes);
    }
    let angle = sample_range(config.rotation_range, rng);
    if angle != 0.0 {
        rotate_z(&mut cloud, &mut boxes, angle);
    }
    let factor = sample_range(config.scale_range, rng);
    if factor != 1.0 {
        scale_scene(&mut cloud, &mut boxes, factor);
    }
    (cloud, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> (PointCloud, Vec<GroundTruthBox>) {
        let cloud = PointCloud::new(vec![
            [8.0, 1.0, -1.0, 0.5],
            [9.5, -0.25, -1.2, 0.1],
            [7.0, 0.0, -1.7, 0.0],
        ]);
        let boxes = vec![GroundTruthBox::car(Box3d::new(
            8.0, 1.0, -1.0, 1.6, 3.9, 1.5, 0.4,
        ))];
        (cloud, boxes)
    }

    #[test]
    fn identity_parameters() {
        let (c, b) = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c2, b2) = augment_scene(
            &c,
            &b,
            &AugmentConfig::disabled(),
            &SampleBank::default(),
            &mut rng,
        );
        assert_eq!(c, c2);
        assert_eq!(b, b2);
    }

    #[test]
    fn flip_is_involution() {
        let (c0, b0) = scene();
        let (mut c, mut b) = scene();
        flip_y(&mut c, &mut b);
        flip_y(&mut c, &mut b);
        for (p, q) in c.points.iter().zip(&c0.points) {
            assert!((0..4).all(|k| (p[k] - q[k]).abs() < 1e-12));
        }
        let (x, y) = (b[0].bbox.to_array(), b0[0].bbox.to_array());
        assert!((0..7).all(|k| (x[k] - y[k]).abs() < 1e-12));
    }

    #[test]
    fn rotation_composition() {
        let (c0, b0) = scene();
        let (mut c, mut b) = scene();
        rotate_z(&mut c, &mut b, FRAC_PI_4);
        rotate_z(&mut c, &mut b, -FRAC_PI_4);
        for (p, q) in c.points.iter().zip(&c0.points) {
            assert!((0..4).all(|k| (p[k] - q[k]).abs() < 1e-9));
        }
        let (x, y) = (b[0].bbox.to_array(), b0[0].bbox.to_array());
        assert!((0..7).all(|k| (x[k] - y[k]).abs() < 1e-9));
    }

    #[test]
    fn paste_rejects_overlap() {
        let (c, b) = scene();
        let bank = SampleBank::from_scenes(&[Scene {
            id: "s".into(),
            cloud: c.clone(),
            boxes: b.clone(),
        }]);
        assert_eq!(bank.len(), 1);
        let (mut c2, mut b2) = (c.clone(), b.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        paste_ground_truth(&mut c2, &mut b2, &bank, 5, &mut rng);
        // the only sample coincides with the existing box
        assert_eq!(b2.len(), 1);
        assert_eq!(c2, c);
    }
}
