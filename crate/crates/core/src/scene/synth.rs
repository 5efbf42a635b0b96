//! Seeded synthetic LiDAR scenes: a ground plane plus car-sized boxes whose
//! visible surfaces are sampled with range-dependent density.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HvprError, Result};
use crate::geometry::{bev_intersection, Box3d};
use crate::scene::{GroundTruthBox, PointCloud};

/// Outer limits of the full-scale detection range; every spec must fit inside.
pub const SCENE_X: [f64; 2] = [0.0, 70.4];
pub const SCENE_Y: [f64; 2] = [-40.0, 40.0];
pub const SCENE_Z: [f64; 2] = [-3.0, 1.0];

const PLACEMENT_ATTEMPTS: usize = 1000;
/// Ground returns this close to an object footprint are dropped.
const FOOTPRINT_CLEARANCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_objects: usize,
    /// Mean object size `(w, l, h)`.
    pub size_mean: [f64; 3],
    /// Each size component is scaled by `1 + U(-jitter, jitter)`.
    pub size_jitter: f64,
    /// Object surface points per m² at `reference_range` and closer.
    pub density: f64,
    /// Ground points per m² at `reference_range` and closer.
    pub ground_density: f64,
    pub reference_range: f64,
    pub sensor_origin: [f64; 3],
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub ground_z: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_objects: 1,
            size_mean: [1.6, 3.9, 1.5],
            size_jitter: 0.05,
            density: 20.0,
            ground_density: 1.0,
            reference_range: 10.0,
            sensor_origin: [0.0, 0.0, 0.0],
            x_range: [4.0, 14.24],
            y_range: [-5.12, 5.12],
            ground_z: -1.7,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| HvprError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HvprError::InvalidArgument(format!("scene spec: {msg}")));
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad("density must be positive");
        }
        if !(self.ground_density >= 0.0 && self.ground_density.is_finite()) {
            return bad("ground_density must be non-negative");
        }
        if !(self.reference_range > 0.0) {
            return bad("reference_range must be positive");
        }
        if self.size_mean.iter().any(|&s| !(s > 0.0)) || !(0.0..1.0).contains(&self.size_jitter) {
            return bad("sizes must be positive and jitter in [0, 1)");
        }
        let inside = |r: [f64; 2], lim: [f64; 2]| r[0] < r[1] && r[0] >= lim[0] && r[1] <= lim[1];
        if !inside(self.x_range, SCENE_X) || !inside(self.y_range, SCENE_Y) {
            return bad("x/y ranges must lie inside the detection range");
        }
        let top = self.ground_z + self.size_mean[2] * (1.0 + self.size_jitter);
        if self.ground_z < SCENE_Z[0] || top > SCENE_Z[1] {
            return bad("objects must fit inside the vertical range");
        }
        Ok(())
    }

    /// Surface density at horizontal range `r` from the sensor.
    pub fn density_at(&self, base: f64, r: f64) -> f64 {
        let ratio = self.reference_range / r.max(self.reference_range);
        base * ratio * ratio
    }

    fn range_of(&self, p: [f64; 3]) -> f64 {
        (p[0] - self.sensor_origin[0]).hypot(p[1] - self.sensor_origin[1])
    }
}

/// A planar rectangle `origin + s*u + t*v`, `s, t` in `[0, 1]`.
struct Face {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    area: f64,
}

/// Faces seen from the sensor: the roof and the sides facing it.
fn visible_faces(b: &Box3d, sensor: [f64; 3]) -> Vec<Face> {
    let [cx, cy, cz] = b.center;
    let [w, l, h] = b.size;
    let (s, c) = b.heading.sin_cos();
    let along = [c, s, 0.0];
    let across = [-s, c, 0.0];
    let at = |a: f64, b_: f64, z: f64| [cx + a * c - b_ * s, cy + a * s + b_ * c, z];
    let scale = |d: [f64; 3], k: f64| [d[0] * k, d[1] * k, d[2] * k];
    let bottom = cz - h / 2.0;
    let mut faces = vec![Face {
        origin: at(-l / 2.0, -w / 2.0, cz + h / 2.0),
        u: scale(along, l),
        v: scale(across, w),
        area: w * l,
    }];
    // (outward normal, half extent along normal, tangent, tangent length)
    let sides = [
        (along, l / 2.0, across, w),
        (scale(along, -1.0), l / 2.0, across, w),
        (across, w / 2.0, along, l),
        (scale(across, -1.0), w / 2.0, along, l),
    ];
    for (n, half, t, len) in sides {
        let mid = [cx + n[0] * half, cy + n[1] * half, bottom];
        let to_sensor = [sensor[0] - mid[0], sensor[1] - mid[1]];
        if n[0] * to_sensor[0] + n[1] * to_sensor[1] <= 0.0 {
            continue;
        }
        faces.push(Face {
            origin: [mid[0] - t[0] * len / 2.0, mid[1] - t[1] * len / 2.0, bottom],
            u: scale(t, len),
            v: [0.0, 0.0, h],
            area: len * h,
        });
    }
    faces
}

/// Expected number of surface points on `b` under `spec`.
pub fn expected_object_points(spec: &SceneSpec, b: &Box3d) -> f64 {
    let d = spec.density_at(spec.density, spec.range_of(b.center));
    visible_faces(b, spec.sensor_origin)
        .iter()
        .map(|f| f.area * d)
        .sum()
}

fn stochastic_round(x: f64, rng: &mut impl Rng) -> usize {
    let base = x.floor();
    base as usize + usize::from(rng.random::<f64>() < x - base)
}

fn place_objects(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<Box3d>> {
    let mut boxes: Vec<Box3d> = Vec::with_capacity(spec.num_objects);
    let j = spec.size_jitter;
    for _ in 0..spec.num_objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = spec.size_mean.map(|m| {
                if j > 0.0 {
                    m * (1.0 + rng.random_range(-j..j))
                } else {
                    m
                }
            });
            let heading = rng.random_range(-PI..PI);
            let x = rng.random_range(spec.x_range[0]..spec.x_range[1]);
            let y = rng.random_range(spec.y_range[0]..spec.y_range[1]);
            let cand = Box3d::new(
                x,
                y,
                spec.ground_z + size[2] / 2.0,
                size[0],
                size[1],
                size[2],
                heading,
            );
            let fits = cand.bev_corners().iter().all(|p| {
                p[0] > spec.x_range[0]
                    && p[0] < spec.x_range[1]
                    && p[1] > spec.y_range[0]
                    && p[1] < spec.y_range[1]
            });
            if fits && boxes.iter().all(|b| bev_intersection(b, &cand) <= 0.0) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(HvprError::InvalidArgument(format!(
                    "could not place {} non-overlapping objects in the given ranges",
                    spec.num_objects
                )))
            }
        }
    }
    Ok(boxes)
}

/// Generates a cloud and its ground truth; the same spec always yields the
/// same scene.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<(PointCloud, Vec<GroundTruthBox>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let boxes = place_objects(spec, &mut rng)?;
    let mut points = Vec::new();

    let area = (spec.x_range[1] - spec.x_range[0]) * (spec.y_range[1] - spec.y_range[0]);
    let proposals = stochastic_round(area * spec.ground_density, &mut rng);
    for _ in 0..proposals {
        let x = rng.random_range(spec.x_range[0]..spec.x_range[1]);
        let y = rng.random_range(spec.y_range[0]..spec.y_range[1]);
        let p = [x, y, spec.ground_z];
        let keep = spec.density_at(1.0, spec.range_of(p));
        let refl = rng.random_range(0.0..0.3);
        if rng.random::<f64>() >= keep {
            continue;
        }
        let footprint = |b: &Box3d| {
            let lifted = [x, y, b.center[2]];
            b.contains(lifted, FOOTPRINT_CLEARANCE)
        };
        if boxes.iter().any(footprint) {
            continue;
        }
        points.push([x, y, spec.ground_z, refl]);
    }

    for b in &boxes {
        let d = spec.density_at(spec.density, spec.range_of(b.center));
        let start = points.len();
        for f in visible_faces(b, spec.sensor_origin) {
            let n = stochastic_round(f.area * d, &mut rng);
            for _ in 0..n {
                let (s, t) = (rng.random::<f64>(), rng.random::<f64>());
                let p = [0, 1, 2].map(|k| f.origin[k] + s * f.u[k] + t * f.v[k]);
                points.push([p[0], p[1], p[2], rng.random_range(0.4..0.9)]);
            }
        }
        if points.len() == start {
            let [x, y, z] = b.center;
            points.push([x, y, z + b.size[2] / 2.0, 0.5]);
        }
    }

    let gt = boxes.into_iter().map(GroundTruthBox::car).collect();
    Ok((PointCloud::new(points), gt))
}
