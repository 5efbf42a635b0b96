//! Oriented 3D boxes and their bird's-eye-view (BEV) geometry.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Oriented box: center `(x, y, z)`, size `(w, l, h)` and heading about +z.
///
/// `l` runs along the heading direction, `w` across it, `h` vertically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
}

impl Box3d {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, heading: f64) -> Self {
        Box3d {
            center: [x, y, z],
            size: [w, l, h],
            heading,
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        let [x, y, z] = self.center;
        let [w, l, h] = self.size;
        [x, y, z, w, l, h, self.heading]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Box3d::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = self.size[1] / 2.0;
        let hw = self.size[0] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| {
            [
                self.center[0] + u * c - v * s,
                self.center[1] + u * s + v * c,
            ]
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Whether `p` lies inside the box grown by `margin` on every side.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let (s, c) = self.heading.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.size[1] / 2.0 + margin
            && v.abs() <= self.size[0] / 2.0 + margin
            && (p[2] - self.center[2]).abs() <= self.size[2] / 2.0 + margin
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Maps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    twice / 2.0
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the BEV overlap of two oriented boxes.
pub fn bev_intersection(a: &Box3d, b: &Box3d) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    // quick reject on circumscribed circles
    let ra = 0.5 * a.size[0].hypot(a.size[1]);
    let rb = 0.5 * b.size[0].hypot(b.size[1]);
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if d > ra + rb {
        return 0.0;
    }
    polygon_area(&clip_convex(&pa, &pb)).max(0.0)
}

/// IoU of the BEV rectangles of two oriented boxes; zero-area boxes give 0.
pub fn rotated_bev_iou(a: &Box3d, b: &Box3d) -> f64 {
    let (aa, ab) = (a.bev_area(), b.bev_area());
    if !(aa > 0.0 && ab > 0.0) {
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV overlap times vertical overlap over the union of volumes.
pub fn rotated_3d_iou(a: &Box3d, b: &Box3d) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if !(va > 0.0 && vb > 0.0) {
        return 0.0;
    }
    let top = (a.center[2] + a.size[2] / 2.0).min(b.center[2] + b.size[2] / 2.0);
    let bottom = (a.center[2] - a.size[2] / 2.0).max(b.center[2] - b.size[2] / 2.0);
    let dz = (top - bottom).max(0.0);
    let inter = bev_intersection(a, b) * dz;
    (inter / (va + vb - inter)).clamp(0.0, 1.0)
}
