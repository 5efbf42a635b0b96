//! KITTI object labels and calibration files.
//!
//! Labels live in the rectified camera frame with bottom-center locations;
//! everything downstream works in the LiDAR frame with volumetric centers.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{HvprError, Result};
use crate::geometry::{normalize_angle, Box3d};
use crate::scene::GroundTruthBox;

type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibMatrices {
    /// Rectifying rotation `R0_rect`.
    pub r0: Mat3,
    /// `Tr_velo_to_cam` as a 3x4 rigid transform.
    pub tr: [[f64; 4]; 3],
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if !det.is_finite() || det.abs() < 1e-12 {
        return None;
    }
    let c =
        |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

impl CalibMatrices {
    pub fn identity() -> Self {
        CalibMatrices {
            r0: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    /// The usual KITTI axis convention: camera `(x, y, z) = (-y, -z, x)` of
    /// the LiDAR frame, no offset.
    pub fn axis_swap() -> Self {
        CalibMatrices {
            r0: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr: [
                [0.0, -1.0, 0.0, 0.0],
                [0.0, 0.0, -1.0, 0.0],
                [1.0, 0.0, 0.0, 0.0],
            ],
        }
    }

    fn tr_rotation(&self) -> Mat3 {
        self.tr.map(|row| [row[0], row[1], row[2]])
    }

    pub fn validate(&self) -> Result<()> {
        if inverse3(&self.r0).is_none() {
            return Err(HvprError::Calibration("R0_rect is singular".into()));
        }
        let r = self.tr_rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-3 {
                    return Err(HvprError::Calibration(
                        "rotation part of Tr_velo_to_cam is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn lidar_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.tr_rotation();
        let q = mat_vec(&r, p);
        let q = [
            q[0] + self.tr[0][3],
            q[1] + self.tr[1][3],
            q[2] + self.tr[2][3],
        ];
        mat_vec(&self.r0, q)
    }

    pub fn camera_to_lidar(&self, q: [f64; 3]) -> Result<[f64; 3]> {
        let r0_inv = inverse3(&self.r0)
            .ok_or_else(|| HvprError::Calibration("R0_rect is singular".into()))?;
        let rot_inv = inverse3(&self.tr_rotation())
            .ok_or_else(|| HvprError::Calibration("Tr_velo_to_cam is singular".into()))?;
        let u = mat_vec(&r0_inv, q);
        let u = [
            u[0] - self.tr[0][3],
            u[1] - self.tr[1][3],
            u[2] - self.tr[2][3],
        ];
        Ok(mat_vec(&rot_inv, u))
    }

    pub fn to_text(&self) -> String {
        let fmt = |vals: Vec<f64>| {
            vals.iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "R0_rect: {}\nTr_velo_to_cam: {}\n",
            fmt(self.r0.iter().flatten().copied().collect()),
            fmt(self.tr.iter().flatten().copied().collect()),
        )
    }
}

/// Parses a KITTI `calib/*.txt` (lines of `KEY: v v v ...`). Only `R0_rect`
/// and `Tr_velo_to_cam` are used; other keys are ignored.
pub fn parse_calib(text: &str) -> Result<CalibMatrices> {
    let mut rows: HashMap<&str, (usize, Vec<f64>)> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(':').ok_or_else(|| HvprError::Parse {
            line: i + 1,
            detail: "expected `KEY: values`".into(),
        })?;
        let values = rest
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| HvprError::Parse {
                    line: i + 1,
                    detail: format!("bad number `{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.insert(key.trim(), (i + 1, values));
    }
    let take = |key: &str, n: usize| -> Result<Vec<f64>> {
        let (line, v) = rows.get(key).ok_or_else(|| HvprError::Parse {
            line: 0,
            detail: format!("missing `{key}`"),
        })?;
        if v.len() != n {
            return Err(HvprError::Parse {
                line: *line,
                detail: format!("`{key}` needs {n} values, found {}", v.len()),
            });
        }
        Ok(v.clone())
    };
    let r0v = take("R0_rect", 9)?;
    let trv = take("Tr_velo_to_cam", 12)?;
    let calib = CalibMatrices {
        r0: [0, 1, 2].map(|i| [r0v[3 * i], r0v[3 * i + 1], r0v[3 * i + 2]]),
        tr: [0, 1, 2].map(|i| [trv[4 * i], trv[4 * i + 1], trv[4 * i + 2], trv[4 * i + 3]]),
    };
    calib.validate()?;
    Ok(calib)
}

const LABEL_FIELDS: usize = 15;

/// Converts KITTI label lines into LiDAR-frame boxes, skipping `DontCare`.
///
/// Heading follows `theta = -rotation_y - pi/2`; the camera-frame
/// bottom-center is mapped through the inverse calibration and lifted by
/// half the height.
pub fn kitti_label_to_lidar_boxes(
    label_text: &str,
    calib: &CalibMatrices,
) -> Result<Vec<GroundTruthBox>> {
    calib.validate()?;
    let mut boxes = Vec::new();
    for (i, line) in label_text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != LABEL_FIELDS {
            return Err(HvprError::Parse {
                line: i + 1,
                detail: format!("expected {LABEL_FIELDS} fields, found {}", fields.len()),
            });
        }
        if fields[0] == "DontCare" {
            continue;
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].parse::<f64>().map_err(|e| HvprError::Parse {
                line: i + 1,
                detail: format!("field {} `{}`: {e}", k + 1, fields[k]),
            })
        };
        let occlusion = num(2)?;
        let (h, w, l) = (num(8)?, num(9)?, num(10)?);
        let loc = [num(11)?, num(12)?, num(13)?];
        let ry = num(14)?;
        let mut center = calib.camera_to_lidar(loc)?;
        center[2] += h / 2.0;
        boxes.push(GroundTruthBox {
            bbox: Box3d {
                center,
                size: [w, l, h],
                heading: normalize_angle(-ry - PI / 2.0),
            },
            class: fields[0].to_string(),
            difficulty: occlusion as i32,
        });
    }
    Ok(boxes)
}

/// Inverse of [`kitti_label_to_lidar_boxes`]; 2D image boxes are written as zeros.
pub fn boxes_to_kitti_labels(boxes: &[GroundTruthBox], calib: &CalibMatrices) -> String {
    let mut out = String::new();
    for b in boxes {
        let [x, y, z] = b.bbox.center;
        let [w, l, h] = b.bbox.size;
        let loc = calib.lidar_to_camera([x, y, z - h / 2.0]);
        let ry = normalize_angle(-b.bbox.heading - PI / 2.0);
        let alpha = normalize_angle(ry - loc[0].atan2(loc[2]));
        out.push_str(&format!(
            "{} 0 {} {alpha} 0 0 0 0 {h} {w} {l} {} {} {} {ry}\n",
            b.class, b.difficulty, loc[0], loc[1], loc[2]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_calib_origin() {
        let text = "Car 0.00 0 0.0 0 0 0 0 1.5 1.6 3.9 0.0 0.0 0.0 0.0\n";
        let boxes = kitti_label_to_lidar_boxes(text, &CalibMatrices::identity()).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = &boxes[0].bbox;
        // location maps to the origin; only the center lift moves z
        assert_eq!(b.center, [0.0, 0.0, 0.75]);
        assert_eq!(b.size, [1.6, 3.9, 1.5]);
        assert!((b.heading + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_calib_by_hand() {
        // Tr rotates LiDAR by +90 degrees about z; its inverse maps camera
        // (1, 0, 0) to LiDAR (0, -1, 0).
        let calib = CalibMatrices {
            r0: CalibMatrices::identity().r0,
            tr: [
                [0.0, -1.0, 0.0, 0.0],
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        };
        let text = "Car 0 0 0 0 0 0 0 2.0 1.6 3.9 1.0 0.0 0.0 0.5\n";
        let b = kitti_label_to_lidar_boxes(text, &calib).unwrap()[0].bbox;
        let want = [0.0, -1.0, 1.0];
        for k in 0..3 {
            assert!((b.center[k] - want[k]).abs() < 1e-12, "{:?}", b.center);
        }
    }

    #[test]
    fn field_count_error_names_line() {
        let text = "Car 0 0 0 0 0 0 0 2.0 1.6 3.9 1.0 0.0 0.0\n";
        match kitti_label_to_lidar_boxes(text, &CalibMatrices::identity()) {
            Err(HvprError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dont_care_skipped() {
        let text = "DontCare -1 -1 -10 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10\n";
        assert!(kitti_label_to_lidar_boxes(text, &CalibMatrices::identity())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn singular_calib_rejected() {
        let mut c = CalibMatrices::identity();
        c.r0 = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            kitti_label_to_lidar_boxes("", &c),
            Err(HvprError::Calibration(_))
        ));
    }

    #[test]
    fn calib_text_round_trip() {
        let c = CalibMatrices::axis_swap();
        let parsed = parse_calib(&format!("P2: 1 0 0 0 0 1 0 0 0 0 1 0\n{}", c.to_text())).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn labels_round_trip_through_axis_swap() {
        let calib = CalibMatrices::axis_swap();
        let boxes = vec![GroundTruthBox {
            bbox: Box3d::new(12.5, -3.25, -0.9, 1.7, 4.1, 1.45, 2.5),
            class: "Car".into(),
            difficulty: 1,
        }];
        let text = boxes_to_kitti_labels(&boxes, &calib);
        let back = kitti_label_to_lidar_boxes(&text, &calib).unwrap();
        let (a, b) = (boxes[0].bbox.to_array(), back[0].bbox.to_array());
        for k in 0..7 {
            assert!((a[k] - b[k]).abs() < 1e-9, "{a:?} vs {b:?}");
        }
        assert_eq!(back[0].difficulty, 1);
    }
}
