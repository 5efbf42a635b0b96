//! KITTI velodyne `.bin` scans: consecutive little-endian `f32` quadruples.

use crate::error::{HvprError, Result};
use crate::scene::PointCloud;

const RECORD_BYTES: usize = 16;

pub fn parse_velodyne_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        let offset = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(HvprError::MalformedRecord {
            offset,
            detail: format!(
                "{} trailing bytes; scan length must be a multiple of {RECORD_BYTES}",
                bytes.len() - offset
            ),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (index, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let mut p = [0.0f64; 4];
        for (k, word) in rec.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(word.try_into().unwrap());
            if !v.is_finite() {
                return Err(HvprError::NonFiniteRecord { index });
            }
            p[k] = f64::from(v);
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

/// Narrows every value to `f32`; exact for clouds that came from a scan.
pub fn serialize_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for &v in p {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}
