//! Orbit cameras looking at the origin and pinhole ray generation.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

pub(crate) fn axpy(s: f64, a: Vec3, b: Vec3) -> Vec3 {
    [s * a[0] + b[0], s * a[1] + b[1], s * a[2] + b[2]]
}

/// A camera on a sphere around the origin, looking at the origin with +y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

/// Camera-to-world frame of a pose.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub origin: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
}

impl CameraPose {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Self {
        CameraPose { azimuth_deg: azimuth_deg.rem_euclid(360.0), elevation_deg, radius }
    }

    pub fn position(&self) -> Vec3 {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        [
            self.radius * el.cos() * az.sin(),
            self.radius * el.sin(),
            self.radius * el.cos() * az.cos(),
        ]
    }

    pub fn frame(&self) -> Frame {
        let origin = self.position();
        let forward = normalize([-origin[0], -origin[1], -origin[2]]);
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        Frame { origin, forward, right, up }
    }

    /// `[sin az, cos az, sin el, cos el]`, the pose code fed to the networks.
    pub fn embedding(&self) -> [f64; 4] {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        [az.sin(), az.cos(), el.sin(), el.cos()]
    }
}

/// Pinhole intrinsics shared by every view: square images, symmetric FOV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub resolution: usize,
    pub fov_deg: f64,
}

impl Intrinsics {
    fn tan_half(&self) -> f64 {
        (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Unit ray direction through the center of pixel `(row, col)`.
    pub fn ray_dir(&self, frame: &Frame, row: usize, col: usize) -> Vec3 {
        let r = self.resolution as f64;
        let th = self.tan_half();
        let u = ((col as f64 + 0.5) / r * 2.0 - 1.0) * th;
        let v = (1.0 - (row as f64 + 0.5) / r * 2.0) * th;
        normalize(axpy(v, frame.up, axpy(u, frame.right, frame.forward)))
    }

    /// Continuous pixel coordinates `(row, col)` of a world point, with pixel
    /// centers at integer + 0.5 offsets removed (center of pixel 0 is 0.0).
    /// Returns `None` for points behind the camera.
    pub fn project(&self, frame: &Frame, p: Vec3) -> Option<(f64, f64)> {
        let d = [p[0] - frame.origin[0], p[1] - frame.origin[1], p[2] - frame.origin[2]];
        let z = dot(d, frame.forward);
        if z <= 1e-9 {
            return None;
        }
        let th = self.tan_half();
        let u = dot(d, frame.right) / (z * th);
        let v = dot(d, frame.up) / (z * th);
        let r = self.resolution as f64;
        Some(((1.0 - v) / 2.0 * r - 0.5, (u + 1.0) / 2.0 * r - 0.5))
    }
}

/// An ordered set of camera poses with pairwise-distinct azimuths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPoseSet {
    poses: Vec<CameraPose>,
}

impl CameraPoseSet {
    pub fn new(poses: Vec<CameraPose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(param_err!("pose set must contain at least one pose"));
        }
        for (i, a) in poses.iter().enumerate() {
            if !(a.radius > 0.0) || !a.azimuth_deg.is_finite() || !a.elevation_deg.is_finite() {
                return Err(param_err!("pose {i} is not a valid orbit camera: {a:?}"));
            }
            for b in &poses[..i] {
                if (a.azimuth_deg - b.azimuth_deg).abs() < 1e-9 {
                    return Err(param_err!("duplicate azimuth {} in pose set", a.azimuth_deg));
                }
            }
        }
        Ok(CameraPoseSet { poses })
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, i: usize) -> CameraPose {
        self.poses[i]
    }

    /// Reorders the poses: output pose `i` is input pose `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.poses.len() {
            return Err(param_err!("permutation length {} != {}", order.len(), self.poses.len()));
        }
        CameraPoseSet::new(order.iter().map(|&i| self.poses[i]).collect())
    }
}

pub const DEFAULT_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

/// Builds a pose set at one elevation and radius; azimuths are taken mod 360.
pub fn make_pose_set(azimuths: &[f64], elevation_deg: f64, radius: f64) -> Result<CameraPoseSet> {
    if azimuths.is_empty() {
        return Err(param_err!("make_pose_set needs at least one azimuth"));
    }
    CameraPoseSet::new(azimuths.iter().map(|&a| CameraPose::new(a, elevation_deg, radius)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_set_is_four_orthogonal_views() {
        let s = make_pose_set(&DEFAULT_AZIMUTHS, 0.0, 2.5).unwrap();
        assert_eq!(s.len(), 4);
        for i in 0..4 {
            let gap = (s.get((i + 1) % 4).azimuth_deg - s.get(i).azimuth_deg).rem_euclid(360.0);
            assert_eq!(gap, 90.0);
        }
    }

    #[test]
    fn azimuth_wraps_and_duplicates_are_rejected() {
        let s = make_pose_set(&[360.0], 0.0, 2.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(0).azimuth_deg, 0.0);
        assert!(make_pose_set(&[0.0, 360.0], 0.0, 2.0).is_err());
        assert!(make_pose_set(&[], 0.0, 2.0).is_err());
    }

    #[test]
    fn center_ray_points_at_origin_and_projection_inverts() {
        let intr = Intrinsics { resolution: 8, fov_deg: 40.0 };
        let pose = CameraPose::new(37.0, 21.0, 3.0);
        let f = pose.frame();
        let p = [0.2, -0.1, 0.3];
        let (row, col) = intr.project(&f, p).unwrap();
        let d = normalize([p[0] - f.origin[0], p[1] - f.origin[1], p[2] - f.origin[2]]);
        let th = (20f64).to_radians().tan();
        let u = ((col + 0.5) / 8.0 * 2.0 - 1.0) * th;
        let v = (1.0 - (row + 0.5) / 8.0 * 2.0) * th;
        let back = normalize(axpy(v, f.up, axpy(u, f.right, f.forward)));
        for k in 0..3 {
            assert!((back[k] - d[k]).abs() < 1e-12);
        }
        let (r0, c0) = intr.project(&f, [0.0, 0.0, 0.0]).unwrap();
        assert!((r0 - 3.5).abs() < 1e-12 && (c0 - 3.5).abs() < 1e-12);
    }
}
