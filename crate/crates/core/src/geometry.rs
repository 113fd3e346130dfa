//! Pinhole cameras, surround rigs and the metric BEV grid.
//!
//! World frame: x forward, y left, z up, ground plane at z = 0.
//! Camera frame: x right, y down, z along the optical axis.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points at or closer than this camera-frame depth do not project.
pub const EPS_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// 3x3 pinhole matrix in pixels.
    pub intrinsics: [[f64; 3]; 3],
    /// 4x4 rigid transform taking world points into the camera frame.
    pub extrinsics: [[f64; 4]; 4],
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Camera {
    /// Camera at `center` looking along heading `yaw` (radians, CCW from +x),
    /// tilted down by `pitch` radians, with square pixels and the principal
    /// point at the image center.
    pub fn looking(center: [f64; 3], yaw: f64, pitch: f64, focal: f64, image_size: (usize, usize)) -> Self {
        let (sy, cy) = (libm::sin(yaw), libm::cos(yaw));
        let (sp, cp) = (libm::sin(pitch), libm::cos(pitch));
        let fwd = [cy * cp, sy * cp, -sp];
        let right = [sy, -cy, 0.0];
        let down = cross(fwd, right);
        let r = [right, down, fwd];
        let mut ext = [[0.0; 4]; 4];
        for i in 0..3 {
            ext[i][..3].copy_from_slice(&r[i]);
            ext[i][3] = -(r[i][0] * center[0] + r[i][1] * center[1] + r[i][2] * center[2]);
        }
        ext[3][3] = 1.0;
        let (h, w) = image_size;
        Self {
            intrinsics: [
                [focal, 0.0, w as f64 / 2.0],
                [0.0, focal, h as f64 / 2.0],
                [0.0, 0.0, 1.0],
            ],
            extrinsics: ext,
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("camera image size must be positive".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if !(k[0][2] >= 0.0 && k[0][2] <= w as f64 && k[1][2] >= 0.0 && k[1][2] <= h as f64) {
            return Err(Error::Config("principal point lies outside the image".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|m| r[m][i] * r[m][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "extrinsic rotation is not orthonormal (R^T R[{i}][{j}] = {d})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let e = &self.extrinsics;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    /// Continuous pixel coordinates `(u, v)`; pixel `(col, row)` spans
    /// `[col, col+1) x [row, row+1)`.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        if c[2] <= EPS_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        let x = c[0] / c[2];
        let y = c[1] / c[2];
        Some([k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2]])
    }

    pub fn in_image(&self, uv: [f64; 2]) -> bool {
        let (h, w) = self.image_size;
        uv[0] >= 0.0 && uv[1] >= 0.0 && uv[0] < w as f64 && uv[1] < h as f64
    }

    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = [self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3]];
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]);
        }
        c
    }

    /// Intersects the viewing ray through pixel position `(u, v)` with the
    /// ground plane; `None` when the ray points at or above the horizon.
    pub fn ground_hit(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let k = &self.intrinsics;
        let yc = (v - k[1][2]) / k[1][1];
        let xc = (u - k[0][2] - k[0][1] * yc) / k[0][0];
        let d_cam = [xc, yc, 1.0];
        let r = self.rotation();
        let mut d = [0.0; 3];
        for (j, dj) in d.iter_mut().enumerate() {
            *dj = r[0][j] * d_cam[0] + r[1][j] * d_cam[1] + r[2][j] * d_cam[2];
        }
        let c = self.center();
        if d[2] >= -1e-9 {
            return None;
        }
        let s = -c[2] / d[2];
        Some([c[0] + s * d[0], c[1] + s * d[1]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("camera rig needs at least one camera".into()));
        }
        self.cameras.iter().try_for_each(Camera::validate)
    }
}

/// Pinhole projection of ground-frame points; `None` for points at or behind
/// the camera's near depth.
pub fn project_to_uv(points_world: &[[f64; 3]], camera: &Camera) -> Vec<Option<[f64; 2]>> {
    points_world.iter().map(|&p| camera.project(p)).collect()
}

/// Metric extent of the BEV plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BevRange {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn width_x(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn width_y(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Maps a point into `[0, 1]^2`.
    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.x_min) / self.width_x(),
            (p[1] - self.y_min) / self.width_y(),
        ]
    }

    pub fn denormalize(&self, q: [f64; 2]) -> [f64; 2] {
        [
            self.x_min + q[0] * self.width_x(),
            self.y_min + q[1] * self.width_y(),
        ]
    }
}

/// Square-cell grid over a [`BevRange`]. Rows run along x (row 0 is the
/// far-forward edge), columns along y (column 0 is the far-left edge), so the
/// raster reads as a top-down view with the vehicle heading up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub range: BevRange,
    pub h: usize,
    pub w: usize,
}

impl BevGrid {
    pub fn new(range: BevRange, h: usize, w: usize) -> Result<Self> {
        let g = Self { range, h, w };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.range;
        if self.h == 0 || self.w == 0 {
            return Err(Error::Config("BEV grid size must be positive".into()));
        }
        if !(r.x_min < r.x_max && r.y_min < r.y_max) {
            return Err(Error::Config("BEV range must satisfy min < max on both axes".into()));
        }
        let cx = r.width_x() / self.h as f64;
        let cy = r.width_y() / self.w as f64;
        if (cx - cy).abs() > 1e-9 * cx.max(cy) {
            return Err(Error::Config(format!(
                "BEV cells must be square: {cx} m along x vs {cy} m along y"
            )));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        self.range.width_x() / self.h as f64
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let c = self.cell_size();
        [
            self.range.x_max - (row as f64 + 0.5) * c,
            self.range.y_max - (col as f64 + 0.5) * c,
        ]
    }

    /// Continuous `(row, col)` position with cell centers at integers.
    pub fn to_cell(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.cell_size();
        [
            (self.range.x_max - p[0]) / c - 0.5,
            (self.range.y_max - p[1]) / c - 0.5,
        ]
    }
}
