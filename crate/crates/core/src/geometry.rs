//! Box algebra and projections onto the BEV grid and camera image planes.
//!
//! Frames: the ego/LiDAR frame is right-handed with +z up; heading is the
//! angle in the ground plane measured from +x toward +y. Camera frames use
//! +z along the optical axis, +x right and +y down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer to the image plane than this are treated as not visible.
pub const Z_NEAR: f64 = 0.1;

pub type Point3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Oriented 3D box `[x, y, z, w, l, h, sin θ, cos θ]`.
///
/// `l` runs along the heading, `w` is lateral and `h` vertical. The heading
/// pair is not required to be normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub sin: f64,
    pub cos: f64,
}

impl Box3D {
    pub fn new(center: Point3, dims: [f64; 3], yaw: f64) -> Self {
        Self {
            x: center[0],
            y: center[1],
            z: center[2],
            w: dims[0],
            l: dims[1],
            h: dims[2],
            sin: yaw.sin(),
            cos: yaw.cos(),
        }
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self { x: a[0], y: a[1], z: a[2], w: a[3], l: a[4], h: a[5], sin: a[6], cos: a[7] }
    }

    pub fn to_array(&self) -> [f64; 8] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.sin, self.cos]
    }

    pub fn center(&self) -> Point3 {
        [self.x, self.y, self.z]
    }

    pub fn yaw(&self) -> Result<f64> {
        if self.sin == 0.0 && self.cos == 0.0 {
            return Err(Error::DegenerateHeading);
        }
        Ok(self.sin.atan2(self.cos))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(Error::Argument(format!(
                "box dimensions must be positive, got ({}, {}, {})",
                self.w, self.l, self.h
            )));
        }
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box parameters".into()));
        }
        Ok(())
    }

    /// Ground-plane footprint, counter-clockwise.
    pub fn footprint(&self) -> Result<[[f64; 2]; 4]> {
        let c = box_corners(self)?;
        // bottom corners in canonical order are (-,-), (+,-), (-,+), (+,+)
        Ok([[c[0][0], c[0][1]], [c[1][0], c[1][1]], [c[3][0], c[3][1]], [c[2][0], c[2][1]]])
    }
}

/// Local sign triple `(sx, sy, sz)` of canonical corner `i`.
pub(crate) fn corner_sign(i: usize) -> (f64, f64, f64) {
    let s = |bit: usize| if bit == 0 { -1.0 } else { 1.0 };
    (s(i & 1), s((i >> 1) & 1), s((i >> 2) & 1))
}

/// The 8 corners of `b`. Index bits `(sx, sy, sz)` select the sign along
/// the local length, width and height axes, enumerated z-major then y then x.
pub fn box_corners(b: &Box3D) -> Result<[Point3; 8]> {
    b.validate()?;
    let r = (b.sin * b.sin + b.cos * b.cos).sqrt();
    if r == 0.0 {
        return Err(Error::DegenerateHeading);
    }
    let (s, c) = (b.sin / r, b.cos / r);
    let mut out = [[0.0; 3]; 8];
    for (i, o) in out.iter_mut().enumerate() {
        let (sx, sy, sz) = corner_sign(i);
        let lx = sx * b.l / 2.0;
        let ly = sy * b.w / 2.0;
        *o = [b.x + c * lx - s * ly, b.y + s * lx + c * ly, b.z + sz * b.h / 2.0];
    }
    Ok(out)
}

/// BEV grid: metric range, voxel size and feature-map downsampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub voxel_x: f64,
    pub voxel_y: f64,
    pub downsample: u32,
}

impl BevGrid {
    /// Metric size of one feature cell along x and y.
    pub fn cell_size(&self) -> (f64, f64) {
        let d = f64::from(self.downsample);
        (self.voxel_x * d, self.voxel_y * d)
    }

    /// Feature-map extents `(height, width)` = cells along (y, x).
    pub fn extents(&self) -> Result<(usize, usize)> {
        let (cx, cy) = self.cell_size();
        let count = |span: f64, cell: f64, axis: &str| -> Result<usize> {
            let n = span / cell;
            let r = n.round();
            if r < 1.0 || (n - r).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "BEV {axis} range {span} m is not a whole number of {cell} m cells"
                )));
            }
            Ok(r as usize)
        };
        let w = count(self.x_max - self.x_min, cx, "x")?;
        let h = count(self.y_max - self.y_min, cy, "y")?;
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::Config("BEV range must have max > min".into()));
        }
        if !(self.voxel_x > 0.0 && self.voxel_y > 0.0) || self.downsample == 0 {
            return Err(Error::Config("voxel size and downsample must be positive".into()));
        }
        self.extents().map(|_| ())
    }

    /// Continuous feature coordinates `(m, n)` of a metric point; `m` runs
    /// along x (map column), `n` along y (map row).
    pub fn project(&self, p: Point3) -> (f64, f64) {
        let (cx, cy) = self.cell_size();
        ((p[0] - self.x_min) / cx, (p[1] - self.y_min) / cy)
    }

    /// Inverse of [`BevGrid::project`] on the ground plane.
    pub fn unproject(&self, m: f64, n: f64) -> (f64, f64) {
        let (cx, cy) = self.cell_size();
        (self.x_min + m * cx, self.y_min + n * cy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

pub fn project_bev(p: Point3, grid: &BevGrid) -> (f64, f64) {
    grid.project(p)
}

/// A projected point: pixel coordinates plus camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole camera with LiDAR-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Row-major `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Point3,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

fn mat_vec(m: &Mat3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl CameraModel {
    /// Camera at `position` looking horizontally along `yaw` (radians from +x
    /// toward +y), with a horizontal field of view of `fov_deg`.
    pub fn facing(yaw: f64, fov_deg: f64, width: u32, height: u32, position: Point3) -> Self {
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), camera y (down), camera z (forward) in ego coords
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let rp = mat_vec(&rotation, position);
        let translation = [-rp[0], -rp[1], -rp[2]];
        let f = f64::from(width) / 2.0 / (fov_deg.to_radians() / 2.0).tan();
        let intrinsics = [[f, 0.0, f64::from(width) / 2.0], [0.0, f, f64::from(height) / 2.0], [0.0, 0.0, 1.0]];
        Self { intrinsics, rotation, translation, image_size: (width, height) }
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        if (det3(r) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("camera rotation must have determinant +1".into()));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        let k = &self.intrinsics;
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::Config("intrinsics must be zero-skew pinhole".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Point3) -> Point3 {
        let q = mat_vec(&self.rotation, p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    /// Pixel coordinates without visibility checks (depth must be non-zero).
    pub(crate) fn pixel_unchecked(&self, p: Point3) -> (f64, f64) {
        let q = self.to_camera(p);
        let k = &self.intrinsics;
        (k[0][0] * q[0] / q[2] + k[0][2], k[1][1] * q[1] / q[2] + k[1][2])
    }

    /// Vector-Jacobian product of [`CameraModel::pixel_unchecked`] with respect to `p`.
    pub(crate) fn pixel_vjp(&self, p: Point3, g: [f64; 2]) -> Point3 {
        let q = self.to_camera(p);
        let (fx, fy) = (self.fx(), self.fy());
        let z = q[2];
        let dq = [g[0] * fx / z, g[1] * fy / z, -(g[0] * fx * q[0] + g[1] * fy * q[1]) / (z * z)];
        mat_t_vec(&self.rotation, dq)
    }

    pub fn project(&self, p: Point3) -> Option<Projection> {
        let q = self.to_camera(p);
        if q[2] <= Z_NEAR {
            return None;
        }
        let (u, v) = self.pixel_unchecked(p);
        let (w, h) = (f64::from(self.image_size.0), f64::from(self.image_size.1));
        if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
            return None;
        }
        Some(Projection { u, v, depth: q[2] })
    }
}

pub fn project_camera(p: Point3, cam: &CameraModel) -> Option<Projection> {
    cam.project(p)
}

/// Indices of the cameras that see `p`, in rig order.
pub fn visible_views(p: Point3, rig: &[CameraModel]) -> Vec<usize> {
    rig.iter().enumerate().filter_map(|(i, c)| c.project(p).map(|_| i)).collect()
}

/// `n` cameras evenly spaced in yaw starting at +x, all at the same mount point.
pub fn ring_rig(n: usize, fov_deg: f64, width: u32, height: u32, position: Point3) -> Vec<CameraModel> {
    (0..n)
        .map(|i| {
            let yaw = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            CameraModel::facing(yaw, fov_deg, width, height, position)
        })
        .collect()
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    a.abs() / 2.0
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection-over-union of two boxes' ground-plane footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let (pa, pb) = (a.footprint()?, b.footprint()?);
    let inter = polygon_area(&clip_convex(&pa, &pb));
    let union = a.w * a.l + b.w * b.l - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}
