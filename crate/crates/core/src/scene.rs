//! Synthetic scenes, oracle feature maps and sensor corruptions.
//!
//! The oracle encoder stands in for learned image and point-cloud backbones:
//! it renders a handful of smooth analytic fields (coordinate ramps,
//! occupancy, per-class bumps, box-attribute fields) and lifts them to the
//! model width with a fixed, seeded random linear map.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, ring_rig, BevGrid, Box3D, CameraModel, Z_NEAR};
use crate::tensor::Tensor;

/// Strides of the four image pyramid levels.
pub const LEVEL_STRIDES: [f64; 4] = [4.0, 8.0, 16.0, 32.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// `[min, max]` ranges in meters.
    pub width: [f64; 2],
    pub length: [f64; 2],
    pub height: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Channel count of every encoded map.
    pub channels: usize,
    /// Seed of the random lift from analytic fields to channels.
    pub lift_seed: u64,
    /// Support radius (meters) of the per-box bump fields.
    pub bump_radius: f64,
    /// Fall-off distance (meters) of the occupancy field outside a box.
    pub occupancy_falloff: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { channels: 256, lift_seed: 7, bump_radius: 3.0, occupancy_falloff: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid: BevGrid,
    pub classes: Vec<ClassSpec>,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub non_overlap: bool,
    /// Placement attempts per box before giving up.
    pub max_retries: usize,
    pub cameras: usize,
    pub fov_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub camera_height: f64,
    pub features: FeatureConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let class = |name: &str, w: [f64; 2], l: [f64; 2], h: [f64; 2]| ClassSpec {
            name: name.into(),
            width: w,
            length: l,
            height: h,
        };
        Self {
            grid: BevGrid {
                x_min: -14.4,
                y_min: -14.4,
                x_max: 14.4,
                y_max: 14.4,
                voxel_x: 0.075,
                voxel_y: 0.075,
                downsample: 8,
            },
            classes: vec![
                class("car", [1.7, 2.1], [3.9, 4.7], [1.4, 1.8]),
                class("pedestrian", [0.5, 0.8], [0.5, 0.8], [1.6, 1.9]),
                class("truck", [2.4, 2.9], [6.0, 8.0], [2.6, 3.4]),
            ],
            min_boxes: 1,
            max_boxes: 6,
            non_overlap: true,
            max_retries: 200,
            cameras: 2,
            fov_deg: 110.0,
            image_width: 160,
            image_height: 96,
            camera_height: 1.6,
            features: FeatureConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        for c in &self.classes {
            for (what, r) in [("width", c.width), ("length", c.length), ("height", c.height)] {
                if !(r[0] > 0.0 && r[1] >= r[0]) {
                    return Err(Error::Config(format!("class {} has invalid {what} range {r:?}", c.name)));
                }
            }
        }
        if self.min_boxes > self.max_boxes {
            return Err(Error::Config("min_boxes exceeds max_boxes".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Config("camera fov must be in (0, 180) and image extents positive".into()));
        }
        let f = &self.features;
        if f.channels < 2 || !(f.bump_radius > 0.0) || !(f.occupancy_falloff > 0.0) {
            return Err(Error::Config("feature channels >= 2 and positive radii are required".into()));
        }
        Ok(())
    }

    pub fn rig(&self) -> Vec<CameraModel> {
        ring_rig(self.cameras, self.fov_deg, self.image_width, self.image_height, [0.0, 0.0, self.camera_height])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub boxes: Vec<SceneBox>,
    pub rig: Vec<CameraModel>,
    pub grid: BevGrid,
    pub seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Deterministic scene for `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = cfg.grid;
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n);
    for k in 0..n {
        let class_id = rng.random_range(0..cfg.classes.len());
        let spec = &cfg.classes[class_id];
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let (w, l, h) =
                (uniform(&mut rng, spec.width), uniform(&mut rng, spec.length), uniform(&mut rng, spec.height));
            let margin = w.max(l).max(h) / 2.0;
            if g.x_max - g.x_min <= 2.0 * margin || g.y_max - g.y_min <= 2.0 * margin {
                return Err(Error::Generation(format!("class {} does not fit in the grid", spec.name)));
            }
            let x = rng.random_range(g.x_min + margin..g.x_max - margin);
            let y = rng.random_range(g.y_min + margin..g.y_max - margin);
            let yaw = rng.random_range(-PI..PI);
            let b = Box3D::new([x, y, h / 2.0], [w, l, h], yaw);
            let clear = !cfg.non_overlap
                || boxes.iter().try_fold(true, |ok, o| Ok::<_, Error>(ok && bev_iou(&o.bbox, &b)? == 0.0))?;
            if clear {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!("could not place box {k} without overlap after {} attempts", cfg.max_retries))
        })?;
        boxes.push(SceneBox { bbox, class_id });
    }
    Ok(Scene { boxes, rig: cfg.rig(), grid: g, seed })
}

impl Scene {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(s)?;
        scene.grid.validate()?;
        for c in &scene.rig {
            c.validate()?;
        }
        for b in &scene.boxes {
            b.bbox.validate()?;
        }
        Ok(scene)
    }
}

/// BEV map plus one pyramid (levels at [`LEVEL_STRIDES`]) per camera, all
/// `[C×H×W]`. Maps sit behind `Arc` so they can be placed on tapes for free.
#[derive(Debug, Clone)]
pub struct FeatureAtlas {
    pub bev: Arc<Tensor>,
    pub pyramids: Vec<Vec<Arc<Tensor>>>,
}

/// Smooth compactly supported bump: `(1 − r²)²` for `r < 1`, else 0.
pub fn bump(r: f64) -> f64 {
    if r < 1.0 {
        let t = 1.0 - r * r;
        t * t
    } else {
        0.0
    }
}

/// Signed distance from `(x, y)` to a box footprint (negative inside).
fn footprint_sdf(b: &Box3D, x: f64, y: f64) -> f64 {
    let r = b.sin.hypot(b.cos);
    let (s, c) = (b.sin / r, b.cos / r);
    let (dx, dy) = (x - b.x, y - b.y);
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    let qx = lx.abs() - b.l / 2.0;
    let qy = ly.abs() - b.w / 2.0;
    qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0)
}

/// Layout of the analytic BEV fields.
#[derive(Debug, Clone, Copy)]
pub struct BevFields {
    pub num_classes: usize,
}

impl BevFields {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const OCCUPANCY: usize = 2;

    pub fn class(&self, k: usize) -> usize {
        3 + k
    }

    /// Bump-weighted center offsets, then z, w, l, h, sin, cos fields.
    pub fn attr(&self, a: usize) -> usize {
        3 + self.num_classes + a
    }

    pub fn len(&self) -> usize {
        3 + self.num_classes + 8
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Layout of the analytic image fields.
#[derive(Debug, Clone, Copy)]
pub struct ImageFields {
    pub num_classes: usize,
}

impl ImageFields {
    pub const U: usize = 0;
    pub const V: usize = 1;

    pub fn class(&self, k: usize) -> usize {
        2 + k
    }

    pub fn depth(&self) -> usize {
        2 + self.num_classes
    }

    pub fn len(&self) -> usize {
        3 + self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The seeded lifts from analytic fields to feature channels.
#[derive(Debug, Clone)]
pub struct OracleEncoder {
    pub config: FeatureConfig,
    pub num_classes: usize,
    /// `[C × K_bev]` row-major.
    bev_lift: Vec<f64>,
    /// `[C × K_img]` row-major.
    image_lift: Vec<f64>,
    half_range: f64,
}

impl OracleEncoder {
    pub fn new(cfg: &SceneConfig) -> Self {
        let f = cfg.features.clone();
        let k = cfg.num_classes();
        let (bf, imf) = (BevFields { num_classes: k }, ImageFields { num_classes: k });
        let g = cfg.grid;
        let half_range = ((g.x_max - g.x_min).max(g.y_max - g.y_min) / 2.0).max(1e-9);
        // column scales bring every field to O(1) before mixing
        let mut bev_scale = vec![1.0; bf.len()];
        bev_scale[BevFields::X] = 1.0 / half_range;
        bev_scale[BevFields::Y] = 1.0 / half_range;
        bev_scale[bf.attr(0)] = 1.0 / f.bump_radius;
        bev_scale[bf.attr(1)] = 1.0 / f.bump_radius;
        for a in 2..6 {
            bev_scale[bf.attr(a)] = 0.5;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(f.lift_seed);
        let mut lift = |scale: &[f64]| -> Vec<f64> {
            let kk = scale.len();
            let norm = 1.0 / (kk as f64).sqrt();
            (0..f.channels * kk)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * norm * scale[i % kk]
                })
                .collect()
        };
        let bev_lift = lift(&bev_scale);
        let image_lift = lift(&vec![1.0; imf.len()]);
        Self { config: f, num_classes: k, bev_lift, image_lift, half_range }
    }

    pub fn bev_fields(&self) -> BevFields {
        BevFields { num_classes: self.num_classes }
    }

    pub fn image_fields(&self) -> ImageFields {
        ImageFields { num_classes: self.num_classes }
    }

    /// Analytic BEV field values at metric `(x, y)`.
    pub fn bev_field_values(&self, scene: &Scene, x: f64, y: f64) -> Vec<f64> {
        let bf = self.bev_fields();
        let mut v = vec![0.0; bf.len()];
        v[BevFields::X] = x;
        v[BevFields::Y] = y;
        let radius = self.config.bump_radius;
        for sb in &scene.boxes {
            let b = &sb.bbox;
            let occ = (1.0 - footprint_sdf(b, x, y).max(0.0) / self.config.occupancy_falloff).max(0.0);
            v[BevFields::OCCUPANCY] = v[BevFields::OCCUPANCY].max(occ);
            let k = bump((b.x - x).hypot(b.y - y) / radius);
            if k == 0.0 {
                continue;
            }
            v[bf.class(sb.class_id)] += k;
            let r = b.sin.hypot(b.cos);
            let attrs = [b.x - x, b.y - y, b.z, b.w, b.l, b.h, b.sin / r, b.cos / r];
            for (a, val) in attrs.iter().enumerate() {
                v[bf.attr(a)] += k * val;
            }
        }
        v
    }

    /// Radius (meters) around a box center outside which it leaves the BEV
    /// fields untouched.
    pub fn influence_radius(&self, b: &Box3D) -> f64 {
        let half_diag = b.w.hypot(b.l) / 2.0;
        self.config.bump_radius.max(half_diag + self.config.occupancy_falloff)
    }

    fn image_field_values(&self, scene: &Scene, cam: &CameraModel, u: f64, v: f64) -> Vec<f64> {
        let imf = self.image_fields();
        let (w, h) = (f64::from(cam.image_size.0), f64::from(cam.image_size.1));
        let mut out = vec![0.0; imf.len()];
        out[ImageFields::U] = u / w;
        out[ImageFields::V] = v / h;
        for sb in &scene.boxes {
            let b = &sb.bbox;
            let q = cam.to_camera(b.center());
            if q[2] <= Z_NEAR {
                continue;
            }
            let (pu, pv) =
                (cam.fx() * q[0] / q[2] + cam.intrinsics[0][2], cam.fy() * q[1] / q[2] + cam.intrinsics[1][2]);
            let radius_px = cam.fx() * (b.w.hypot(b.l) / 2.0).max(1.0) / q[2];
            let k = bump((u - pu).hypot(v - pv) / radius_px);
            if k == 0.0 {
                continue;
            }
            out[imf.class(sb.class_id)] += k;
            out[imf.depth()] += k * q[2] / 10.0;
        }
        out
    }

    fn lift_into(lift: &[f64], fields: &[f64], channels: usize, plane: usize, pix: usize, out: &mut [f64]) {
        let kk = fields.len();
        for c in 0..channels {
            let row = &lift[c * kk..(c + 1) * kk];
            out[c * plane + pix] = row.iter().zip(fields).map(|(a, b)| a * b).sum();
        }
    }

    /// Render the oracle atlas of `scene`.
    pub fn encode(&self, scene: &Scene) -> Result<FeatureAtlas> {
        let (h, w) = scene.grid.extents()?;
        let c = self.config.channels;
        let mut bev = vec![0.0; c * h * w];
        for n in 0..h {
            for m in 0..w {
                let (x, y) = scene.grid.unproject(m as f64, n as f64);
                let f = self.bev_field_values(scene, x, y);
                Self::lift_into(&self.bev_lift, &f, c, h * w, n * w + m, &mut bev);
            }
        }
        let mut pyramids = Vec::with_capacity(scene.rig.len());
        for cam in &scene.rig {
            let mut levels = Vec::with_capacity(LEVEL_STRIDES.len());
            for &stride in &LEVEL_STRIDES {
                let lw = (f64::from(cam.image_size.0) / stride).ceil() as usize;
                let lh = (f64::from(cam.image_size.1) / stride).ceil() as usize;
                let mut map = vec![0.0; c * lh * lw];
                for row in 0..lh {
                    for col in 0..lw {
                        let f = self.image_field_values(scene, cam, col as f64 * stride, row as f64 * stride);
                        Self::lift_into(&self.image_lift, &f, c, lh * lw, row * lw + col, &mut map);
                    }
                }
                levels.push(Arc::new(Tensor::new(&[c, lh, lw], map)?));
            }
            pyramids.push(levels);
        }
        Ok(FeatureAtlas { bev: Arc::new(Tensor::new(&[c, h, w], bev)?), pyramids })
    }

    /// Least-squares inverse of the BEV lift for one feature vector.
    pub fn unlift_bev(&self, feature: &[f64]) -> Vec<f64> {
        unlift(&self.bev_lift, self.bev_fields().len(), feature)
    }

    /// Least-squares inverse of the image lift for one feature vector.
    pub fn unlift_image(&self, feature: &[f64]) -> Vec<f64> {
        unlift(&self.image_lift, self.image_fields().len(), feature)
    }

    pub fn half_range(&self) -> f64 {
        self.half_range
    }
}

/// Solve the normal equations `LᵀL f = Lᵀ y` by Cholesky (L is `[C×K]`,
/// full column rank with probability one).
fn unlift(lift: &[f64], k: usize, y: &[f64]) -> Vec<f64> {
    let c = y.len();
    let mut a = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for ch in 0..c {
        let row = &lift[ch * k..(ch + 1) * k];
        for i in 0..k {
            rhs[i] += row[i] * y[ch];
            for j in 0..k {
                a[i * k + j] += row[i] * row[j];
            }
        }
    }
    for j in 0..k {
        for p in 0..j {
            a[j * k + j] -= a[j * k + p] * a[j * k + p];
        }
        a[j * k + j] = a[j * k + j].sqrt();
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / a[j * k + j];
        }
    }
    for i in 0..k {
        let s: f64 = (0..i).map(|p| a[i * k + p] * rhs[p]).sum();
        rhs[i] = (rhs[i] - s) / a[i * k + i];
    }
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|p| a[p * k + i] * rhs[p]).sum();
        rhs[i] = (rhs[i] - s) / a[i * k + i];
    }
    rhs
}

/// Convenience wrapper: the oracle atlas of `scene` under `cfg`.
pub fn encode_oracle_features(scene: &Scene, cfg: &SceneConfig) -> Result<FeatureAtlas> {
    OracleEncoder::new(cfg).encode(scene)
}

/// Brute-force decoding of the uncorrupted BEV map: cells where a class
/// bump peaks (local maximum above 0.5) give a center estimate refined by
/// the offset fields. Returns `(x, y, class_id, peak)`.
pub fn decode_oracle(
    atlas: &FeatureAtlas,
    encoder: &OracleEncoder,
    grid: &BevGrid,
) -> Result<Vec<(f64, f64, usize, f64)>> {
    let bev = &atlas.bev;
    let (c, h, w) = (bev.shape()[0], bev.shape()[1], bev.shape()[2]);
    let bf = encoder.bev_fields();
    let fields: Vec<Vec<f64>> = (0..h * w)
        .map(|pix| {
            let feat: Vec<f64> = (0..c).map(|ch| bev.data()[ch * h * w + pix]).collect();
            encoder.unlift_bev(&feat)
        })
        .collect();
    let mut out = Vec::new();
    for k in 0..encoder.num_classes {
        let val = |n: usize, m: usize| fields[n * w + m][bf.class(k)];
        for n in 0..h {
            for m in 0..w {
                let v = val(n, m);
                if v < 0.5 {
                    continue;
                }
                let mut peak = true;
                for dn in -1i64..=1 {
                    for dm in -1i64..=1 {
                        let (nn, mm) = (n as i64 + dn, m as i64 + dm);
                        if (dn, dm) == (0, 0) || nn < 0 || mm < 0 || nn >= h as i64 || mm >= w as i64 {
                            continue;
                        }
                        let o = val(nn as usize, mm as usize);
                        // strict on one side so plateaus yield a single peak
                        if o > v || (o == v && (dn, dm) < (0, 0)) {
                            peak = false;
                        }
                    }
                }
                if peak {
                    let f = &fields[n * w + m];
                    let (x, y) = grid.unproject(m as f64, n as f64);
                    let wsum = f[bf.class(k)];
                    out.push((x + f[bf.attr(0)] / wsum, y + f[bf.attr(1)] / wsum, k, v));
                }
            }
        }
    }
    Ok(out)
}

/// Sensor corruption applied at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corruption {
    /// Uniform translation error with ‖·‖∞ ≤ `max_offset` added to every
    /// camera's extrinsics as seen by the decoder.
    CalibOffset { max_offset: f64, seed: u64 },
    /// Zero the listed cameras' pyramids (`None` = every camera).
    CameraDrop { cameras: Option<Vec<usize>> },
    /// Zero BEV cells whose azimuth from the origin lies in the sector.
    LidarSector { center_deg: f64, width_deg: f64 },
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match self {
            Corruption::CalibOffset { max_offset, .. } if !(*max_offset >= 0.0 && max_offset.is_finite()) => {
                Err(Error::Argument(format!("max_offset must be >= 0, got {max_offset}")))
            }
            Corruption::LidarSector { width_deg, center_deg }
                if !(*width_deg >= 0.0 && *width_deg < 360.0 && center_deg.is_finite()) =>
            {
                Err(Error::Argument(format!("sector width must be in [0, 360), got {width_deg}")))
            }
            _ => Ok(()),
        }
    }

    /// Parse the command-line form: `calib:<max>[:<seed>]`,
    /// `camdrop:all` / `camdrop:<i>,<j>`, `sector:<center>:<width>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("cannot parse corruption '{spec}'"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = spec.split(':').collect();
        let c = match parts.as_slice() {
            ["calib", m] => Corruption::CalibOffset { max_offset: num(m)?, seed: 0 },
            ["calib", m, s] => Corruption::CalibOffset { max_offset: num(m)?, seed: s.parse().map_err(|_| bad())? },
            ["camdrop", "all"] => Corruption::CameraDrop { cameras: None },
            ["camdrop", list] => Corruption::CameraDrop {
                cameras: Some(list.split(',').map(|i| i.parse().map_err(|_| bad())).collect::<Result<_>>()?),
            },
            ["sector", c, w] => Corruption::LidarSector { center_deg: num(c)?, width_deg: num(w)? },
            _ => return Err(bad()),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Wrap an angle difference in degrees to (−180, 180].
fn wrap_deg(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Whether BEV cell `(m, n)` lies in the azimuth sector.
pub fn in_sector(grid: &BevGrid, m: usize, n: usize, center_deg: f64, width_deg: f64) -> bool {
    let (x, y) = grid.unproject(m as f64, n as f64);
    let az = y.atan2(x).to_degrees();
    wrap_deg(az - center_deg).abs() <= width_deg / 2.0
}

/// Apply a corruption. Returns the rig the decoder should use (the true rig
/// unless calibration is perturbed) and the possibly modified atlas.
pub fn apply_corruption(
    scene: &Scene,
    atlas: &FeatureAtlas,
    c: &Corruption,
) -> Result<(Vec<CameraModel>, FeatureAtlas)> {
    c.validate()?;
    let mut rig = scene.rig.clone();
    let mut atlas = atlas.clone();
    match c {
        Corruption::CalibOffset { max_offset, seed } => {
            if *max_offset > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15);
                for cam in &mut rig {
                    for t in &mut cam.translation {
                        *t += rng.random_range(-max_offset..=*max_offset);
                    }
                }
            }
        }
        Corruption::CameraDrop { cameras } => {
            let all: Vec<usize> = (0..atlas.pyramids.len()).collect();
            for &i in cameras.as_ref().unwrap_or(&all) {
                let levels =
                    atlas.pyramids.get_mut(i).ok_or_else(|| Error::Argument(format!("camera {i} does not exist")))?;
                for l in levels.iter_mut() {
                    *l = Arc::new(Tensor::zeros(l.shape()));
                }
            }
        }
        Corruption::LidarSector { center_deg, width_deg } => {
            let bev = Arc::make_mut(&mut atlas.bev);
            let (ch, h, w) = (bev.shape()[0], bev.shape()[1], bev.shape()[2]);
            let data = bev.data_mut();
            for n in 0..h {
                for m in 0..w {
                    if in_sector(&scene.grid, m, n, *center_deg, *width_deg) {
                        for k in 0..ch {
                            data[k * h * w + n * w + m] = 0.0;
                        }
                    }
                }
            }
        }
    }
    Ok((rig, atlas))
}
