//! Per-PoI feature sampling from the BEV map and the image pyramids.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{visible_views, BevGrid, CameraModel};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::poi::PoiLayout;
use crate::scene::{FeatureAtlas, LEVEL_STRIDES};
use crate::tensor::Tensor;

/// How a view is picked for a point visible in several cameras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewSelection {
    /// Uniformly at random from the visible views (seeded).
    #[default]
    Random,
    /// Always the lowest camera index.
    Deterministic,
}

/// Granularity of the scale-weight logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleLogitMode {
    /// One set of level logits per query and group.
    #[default]
    PerQuery,
    /// One set of level logits per point of interest.
    PerPoi,
}

/// Bilinear sample of a `[C×H×W]` map at column `u`, row `v` (cell centers
/// at integers, zero padding outside).
pub fn bilinear(map: &Tensor, u: f64, v: f64) -> Vec<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = vec![0.0; c];
    if !(u.is_finite() && v.is_finite()) {
        return out;
    }
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (x, y, wt) in taps {
        if wt == 0.0 || x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let pix = y as usize * w + x as usize;
        for (k, o) in out.iter_mut().enumerate() {
            *o += wt * map.data()[k * h * w + pix];
        }
    }
    out
}

/// Pick a camera for each point from its visible views.
pub fn select_views(
    points: &Tensor,
    rig: &[CameraModel],
    mode: ViewSelection,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<usize>> {
    let n = points.shape()[0];
    (0..n)
        .map(|i| {
            let r = points.row(i);
            let views = visible_views([r[0], r[1], r[2]], rig);
            match (views.len(), mode) {
                (0, _) => None,
                (1, _) | (_, ViewSelection::Deterministic) => Some(views[0]),
                (k, ViewSelection::Random) => Some(views[rng.random_range(0..k)]),
            }
        })
        .collect()
}

/// Continuous BEV feature coordinates `[N×2]` (column = along x, row = along y).
pub fn bev_coords(tape: &mut Tape, points: Var, grid: &BevGrid) -> Result<Var> {
    let (cx, cy) = grid.cell_size();
    let m = tape.constant(Tensor::matrix(3, 2, vec![1.0 / cx, 0.0, 0.0, 1.0 / cy, 0.0, 0.0])?);
    let b = tape.constant(Tensor::vector(vec![-grid.x_min / cx, -grid.y_min / cy]));
    let c = tape.matmul(points, m)?;
    tape.add_bias(c, b)
}

fn group_channels(layout: &PoiLayout, width: usize) -> Vec<usize> {
    (0..layout.len()).map(|i| layout.group_of(i) * width).collect()
}

/// BEV features `[N × C_g]`: each point reads its group's channel slice.
pub fn sample_bev(tape: &mut Tape, bev: Var, points: Var, grid: &BevGrid, layout: &PoiLayout) -> Result<Var> {
    let c = tape.shape(bev)[0];
    if !c.is_multiple_of(layout.groups) {
        return Err(Error::dim(format!("{c} channels do not split into {} groups", layout.groups)));
    }
    let width = c / layout.groups;
    let coords = bev_coords(tape, points, grid)?;
    let sel = vec![Some(0); layout.len()];
    tape.bilinear(&[bev], coords, &sel, &group_channels(layout, width), width, 1.0)
}

/// Linear head on the query feature producing the level logits.
#[derive(Debug, Clone, Copy)]
pub struct ScaleHead {
    pub linear: Linear,
    pub mode: ScaleLogitMode,
}

impl ScaleHead {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        groups: usize,
        anchors: usize,
        mode: ScaleLogitMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let levels = LEVEL_STRIDES.len();
        let out = match mode {
            ScaleLogitMode::PerQuery => groups * levels,
            ScaleLogitMode::PerPoi => groups * anchors * levels,
        };
        let linear = Linear::new(store, "sampling.scale", channels, out, Init::XavierUniform, Init::Zeros, rng);
        Self { linear, mode }
    }

    /// Per-point level logits `[N × L]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, feat: Var, layout: &PoiLayout) -> Result<Var> {
        let levels = LEVEL_STRIDES.len();
        let raw = self.linear.forward(tape, p, feat)?;
        match self.mode {
            ScaleLogitMode::PerQuery => {
                let per_group = tape.reshape(raw, &[layout.queries * layout.groups, levels])?;
                let idx: Vec<usize> = (0..layout.len()).map(|i| i / layout.anchors).collect();
                tape.gather_rows(per_group, &idx)
            }
            ScaleLogitMode::PerPoi => tape.reshape(raw, &[layout.len(), levels]),
        }
    }
}

/// Image features `[N × C_g]`: project through the selected view, sample
/// every pyramid level, and mix levels with softmax weights of `logits`.
#[allow(clippy::too_many_arguments)]
pub fn sample_image(
    tape: &mut Tape,
    pyramids: &[Vec<Var>],
    rig: &[CameraModel],
    points: Var,
    sel: &[Option<usize>],
    logits: Var,
    layout: &PoiLayout,
    width: usize,
) -> Result<Var> {
    let n = layout.len();
    let levels = LEVEL_STRIDES.len();
    if pyramids.len() != rig.len() {
        return Err(Error::dim(format!("{} pyramids for {} cameras", pyramids.len(), rig.len())));
    }
    let pix = tape.project(points, rig, sel)?;
    let chan = group_channels(layout, width);
    let mut per_level = Vec::with_capacity(levels);
    for (l, &stride) in LEVEL_STRIDES.iter().enumerate() {
        let maps: Vec<Var> = pyramids.iter().map(|p| p[l]).collect();
        per_level.push(tape.bilinear(&maps, pix, sel, &chan, width, 1.0 / stride)?);
    }
    let stacked = tape.concat_cols(&per_level)?;
    let stacked = tape.reshape(stacked, &[n, levels, width])?;
    let w = tape.softmax(logits)?;
    let w = tape.reshape(w, &[n, 1, levels])?;
    let mixed = tape.bmm(w, stacked, false)?;
    tape.reshape(mixed, &[n, width])
}

/// Atlas maps placed on a tape.
#[derive(Debug, Clone)]
pub struct AtlasVars {
    pub bev: Var,
    pub pyramids: Vec<Vec<Var>>,
}

impl AtlasVars {
    pub fn bind(tape: &mut Tape, atlas: &FeatureAtlas) -> Self {
        let bev = tape.shared(atlas.bev.clone(), false);
        let pyramids = atlas
            .pyramids
            .iter()
            .map(|levels| levels.iter().map(|m| tape.shared(m.clone(), false)).collect())
            .collect();
        Self { bev, pyramids }
    }
}

/// `(f_P, f_I)`, each `[N × C_g]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_pair(
    tape: &mut Tape,
    atlas: &AtlasVars,
    rig: &[CameraModel],
    grid: &BevGrid,
    points: Var,
    logits: Var,
    layout: &PoiLayout,
    view_mode: ViewSelection,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let width = tape.shape(atlas.bev)[0] / layout.groups;
    let f_p = sample_bev(tape, atlas.bev, points, grid, layout)?;
    let sel = select_views(tape.value(points), rig, view_mode, rng);
    let f_i = sample_image(tape, &atlas.pyramids, rig, points, &sel, logits, layout, width)?;
    Ok((f_p, f_i))
}
