//! Points of interest: a holistic box transformation of each query box
//! followed by per-group, per-anchor point shifts.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::geometry::{box_corners, Box3D, Point3};
use crate::nn::{Bound, Init, Linear, ParamStore};

/// Which anchors each group starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// The box center only (one point per group).
    CenterOnly,
    /// Center followed by the 8 corners in canonical order.
    #[default]
    CenterCorners,
}

impl AnchorMode {
    pub fn count(self) -> usize {
        match self {
            AnchorMode::CenterOnly => 1,
            AnchorMode::CenterCorners => 9,
        }
    }
}

/// Which learned adjustments are applied to the anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoiMode {
    /// Anchors of the query box as is.
    Anchors,
    /// Anchors of the transformed box.
    BoxTransform,
    /// Anchors of the transformed box plus point shifts.
    #[default]
    BoxTransformShift,
}

/// Whether the box transformation is shared by a query's groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoxDeltaMode {
    #[default]
    Shared,
    PerGroup,
}

/// Box transformation parameters `[t_x, t_y, t_z, t_w, t_l, t_h, t_sin, t_cos]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta(pub [f64; 8]);

/// Translate the center, scale the dimensions by `exp`, and add to the
/// heading pair (no renormalization).
pub fn transform_box(b: &Box3D, d: &BoxDelta) -> Box3D {
    let t = d.0;
    Box3D {
        x: b.x + t[0],
        y: b.y + t[1],
        z: b.z + t[2],
        w: b.w * t[3].exp(),
        l: b.l * t[4].exp(),
        h: b.h * t[5].exp(),
        sin: b.sin + t[6],
        cos: b.cos + t[7],
    }
}

/// Center followed (optionally) by the 8 canonical corners.
pub fn anchor_points(b: &Box3D, mode: AnchorMode) -> Result<Vec<Point3>> {
    let mut pts = vec![b.center()];
    if mode == AnchorMode::CenterCorners {
        pts.extend_from_slice(&box_corners(b)?);
    }
    Ok(pts)
}

/// Static description of the PoI layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoiLayout {
    pub queries: usize,
    pub groups: usize,
    pub anchors: usize,
}

impl PoiLayout {
    /// Total number of points, ordered query-major, then group, then anchor.
    pub fn len(&self) -> usize {
        self.queries * self.groups * self.anchors
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_of(&self, i: usize) -> usize {
        (i / self.anchors) % self.groups
    }

    pub fn query_of(&self, i: usize) -> usize {
        i / (self.anchors * self.groups)
    }
}

/// The two sibling linear heads on the query feature.
#[derive(Debug, Clone, Copy)]
pub struct PoiHeads {
    pub box_delta: Linear,
    pub shift: Linear,
    pub groups: usize,
    pub anchor_mode: AnchorMode,
    pub poi_mode: PoiMode,
    pub delta_mode: BoxDeltaMode,
}

impl PoiHeads {
    /// Both heads start at zero so training begins from the plain anchors.
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        groups: usize,
        anchor_mode: AnchorMode,
        poi_mode: PoiMode,
        delta_mode: BoxDeltaMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let box_out = match delta_mode {
            BoxDeltaMode::Shared => 8,
            BoxDeltaMode::PerGroup => 8 * groups,
        };
        let box_delta = Linear::new(store, "poi.box_delta", channels, box_out, Init::Zeros, Init::Zeros, rng);
        let shift_out = groups * anchor_mode.count() * 3;
        let shift = Linear::new(store, "poi.shift", channels, shift_out, Init::Zeros, Init::Zeros, rng);
        Self { box_delta, shift, groups, anchor_mode, poi_mode, delta_mode }
    }

    /// `(Δ_B: [Q × 8 or 8G], shifts: [Q × G·A·3])` from features `[Q×C]`.
    pub fn predict_deltas(&self, tape: &mut Tape, p: &Bound, feat: Var) -> Result<(Var, Var)> {
        let db = self.box_delta.forward(tape, p, feat)?;
        let sh = self.shift.forward(tape, p, feat)?;
        Ok((db, sh))
    }

    pub fn layout(&self, queries: usize) -> PoiLayout {
        PoiLayout { queries, groups: self.groups, anchors: self.anchor_mode.count() }
    }

    /// Points of interest `[N×3]` for query boxes `[Q×8]` and features `[Q×C]`.
    pub fn generate(&self, tape: &mut Tape, p: &Bound, boxes: Var, feat: Var) -> Result<Var> {
        let q = tape.shape(boxes)[0];
        let (g, a) = (self.groups, self.anchor_mode.count());
        let corners = self.anchor_mode == AnchorMode::CenterCorners;
        let (db, sh) = self.predict_deltas(tape, p, feat)?;
        let transform = self.poi_mode != PoiMode::Anchors;
        // anchors laid out as [Q·G × A·3]
        let anchors = match (transform, self.delta_mode) {
            (true, BoxDeltaMode::PerGroup) => {
                let idx: Vec<usize> = (0..q * g).map(|i| i / g).collect();
                let tiled = tape.gather_rows(boxes, &idx)?;
                let d = tape.reshape(db, &[q * g, 8])?;
                let tb = transform_boxes(tape, tiled, d)?;
                tape.anchors(tb, corners)?
            }
            (true, BoxDeltaMode::Shared) => {
                let tb = transform_boxes(tape, boxes, db)?;
                let an = tape.anchors(tb, corners)?;
                tile_rows(tape, an, g)?
            }
            (false, _) => {
                let an = tape.anchors(boxes, corners)?;
                tile_rows(tape, an, g)?
            }
        };
        let pts = if self.poi_mode == PoiMode::BoxTransformShift {
            let s = tape.reshape(sh, &[q * g, a * 3])?;
            tape.add(anchors, s)?
        } else {
            anchors
        };
        tape.reshape(pts, &[q * g * a, 3])
    }
}

/// Repeat every row `times` times consecutively.
fn tile_rows(tape: &mut Tape, x: Var, times: usize) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let idx: Vec<usize> = (0..rows * times).map(|i| i / times).collect();
    tape.gather_rows(x, &idx)
}

/// Differentiable [`transform_box`] over `[R×8]` boxes and deltas.
pub fn transform_boxes(tape: &mut Tape, boxes: Var, deltas: Var) -> Result<Var> {
    let bc = tape.slice_cols(boxes, 0, 3)?;
    let dc = tape.slice_cols(deltas, 0, 3)?;
    let c = tape.add(bc, dc)?;
    let bd = tape.slice_cols(boxes, 3, 6)?;
    let dd = tape.slice_cols(deltas, 3, 6)?;
    let e = tape.exp(dd)?;
    let d = tape.mul(bd, e)?;
    let bh = tape.slice_cols(boxes, 6, 8)?;
    let dh = tape.slice_cols(deltas, 6, 8)?;
    let h = tape.add(bh, dh)?;
    tape.concat_cols(&[c, d, h])
}
