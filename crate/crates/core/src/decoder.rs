//! The iterative decoder: distance-biased self-attention, PoI generation,
//! multi-modal sampling, dynamic fusion, FFN and prediction heads, applied
//! repeatedly with one shared parameter set.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusionBlock, FusionMode};
use crate::geometry::{BevGrid, Box3D, CameraModel};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::poi::{AnchorMode, BoxDeltaMode, PoiHeads, PoiMode};
use crate::query::init_queries;
use crate::sampling::{sample_pair, AtlasVars, ScaleHead, ScaleLogitMode, ViewSelection};
use crate::scene::FeatureAtlas;
use crate::tensor::Tensor;

/// How dimensions and heading are refined across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Relative to the previous iteration's box.
    #[default]
    Compounding,
    /// Relative to the initial query box (centers stay cumulative).
    FromInitial,
}

/// Initial classification bias: a 1% foreground prior.
pub const CLS_PRIOR_BIAS: f64 = -4.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub channels: usize,
    pub groups: usize,
    pub iterations: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub anchor_mode: AnchorMode,
    pub poi_mode: PoiMode,
    pub box_delta: BoxDeltaMode,
    pub fusion_mode: FusionMode,
    pub view_selection: ViewSelection,
    pub scale_logits: ScaleLogitMode,
    pub refinement: RefineMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 64,
            channels: 256,
            groups: 4,
            iterations: 6,
            heads: 8,
            ffn_hidden: 512,
            num_classes: 3,
            anchor_mode: AnchorMode::default(),
            poi_mode: PoiMode::default(),
            box_delta: BoxDeltaMode::default(),
            fusion_mode: FusionMode::default(),
            view_selection: ViewSelection::default(),
            scale_logits: ScaleLogitMode::default(),
            refinement: RefineMode::default(),
        }
    }
}

impl ModelConfig {
    /// Full-size constants: 900 queries, everything else as the default.
    pub fn full_scale(num_classes: usize) -> Self {
        Self { num_queries: 900, num_classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_queries == 0 || self.iterations == 0 || self.num_classes == 0 {
            return bad("queries, iterations and classes must be at least 1".into());
        }
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) || self.channels / self.groups < 2 {
            return bad(format!("{} channels cannot form {} groups of >= 2", self.channels, self.groups));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!("{} channels cannot form {} heads", self.channels, self.heads));
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    /// `[H × 1]` raw distance-bias scales; the bias uses `softplus(raw)`.
    tau: ParamId,
    ln: LayerNorm,
}

/// Decoder outputs of one iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationOutput {
    /// `[Q × K]` class logits.
    pub logits: Var,
    /// `[Q × 8]` refined boxes.
    pub boxes: Var,
    /// `[N × 3]` points of interest used in this iteration.
    pub points: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub class_id: usize,
    pub score: f64,
    pub query: usize,
}

/// What the decoder looks at: features, the rig it believes in, the grid.
#[derive(Debug, Clone, Copy)]
pub struct SceneInputs<'a> {
    pub atlas: &'a FeatureAtlas,
    pub rig: &'a [CameraModel],
    pub grid: &'a BevGrid,
}

/// The decoder with its single shared parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub query_boxes: ParamId,
    pub query_feats: ParamId,
    attn: Attention,
    pub poi: PoiHeads,
    pub scale: ScaleHead,
    pub fusion: FusionBlock,
    ffn1: Linear,
    ffn2: Linear,
    ffn_ln: LayerNorm,
    pub cls: Linear,
    pub reg: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, grid: &BevGrid, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let queries = init_queries(config.num_queries, c, grid, seed ^ 0x5157_4552)?;
        let qb: Vec<f64> = queries.iter().flat_map(|q| q.bbox.to_array()).collect();
        let qf: Vec<f64> = queries.iter().flat_map(|q| q.feat.clone()).collect();
        let query_boxes = params.add("query.boxes", Tensor::matrix(config.num_queries, 8, qb)?);
        let query_feats = params.add("query.feats", Tensor::matrix(config.num_queries, c, qf)?);
        let xav = Init::XavierUniform;
        let attn = Attention {
            q: Linear::new(&mut params, "attn.q", c, c, xav, Init::Zeros, &mut rng),
            k: Linear::new(&mut params, "attn.k", c, c, xav, Init::Zeros, &mut rng),
            v: Linear::new(&mut params, "attn.v", c, c, xav, Init::Zeros, &mut rng),
            out: Linear::new(&mut params, "attn.out", c, c, xav, Init::Zeros, &mut rng),
            tau: params.add("attn.tau", Tensor::zeros(&[config.heads, 1])),
            ln: LayerNorm::new(&mut params, "attn.ln", c),
        };
        let poi = PoiHeads::new(
            &mut params,
            c,
            config.groups,
            config.anchor_mode,
            config.poi_mode,
            config.box_delta,
            &mut rng,
        );
        let anchors = config.anchor_mode.count();
        let scale = ScaleHead::new(&mut params, c, config.groups, anchors, config.scale_logits, &mut rng);
        let fusion = FusionBlock::new(&mut params, c, config.groups, anchors, config.fusion_mode, &mut rng)?;
        let ffn1 = Linear::new(&mut params, "ffn.1", c, config.ffn_hidden, xav, Init::Zeros, &mut rng);
        let ffn2 = Linear::new(&mut params, "ffn.2", config.ffn_hidden, c, xav, Init::Zeros, &mut rng);
        let ffn_ln = LayerNorm::new(&mut params, "ffn.ln", c);
        let cls =
            Linear::new(&mut params, "head.cls", c, config.num_classes, xav, Init::Constant(CLS_PRIOR_BIAS), &mut rng);
        let reg = Linear::new(&mut params, "head.reg", c, 8, Init::Zeros, Init::Zeros, &mut rng);
        Ok(Self { config, params, query_boxes, query_feats, attn, poi, scale, fusion, ffn1, ffn2, ffn_ln, cls, reg })
    }

    pub fn tau_param(&self) -> ParamId {
        self.attn.tau
    }

    /// Attention weights `[H × Q × Q]` with the distance bias applied.
    pub fn attention_weights(&self, tape: &mut Tape, p: &Bound, feat: Var, boxes: Var) -> Result<(Var, Var)> {
        let q = tape.shape(feat)[0];
        let (c, h) = (self.config.channels, self.config.heads);
        let dh = c / h;
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[q, h, dh])?;
            tape.transpose01(x)
        };
        let qv = self.attn.q.forward(tape, p, feat)?;
        let kv = self.attn.k.forward(tape, p, feat)?;
        let vv = self.attn.v.forward(tape, p, feat)?;
        let (qh, kh, vh) = (split(tape, qv)?, split(tape, kv)?, split(tape, vv)?);
        let scores = tape.bmm(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let dist = tape.pair_dist(boxes)?;
        let tau = tape.softplus(p.var(self.attn.tau))?;
        let bias = tape.matmul(tau, dist)?;
        let bias = tape.reshape(bias, &[h, q, q])?;
        let logits = tape.sub(scores, bias)?;
        Ok((tape.softmax(logits)?, vh))
    }

    /// Distance-biased multi-head self-attention with residual and LN.
    pub fn self_attention(&self, tape: &mut Tape, p: &Bound, feat: Var, boxes: Var) -> Result<Var> {
        let q = tape.shape(feat)[0];
        let (weights, vh) = self.attention_weights(tape, p, feat, boxes)?;
        let o = tape.bmm(weights, vh, false)?;
        let o = tape.transpose01(o)?;
        let o = tape.reshape(o, &[q, self.config.channels])?;
        let o = self.attn.out.forward(tape, p, o)?;
        let r = tape.add(feat, o)?;
        self.attn.ln.forward(tape, p, r)
    }

    /// Feed-forward block with residual and LN.
    pub fn ffn(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ffn1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let y = self.ffn2.forward(tape, p, h)?;
        let r = tape.add(x, y)?;
        self.ffn_ln.forward(tape, p, r)
    }

    /// Apply regression deltas `[Q×8]`: centers are cumulative, dimensions
    /// scale by `exp`, the heading pair is additive.
    pub fn update_boxes(&self, tape: &mut Tape, prev: Var, initial: Var, delta: Var) -> Result<Var> {
        let base = match self.config.refinement {
            RefineMode::Compounding => prev,
            RefineMode::FromInitial => initial,
        };
        let pc = tape.slice_cols(prev, 0, 3)?;
        let dc = tape.slice_cols(delta, 0, 3)?;
        let c = tape.add(pc, dc)?;
        let bd = tape.slice_cols(base, 3, 6)?;
        let dd = tape.slice_cols(delta, 3, 6)?;
        let e = tape.exp(dd)?;
        let d = tape.mul(bd, e)?;
        let bh = tape.slice_cols(base, 6, 8)?;
        let dh = tape.slice_cols(delta, 6, 8)?;
        let hh = tape.add(bh, dh)?;
        tape.concat_cols(&[c, d, hh])
    }

    /// One decoder iteration on `(feat [Q×C], boxes [Q×8])`.
    #[allow(clippy::too_many_arguments)]
    pub fn iteration(
        &self,
        tape: &mut Tape,
        p: &Bound,
        atlas: &AtlasVars,
        inputs: &SceneInputs<'_>,
        feat: Var,
        boxes: Var,
        initial: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, IterationOutput)> {
        let q = tape.shape(feat)[0];
        let layout = self.poi.layout(q);
        let f = self.self_attention(tape, p, feat, boxes)?;
        let points = self.poi.generate(tape, p, boxes, f)?;
        let logits_l = self.scale.logits(tape, p, f, &layout)?;
        let (f_p, f_i) = sample_pair(
            tape,
            atlas,
            inputs.rig,
            inputs.grid,
            points,
            logits_l,
            &layout,
            self.config.view_selection,
            rng,
        )?;
        let fused = self.fusion.fuse(tape, p, f, f_p, f_i, &layout)?;
        let f = self.fusion.aggregate(tape, p, fused, f)?;
        let f = self.ffn(tape, p, f)?;
        let logits = self.cls.forward(tape, p, f)?;
        let delta = self.reg.forward(tape, p, f)?;
        let new_boxes = self.update_boxes(tape, boxes, initial, delta)?;
        Ok((f, IterationOutput { logits, boxes: new_boxes, points }))
    }

    /// Run all iterations; outputs are emitted after every iteration.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &SceneInputs<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<IterationOutput>> {
        self.forward_iterations(tape, p, inputs, self.config.iterations, rng)
    }

    pub fn forward_iterations(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &SceneInputs<'_>,
        iterations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<IterationOutput>> {
        if iterations == 0 {
            return Err(Error::Argument("at least one decoder iteration is required".into()));
        }
        let atlas = AtlasVars::bind(tape, inputs.atlas);
        if tape.shape(atlas.bev)[0] != self.config.channels {
            return Err(Error::dim(format!(
                "atlas has {} channels, model expects {}",
                tape.shape(atlas.bev)[0],
                self.config.channels
            )));
        }
        let initial = p.var(self.query_boxes);
        let (mut feat, mut boxes) = (p.var(self.query_feats), initial);
        let mut outs = Vec::with_capacity(iterations);
        for t in 0..iterations {
            let (f, out) = self.iteration(tape, p, &atlas, inputs, feat, boxes, initial, rng).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("decoder iteration {}: {m}", t + 1)),
                other => other,
            })?;
            feat = f;
            boxes = out.boxes;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Initial query boxes as plain values.
    pub fn initial_boxes(&self) -> Vec<Box3D> {
        let t = self.params.get(self.query_boxes);
        (0..t.shape()[0]).map(|i| Box3D::from_array(t.row(i).try_into().expect("8 columns"))).collect()
    }

    /// Run inference on a fresh tape and return per-iteration detections.
    pub fn detect(&self, inputs: &SceneInputs<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Detection>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let outs = self.forward(&mut tape, &p, inputs, rng)?;
        Ok(outs.iter().map(|o| detections(&tape, o)).collect())
    }

    pub fn save_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        write_params(&self.params, w)
    }

    /// Replace every parameter with the checkpoint's values; names and
    /// shapes must match this model exactly.
    pub fn load_checkpoint(&mut self, r: &mut impl Read) -> Result<()> {
        let loaded = read_params(r)?;
        if loaded.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (name, t) in loaded {
            let id =
                self.params.by_name(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            self.params.set(id, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One detection per query: the arg-max class and its sigmoid score.
pub fn detections(tape: &Tape, out: &IterationOutput) -> Vec<Detection> {
    let (lg, bx) = (tape.value(out.logits), tape.value(out.boxes));
    (0..lg.shape()[0])
        .map(|q| {
            let row = lg.row(q);
            let (class_id, &best) =
                row.iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
            Detection {
                bbox: Box3D::from_array(bx.row(q).try_into().expect("8 columns")),
                class_id,
                score: sigmoid(best),
                query: q,
            }
        })
        .collect()
}

/// Highest-scoring `k` detections; ties go to the lower query index.
pub fn top_k(dets: &[Detection], k: usize) -> Result<Vec<Detection>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut v = dets.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    v.truncate(k);
    Ok(v)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"POIF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary parameter table; see `docs/formats.md`.
pub fn write_params(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        r.read_exact(&mut u32b).map_err(|_| bad("truncated entry"))?;
        let len = u32::from_le_bytes(u32b) as usize;
        if len > 4096 {
            return Err(bad("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        r.read_exact(&mut u32b).map_err(|_| bad("truncated entry"))?;
        let rank = u32::from_le_bytes(u32b) as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(bad("rank too large"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64b).map_err(|_| bad("truncated shape"))?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            r.read_exact(&mut u64b).map_err(|_| bad("truncated data"))?;
            data.push(f64::from_le_bytes(u64b));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}
