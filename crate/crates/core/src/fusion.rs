//! Dynamic multi-modal fusion: per-PoI fusion through linear layers whose
//! weights are generated from the query feature, then order-aware
//! aggregation of a query's PoIs back into its feature.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::poi::PoiLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Layer weights generated per query from its feature.
    #[default]
    Dynamic,
    /// Learnable per-group weights shared by all queries.
    Static,
}

/// Standard deviation of the parameter-generating head weights.
pub const HYPER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
enum Source {
    Dynamic { w1: Linear, b1: Linear, w2: Linear, b2: Linear },
    Static { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// Fusion block parameters: the two per-group layers (`2C_g → C_g`, then
/// `C_g → C_g`), each followed by LN and ReLU, and the aggregation layer.
#[derive(Debug, Clone, Copy)]
pub struct FusionBlock {
    source: Source,
    ln1: LayerNorm,
    ln2: LayerNorm,
    pub aggregate: Linear,
    ln_agg: LayerNorm,
    pub groups: usize,
    pub width: usize,
    pub anchors: usize,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        groups: usize,
        anchors: usize,
        mode: FusionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{channels} channels do not split into {groups} groups")));
        }
        let cg = channels / groups;
        let hyper = Init::Normal(HYPER_INIT_STD);
        let source = match mode {
            FusionMode::Dynamic => Source::Dynamic {
                w1: Linear::new(store, "fusion.hyper_w1", channels, groups * 2 * cg * cg, hyper, Init::Zeros, rng),
                b1: Linear::new(store, "fusion.hyper_b1", channels, groups * cg, hyper, Init::Zeros, rng),
                w2: Linear::new(store, "fusion.hyper_w2", channels, groups * cg * cg, hyper, Init::Zeros, rng),
                b2: Linear::new(store, "fusion.hyper_b2", channels, groups * cg, hyper, Init::Zeros, rng),
            },
            FusionMode::Static => {
                let s1 = Init::Normal(1.0 / ((2 * cg) as f64).sqrt());
                let s2 = Init::Normal(1.0 / (cg as f64).sqrt());
                Source::Static {
                    w1: store.add("fusion.static_w1", init_tensor(&[groups, 2 * cg * cg], s1, rng)),
                    b1: store.add("fusion.static_b1", init_tensor(&[groups, cg], Init::Zeros, rng)),
                    w2: store.add("fusion.static_w2", init_tensor(&[groups, cg * cg], s2, rng)),
                    b2: store.add("fusion.static_b2", init_tensor(&[groups, cg], Init::Zeros, rng)),
                }
            }
        };
        let ln1 = LayerNorm::new(store, "fusion.ln1", cg);
        let ln2 = LayerNorm::new(store, "fusion.ln2", cg);
        let aggregate = Linear::new(
            store,
            "fusion.aggregate",
            groups * anchors * cg,
            channels,
            Init::XavierUniform,
            Init::Zeros,
            rng,
        );
        let ln_agg = LayerNorm::new(store, "fusion.ln_aggregate", channels);
        Ok(Self { source, ln1, ln2, aggregate, ln_agg, groups, width: cg, anchors })
    }

    /// Per-group layer parameters for every (query, group) pair:
    /// `(W1 [QG×2C_g×C_g], b1 [QG×1×C_g], W2 [QG×C_g×C_g], b2 [QG×1×C_g])`.
    pub fn layer_params(&self, tape: &mut Tape, p: &Bound, feat: Var) -> Result<[Var; 4]> {
        let q = tape.shape(feat)[0];
        let (g, cg) = (self.groups, self.width);
        let (w1, b1, w2, b2) = match self.source {
            Source::Dynamic { w1, b1, w2, b2 } => (
                w1.forward(tape, p, feat)?,
                b1.forward(tape, p, feat)?,
                w2.forward(tape, p, feat)?,
                b2.forward(tape, p, feat)?,
            ),
            Source::Static { w1, b1, w2, b2 } => {
                let idx: Vec<usize> = (0..q * g).map(|i| i % g).collect();
                (
                    tape.gather_rows(p.var(w1), &idx)?,
                    tape.gather_rows(p.var(b1), &idx)?,
                    tape.gather_rows(p.var(w2), &idx)?,
                    tape.gather_rows(p.var(b2), &idx)?,
                )
            }
        };
        Ok([
            tape.reshape(w1, &[q * g, 2 * cg, cg])?,
            tape.reshape(b1, &[q * g, 1, cg])?,
            tape.reshape(w2, &[q * g, cg, cg])?,
            tape.reshape(b2, &[q * g, 1, cg])?,
        ])
    }

    /// Fuse every PoI's `(f_P, f_I)` pair: `[N × C_g]` each in, `[QG × A × C_g]` out.
    pub fn fuse(&self, tape: &mut Tape, p: &Bound, feat: Var, f_p: Var, f_i: Var, layout: &PoiLayout) -> Result<Var> {
        let (cg, a) = (self.width, layout.anchors);
        let qg = layout.queries * layout.groups;
        for v in [f_p, f_i] {
            if tape.shape(v) != [layout.len(), cg] {
                return Err(Error::dim(format!(
                    "sampled features {:?}, expected [{} × {cg}]",
                    tape.shape(v),
                    layout.len()
                )));
            }
        }
        let [w1, b1, w2, b2] = self.layer_params(tape, p, feat)?;
        let x = tape.concat_cols(&[f_p, f_i])?;
        let x = tape.reshape(x, &[qg, a, 2 * cg])?;
        let h = tape.bmm(x, w1, false)?;
        let h = tape.add_bias_batched(h, b1)?;
        let h = self.ln1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let y = tape.bmm(h, w2, false)?;
        let y = tape.add_bias_batched(y, b2)?;
        let y = self.ln2.forward(tape, p, y)?;
        tape.relu(y)
    }

    /// Concatenate the fused PoIs of each query in canonical order (group,
    /// then anchor), project to the model width, LN, ReLU, add to `feat`.
    pub fn aggregate(&self, tape: &mut Tape, p: &Bound, fused: Var, feat: Var) -> Result<Var> {
        let q = tape.shape(feat)[0];
        let expected = self.groups * self.anchors * self.width;
        if tape.value(fused).numel() != q * expected {
            return Err(Error::dim(format!(
                "fused PoIs {:?} do not hold {} values per query",
                tape.shape(fused),
                expected
            )));
        }
        let flat = tape.reshape(fused, &[q, expected])?;
        let y = self.aggregate.forward(tape, p, flat)?;
        let y = self.ln_agg.forward(tape, p, y)?;
        let y = tape.relu(y)?;
        tape.add(feat, y)
    }
}
