//! One-to-one target assignment and the set-prediction objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::IterationOutput;
use crate::error::{Error, Result};
use crate::scene::SceneBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Minimum-cost assignment of every column (ground truth) to a distinct
/// row (query) of an `n_q × n_gt` matrix with `n_q ≥ n_gt`.
///
/// Shortest augmenting paths with potentials, O(n_gt²·n_q).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let nq = cost.len();
    let ng = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != ng) {
        return Err(Error::Assignment("ragged cost matrix".into()));
    }
    if ng > nq {
        return Err(Error::Assignment(format!("{nq} queries cannot cover {ng} ground-truth boxes")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Assignment("non-finite matching cost".into()));
    }
    // rows = gts (1-based), columns = queries (1-based); column 0 is virtual
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; ng + 1];
    let mut v = vec![0.0; nq + 1];
    let mut owner = vec![0usize; nq + 1];
    let mut way = vec![0usize; nq + 1];
    for i in 1..=ng {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; nq + 1];
        let mut used = vec![false; nq + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=nq {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=nq {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(ng);
    let mut unmatched = Vec::new();
    for j in 1..=nq {
        if owner[j] == 0 {
            unmatched.push(j - 1);
        } else {
            pairs.push((j - 1, owner[j] - 1));
        }
    }
    Ok(MatchResult { pairs, unmatched })
}

/// Total cost of a matching.
pub fn matched_cost(cost: &[Vec<f64>], m: &MatchResult) -> f64 {
    m.pairs.iter().map(|&(q, g)| cost[q][g]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Loss on every iteration's outputs.
    #[default]
    Deep,
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Each supervised iteration is matched on its own.
    #[default]
    PerIteration,
    /// The final iteration's matching is reused for every iteration.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the classification term.
    pub alpha: f64,
    /// Weight of the box term.
    pub beta: f64,
    pub focal_gamma: f64,
    /// Focal class balance; `None` disables it.
    pub focal_alpha: Option<f64>,
    pub supervision: Supervision,
    pub matching: MatchingMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.25,
            focal_gamma: 2.0,
            focal_alpha: Some(0.25),
            supervision: Supervision::Deep,
            matching: MatchingMode::PerIteration,
        }
    }
}

const COST_EPS: f64 = 1e-8;

/// Focal classification cost of assigning a prediction with probability `p`
/// to a positive: positive term minus the negative term it replaces.
pub fn focal_cost(p: f64, gamma: f64, alpha: f64) -> f64 {
    let pos = alpha * (1.0 - p).powf(gamma) * -(p + COST_EPS).ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p + COST_EPS).ln();
    pos - neg
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `n_q × n_gt` cost `α·focal_cost + β·‖b_q − b_g‖₁` from logits `[Q×K]`
/// and boxes `[Q×8]`.
pub fn match_cost(logits: &Tensor, boxes: &Tensor, gt: &[SceneBox], cfg: &LossConfig) -> Vec<Vec<f64>> {
    let fa = cfg.focal_alpha.unwrap_or(0.5);
    (0..logits.shape()[0])
        .map(|q| {
            let (lg, bx) = (logits.row(q), boxes.row(q));
            gt.iter()
                .map(|g| {
                    let fc = focal_cost(sigmoid(lg[g.class_id]), cfg.focal_gamma, fa);
                    let l1: f64 = g.bbox.to_array().iter().zip(bx).map(|(a, b)| (a - b).abs()).sum();
                    cfg.alpha * fc + cfg.beta * l1
                })
                .collect()
        })
        .collect()
}

/// Unweighted per-iteration terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sums over supervised iterations of the unweighted terms.
    pub cls: f64,
    pub reg: f64,
    pub per_iteration: Vec<LossTerms>,
}

/// Classification and box terms of one iteration given its matching.
pub fn iteration_loss(
    tape: &mut Tape,
    out: &IterationOutput,
    gt: &[SceneBox],
    m: &MatchResult,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let (q, k) = (tape.shape(out.logits)[0], tape.shape(out.logits)[1]);
    let norm = 1.0 / gt.len().max(1) as f64;
    let mut targets = vec![0.0; q * k];
    for &(qi, gi) in &m.pairs {
        let c = gt[gi].class_id;
        if c >= k {
            return Err(Error::Argument(format!("class {c} out of range for {k} logits")));
        }
        targets[qi * k + c] = 1.0;
    }
    let f = tape.focal_loss(out.logits, &targets, cfg.focal_gamma, cfg.focal_alpha)?;
    let cls = tape.scale(f, norm)?;
    let reg = if m.pairs.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let idx: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let pred = tape.gather_rows(out.boxes, &idx)?;
        let tgt: Vec<f64> = m.pairs.iter().flat_map(|p| gt[p.1].bbox.to_array()).collect();
        let tgt = tape.constant(Tensor::matrix(idx.len(), 8, tgt)?);
        let d = tape.sub(pred, tgt)?;
        let a = tape.abs(d)?;
        let s = tape.sum(a)?;
        tape.scale(s, norm)?
    };
    Ok((cls, reg))
}

/// Match every supervised iteration and build the weighted total.
pub fn set_loss(
    tape: &mut Tape,
    outs: &[IterationOutput],
    gt: &[SceneBox],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let last = outs.last().ok_or_else(|| Error::Argument("no decoder outputs".into()))?;
    let matcher = |tape: &Tape, o: &IterationOutput| -> Result<MatchResult> {
        if gt.is_empty() {
            let q = tape.shape(o.logits)[0];
            return Ok(MatchResult { pairs: vec![], unmatched: (0..q).collect() });
        }
        hungarian(&match_cost(tape.value(o.logits), tape.value(o.boxes), gt, cfg))
    };
    let final_match = matcher(tape, last)?;
    let supervised: Vec<&IterationOutput> = match cfg.supervision {
        Supervision::Deep => outs.iter().collect(),
        Supervision::FinalOnly => vec![last],
    };
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown { total: 0.0, cls: 0.0, reg: 0.0, per_iteration: vec![] };
    for o in supervised {
        let m = match cfg.matching {
            MatchingMode::PerIteration => matcher(tape, o)?,
            MatchingMode::Final => final_match.clone(),
        };
        let (cls, reg) = iteration_loss(tape, o, gt, &m, cfg)?;
        let t = LossTerms { cls: tape.value(cls).item(), reg: tape.value(reg).item() };
        breakdown.cls += t.cls;
        breakdown.reg += t.reg;
        breakdown.per_iteration.push(t);
        let wc = tape.scale(cls, cfg.alpha)?;
        let wr = tape.scale(reg, cfg.beta)?;
        let it = tape.add(wc, wr)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, it)?,
            None => it,
        });
    }
    let total = total.expect("at least one supervised iteration");
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}
