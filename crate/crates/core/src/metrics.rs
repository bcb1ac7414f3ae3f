//! Distance-threshold mean average precision and center-error tracking.

use serde::{Deserialize, Serialize};

use crate::assign::{hungarian, match_cost, LossConfig};
use crate::decoder::Detection;
use crate::error::Result;
use crate::scene::SceneBox;
use crate::tensor::Tensor;

/// Ground-plane center-distance thresholds (meters).
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    /// AP at each of [`DISTANCE_THRESHOLDS`].
    pub ap: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    /// Classes that have at least one ground-truth box.
    pub classes: Vec<ClassAp>,
    pub map: f64,
}

/// Detections and ground truth of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub detections: Vec<Detection>,
    pub gt: Vec<SceneBox>,
}

/// 101-point interpolated AP from score-ranked TP flags.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    // precision envelope: max precision at any recall >= r
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < rec.len() && rec[j] < level - 1e-12 {
            j += 1;
        }
        if j < rec.len() {
            sum += prec[j];
        }
    }
    sum / 101.0
}

/// AP of one class at one threshold with greedy, score-descending matching;
/// each ground-truth box is consumed at most once.
pub fn average_precision(scenes: &[SceneResult], class_id: usize, threshold: f64) -> f64 {
    let mut dets: Vec<(usize, &Detection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, r)| r.detections.iter().filter(|d| d.class_id == class_id).map(move |d| (s, d)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)).then(a.1.query.cmp(&b.1.query)));
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|r| vec![false; r.gt.len()]).collect();
    let n_gt = scenes.iter().flat_map(|r| &r.gt).filter(|g| g.class_id == class_id).count();
    let tp: Vec<bool> = dets
        .iter()
        .map(|&(s, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in scenes[s].gt.iter().enumerate() {
                if g.class_id != class_id || taken[s][gi] {
                    continue;
                }
                let dist = (g.bbox.x - d.bbox.x).hypot(g.bbox.y - d.bbox.y);
                if dist <= threshold && best.is_none_or(|b| dist < b.1) {
                    best = Some((gi, dist));
                }
            }
            if let Some((gi, _)) = best {
                taken[s][gi] = true;
                true
            } else {
                false
            }
        })
        .collect();
    interpolated_ap(&tp, n_gt)
}

/// Mean AP over classes with ground truth and over all thresholds.
pub fn mean_average_precision(scenes: &[SceneResult], class_names: &[String]) -> MapResult {
    let mut classes = Vec::new();
    for (k, name) in class_names.iter().enumerate() {
        if !scenes.iter().flat_map(|r| &r.gt).any(|g| g.class_id == k) {
            continue;
        }
        let ap: Vec<f64> = DISTANCE_THRESHOLDS.iter().map(|&t| average_precision(scenes, k, t)).collect();
        let mean = ap.iter().sum::<f64>() / ap.len() as f64;
        classes.push(ClassAp { class_id: k, name: name.clone(), ap, mean });
    }
    let map = if classes.is_empty() { 0.0 } else { classes.iter().map(|c| c.mean).sum::<f64>() / classes.len() as f64 };
    MapResult { thresholds: DISTANCE_THRESHOLDS.to_vec(), classes, map }
}

/// Per-iteration `(summed center distance, count)` for one scene: ground
/// truth is matched to queries using the final iteration's matching cost and
/// the matched queries are followed back through earlier iterations.
pub fn center_errors(iterations: &[(Tensor, Tensor)], gt: &[SceneBox], cfg: &LossConfig) -> Result<Vec<(f64, usize)>> {
    let Some((logits, boxes)) = iterations.last() else {
        return Ok(vec![]);
    };
    if gt.is_empty() {
        return Ok(vec![(0.0, 0); iterations.len()]);
    }
    let m = hungarian(&match_cost(logits, boxes, gt, cfg))?;
    Ok(iterations
        .iter()
        .map(|(_, b)| {
            let s = m
                .pairs
                .iter()
                .map(|&(q, g)| {
                    let r = b.row(q);
                    let c = gt[g].bbox.center();
                    ((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2) + (r[2] - c[2]).powi(2)).sqrt()
                })
                .sum();
            (s, m.pairs.len())
        })
        .collect())
}
