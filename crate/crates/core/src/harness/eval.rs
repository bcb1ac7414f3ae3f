use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_dataset, mix_seed, sha256_hex, RunConfig, REVISION};
use crate::autodiff::Tape;
use crate::decoder::{detections, top_k, Detection, Model, SceneInputs};
use crate::error::{Error, Result};
use crate::metrics::{center_errors, mean_average_precision, ClassAp, SceneResult};
use crate::scene::{apply_corruption, Corruption, OracleEncoder, Scene};

/// Detections kept per scene.
pub const MAX_DETECTIONS: usize = 300;

/// Offsets (m) of the calibration sweep included in every report.
pub const CALIB_SWEEP: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

const EVAL_STREAM: u64 = 0x4556_414c;

/// Final detections and per-iteration center errors of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEvalOutput {
    pub detections: Vec<Detection>,
    /// `(summed center distance, matched count)` per iteration.
    pub center_errors: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub label: String,
    pub corruption: Corruption,
    pub map: f64,
    /// `map − clean map`.
    pub delta: f64,
    /// `(clean − corrupted) / clean`; zero when the clean mAP is zero.
    pub relative_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassAp>,
    /// Mean distance between matched query centers and ground truth after
    /// each decoder iteration.
    pub center_error_per_iteration: Vec<f64>,
    pub calibration_sweep: Vec<CorruptionResult>,
    pub corruptions: Vec<CorruptionResult>,
    pub num_scenes: usize,
    pub config_hash: String,
    pub checkpoint_sha256: Option<String>,
    pub seed: u64,
    pub revision: String,
}

/// Short human-readable name of a corruption.
pub fn corruption_label(c: &Corruption) -> String {
    match c {
        Corruption::CalibOffset { max_offset, .. } => format!("calib_offset:{max_offset}"),
        Corruption::CameraDrop { cameras: None } => "camera_drop:all".into(),
        Corruption::CameraDrop { cameras: Some(v) } => {
            format!("camera_drop:{}", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
        }
        Corruption::LidarSector { center_deg, width_deg } => format!("lidar_sector:{center_deg}:{width_deg}"),
    }
}

/// Run the model on one scene, optionally corrupted.
pub fn evaluate_scene(
    model: &Model,
    encoder: &OracleEncoder,
    scene: &Scene,
    cfg: &RunConfig,
    corruption: Option<&Corruption>,
    stream_seed: u64,
) -> Result<SceneEvalOutput> {
    let atlas = encoder.encode(scene)?;
    let (rig, atlas) = match corruption {
        Some(c) => apply_corruption(scene, &atlas, c)?,
        None => (scene.rig.clone(), atlas),
    };
    let inputs = SceneInputs { atlas: &atlas, rig: &rig, grid: &scene.grid };
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let outs = model.forward(&mut tape, &p, &inputs, &mut rng)?;
    let last = outs.last().expect("at least one iteration");
    let dets = top_k(&detections(&tape, last), MAX_DETECTIONS)?;
    let its: Vec<_> = outs.iter().map(|o| (tape.value(o.logits).clone(), tape.value(o.boxes).clone())).collect();
    let center = center_errors(&its, &scene.boxes, &cfg.loss)?;
    Ok(SceneEvalOutput { detections: dets, center_errors: center })
}

/// Evaluate every scene; returns `(mAP result, center error per iteration)`.
pub fn evaluate(
    model: &Model,
    cfg: &RunConfig,
    scenes: &[Scene],
    corruption: Option<&Corruption>,
) -> Result<(crate::metrics::MapResult, Vec<f64>)> {
    if scenes.is_empty() {
        return Err(Error::NoScenes("evaluation set".into()));
    }
    let encoder = OracleEncoder::new(&cfg.scene);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
    let stream = mix_seed(cfg.seed, EVAL_STREAM);
    let outputs: Vec<Result<SceneEvalOutput>> = pool.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| evaluate_scene(model, &encoder, s, cfg, corruption, mix_seed(stream, i as u64)))
            .collect()
    });
    let mut results = Vec::with_capacity(scenes.len());
    let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); model.config.iterations];
    for (out, scene) in outputs.into_iter().zip(scenes) {
        let out = out?;
        for (acc, (s, n)) in sums.iter_mut().zip(&out.center_errors) {
            acc.0 += s;
            acc.1 += n;
        }
        results.push(SceneResult { detections: out.detections, gt: scene.boxes.clone() });
    }
    let names: Vec<String> = cfg.scene.classes.iter().map(|c| c.name.clone()).collect();
    let map = mean_average_precision(&results, &names);
    let center = sums.iter().map(|&(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    Ok((map, center))
}

fn corruption_result(c: &Corruption, map: f64, clean: f64) -> CorruptionResult {
    CorruptionResult {
        label: corruption_label(c),
        corruption: c.clone(),
        map,
        delta: map - clean,
        relative_drop: if clean > 0.0 { (clean - map) / clean } else { 0.0 },
    }
}

/// Full report: clean metrics, the calibration sweep and each requested
/// corruption.
pub fn evaluate_report(
    model: &Model,
    cfg: &RunConfig,
    scenes: &[Scene],
    corruptions: &[Corruption],
    checkpoint_sha256: Option<String>,
) -> Result<EvalReport> {
    let (clean, center) = evaluate(model, cfg, scenes, None)?;
    let mut sweep = Vec::new();
    for &off in &CALIB_SWEEP {
        let c = Corruption::CalibOffset { max_offset: off, seed: cfg.seed };
        // a zero offset is the identity
        let map = if off == 0.0 { clean.map } else { evaluate(model, cfg, scenes, Some(&c))?.0.map };
        sweep.push(corruption_result(&c, map, clean.map));
    }
    let mut extra = Vec::new();
    for c in corruptions {
        let (m, _) = evaluate(model, cfg, scenes, Some(c))?;
        extra.push(corruption_result(c, m.map, clean.map));
    }
    Ok(EvalReport {
        map: clean.map,
        thresholds: clean.thresholds,
        classes: clean.classes,
        center_error_per_iteration: center,
        calibration_sweep: sweep,
        corruptions: extra,
        num_scenes: scenes.len(),
        config_hash: cfg.hash(),
        checkpoint_sha256,
        seed: cfg.seed,
        revision: REVISION.into(),
    })
}

/// Load a checkpoint and a dataset, evaluate, and write `eval_report.json`
/// into `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    corruptions: &[Corruption],
    out: &Path,
) -> Result<EvalReport> {
    let bytes = fs::read(checkpoint)?;
    let mut model = Model::new(cfg.model.clone(), &cfg.scene.grid, cfg.seed)?;
    model.load_checkpoint(&mut bytes.as_slice())?;
    let scenes = load_dataset(dataset)?;
    let report = evaluate_report(&model, cfg, &scenes, corruptions, Some(sha256_hex(&bytes)))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
