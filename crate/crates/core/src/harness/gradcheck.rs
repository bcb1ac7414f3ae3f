use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RunConfig, REVISION};
use crate::assign::set_loss;
use crate::autodiff::Tape;
use crate::decoder::{Model, SceneInputs};
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::nn::ParamId;
use crate::sampling::ViewSelection;
use crate::scene::{generate_scene, FeatureAtlas, OracleEncoder, Scene};

/// The smallest configuration that exercises every block: 2 queries,
/// 2 groups of 8 channels, one camera whose finest level is 8×8, an 8×8 BEV
/// map and 2 decoder iterations.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scene.grid =
        BevGrid { x_min: -4.8, y_min: -4.8, x_max: 4.8, y_max: 4.8, voxel_x: 0.15, voxel_y: 0.15, downsample: 8 };
    // the two smaller classes so that two boxes always fit
    cfg.scene.classes.truncate(2);
    cfg.model.num_classes = 2;
    cfg.scene.min_boxes = 1;
    cfg.scene.max_boxes = 2;
    cfg.scene.cameras = 1;
    cfg.scene.image_width = 32;
    cfg.scene.image_height = 32;
    cfg.scene.features.channels = 16;
    cfg.scene.features.bump_radius = 2.0;
    cfg.model.num_queries = 2;
    cfg.model.channels = 16;
    cfg.model.groups = 2;
    cfg.model.iterations = 2;
    cfg.model.ffn_hidden = 32;
    cfg.model.view_selection = ViewSelection::Deterministic;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Scalars sampled per parameter block.
    pub entries_per_block: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Standard deviation of the noise added to every parameter so that
    /// zero-initialized heads do not hide paths.
    pub perturb_std: f64,
    /// Negative control: scale the analytic gradient of this block by 1.1.
    pub corrupt_block: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            entries_per_block: 32,
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            perturb_std: 0.1,
            corrupt_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Entries whose first difference disagreed and were re-measured with a
    /// step ten times smaller (a ReLU/abs kink inside the stencil).
    pub kink_retries: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
    pub options: GradcheckOptions,
    pub revision: String,
}

/// Block of a parameter: its name up to the first dot.
fn block_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn loss_value(model: &Model, scene: &Scene, atlas: &FeatureAtlas, cfg: &RunConfig, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = SceneInputs { atlas, rig: &scene.rig, grid: &scene.grid };
    let outs = model.forward(&mut tape, &p, &inputs, &mut rng)?;
    let (_, b) = set_loss(&mut tape, &outs, &scene.boxes, &cfg.loss)?;
    Ok(b.total)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare reverse-mode gradients of the full training loss with central
/// differences on sampled scalars of every parameter block.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    cfg.validate()?;
    if opts.entries_per_block == 0 || !(opts.step > 0.0) {
        return Err(Error::Argument("gradcheck needs entries and a positive step".into()));
    }
    let scene = generate_scene(&cfg.scene, opts.seed)?;
    let atlas = OracleEncoder::new(&cfg.scene).encode(&scene)?;
    let mut model = Model::new(cfg.model.clone(), &cfg.scene.grid, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4752_4144);
    if opts.perturb_std > 0.0 {
        let noise = Normal::new(0.0, opts.perturb_std).map_err(|e| Error::Argument(e.to_string()))?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            for x in model.params.get_mut(id).data_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }
    let fwd_seed = opts.seed;
    // analytic gradients
    let grads = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let mut r = ChaCha8Rng::seed_from_u64(fwd_seed);
        let inputs = SceneInputs { atlas: &atlas, rig: &scene.rig, grid: &scene.grid };
        let outs = model.forward(&mut tape, &p, &inputs, &mut r)?;
        let (loss, _) = set_loss(&mut tape, &outs, &scene.boxes, &cfg.loss)?;
        tape.backward(loss)?;
        model.params.collect_grads(&mut tape, &p)
    };
    let mut blocks: BTreeMap<String, Vec<(ParamId, usize)>> = BTreeMap::new();
    for (k, id) in model.params.ids().enumerate() {
        let name = model.params.name(id).to_string();
        let entry = blocks.entry(block_of(&name).to_string()).or_default();
        entry.extend((0..grads[k].len()).map(|i| (id, i)));
    }
    if let Some(b) = &opts.corrupt_block {
        if !blocks.contains_key(b) {
            return Err(Error::Argument(format!("unknown parameter block '{b}'")));
        }
    }
    let index_of: BTreeMap<ParamId, usize> = model.params.ids().enumerate().map(|(k, id)| (id, k)).collect();
    let mut results = Vec::new();
    for (block, entries) in &blocks {
        let take = opts.entries_per_block.min(entries.len());
        let picks = rand::seq::index::sample(&mut rng, entries.len(), take).into_vec();
        let corrupt = opts.corrupt_block.as_deref() == Some(block.as_str());
        let mut worst: f64 = 0.0;
        let mut retries = 0;
        for pick in picks {
            let (id, i) = entries[pick];
            let mut analytic = grads[index_of[&id]][i];
            if corrupt {
                analytic = analytic * 1.1 + 1e-3 * rng.random_range(0.5..1.0);
            }
            let mut numeric = |h: f64| -> Result<f64> {
                let orig = model.params.get(id).data()[i];
                model.params.get_mut(id).data_mut()[i] = orig + h;
                let up = loss_value(&model, &scene, &atlas, cfg, fwd_seed);
                model.params.get_mut(id).data_mut()[i] = orig - h;
                let dn = loss_value(&model, &scene, &atlas, cfg, fwd_seed);
                model.params.get_mut(id).data_mut()[i] = orig;
                Ok((up? - dn?) / (2.0 * h))
            };
            let mut e = rel_err(analytic, numeric(opts.step)?, opts.floor);
            if e >= opts.tolerance {
                retries += 1;
                e = e.min(rel_err(analytic, numeric(opts.step / 10.0)?, opts.floor));
            }
            worst = worst.max(e);
        }
        results.push(BlockResult {
            block: block.clone(),
            entries: take,
            max_rel_error: worst,
            kink_retries: retries,
            passed: worst < opts.tolerance,
        });
    }
    let max = results.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: results.iter().all(|b| b.passed),
        blocks: results,
        max_rel_error: max,
        tolerance: opts.tolerance,
        seconds: start.elapsed().as_secs_f64(),
        options: opts.clone(),
        revision: REVISION.into(),
    })
}

/// Run the check (normally on [`tiny_config`]) and write `gradcheck.json`.
pub fn cmd_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions, out: &Path) -> Result<GradcheckReport> {
    let report = gradcheck(cfg, opts)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
