use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_dataset, mix_seed, RunConfig, REVISION};
use crate::assign::{set_loss, LossBreakdown};
use crate::autodiff::Tape;
use crate::decoder::{Model, SceneInputs};
use crate::error::{Error, Result};
use crate::optim::AdamWState;
use crate::scene::{OracleEncoder, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub revision: String,
    pub steps: usize,
    pub epochs: usize,
    pub first_step_loss: Option<f64>,
    pub final_step_loss: Option<f64>,
    /// Mean total loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub summary: TrainSummary,
}

/// Loss and per-parameter gradients of one scene.
pub(crate) fn scene_gradients(
    model: &Model,
    encoder: &OracleEncoder,
    scene: &Scene,
    cfg: &RunConfig,
    stream_seed: u64,
) -> Result<(Vec<Vec<f64>>, LossBreakdown)> {
    let atlas = encoder.encode(scene)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let inputs = SceneInputs { atlas: &atlas, rig: &scene.rig, grid: &scene.grid };
    let outs = model.forward(&mut tape, &p, &inputs, &mut rng)?;
    let (loss, breakdown) = set_loss(&mut tape, &outs, &scene.boxes, &cfg.loss)?;
    tape.backward(loss)?;
    Ok((model.params.collect_grads(&mut tape, &p), breakdown))
}

fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    model.save_checkpoint(&mut w)?;
    w.flush()?;
    Ok(())
}

/// On a numeric failure keep the parameters from before the failing step.
fn on_failure(model: &Model, out: Option<&Path>, e: Error) -> Error {
    if e.is_numeric() {
        if let Some(dir) = out {
            let _ = write_checkpoint(model, &dir.join("last_good.bin"));
        }
    }
    e
}

/// AdamW over the scenes. When `out` is given, the step log, the best and
/// final checkpoints and (on numeric failure) the last good checkpoint are
/// written there.
pub fn train(cfg: &RunConfig, scenes: &[Scene], out: Option<&Path>) -> Result<TrainedModel> {
    cfg.validate()?;
    if scenes.is_empty() && cfg.train.epochs > 0 {
        return Err(Error::NoScenes("training set".into()));
    }
    let mut model = Model::new(cfg.model.clone(), &cfg.scene.grid, cfg.seed)?;
    let encoder = OracleEncoder::new(&cfg.scene);
    let mut opt = AdamWState::new(cfg.train.optimizer, &model.params)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(fs::File::create(dir.join("train_log.csv"))?);
            writeln!(w, "step,epoch,lr,total,cls,reg")?;
            Some(w)
        }
        None => None,
    };
    let bs = cfg.train.batch_size;
    let steps_per_epoch = scenes.len().div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.train.epochs;
    let mut summary = TrainSummary {
        config_hash: cfg.hash(),
        revision: REVISION.into(),
        steps: 0,
        epochs: cfg.train.epochs,
        first_step_loss: None,
        final_step_loss: None,
        epoch_losses: vec![],
        best_epoch: None,
    };
    let mut best = f64::INFINITY;
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5348_5546 + epoch as u64)));
        let mut epoch_sum = 0.0;
        for batch in order.chunks(bs) {
            let stream = mix_seed(cfg.seed, epoch as u64);
            let results: Vec<Result<(Vec<Vec<f64>>, LossBreakdown)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| scene_gradients(&model, &encoder, &scenes[i], cfg, mix_seed(stream, i as u64)))
                    .collect()
            });
            // ordered reduction: identical for any worker count
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let (mut tot, mut cls, mut reg) = (0.0, 0.0, 0.0);
            for r in results {
                let (g, b) = r.map_err(|e| on_failure(&model, out, e))?;
                tot += b.total;
                cls += b.cls;
                reg += b.reg;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(gi) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            let mut sq = 0.0;
            for a in grads.iter_mut() {
                for x in a.iter_mut() {
                    *x *= inv;
                    sq += *x * *x;
                }
            }
            if let Some(clip) = cfg.train.grad_clip {
                let norm = sq.sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.iter_mut().flatten().for_each(|x| *x *= s);
                }
            }
            let (tot, cls, reg) = (tot * inv, cls * inv, reg * inv);
            if !tot.is_finite() {
                return Err(on_failure(&model, out, Error::NonFinite(format!("loss at step {}", summary.steps))));
            }
            let lr = cfg.train.schedule.lr_at(cfg.train.optimizer.lr, summary.steps, total_steps);
            if let Err(e) = opt.step(&mut model.params, &grads, lr) {
                return Err(on_failure(&model, out, e));
            }
            if let Some(w) = log.as_mut() {
                writeln!(w, "{},{},{},{},{},{}", summary.steps, epoch, lr, tot, cls, reg)?;
            }
            summary.first_step_loss.get_or_insert(tot);
            summary.final_step_loss = Some(tot);
            summary.steps += 1;
            epoch_sum += tot * batch.len() as f64;
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        let mean = epoch_sum / scenes.len() as f64;
        summary.epoch_losses.push(mean);
        if mean < best {
            best = mean;
            summary.best_epoch = Some(epoch);
            if let Some(dir) = out {
                write_checkpoint(&model, &dir.join("best.bin"))?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out {
        write_checkpoint(&model, &dir.join("checkpoint.bin"))?;
        fs::write(dir.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
        fs::write(dir.join("config.json"), cfg.to_json())?;
    }
    Ok(TrainedModel { model, summary })
}

/// Train on the dataset in `dataset` and write results into `out`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<TrainSummary> {
    let scenes = load_dataset(dataset)?;
    Ok(train(cfg, &scenes, Some(out))?.summary)
}
