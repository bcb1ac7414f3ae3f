//! `poifusion`: generate synthetic scenes, train and evaluate the decoder,
//! check gradients and render reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use poifusion_core::harness::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_report, cmd_train, tiny_config, GradcheckOptions, RunConfig,
};
use poifusion_core::scene::Corruption;
use poifusion_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "poifusion", version, about = "Multi-modal 3D detection decoder with fusion at points of interest")]
struct Cli {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scene datasets. Without --count, writes `train/` and `eval/`
    /// splits sized by the configuration; with --count, a single dataset.
    Gen {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint, optionally under corruptions
    /// (`calib:<max>[:<seed>]`, `camdrop:all`, `camdrop:<i>,<j>`, `sector:<center>:<width>`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        corruption: Vec<String>,
    },
    /// Finite-difference gradient check (tiny configuration unless --config is given).
    Gradcheck {
        /// Negative control: corrupt the analytic gradient of this block.
        #[arg(long)]
        corrupt_block: Option<String>,
    },
    /// Render plots and a summary of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let out = &cli.out;
    match cli.command {
        Command::Gen { count } => {
            let cfg = load_config(cli.config.as_deref(), None)?;
            match count {
                Some(n) => {
                    let seed = cli.seed.unwrap_or(cfg.data.train_seed);
                    let m = cmd_gen(&cfg.scene, seed, n, out)?;
                    println!("wrote {} scenes to {}", m.count, out.display());
                }
                None => {
                    let (ts, es) = match cli.seed {
                        Some(s) => (s, s.wrapping_add(1)),
                        None => (cfg.data.train_seed, cfg.data.eval_seed),
                    };
                    let t = cmd_gen(&cfg.scene, ts, cfg.data.train_scenes, &out.join("train"))?;
                    let e = cmd_gen(&cfg.scene, es, cfg.data.eval_scenes, &out.join("eval"))?;
                    println!("wrote {} train and {} eval scenes to {}", t.count, e.count, out.display());
                }
            }
        }
        Command::Train { data } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let s = cmd_train(&cfg, &data, out)?;
            println!(
                "trained {} steps; final epoch loss {:.4}; checkpoint in {}",
                s.steps,
                s.epoch_losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Eval { checkpoint, data, corruption } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let corruptions = corruption.iter().map(|c| Corruption::parse(c)).collect::<Result<Vec<_>>>()?;
            let r = cmd_eval(&cfg, &checkpoint, &data, &corruptions, out)?;
            println!("mAP {:.4} over {} scenes", r.map, r.num_scenes);
            for c in &r.classes {
                println!("  {:<12} AP {:.4}  {:?}", c.name, c.mean, c.ap);
            }
            for c in r.calibration_sweep.iter().chain(&r.corruptions) {
                println!("  {:<24} mAP {:.4}  delta {:+.4}", c.label, c.map, c.delta);
            }
        }
        Command::Gradcheck { corrupt_block } => {
            let mut cfg = match &cli.config {
                Some(p) => RunConfig::load(p)?,
                None => tiny_config(),
            };
            let mut opts = GradcheckOptions { corrupt_block, ..GradcheckOptions::default() };
            if let Some(s) = cli.seed {
                cfg.seed = s;
                opts.seed = s;
            }
            let r = cmd_gradcheck(&cfg, &opts, out)?;
            for b in &r.blocks {
                let verdict = if b.passed { "ok" } else { "FAIL" };
                println!("{:<10} {:>3} entries  max rel err {:.3e}  {verdict}", b.block, b.entries, b.max_rel_error);
            }
            println!("worst {:.3e} (tolerance {:.0e}) in {:.2}s", r.max_rel_error, r.tolerance, r.seconds);
            if !r.passed {
                let failed: Vec<&str> = r.blocks.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect();
                return Err(Error::GradientMismatch(failed.join(", ")));
            }
        }
        Command::Report { run } => {
            let s = cmd_report(&run, out)?;
            println!("wrote {} figure(s) and summary.json to {}", s.figures.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                2
            } else if e.is_numeric() {
                3
            } else {
                1
            })
        }
    }
}
