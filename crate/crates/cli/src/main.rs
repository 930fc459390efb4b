use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sec_core::harness::{
    cmd_ablate, cmd_build_centroids, cmd_evaluate, cmd_gen_data, cmd_sweep_lambda, cmd_train, ExperimentConfig,
    HarnessError, Inputs,
};

#[derive(Parser)]
#[command(name = "sec", version, about = "Stratified expert cloning experiments on a synthetic retention simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every section seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the output directory if it exists.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate logged sessions and write trajectories.jsonl.
    GenData(Common),
    /// Stratify experts and train the multi-level policy.
    Train {
        #[command(flatten)]
        common: Common,
        /// Trajectory file from gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cluster encoded expert states into the centroid bank.
    BuildCentroids {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// checkpoint.json from train.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate adaptive selection and every fixed level in the simulator.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// centroids.json from build-centroids.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Paired-seed ablation: full, no_multilevel, no_aer.
    Ablate(Common),
    /// Paired-seed sweep over the regularization weight.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated grid, e.g. 0,0.001,0.01,0.1,1.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Print the resolved config as TOML.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.seeded(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData(c) => {
            let s = cmd_gen_data(&load(&c.config, c.seed)?, &c.out, c.overwrite)?;
            println!(
                "{} users, {} experts, {} state-action pairs, mean return time {:.3}",
                s.users, s.experts, s.pairs, s.mean_return_time
            );
        }
        Command::Train { common: c, data } => {
            let inputs = Inputs {
                trajectories: data,
                ..Inputs::default()
            };
            let t = cmd_train(&load(&c.config, c.seed)?, &inputs, &c.out, c.overwrite)?;
            let last = t.log.final_epoch();
            println!("pairs per level {:?}", t.pairs_per_level);
            for l in &last.levels {
                println!(
                    "epoch {} level {}: bc {:.5} aer {:.5} total {:.5}",
                    last.epoch, l.level, l.bc_loss, l.aer_loss, l.total
                );
            }
        }
        Command::BuildCentroids { common: c, data, checkpoint } => {
            let inputs = Inputs {
                trajectories: data,
                checkpoint,
                centroids: None,
            };
            let bank = cmd_build_centroids(&load(&c.config, c.seed)?, &inputs, &c.out, c.overwrite)?;
            println!("{} levels, thresholds {:?}", bank.k(), bank.deltas());
        }
        Command::Evaluate { common: c, checkpoint, bank } => {
            let inputs = Inputs {
                trajectories: None,
                checkpoint,
                centroids: bank,
            };
            let ev = cmd_evaluate(&load(&c.config, c.seed)?, &inputs, &c.out, c.overwrite)?;
            for (label, r) in &ev.rows {
                println!(
                    "{label:>9}: return time {:.4} ± {:.4}, click {:.4}, long view {:.4}",
                    r.return_time.mean, r.return_time.ci95, r.click_rate.mean, r.long_view_rate.mean
                );
            }
        }
        Command::Ablate(c) => {
            let r = cmd_ablate(&load(&c.config, c.seed)?, &c.out, c.overwrite)?;
            for row in &r.rows {
                println!(
                    "{:>13}: return time {:.4} (Δ {:+.4}), click {:.4}, long view {:.4}",
                    row.variant, row.return_time, row.delta_return_time, row.click_rate, row.long_view_rate
                );
            }
        }
        Command::SweepLambda { common: c, grid } => {
            let r = cmd_sweep_lambda(&load(&c.config, c.seed)?, grid.as_deref(), &c.out, c.overwrite)?;
            for row in &r.rows {
                println!("lambda {:>8}: return time {:.4} ± {:.4} (sd)", row.lambda, row.return_time, row.return_time_sd);
            }
            println!("best lambda {}", r.rows[r.best_index()].lambda);
        }
        Command::ShowConfig { config, seed } => print!("{}", load(&config, seed)?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
