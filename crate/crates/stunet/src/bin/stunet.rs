use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stunet::commands;
use stunet::RunConfig;

/// Graph time-series forecasting with a spatio-temporal U-shaped GRU network.
#[derive(Parser)]
#[command(name = "stunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(Common),
    /// Score a checkpoint on the test split against the historical average.
    Eval(Common),
    /// Forecast from the most recent window of observations.
    Predict {
        #[command(flatten)]
        common: Common,
        /// CSV with exactly input_len rows in the series layout.
        #[arg(long)]
        window: PathBuf,
    },
    /// Coarsen the graph and write the node-to-super-node mapping.
    Partition(Common),
    /// Generate a grid graph with a diffusion series and a manifest.
    Synth(Common),
    /// Compare GCGRU, T-UNet, S-UNet and ST-UNet over several seeds.
    Ablation(Common),
    /// Compare the unpooling strategies over several seeds.
    UpsampleCompare(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adjacency file.
    #[arg(long)]
    adj: Option<PathBuf>,
    /// Series CSV, T rows of N·D values.
    #[arg(long)]
    series: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// GCGRU, T-UNet, S-UNet or ST-UNet.
    #[arg(long)]
    variant: Option<String>,
    /// Coarsening depth for `partition`.
    #[arg(long)]
    level: Option<usize>,
    /// Any config field, e.g. `--set epochs=20 --set hidden=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set_pair(o)?;
        }
        let paths = [("adj", &self.adj), ("series", &self.series), ("ckpt", &self.ckpt), ("out", &self.out)];
        for (key, p) in paths {
            if let Some(p) = p {
                cfg.set(key, &p.display().to_string())?;
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = &self.variant {
            cfg.set("variant", v)?;
        }
        if let Some(l) = self.level {
            cfg.level = l;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let out = commands::train_cmd(&c.resolve()?)?;
            let best = out.log.best_epoch.map_or_else(|| "initial".into(), |e| format!("epoch {e}"));
            println!("checkpoint {} ({best} kept)", out.checkpoint.display());
            println!("log {}", out.log_path.display());
        }
        Command::Eval(c) => {
            let out = commands::eval_cmd(&c.resolve()?)?;
            print!("{}", std::fs::read_to_string(&out.text).context("reading the report back")?);
        }
        Command::Predict { common, window } => {
            let (path, f) = commands::predict_cmd(&common.resolve()?, &window)?;
            println!("{} steps written to {}", f.len(), path.display());
        }
        Command::Partition(c) => {
            let (path, counts) = commands::partition_cmd(&c.resolve()?)?;
            for (k, n) in counts.iter().enumerate() {
                println!("level {k}: {n} nodes");
            }
            println!("mapping {}", path.display());
        }
        Command::Synth(c) => {
            let out = commands::synth_cmd(&c.resolve()?)?;
            println!("adjacency {}", out.adjacency.display());
            println!("series {}", out.series.display());
            println!("manifest {}", out.manifest.display());
        }
        Command::Ablation(c) => {
            let out = commands::ablation_cmd(&c.resolve()?)?;
            print!("{}", std::fs::read_to_string(&out.text).context("reading the report back")?);
        }
        Command::UpsampleCompare(c) => {
            let out = commands::upsample_cmd(&c.resolve()?)?;
            print!("{}", std::fs::read_to_string(&out.text).context("reading the report back")?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
