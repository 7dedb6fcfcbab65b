use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sanet_cli::{commands, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "sanet", version, about = "Train, run and inspect the point cloud completion network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// full, no_skip, skip_learnable or fold_cosine.
    #[arg(long)]
    mode: Option<String>,
    /// both, cd_only or emd_only.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    input_points: Option<String>,
    /// Output directory (the dataset root for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset split.
    GenData(Common),
    /// Train a model and write checkpoints plus a log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Complete one partial cloud and export intermediate levels.
    Complete {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Partial cloud, `.xyz` or ASCII `.ply`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-category Chamfer distance of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Trainable parameter counts.
    Params(Common),
}

fn resolve(c: &Common, gen_data: bool) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.config {
        cfg.load_file(p)?;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags = [("mode", &c.mode), ("loss", &c.loss), ("seed", &c.seed), ("steps", &c.steps), ("input_points", &c.input_points), ("split", &c.split)];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if let Some(d) = &c.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &c.out {
        if gen_data {
            cfg.data_dir = o.clone();
        } else {
            cfg.out_dir = o.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = resolve(&c, true)?;
            let ids = commands::gen_data(&cfg)?;
            println!("wrote {} shapes to {}", ids.len(), cfg.data_dir.join(&cfg.split).display());
        }
        Cmd::Train { common, resume } => {
            let cfg = resolve(&common, false)?;
            println!("{}", commands::LOG_HEADER);
            let out = commands::train(&cfg, resume.as_deref(), &mut std::io::stdout())?;
            println!("checkpoint at step {}: {}", out.last_step, out.checkpoint.display());
        }
        Cmd::Complete { common, checkpoint, input } => {
            let cfg = resolve(&common, false)?;
            for p in commands::complete(&cfg, &checkpoint, &input, &cfg.out_dir)? {
                println!("{}", p.display());
            }
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = resolve(&common, false)?;
            let (table, path) = commands::eval(&cfg, &checkpoint)?;
            print!("{}", table.to_tsv());
            println!("wrote {}", path.display());
        }
        Cmd::Params(c) => {
            let cfg = resolve(&c, false)?;
            let (breakdown, total) = commands::params(&cfg);
            print!("{}", commands::params_text(&breakdown, total));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
