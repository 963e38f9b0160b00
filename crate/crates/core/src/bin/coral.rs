use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coral::commands::{self, QueryArgs};
use coral::config::{Preset, RunConfig};
use coral::{CoralError, Result};

/// Camera + LiDAR place recognition.
#[derive(Parser)]
#[command(name = "coral", version)]
struct Cli {
    /// key = value overrides applied on top of the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for render-elev)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset
    GenData,
    /// Elevation map and PGM per sample
    BuildMap {
        #[arg(long)]
        data: PathBuf,
        /// Also write projection tables as text
        #[arg(long)]
        dump_tables: bool,
    },
    /// PGM from a stored elevation map
    RenderElev {
        #[arg(long)]
        map: PathBuf,
        /// Height window `min,max` in meters
        #[arg(long, value_parser = parse_window)]
        window: Option<(f64, f64)>,
        /// Sensor height the configured window is placed around
        #[arg(long, default_value_t = 0.0)]
        sensor_z: f64,
    },
    /// Train and write checkpoints plus the loss curve
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Describe a dataset with a checkpoint and report recall
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Top-k database ids for one sample
    Query {
        #[arg(long)]
        db: PathBuf,
        /// Descriptor file holding the query (default: the database)
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        id: u64,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        exclude_run: Option<u32>,
    },
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected min,max")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = RunConfig::preset(cli.preset);
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(CoralError::Config(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::from_file(p, base)?,
        None => base,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CoralError::Config("--out is required for this command".into()))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::GenData => {
            let n = commands::gen_data(&cfg, out_dir(cli)?)?;
            println!("wrote {n} samples");
        }
        Cmd::BuildMap { data, dump_tables } => {
            let out = cli.out.as_deref().unwrap_or(data);
            let n = commands::build_maps(&cfg, data, out, *dump_tables)?;
            println!("built {n} maps");
        }
        Cmd::RenderElev { map, window, sensor_z } => {
            let img = commands::render_elev(&cfg, map, out_dir(cli)?, *window, *sensor_z)?;
            println!("rendered {}x{} window [{}, {}]", img.width(), img.height(), img.h_min, img.h_max);
        }
        Cmd::Train { data } => {
            let rep = commands::train_cmd(&cfg, data, out_dir(cli)?, |step, loss| {
                if step % 20 == 0 {
                    eprintln!("step {step} loss {loss:.5}");
                }
            })?;
            let last = rep.curve.last().map_or(f64::NAN, |r| r.loss);
            println!("trained {} steps, final loss {last:.6}", rep.curve.len());
        }
        Cmd::Evaluate { data, checkpoint } => {
            let rep = commands::evaluate_cmd(&cfg, data, checkpoint, out_dir(cli)?)?;
            for (run, (r1, r1p, n)) in rep.by_run() {
                println!("run {run}: recall@1={r1:.4} recall@1%={r1p:.4} queries={n}");
            }
            println!("{}", rep.summary());
        }
        Cmd::Query { db, queries, id, k, exclude_run } => {
            let ranked = commands::query_cmd(&QueryArgs {
                db: db.clone(),
                queries: queries.clone(),
                id: *id,
                k: k.unwrap_or(cfg.eval.top_k),
                exclude_run: *exclude_run,
            })?;
            for (rank, (rid, d)) in ranked.iter().enumerate() {
                println!("{} {rid} {d:.6}", rank + 1);
            }
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
