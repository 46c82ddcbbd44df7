//! `gean`: synthesize data, manipulate faces, train, predict and evaluate.
//!
//! Results go to stdout as `key=value` lines. Exit status is 0 on success,
//! 1 for usage errors (bad flags, unreadable config, missing inputs) and 2
//! when the pipeline itself fails.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gean::detector::Checkpoint;
use gean::pipeline::{
    evaluate, infer, load_dataset, save_dataset, synth_dataset, train, Manipulator, PipelineConfig,
};
use gean::{Image, LandmarkSet};

#[derive(Parser)]
#[command(name = "gean", version, about = "Landmark detection with aggregated manipulated faces")]
struct Cli {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set k_test=1` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic face dataset
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit K manipulated faces and their displacement files for one image
    Generate {
        #[arg(long)]
        image: PathBuf,
        /// Landmark file anchoring the manipulation
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a dataset directory
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
        /// Checkpoint path to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict landmarks for one image
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Landmark file to write; coordinates are also printed
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report NME and the CED curve on a dataset directory
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Where to write the CED table as `threshold,fraction` CSV
        #[arg(long)]
        ced: Option<PathBuf>,
    },
}

/// Flags shared by the pipeline subcommands; each maps onto a config key.
#[derive(Args)]
struct Common {
    /// adv, Gadv or GK
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    k_train: Option<usize>,
    #[arg(long)]
    k_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(v) = &self.variant {
            out.push(("variant", v.clone()));
        }
        if let Some(k) = self.k_train {
            out.push(("k_train", k.to_string()));
        }
        if let Some(k) = self.k_test {
            out.push(("k_test", k.to_string()));
        }
        if let Some(s) = self.seed {
            out.push(("seed", s.to_string()));
        }
        out
    }
}

/// Usage problems are reported with exit status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(usage(format!("no such file or directory: {}", path.display())));
    }
    Ok(())
}

/// Builds the effective config: checkpoint echo, then file, then flags.
fn resolve_config(
    cli: &Cli,
    checkpoint: Option<&Checkpoint>,
    flags: &[(&str, String)],
) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(ck) = checkpoint {
        for (k, v) in &ck.meta {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v).with_context(|| format!("checkpoint config {key}"))?;
            }
        }
    }
    if let Some(path) = &cli.config {
        require(path)?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let unknown = cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if let Some((k, _)) = unknown.first() {
            return Err(usage(format!("{}: unknown key {k:?}", path.display())));
        }
    }
    let mut apply = |k: &str, v: &str| -> anyhow::Result<()> {
        match cfg.set(k, v) {
            Ok(true) => Ok(()),
            Ok(false) => Err(usage(format!("unknown config key {k:?}"))),
            Err(e) => Err(usage(e.to_string())),
        }
    };
    for (k, v) in flags {
        apply(k, v)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        apply(k.trim(), v.trim())?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require(path)?;
    Ok(Checkpoint::load(path)?)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth { n, seed, size, out } => {
            let data = synth_dataset(*n, *seed, *size)?;
            save_dataset(out, &data)?;
            println!("samples={n}");
            println!("out={}", out.display());
        }
        Command::Generate {
            image,
            landmarks,
            k,
            common,
            out,
        } => {
            require(image)?;
            require(landmarks)?;
            let cfg = resolve_config(cli, None, &common.pairs())?;
            let img = Image::load(image)?;
            let p = LandmarkSet::load(landmarks)?;
            let branches = k.unwrap_or(cfg.k_test);
            if branches == 0 {
                return Err(usage("--k must be at least 1"));
            }
            let faces = Manipulator::new(&cfg, p.len())?.generate(&img, &p, branches, cfg.seed)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            println!("variant={}", cfg.variant);
            println!("branches={}", faces.len());
            for (i, f) in faces.iter().enumerate() {
                f.image.save(out.join(format!("face_{i}.pgm")))?;
                f.control_target.save(out.join(format!("face_{i}.lm")))?;
                let mut disp = format!("L={}\n", f.displacement.len());
                for d in &f.displacement.0 {
                    let _ = writeln!(disp, "{:.12} {:.12}", d[0], d[1]);
                }
                let path = out.join(format!("displacement_{i}.txt"));
                fs::write(&path, disp).with_context(|| format!("writing {}", path.display()))?;
                println!("branch.{i}.max_displacement={}", f.displacement.max_abs());
                println!("branch.{i}.iterations={}", f.iterations_used);
            }
        }
        Command::Train {
            data,
            epochs,
            common,
            out,
        } => {
            require(data)?;
            let mut flags = common.pairs();
            if let Some(e) = epochs {
                flags.push(("epochs", e.to_string()));
            }
            let cfg = resolve_config(cli, None, &flags)?;
            let samples = load_dataset(data)?;
            let report = train(&cfg, &samples)?;
            report.checkpoint.save(out)?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch.{i}.loss={l}");
            }
            println!("skipped={}", report.skipped);
            println!("checkpoint={}", out.display());
        }
        Command::Infer {
            checkpoint,
            image,
            common,
            out,
        } => {
            require(image)?;
            let ck = load_checkpoint(checkpoint)?;
            let cfg = resolve_config(cli, Some(&ck), &common.pairs())?;
            let result = infer(&ck.detector, &Image::load(image)?, &cfg)?;
            println!("fallback={}", result.fallback);
            for (i, p) in result.landmarks.iter().enumerate() {
                println!("landmark.{i}={} {}", p.x, p.y);
            }
            if let Some(path) = out {
                result.landmarks.save(path)?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            common,
            ced,
        } => {
            require(data)?;
            let ck = load_checkpoint(checkpoint)?;
            let cfg = resolve_config(cli, Some(&ck), &common.pairs())?;
            let samples = load_dataset(data)?;
            let metrics = evaluate(&ck.detector, &samples, &cfg)?;
            println!("nme={}", metrics.nme_percent);
            println!("samples={}", samples.len());
            println!("fallbacks={}", metrics.fallbacks);
            println!("normalization={}", cfg.normalization);
            if let Some(path) = ced {
                let mut csv = String::from("threshold,fraction\n");
                for (t, f) in &metrics.ced {
                    let _ = writeln!(csv, "{t},{f}");
                }
                fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
                println!("ced={}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
