use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use setcomp::experiment::{
    checkpoint_path, evaluate, load_data, load_trained, render_preview, split, summarize, table_csv, train_all,
    ExperimentConfig, MetricRecord,
};

#[derive(Parser)]
#[command(name = "setcomp", version, about = "Train and evaluate compositional set embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every model of the experiment for every seed.
    Train(Args),
    /// Evaluate trained checkpoints on held-out data.
    Eval(Args),
    /// Write one rendering per label set of a test episode.
    RenderPreview(Args),
    /// Combine evaluation metrics into CSV tables and a JSON summary.
    Report(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// First seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Held while a command writes into an output directory.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".setcomp.lock");
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("output directory {} is locked by another run ({})", dir.display(), path.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_config(args: &Args) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| setcomp::Error::Config(format!("reading {}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("metrics.jsonl")
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let store = load_data(cfg).context("train: loading data")?;
    let sp = split(cfg, &store).context("train: splitting data")?;
    train_all(cfg, &sp, Some(&cfg.out_dir), &mut progress).context("train")?;
    Ok(())
}

fn eval(cfg: &ExperimentConfig) -> Result<()> {
    let mut checkpoints = Vec::new();
    for seed in cfg.seed_list() {
        for kind in cfg.models() {
            let path = checkpoint_path(&cfg.out_dir, &kind, seed);
            let digest = file_digest(&path).context("eval: checkpoint missing; run `train` first")?;
            checkpoints.push((path, digest));
        }
    }
    let models = load_trained(cfg, &cfg.out_dir).context("eval: loading checkpoints")?;
    let store = load_data(cfg).context("eval: loading data")?;
    let sp = split(cfg, &store).context("eval: splitting data")?;
    let records = evaluate(cfg, &sp, &models, &mut progress).context("eval")?;
    for (path, before) in &checkpoints {
        if file_digest(path)? != *before {
            anyhow::bail!("eval: checkpoint {} changed during evaluation", path.display());
        }
    }
    let mut f = fs::File::create(metrics_path(cfg)).context("eval: writing metrics")?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig) -> Result<()> {
    let path = metrics_path(cfg);
    let text = fs::read_to_string(&path).with_context(|| format!("report: reading {}; run `eval` first", path.display()))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<MetricRecord>, _>>()
        .context("report: parsing metrics")?;
    let summary = summarize(cfg, &records).context("report")?;
    fs::write(cfg.out_dir.join("table.csv"), table_csv(&summary))?;
    fs::write(cfg.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print!("{}", table_csv(&summary));
    Ok(())
}

fn preview(cfg: &ExperimentConfig) -> Result<()> {
    let store = load_data(cfg).context("render-preview: loading data")?;
    let dir = cfg.out_dir.join("preview");
    let files = render_preview(cfg, &store, &dir).context("render-preview")?;
    let mut index = String::from("file,label_set\n");
    for (path, t) in &files {
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        index.push_str(&format!("{name},\"{t}\"\n"));
    }
    fs::write(dir.join("labels.csv"), index)?;
    eprintln!("wrote {} previews to {}", files.len(), dir.display());
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    let args = match command {
        Command::Train(a) | Command::Eval(a) | Command::RenderPreview(a) | Command::Report(a) => a,
    };
    let cfg = load_config(args)?;
    let _lock = Lock::acquire(&cfg.out_dir)?;
    match command {
        Command::Train(_) => train(&cfg),
        Command::Eval(_) => eval(&cfg),
        Command::RenderPreview(_) => preview(&cfg),
        Command::Report(_) => report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<setcomp::Error>(), Some(setcomp::Error::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
