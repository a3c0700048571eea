//! `csdm`: data preparation, training, staged evaluation and timing.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{Map, Value};

use csdm::backbones::{BackboneKind, BackboneModel};
use csdm::data::{
    self, decode_cache, encode_cache, hex_digest, split_cold_warm, synth_dataset, Dataset,
    DatasetSplits,
};
use csdm::diffusion::subsequence;
use csdm::warmup::{self, bench, DataSource, ExperimentConfig, RunRngs};

const ENV_PREFIX: &str = "CSDM_";
const CACHE_FILE: &str = "splits.bin";
const BACKBONE_DIR: &str = "backbone";
const DIFFUSION_DIR: &str = "diffusion";

#[derive(Parser)]
#[command(
    name = "csdm",
    version,
    about = "Cold-start item embedding warm-up with a supervised diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode and split the dataset, writing the splits cache.
    PrepareData(Common),
    /// Train the backbone on old items and save a checkpoint.
    Pretrain(Common),
    /// Train the diffusion stack against the saved backbone.
    TrainDiffusion(Common),
    /// Full pipeline: pretrain, diffusion, write-back, staged evaluation.
    RunAll(Common),
    /// Time backbone-only and combined training steps.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Batches to time per measurement.
        #[arg(long, default_value_t = 20)]
        batches: usize,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON file with flat configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding ratings.dat, users.dat and movies.dat.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Use generated data instead of MovieLens.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    rho: Option<f64>,
    /// Sub-sequence stride for generation.
    #[arg(long)]
    s: Option<usize>,
}

/// Failures split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// Resolved configuration plus the raw config file text, if any.
struct Resolved {
    config: ExperimentConfig,
    file_text: Option<String>,
    run_dir: PathBuf,
}

fn parse_env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// defaults < config file < `CSDM_*` environment < flags.
fn resolve(common: &Common) -> Result<Resolved, Failure> {
    let mut overrides = Map::new();
    let mut file_text = None;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(usage)?;
        let v: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(usage)?;
        let Value::Object(map) = v else {
            return Err(usage(anyhow!(
                "config {} must be a JSON object",
                path.display()
            )));
        };
        overrides.extend(map);
        file_text = Some(text);
    }

    let keys: Vec<String> =
        match serde_json::to_value(ExperimentConfig::default()).expect("config serializes") {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("config is an object"),
        };
    for key in &keys {
        if let Ok(raw) = std::env::var(format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
            overrides.insert(key.clone(), parse_env_value(&raw));
        }
    }

    if common.synthetic {
        overrides.insert("source".into(), Value::String("synthetic".into()));
    }
    if let Some(seed) = common.seed {
        overrides.insert("seed".into(), seed.into());
    }
    if let Some(b) = common.backbone {
        overrides.insert("backbone".into(), b.name().into());
    }
    if let Some(rho) = common.rho {
        overrides.insert("rho".into(), rho.into());
    }
    if let Some(s) = common.s {
        overrides.insert("s".into(), s.into());
    }

    let synthetic = overrides.get("source").and_then(Value::as_str) == Some("synthetic");
    let base = if synthetic {
        ExperimentConfig::synthetic()
    } else {
        ExperimentConfig::default()
    };
    let Value::Object(mut merged) = serde_json::to_value(base).expect("config serializes") else {
        unreachable!("config is an object")
    };
    for (k, v) in overrides {
        merged.insert(k, v);
    }
    let config: ExperimentConfig = serde_json::from_value(Value::Object(merged))
        .context("invalid configuration")
        .map_err(usage)?;
    config
        .validate()
        .context("invalid configuration")
        .map_err(usage)?;
    let run_dir = common.out.join(config.run_id());
    Ok(Resolved {
        config,
        file_text,
        run_dir,
    })
}

fn load_source(common: &Common, cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    match cfg.source {
        DataSource::Synthetic => Ok(synth_dataset(&cfg.synth())?),
        DataSource::Movielens => {
            let dir = common.data_dir.as_ref().ok_or_else(|| {
                usage(anyhow!(
                    "--data-dir is required unless --synthetic is given"
                ))
            })?;
            if !dir.is_dir() {
                return Err(usage(anyhow!(
                    "data directory {} does not exist",
                    dir.display()
                )));
            }
            let raw = data::movielens::load_movielens(dir)?;
            Ok(data::movielens::encode_movielens(&raw)?)
        }
    }
}

fn prepare(common: &Common, r: &Resolved) -> Result<(Dataset, DatasetSplits), Failure> {
    let ds = load_source(common, &r.config)?;
    let splits = split_cold_warm(&ds, r.config.split())?;
    let bytes = encode_cache(&ds, &splits)?;
    let path = r.run_dir.join(CACHE_FILE);
    std::fs::create_dir_all(&r.run_dir)
        .with_context(|| format!("creating {}", r.run_dir.display()))?;
    std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    let ratio = splits.new_old_ratio();
    let new_share = 100.0 * ratio / (1.0 + ratio);
    println!("old items: {}", splits.old_items.len());
    println!("new items: {}", splits.new_items.len());
    println!("warm-up items: {}", splits.warm_items.len());
    println!("new:old ratio: {:.1}:{:.1}", new_share, 100.0 - new_share);
    println!("cache: {} sha256 {}", path.display(), hex_digest(&bytes));
    // Work from the decoded cache so a fresh run and a cached run see the
    // instances in the same order.
    Ok(decode_cache(&bytes)?)
}

fn load_cache(run_dir: &Path) -> Result<(Dataset, DatasetSplits), Failure> {
    let path = run_dir.join(CACHE_FILE);
    let bytes = std::fs::read(&path)
        .with_context(|| {
            format!(
                "no splits cache at {}; run prepare-data first",
                path.display()
            )
        })
        .map_err(usage)?;
    Ok(decode_cache(&bytes)?)
}

fn load_or_prepare(common: &Common, r: &Resolved) -> Result<(Dataset, DatasetSplits), Failure> {
    if r.run_dir.join(CACHE_FILE).is_file() {
        load_cache(&r.run_dir)
    } else {
        prepare(common, r)
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    warmup::write_text(path, &text)?;
    Ok(())
}

fn run_manifest(r: &Resolved) -> Value {
    serde_json::json!({
        "run_id": r.config.run_id(),
        "config": r.config,
        "config_file": r.file_text,
    })
}

fn cmd_pretrain(r: &Resolved) -> Result<(), Failure> {
    let (ds, splits) = load_cache(&r.run_dir)?;
    let mut rngs = RunRngs::new(r.config.seed);
    let (model, curve) = warmup::pretrain(
        &ds,
        &splits,
        &r.config,
        rngs.backbone_init,
        &mut rngs.pretrain,
    )?;
    model.save(
        &r.run_dir.join(BACKBONE_DIR),
        r.config.seed,
        r.config.pretrain_epochs,
    )?;
    write_json(&r.run_dir.join("pretrain_curve.json"), &curve)?;
    write_json(&r.run_dir.join("manifest.json"), &run_manifest(r))?;
    println!(
        "backbone saved to {}",
        r.run_dir.join(BACKBONE_DIR).display()
    );
    Ok(())
}

fn cmd_train_diffusion(r: &Resolved) -> Result<(), Failure> {
    let (ds, splits) = load_cache(&r.run_dir)?;
    let dir = r.run_dir.join(BACKBONE_DIR);
    let mut backbone = BackboneModel::load(&dir, &ds.schema).with_context(|| {
        format!(
            "loading backbone from {}; run pretrain first",
            dir.display()
        )
    })?;
    backbone.freeze();
    let mut rngs = RunRngs::new(r.config.seed);
    let (stack, curve) = warmup::train_csdm(
        &backbone,
        &ds,
        &splits,
        &r.config,
        rngs.stack_init,
        &mut rngs.diffusion,
    )?;
    stack.save(
        &r.run_dir.join(DIFFUSION_DIR),
        r.config.seed,
        r.config.diffusion_epochs,
    )?;
    write_json(&r.run_dir.join("diffusion_curve.json"), &curve)?;
    println!(
        "diffusion stack saved to {}",
        r.run_dir.join(DIFFUSION_DIR).display()
    );
    Ok(())
}

fn cmd_run_all(common: &Common, r: &Resolved) -> Result<(), Failure> {
    let (ds, splits) = load_or_prepare(common, r)?;
    let cfg = &r.config;
    let seq = subsequence(cfg.steps, cfg.s)?;
    info!(
        "generation sub-sequence has {} steps ({} reverse hops, s = {})",
        seq.len(),
        seq.len() - 1,
        cfg.s
    );
    let out = warmup::run_experiment(&ds, &splits, cfg)?;
    out.backbone
        .save(&r.run_dir.join(BACKBONE_DIR), cfg.seed, cfg.pretrain_epochs)?;
    out.stack.save(
        &r.run_dir.join(DIFFUSION_DIR),
        cfg.seed,
        cfg.diffusion_epochs,
    )?;
    let run_id = cfg.run_id();
    let csv = warmup::results_csv(&run_id, cfg.backbone, &out.reports);
    warmup::write_text(&r.run_dir.join("results.csv"), &csv)?;
    warmup::write_text(
        &r.run_dir.join("plot.json"),
        &warmup::plot_json(&run_id, cfg.backbone, &out.reports),
    )?;
    write_json(&r.run_dir.join("stages.json"), &out.reports)?;
    write_json(&r.run_dir.join("pretrain_curve.json"), &out.pretrain_curve)?;
    write_json(
        &r.run_dir.join("diffusion_curve.json"),
        &out.diffusion_curve,
    )?;
    write_json(&r.run_dir.join("manifest.json"), &run_manifest(r))?;
    print!("{csv}");
    Ok(())
}

fn cmd_bench(common: &Common, r: &Resolved, batches: usize) -> Result<(), Failure> {
    let (ds, splits) = load_or_prepare(common, r)?;
    let rows = bench::bench(&ds, &splits, &r.config, batches, &[5, 10])?;
    let csv = bench::timings_csv(&rows);
    warmup::write_text(&r.run_dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::PrepareData(c) => {
            let r = resolve(c)?;
            prepare(c, &r)?;
            write_json(&r.run_dir.join("manifest.json"), &run_manifest(&r))
        }
        Command::Pretrain(c) => cmd_pretrain(&resolve(c)?),
        Command::TrainDiffusion(c) => cmd_train_diffusion(&resolve(c)?),
        Command::RunAll(c) => cmd_run_all(c, &resolve(c)?),
        Command::Bench { common, batches } => cmd_bench(common, &resolve(common)?, *batches),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
