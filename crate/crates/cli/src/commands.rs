use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use figgen_core::autoencoder::{ConvFeatureExtractor, ExtractorKind};
use figgen_core::corpus::{
    aspect_ratio_filter, load_manifest, pad_and_resize, prepare_samples, ratio_histogram,
    split_train_val, synthesize_corpus, write_manifest, MANIFEST_FILE,
};
use figgen_core::diffusion::generate;
use figgen_core::imaging::compose_grid;
use figgen_core::metrics::{evaluate, MetricExtractor};
use figgen_core::trainer::{
    load_diffusion, AutoencoderTrainer, DiffusionTrainer, JsonlLog, TrainConfig,
};
use figgen_core::{DType, Device, FigureRecord, Image, SamplerConfig, Tokenizer};
use serde_json::json;

use crate::config::{ConfigError, RunConfig, CONFIG_ECHO};

pub const VERSION_FILE: &str = "VERSION";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const AE_CHECKPOINT: &str = "autoencoder.ckpt";
pub const LDM_CHECKPOINT: &str = "diffusion.ckpt";
pub const LOG_FILE: &str = "log.jsonl";
const GRID_GUTTER: usize = 4;
const RATIO_EDGES: [f64; 8] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0];

#[derive(Parser)]
#[command(name = "figgen", version, about = "Text-to-figure latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of this stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded synthetic figure corpus as a manifest plus PNGs.
    SynthesizeCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filters, pads and splits a manifest and trains the caption tokenizer.
    PrepareData {
        /// JSON-Lines manifest, or a directory holding `manifest.jsonl`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    TrainAutoencoder {
        /// Directory written by `prepare-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint written by `train-autoencoder`.
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Generates one image per caption line and column, plus a grid and a JSON sidecar.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Plain text, one caption per line.
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Columns are these guidance scales instead of seeds, e.g. `1.0,5.0,10.0`.
        #[arg(long, value_delimiter = ',')]
        cfg_grid: Option<Vec<f64>>,
        /// Columns are consecutive seeds starting at the sampler seed.
        #[arg(long, default_value_t = 1)]
        num_seeds: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Scores generated images against caption-matched references.
    Evaluate {
        /// Sample directory or manifest file.
        #[arg(long)]
        generated: PathBuf,
        /// Reference directory or manifest file.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthesizeCorpus { n, seed, out } => synthesize(n, seed, &out),
        Command::PrepareData {
            manifest,
            out,
            common,
        } => prepare_data(&manifest, &out, &common),
        Command::TrainAutoencoder {
            data,
            out,
            common,
            train,
        } => train_autoencoder(&data, &out, &common, &train),
        Command::TrainDiffusion {
            data,
            out,
            autoencoder,
            common,
            train,
        } => train_diffusion(&data, &out, autoencoder.as_deref(), &common, &train),
        Command::Sample {
            checkpoint,
            captions,
            out,
            cfg_scale,
            steps,
            eta,
            cfg_grid,
            num_seeds,
            common,
        } => {
            let flags = SampleFlags {
                cfg_scale,
                steps,
                eta,
                cfg_grid,
                num_seeds,
            };
            sample(&checkpoint, &captions, &out, &flags, &common)
        }
        Command::Evaluate {
            generated,
            reference,
            n,
            out,
            common,
        } => evaluate_cmd(&generated, &reference, n, &out, &common),
    }
}

fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig, Option<u64>)) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    apply(&mut config, common.seed);
    config.validate()?;
    Ok(config)
}

/// Creates `dir` and writes the resolved config echo and version string into it.
fn open_run_dir(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_ECHO), config.to_toml())?;
    fs::write(
        dir.join(VERSION_FILE),
        format!("figgen {}\n", env!("CARGO_PKG_VERSION")),
    )?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn synthesize(n: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(ConfigError("--n must be positive".into()).into());
    }
    let config = RunConfig {
        seed,
        ..RunConfig::default()
    };
    open_run_dir(out, &config)?;
    let records = synthesize_corpus(n, seed);
    let path = write_manifest(out, &records)?;
    log::info!("wrote {n} records to {}", path.display());
    Ok(())
}

fn prepare_data(manifest: &Path, out: &Path, common: &Common) -> Result<()> {
    let config = resolve(common, |c, seed| {
        if let Some(s) = seed {
            c.seed = s;
        }
    })?;
    let path = if manifest.is_dir() {
        manifest.join(MANIFEST_FILE)
    } else {
        manifest.to_path_buf()
    };
    let records = load_manifest(&path).with_context(|| format!("loading {}", path.display()))?;
    let corpus = &config.corpus;
    let input = records.len();
    let histogram = ratio_histogram(&records, &RATIO_EDGES);
    let kept = aspect_ratio_filter(records, corpus.min_aspect, corpus.max_aspect);
    if kept.is_empty() {
        anyhow::bail!(
            "no record of {} has an aspect ratio in [{}, {}]",
            manifest.display(),
            corpus.min_aspect,
            corpus.max_aspect
        );
    }
    let ids: Vec<String> = kept.iter().map(|r| r.id.clone()).collect();
    let (train_ids, val_ids) = split_train_val(&ids, corpus.val_fraction, config.seed);
    let val_set: HashSet<&String> = val_ids.iter().collect();
    let (train, val): (Vec<FigureRecord>, Vec<FigureRecord>) =
        kept.into_iter().partition(|r| !val_set.contains(&r.id));

    let captions: Vec<&str> = train.iter().map(|r| r.caption.as_str()).collect();
    let tokenizer = Tokenizer::train(&captions, corpus.tokenizer())?;

    open_run_dir(out, &config)?;
    tokenizer.save(&out.join(TOKENIZER_FILE))?;
    for (name, part) in [("train", &train), ("val", &val)] {
        let padded: Vec<FigureRecord> = part
            .iter()
            .map(|r| {
                FigureRecord::new(
                    r.id.clone(),
                    pad_and_resize(&r.image, corpus.resolution),
                    r.caption.clone(),
                )
            })
            .collect::<figgen_core::Result<_>>()?;
        write_manifest(&out.join(name), &padded)?;
        let listing: String = part.iter().map(|r| format!("{}\n", r.id)).collect();
        fs::write(out.join(format!("{name}.txt")), listing)?;
    }
    let stats = json!({
        "input": input,
        "kept": train.len() + val.len(),
        "dropped": input - train.len() - val.len(),
        "train": train_ids.len(),
        "val": val_ids.len(),
        "aspect_bounds": [corpus.min_aspect, corpus.max_aspect],
        "ratio_histogram": { "edges": RATIO_EDGES, "counts": histogram },
        "vocab_size": tokenizer.vocab_size(),
    });
    write_json(&out.join("stats.json"), &stats)?;
    log::info!(
        "kept {} of {input} records: {} train, {} val",
        train.len() + val.len(),
        train.len(),
        val.len()
    );
    Ok(())
}

fn apply_train_flags(t: &mut TrainConfig, seed: Option<u64>, flags: &TrainFlags) {
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(m) = flags.max_steps {
        t.max_steps = m;
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = flags.learning_rate {
        t.learning_rate = lr;
    }
}

fn training_records(data: &Path) -> Result<Vec<FigureRecord>> {
    let manifest = data.join("train").join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(ConfigError(format!(
            "{} is not a prepared dataset (no {})",
            data.display(),
            manifest.display()
        ))
        .into());
    }
    Ok(load_manifest(&manifest)?)
}

fn log_progress(
    log: &mut JsonlLog,
    every: u64,
) -> impl FnMut(&figgen_core::TrainLogRecord) -> figgen_core::Result<()> + '_ {
    move |r| {
        log.write(r)?;
        if r.step % every == 0 {
            let losses: Vec<String> = r
                .losses
                .iter()
                .map(|(k, v)| format!("{k}={v:.4}"))
                .collect();
            log::info!("step {} {}", r.step, losses.join(" "));
        }
        Ok(())
    }
}

fn train_autoencoder(data: &Path, out: &Path, common: &Common, flags: &TrainFlags) -> Result<()> {
    let config = resolve(common, |c, seed| {
        apply_train_flags(&mut c.train_autoencoder, seed, flags)
    })?;
    let side = config.autoencoder.input_resolution;
    let images: Vec<Image> = training_records(data)?
        .iter()
        .map(|r| pad_and_resize(&r.image, side))
        .collect();
    let mut trainer = match &flags.resume {
        Some(path) => AutoencoderTrainer::resume(path, images, Some(&config.train_autoencoder))?,
        None => AutoencoderTrainer::new(&config.train_autoencoder, &config.autoencoder, images)?,
    };
    open_run_dir(out, &config)?;
    let mut log = JsonlLog::create(&out.join(LOG_FILE))?;
    let every = (config.train_autoencoder.max_steps / 20).max(1);
    trainer.run(
        Some(&out.join(AE_CHECKPOINT)),
        &mut log_progress(&mut log, every),
    )?;
    log::info!(
        "autoencoder checkpoint at step {} in {}",
        trainer.step(),
        out.join(AE_CHECKPOINT).display()
    );
    Ok(())
}

fn train_diffusion(
    data: &Path,
    out: &Path,
    autoencoder: Option<&Path>,
    common: &Common,
    flags: &TrainFlags,
) -> Result<()> {
    let config = resolve(common, |c, seed| {
        apply_train_flags(&mut c.train_diffusion, seed, flags)
    })?;
    let ae_path = match (autoencoder, &flags.resume) {
        (_, Some(_)) => None,
        (Some(p), None) if p.is_file() => Some(p),
        (Some(p), None) => {
            return Err(ConfigError(format!(
                "autoencoder checkpoint {} does not exist",
                p.display()
            ))
            .into())
        }
        (None, None) => {
            return Err(
                ConfigError("--autoencoder is required unless --resume is given".into()).into(),
            )
        }
    };
    let records = training_records(data)?;
    let tokenizer = Tokenizer::load(&data.join(TOKENIZER_FILE))?;
    let samples = prepare_samples(&records, &tokenizer, config.autoencoder.input_resolution);
    let mut trainer = match (&flags.resume, ae_path) {
        (Some(path), _) => DiffusionTrainer::resume(path, &samples, Some(&config.train_diffusion))?,
        (None, Some(ae)) => DiffusionTrainer::new(
            &config.train_diffusion,
            &config.diffusion,
            ae,
            tokenizer,
            &samples,
        )?,
        (None, None) => unreachable!("checked above"),
    };
    open_run_dir(out, &config)?;
    let mut log = JsonlLog::create(&out.join(LOG_FILE))?;
    let every = (config.train_diffusion.max_steps / 20).max(1);
    trainer.run(
        Some(&out.join(LDM_CHECKPOINT)),
        &mut log_progress(&mut log, every),
    )?;
    log::info!(
        "diffusion checkpoint at step {} in {}",
        trainer.step(),
        out.join(LDM_CHECKPOINT).display()
    );
    Ok(())
}

struct SampleFlags {
    cfg_scale: Option<f64>,
    steps: Option<usize>,
    eta: Option<f64>,
    cfg_grid: Option<Vec<f64>>,
    num_seeds: u64,
}

fn read_captions(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let captions: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if captions.is_empty() {
        return Err(ConfigError(format!("captions file {} is empty", path.display())).into());
    }
    Ok(captions)
}

fn sample(
    checkpoint: &Path,
    captions_path: &Path,
    out: &Path,
    flags: &SampleFlags,
    common: &Common,
) -> Result<()> {
    let config = resolve(common, |c, seed| {
        let s = &mut c.sampler;
        if let Some(v) = seed {
            s.seed = v;
        }
        if let Some(v) = flags.cfg_scale {
            s.cfg_scale = v;
        }
        if let Some(v) = flags.steps {
            s.num_steps = v;
        }
        if let Some(v) = flags.eta {
            s.eta = v;
        }
    })?;
    if flags.num_seeds == 0 {
        return Err(ConfigError("--num-seeds must be positive".into()).into());
    }
    let columns: Vec<SamplerConfig> = match &flags.cfg_grid {
        Some(scales) => scales
            .iter()
            .map(|&s| SamplerConfig {
                cfg_scale: s,
                ..config.sampler.clone()
            })
            .collect(),
        None => (0..flags.num_seeds)
            .map(|k| SamplerConfig {
                seed: config.sampler.seed + k,
                ..config.sampler.clone()
            })
            .collect(),
    };
    let captions = read_captions(captions_path)?;
    let bundle = load_diffusion(checkpoint, &Device::Cpu)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    for c in &columns {
        c.validate(bundle.model.schedule().num_timesteps())?;
    }
    open_run_dir(out, &config)?;

    let tokens: Vec<_> = captions
        .iter()
        .map(|c| bundle.tokenizer.encode(c))
        .collect();
    let mut grid: Vec<Vec<Image>> = vec![Vec::new(); captions.len()];
    let mut records = Vec::new();
    let mut unet_evals = 0;
    for c in &columns {
        let (images, stats) = generate(&bundle.model, &bundle.autoencoder, &tokens, c)?;
        unet_evals += stats.unet_evals;
        for (i, img) in images.into_iter().enumerate() {
            let img = img.quantized();
            let id = format!("c{i:03}-seed{}-cfg{}", c.seed, c.cfg_scale);
            records.push(FigureRecord::new(id, img.clone(), captions[i].clone())?);
            grid[i].push(img);
        }
    }
    write_manifest(out, &records)?;
    compose_grid(&grid, GRID_GUTTER)?.save_png(&out.join("grid.png"))?;
    let sidecar = json!({
        "checkpoint": checkpoint,
        "checkpoint_step": bundle.step,
        "captions": captions,
        "columns": columns,
        "column_kind": if flags.cfg_grid.is_some() { "cfg_scale" } else { "seed" },
        "images": records.iter().map(|r| format!("images/{}.png", r.id)).collect::<Vec<_>>(),
        "unet_evals": unet_evals,
        "latent_scale": bundle.model.latent_scale(),
        "dtype": format!("{:?}", DType::F32),
    });
    write_json(&out.join("sidecar.json"), &sidecar)?;
    log::info!(
        "wrote {} images and grid.png to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(
    generated: &Path,
    reference: &Path,
    n: Option<usize>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let config = resolve(common, |c, seed| {
        if let Some(s) = seed {
            c.metrics.extractor_seed = s;
        }
        if let Some(n) = n {
            c.metrics.num_samples = n;
        }
    })?;
    let seed = config.metrics.extractor_seed;
    let extractor = MetricExtractor::new(seed, &Device::Cpu)?;
    let ocr = ConvFeatureExtractor::new(ExtractorKind::Ocr, seed, DType::F32, &Device::Cpu)?;
    let mut report = evaluate(
        generated,
        reference,
        &extractor,
        &ocr,
        config.metrics.num_samples,
    )?;
    report.config =
        json!({ "generated": generated, "reference": reference, "metrics": config.metrics });
    open_run_dir(out, &config)?;
    report.write(&out.join("report.json"))?;
    print!("{}", report.table());
    Ok(())
}
