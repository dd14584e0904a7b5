//! Subcommand implementations driving the pipeline end to end: dataset
//! materialization, the four training stages, concept encoding, sampling,
//! the optimization baseline, evaluation, and attention-map export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cli::checkpoint::save_checkpoint;
use crate::cli::config::{parse_config, RunConfig};
use crate::data::{category_name, dataset_sample, heldout_combos, sample_for_combo, Split};
use crate::diffcore::params::ParamSet;
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, invert_baseline};
use crate::globalmap::train_global;
use crate::localmap::train_local;
use crate::model::{load_model, Model};
use crate::pngio::{read_image_png, read_mask_png, write_gray_png, write_image_png};
use crate::pretrain::{classify, pretrain_encoders, train_backbone};
use crate::textenc::InjectMode;

/// Which concept words a prompt splice uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Only the primary word.
    Primary,
    /// All words, one per encoder tap.
    Full,
}

impl From<Mode> for InjectMode {
    fn from(m: Mode) -> InjectMode {
        match m {
            Mode::Primary => InjectMode::PrimaryOnly,
            Mode::Full => InjectMode::Full,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "elite-lab",
    about = "Desk-scale lab for encoder-based concept inversion in a latent diffusion model",
    after_help = "Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.\n\
                  ELITE_LAB_THREADS caps worker threads (all commands run serially within it)."
)]
pub struct Cli {
    /// JSON run configuration; omitted keys use built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset (images, masks, manifest) to disk.
    GenData {
        /// Number of training samples (default: dataset_size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Contrastive image/text encoder pretraining with category heads.
    PretrainEncoders,
    /// Latent autoencoder, latent statistics, and denoiser pretraining.
    TrainAutoencoder,
    /// Stage 1: train the global mapping and its attention projections.
    TrainGlobal,
    /// Stage 2: train the local mapping and its attention projections.
    TrainLocal,
    /// Map a concept image to word embeddings and write them as JSON.
    Encode {
        /// Concept image (PNG, any size matching the trained config).
        #[arg(long)]
        image: PathBuf,
    },
    /// Sample an image for a prompt with the concept spliced in.
    Generate {
        /// Concept image to encode and inject.
        #[arg(long)]
        image: PathBuf,
        /// Foreground mask enabling the local attention branch.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Prompt containing the S* placeholder.
        #[arg(long)]
        prompt: String,
        /// Fusion weight of the local branch.
        #[arg(long)]
        lambda: Option<f64>,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
        /// Splice mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Optimize a single word embedding against the denoising loss, the
    /// slow baseline that concept encoding replaces.
    InvertBaseline {
        /// Concept image.
        #[arg(long)]
        image: PathBuf,
        /// Optimization steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Category id for initialization; inferred from the image when
        /// omitted.
        #[arg(long)]
        combo: Option<usize>,
    },
    /// Score held-out concepts and benchmark encoding time.
    Eval,
    /// Export per-word cross-attention heatmaps for one generation.
    AttnMap {
        /// Concept image to encode and inject.
        #[arg(long)]
        image: PathBuf,
        /// Foreground mask enabling the local attention branch.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Prompt containing the S* placeholder.
        #[arg(long)]
        prompt: String,
        /// Fusion weight of the local branch.
        #[arg(long)]
        lambda: Option<f64>,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
        /// Splice mode (default: full, one map per word).
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

fn thread_cap() -> Result<usize> {
    match std::env::var("ELITE_LAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "ELITE_LAB_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ckpt_path(out_dir: &str, stage: &str) -> PathBuf {
    Path::new(out_dir).join("checkpoints").join(format!("{stage}.ckpt"))
}

/// Loads the most advanced existing checkpoint among `stages`, then swaps
/// in the current run config so knobs like learning rates, step counts,
/// and fusion weights follow this invocation. Structural fields must
/// match the checkpoint, since the weights were built from them.
fn load_stage(cfg: &RunConfig, stages: &[&str]) -> Result<(Model, ParamSet<f32>)> {
    for stage in stages {
        let path = ckpt_path(&cfg.out_dir, stage);
        if path.exists() {
            let (mut model, ps) = load_model::<f32>(&path)?;
            let saved = &model.config;
            let structural = [
                ("image_size", saved.image_size == cfg.image_size),
                ("patch_size", saved.patch_size == cfg.patch_size),
                ("img_dim", saved.img_dim == cfg.img_dim),
                ("img_blocks", saved.img_blocks == cfg.img_blocks),
                ("img_taps", saved.img_taps == cfg.img_taps),
                ("img_mlp_ratio", saved.img_mlp_ratio == cfg.img_mlp_ratio),
                ("txt_dim", saved.txt_dim == cfg.txt_dim),
                ("txt_blocks", saved.txt_blocks == cfg.txt_blocks),
                ("txt_max_len", saved.txt_max_len == cfg.txt_max_len),
                ("latent_channels", saved.latent_channels == cfg.latent_channels),
                ("ae_channels", saved.ae_channels == cfg.ae_channels),
                ("unet_channels", saved.unet_channels == cfg.unet_channels),
                ("temb_dim", saved.temb_dim == cfg.temb_dim),
                ("attn_dim", saved.attn_dim == cfg.attn_dim),
                ("norm_groups", saved.norm_groups == cfg.norm_groups),
                ("timesteps", saved.timesteps == cfg.timesteps),
                ("num_categories", saved.num_categories == cfg.num_categories),
            ];
            for (field, same) in structural {
                if !same {
                    return Err(Error::Config(format!(
                        "config `{field}` does not match the checkpoint {}; \
                         weights were built at the checkpointed value",
                        path.display()
                    )));
                }
            }
            model.config = cfg.clone();
            return Ok((model, ps));
        }
    }
    Err(Error::Config(format!(
        "no {} checkpoint under {}/checkpoints; run the earlier pipeline stages first",
        stages.join(" or "),
        cfg.out_dir
    )))
}

fn log_writer(out_dir: &str, name: &str) -> Result<BufWriter<File>> {
    let dir = Path::new(out_dir).join("logs");
    std::fs::create_dir_all(&dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn slug(text: &str) -> String {
    let mut s = String::new();
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            s.push(ch.to_ascii_lowercase());
        } else if !s.ends_with('-') && !s.is_empty() {
            s.push('-');
        }
    }
    let s = s.trim_end_matches('-').to_string();
    s.chars().take(40).collect()
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    loss: f64,
    ldm: f64,
}

#[derive(Serialize)]
struct PhaseRecord<'a> {
    phase: &'a str,
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct DataRecord {
    index: usize,
    combo: usize,
    category: String,
    image: String,
    mask: String,
    bbox: (usize, usize, usize, usize),
}

#[derive(Serialize)]
struct GenMeta {
    prompt: String,
    seed: u64,
    lambda: f64,
    steps: usize,
    guidance: f64,
    mode: String,
    stage: String,
    image: String,
    mask: Option<String>,
    output: String,
}

#[derive(Serialize)]
struct BaselineMeta {
    combo: usize,
    steps: usize,
    seconds: f64,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
}

fn gen_data(cfg: &RunConfig, count: Option<usize>) -> Result<()> {
    let out = Path::new(&cfg.out_dir).join("data");
    let train_dir = out.join("train");
    let held_dir = out.join("heldout");
    std::fs::create_dir_all(&train_dir)?;
    std::fs::create_dir_all(&held_dir)?;
    let mut manifest = BufWriter::new(File::create(out.join("manifest.jsonl"))?);

    let n = count.unwrap_or(cfg.dataset_size);
    for i in 0..n {
        let s = dataset_sample::<f32>(cfg, Split::Train, cfg.seed, i)?;
        let image = format!("train/{i:05}.png");
        let mask = format!("train/{i:05}_mask.png");
        write_image_png(&out.join(&image), &s.image)?;
        write_gray_png(&out.join(&mask), &s.mask)?;
        let record = DataRecord {
            index: i,
            combo: s.category_id,
            category: category_name(s.category_id)?,
            image,
            mask,
            bbox: s.bbox,
        };
        writeln!(manifest, "{}", serde_json::to_string(&record)?)?;
    }
    let held = heldout_combos(cfg);
    for &combo in &held {
        let s = sample_for_combo::<f32>(cfg, combo, cfg.seed, 0)?;
        write_image_png(&held_dir.join(format!("{combo:03}.png")), &s.image)?;
        write_gray_png(&held_dir.join(format!("{combo:03}_mask.png")), &s.mask)?;
    }
    manifest.flush()?;
    println!(
        "wrote {n} training samples and {} held-out references to {}",
        held.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain_encoders(cfg: &RunConfig) -> Result<()> {
    let mut ps = ParamSet::<f32>::new();
    let mut model = Model::build(cfg, &mut ps)?;
    let mut log = log_writer(&cfg.out_dir, "encoders.jsonl")?;
    let losses = pretrain_encoders(&model, &mut ps, |step, loss| {
        let _ = serde_json::to_string(&PhaseRecord { phase: "contrastive", step, loss })
            .map(|l| writeln!(log, "{l}"));
    })?;
    log.flush()?;
    model.stage = "encoders".into();
    let path = ckpt_path(&cfg.out_dir, "encoders");
    save_checkpoint(&path, &model.stage, &model.config, &ps)?;
    println!(
        "saved {} ({} steps, loss {:.4} -> {:.4})",
        path.display(),
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_train_autoencoder(cfg: &RunConfig) -> Result<()> {
    let (mut model, mut ps) = load_stage(cfg, &["encoders"])?;
    let mut log = log_writer(&model.config.out_dir, "backbone.jsonl")?;
    let losses = train_backbone(&model, &mut ps, |phase, step, loss| {
        let _ = serde_json::to_string(&PhaseRecord { phase, step, loss })
            .map(|l| writeln!(log, "{l}"));
    })?;
    log.flush()?;
    model.stage = "backbone".into();
    let path = ckpt_path(&model.config.out_dir, "backbone");
    save_checkpoint(&path, &model.stage, &model.config, &ps)?;
    println!(
        "saved {} (recon {:.4} -> {:.4}, denoise {:.4} -> {:.4})",
        path.display(),
        losses.recon.first().copied().unwrap_or(f64::NAN),
        losses.recon.last().copied().unwrap_or(f64::NAN),
        losses.denoise.first().copied().unwrap_or(f64::NAN),
        losses.denoise.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_train_global(cfg: &RunConfig) -> Result<()> {
    let (mut model, mut ps) = load_stage(cfg, &["backbone"])?;
    let mut log = log_writer(&model.config.out_dir, "stage1.jsonl")?;
    let stats = train_global(&model, &mut ps, |step, s| {
        let _ = serde_json::to_string(&StepRecord { step, loss: s.loss, ldm: s.ldm })
            .map(|l| writeln!(log, "{l}"));
    })?;
    log.flush()?;
    model.stage = "global".into();
    let path = ckpt_path(&model.config.out_dir, "global");
    save_checkpoint(&path, &model.stage, &model.config, &ps)?;
    println!(
        "saved {} ({} steps, denoising loss {:.4} -> {:.4})",
        path.display(),
        stats.len(),
        stats.first().map(|s| s.ldm).unwrap_or(f64::NAN),
        stats.last().map(|s| s.ldm).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_train_local(cfg: &RunConfig) -> Result<()> {
    let (mut model, mut ps) = load_stage(cfg, &["global"])?;
    let mut log = log_writer(&model.config.out_dir, "stage2.jsonl")?;
    let stats = train_local(&model, &mut ps, |step, s| {
        let _ = serde_json::to_string(&StepRecord { step, loss: s.loss, ldm: s.ldm })
            .map(|l| writeln!(log, "{l}"));
    })?;
    log.flush()?;
    model.stage = "local".into();
    let path = ckpt_path(&model.config.out_dir, "local");
    save_checkpoint(&path, &model.stage, &model.config, &ps)?;
    println!(
        "saved {} ({} steps, denoising loss {:.4} -> {:.4})",
        path.display(),
        stats.len(),
        stats.first().map(|s| s.ldm).unwrap_or(f64::NAN),
        stats.last().map(|s| s.ldm).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_encode(cfg: &RunConfig, image: &Path) -> Result<()> {
    let (model, ps) = load_stage(cfg, &["local", "global"])?;
    let img = read_image_png::<f32>(image)?;
    let t0 = std::time::Instant::now();
    let words = model.encode(&ps, &img)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    let path = Path::new(&model.config.out_dir)
        .join("concepts")
        .join(format!("{}.json", file_stem(image)));
    write_json(&path, &words.to_file())?;
    println!("encoded {} words to {} in {ms:.2} ms", words.num_words(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    cfg: &RunConfig,
    image: &Path,
    mask: Option<&Path>,
    prompt: &str,
    lambda: Option<f64>,
    steps: Option<usize>,
    guidance: Option<f64>,
    mode: Option<Mode>,
) -> Result<()> {
    let (model, ps) = load_stage(cfg, &["local", "global"])?;
    let img = read_image_png::<f32>(image)?;
    let mask_img = mask.map(read_mask_png::<f32>).transpose()?;
    let words = model.encode(&ps, &img)?;

    let mut opts = model.gen_options();
    if let Some(l) = lambda {
        opts.lambda = l;
    }
    if let Some(s) = steps {
        opts.steps = s;
    }
    if let Some(g) = guidance {
        opts.guidance = g;
    }
    if let Some(m) = mode {
        opts.mode = m.into();
    }
    let source = mask_img.as_ref().map(|m| (&img, m));
    let seed = model.config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6765_6e65_7261_7465);
    let gen = model.generate(&ps, &words, source, prompt, &opts, &mut rng)?;

    let name = format!("{}-s{seed}", slug(prompt));
    let dir = Path::new(&model.config.out_dir).join("gen");
    std::fs::create_dir_all(&dir)?;
    let png = dir.join(format!("{name}.png"));
    write_image_png(&png, &gen.image)?;
    let meta = GenMeta {
        prompt: prompt.to_string(),
        seed,
        lambda: opts.lambda,
        steps: opts.steps,
        guidance: opts.guidance,
        mode: format!("{:?}", opts.mode),
        stage: model.stage.clone(),
        image: image.display().to_string(),
        mask: mask.map(|m| m.display().to_string()),
        output: png.display().to_string(),
    };
    write_json(&dir.join(format!("{name}.json")), &meta)?;
    println!("wrote {}", png.display());
    Ok(())
}

fn cmd_invert_baseline(
    cfg: &RunConfig,
    image: &Path,
    steps: Option<usize>,
    combo: Option<usize>,
) -> Result<()> {
    let (model, ps) = load_stage(cfg, &["local", "global", "backbone"])?;
    let img = read_image_png::<f32>(image)?;
    let combo = match combo {
        Some(c) => c,
        None => classify(&model, &ps, &img)?,
    };
    let steps = steps.unwrap_or(model.config.invert_steps);
    let out = invert_baseline(&model, &ps, &img, combo, steps)?;
    let stem = file_stem(image);
    let dir = Path::new(&model.config.out_dir).join("concepts");
    write_json(&dir.join(format!("{stem}.baseline.json")), &out.words.to_file())?;
    let meta = BaselineMeta {
        combo,
        steps,
        seconds: out.seconds,
        first_loss: out.losses.first().copied(),
        last_loss: out.losses.last().copied(),
    };
    write_json(&dir.join(format!("{stem}.baseline.meta.json")), &meta)?;
    println!(
        "optimized 1 word over {steps} steps in {:.2} s (category {combo}: {})",
        out.seconds,
        category_name(combo)?
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (model, ps) = load_stage(cfg, &["local", "global"])?;
    let dir = Path::new(&model.config.out_dir).join("eval");
    std::fs::create_dir_all(&dir)?;
    let mut records = BufWriter::new(File::create(dir.join("records.jsonl"))?);
    let report = evaluate(&model, &ps, |r| {
        let _ = serde_json::to_string(r).map(|l| writeln!(records, "{l}"));
    })?;
    records.flush()?;
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "{} generations: clip_i {:.4}, clip_t {:.4}, dino_i {:.4}; encode {:.2} ms vs baseline {:.2} ms ({:.0}x)",
        report.records.len(),
        report.clip_i,
        report.clip_t,
        report.dino_i,
        report.encode_ms,
        report.baseline_ms,
        report.speedup
    );
    Ok(())
}

fn upsample_to(map: &[f64], side: usize, target: usize) -> Vec<f64> {
    let f = target / side;
    let mut out = vec![0.0; target * target];
    for y in 0..target {
        for x in 0..target {
            out[y * target + x] = map[(y / f) * side + x / f];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_attn_map(
    cfg: &RunConfig,
    image: &Path,
    mask: Option<&Path>,
    prompt: &str,
    lambda: Option<f64>,
    steps: Option<usize>,
    guidance: Option<f64>,
    mode: Option<Mode>,
) -> Result<()> {
    let (model, ps) = load_stage(cfg, &["local", "global"])?;
    let img = read_image_png::<f32>(image)?;
    let mask_img = mask.map(read_mask_png::<f32>).transpose()?;
    let words = model.encode(&ps, &img)?;

    let mut opts = model.gen_options();
    opts.mode = mode.unwrap_or(Mode::Full).into();
    if let Some(l) = lambda {
        opts.lambda = l;
    }
    if let Some(s) = steps {
        opts.steps = s;
    }
    if let Some(g) = guidance {
        opts.guidance = g;
    }
    let source = mask_img.as_ref().map(|m| (&img, m));
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(0x6174_746e_6d61_7000);
    let gen = model.generate(&ps, &words, source, prompt, &opts, &mut rng)?;

    let pos = gen.tokens.placeholder_position.ok_or_else(|| {
        Error::Contract(format!("prompt has no placeholder, nothing was spliced: {prompt}"))
    })?;
    let spliced = match opts.mode {
        InjectMode::PrimaryOnly => 1,
        InjectMode::Full => words.num_words(),
    };
    let target = *gen.trace.sides.iter().max().ok_or_else(|| {
        Error::Contract("generation produced no attention maps".into())
    })?;

    let dir = Path::new(&model.config.out_dir).join("attn");
    std::fs::create_dir_all(&dir)?;
    for k in 0..spliced {
        let mut acc = vec![0.0f64; target * target];
        for (map, &side) in gen.trace.per_block.iter().zip(&gen.trace.sides) {
            let ctx_len = map.dim(1);
            let column: Vec<f64> =
                (0..side * side).map(|q| map.data()[q * ctx_len + pos + k].to_f64()).collect();
            for (a, v) in acc.iter_mut().zip(upsample_to(&column, side, target)) {
                *a += v;
            }
        }
        let peak = acc.iter().cloned().fold(0.0f64, f64::max);
        let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        let gray = Tensor::<f32>::new(
            vec![target, target],
            acc.iter().map(|v| (v * scale) as f32).collect(),
        )?;
        write_gray_png(&dir.join(format!("word{k}.png")), &gray)?;
    }
    println!("wrote {spliced} attention maps to {}", dir.display());
    Ok(())
}

/// Runs one parsed command line, returning the error for the process exit
/// code mapping.
pub fn run(cli: Cli) -> Result<()> {
    let _workers = thread_cap()?;
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData { count } => gen_data(&cfg, *count),
        Command::PretrainEncoders => cmd_pretrain_encoders(&cfg),
        Command::TrainAutoencoder => cmd_train_autoencoder(&cfg),
        Command::TrainGlobal => cmd_train_global(&cfg),
        Command::TrainLocal => cmd_train_local(&cfg),
        Command::Encode { image } => cmd_encode(&cfg, image),
        Command::Generate { image, mask, prompt, lambda, steps, guidance, mode } => cmd_generate(
            &cfg,
            image,
            mask.as_deref(),
            prompt,
            *lambda,
            *steps,
            *guidance,
            *mode,
        ),
        Command::InvertBaseline { image, steps, combo } => {
            cmd_invert_baseline(&cfg, image, *steps, *combo)
        }
        Command::Eval => cmd_eval(&cfg),
        Command::AttnMap { image, mask, prompt, lambda, steps, guidance, mode } => cmd_attn_map(
            &cfg,
            image,
            mask.as_deref(),
            prompt,
            *lambda,
            *steps,
            *guidance,
            *mode,
        ),
    }
}
