use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clipdg::analysis::{
    build_aug_feature, contact_sheet, export_embeddings_to, rank_excluding, records_from_cache, Projection,
};
use clipdg::cache::FeatureCache;
use clipdg::clip::{build_encoder, Backend, ClipConfig, ClipEncoder};
use clipdg::data::{load_dataset, synth_dataset, write_synth_manifest, Dataset, DatasetFormat, Split};
use clipdg::model::FusionMode;
use clipdg::prompt::{enumerate_prompts, render_prompt, sample_prompt, Prompt, PromptConfig};
use clipdg::train::{cross_validate, evaluate_epe, Checkpoint, GridPoint, TargetProfile, TrainConfig, Trainer};
use clipdg::types::{Image, IMAGE_SIZE};

#[derive(Parser)]
#[command(name = "clipdg", version, about = "Hand pose estimation with CLIP-based style augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print text prompts built from the prompt vocabulary.
    GenPrompts(GenPromptsArgs),
    /// Write a synthetic dataset manifest.
    GenSynth(GenSynthArgs),
    /// Encode a dataset's images into a feature cache.
    EncodeCache(EncodeCacheArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Report the end-point error of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Pick fusion ratio, lambda3 and fusion mode by k-fold cross-validation.
    CrossValidate(CrossValidateArgs),
    /// Rank gallery features by cosine similarity to an image+prompt query.
    RankSimilar(RankArgs),
    /// Export cached features as JSON lines, optionally projected to 2D.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenPromptsArgs {
    /// Number of random prompts.
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print every prompt in enumeration order instead of sampling.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write each image as PNG into this directory.
    #[arg(long)]
    png_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ClipArgs {
    #[arg(long, value_parser = ["stub", "pretrained"], default_value = "stub")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    clip_seed: u64,
    /// Feature caches for the pretrained backend.
    #[arg(long, value_delimiter = ',')]
    feature_cache: Vec<PathBuf>,
}

impl ClipArgs {
    fn encoder(&self) -> Result<Box<dyn ClipEncoder>> {
        let cfg = ClipConfig {
            backend: if self.backend == "pretrained" { Backend::Pretrained } else { Backend::Stub },
            stub_seed: self.clip_seed,
            feature_caches: self.feature_cache.clone(),
            ..ClipConfig::default()
        };
        Ok(build_encoder(&cfg)?)
    }
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset root, or a manifest for the synthetic format.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "synth")]
    format: String,
    #[arg(long, default_value = "test")]
    split: String,
}

impl DatasetArgs {
    fn load(&self) -> Result<Dataset> {
        let format: DatasetFormat = self.format.parse()?;
        let split: Split = self.split.parse()?;
        load_dataset(&self.dataset, format, split).with_context(|| format!("loading {}", self.dataset.display()))
    }
}

#[derive(Args)]
struct EncodeCacheArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    clip: ClipArgs,
    #[arg(long)]
    out: PathBuf,
    /// Store features of `weight * image + (1 - weight) * random prompt`
    /// instead of plain image features.
    #[arg(long)]
    augment_weight: Option<f64>,
    #[arg(long, default_value_t = 0)]
    prompt_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    target_profile: Option<String>,
    /// Override the config's checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    /// Print only the JSON report.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CrossValidateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.9")]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    lambda3: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "concat")]
    modes: Vec<String>,
}

#[derive(Args)]
struct RankArgs {
    /// Query image (resized to 256x256).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Image weight of the query feature.
    #[arg(long, default_value_t = 0.5)]
    weight: f64,
    #[arg(long)]
    gallery_cache: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Leave this sample id out of the gallery.
    #[arg(long)]
    exclude: Option<String>,
    #[command(flatten)]
    clip: ClipArgs,
    /// Write the top-k images as a PNG grid (needs --gallery-manifest).
    #[arg(long)]
    contact_sheet: Option<PathBuf>,
    /// Synthetic manifest the gallery ids come from.
    #[arg(long)]
    gallery_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    caches: Vec<PathBuf>,
    /// One tag per cache.
    #[arg(long, value_delimiter = ',', required = true)]
    tags: Vec<String>,
    #[arg(long, default_value = "none")]
    projection: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPrompts(a) => gen_prompts(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::EncodeCache(a) => encode_cache(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CrossValidate(a) => cv(a),
        Command::RankSimilar(a) => rank(a),
        Command::ExportEmbeddings(a) => export(a),
    }
}

fn gen_prompts(a: GenPromptsArgs) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    if a.all {
        for p in enumerate_prompts() {
            writeln!(out, "{}", p.text)?;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        for _ in 0..a.count {
            writeln!(out, "{}", sample_prompt(rand::Rng::gen(&mut rng)).text)?;
        }
    }
    Ok(())
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.bytes().to_vec())
        .context("image buffer size")?;
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let img = if img.width() as usize != IMAGE_SIZE || img.height() as usize != IMAGE_SIZE {
        image::imageops::resize(&img, IMAGE_SIZE as u32, IMAGE_SIZE as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    Ok(Image::new(IMAGE_SIZE, IMAGE_SIZE, img.into_raw())?)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    write_synth_manifest(&a.out, a.count, a.seed)?;
    if let Some(dir) = &a.png_dir {
        std::fs::create_dir_all(dir)?;
        let ds = synth_dataset(a.count, a.seed);
        for i in 0..ds.len() {
            let s = ds.get(i)?;
            save_png(&s.image, &dir.join(format!("{}.png", s.meta.id)))?;
        }
    }
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn encode_cache(a: EncodeCacheArgs) -> Result<()> {
    let ds = a.data.load()?;
    let enc = a.clip.encoder()?;
    let mut cache = FeatureCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(a.prompt_seed);
    for i in 0..ds.len() {
        let s = ds.get(i)?;
        let f = match a.augment_weight {
            Some(w) => build_aug_feature(enc.as_ref(), &s.image, &sample_prompt(rand::Rng::gen(&mut rng)), w)?,
            None => enc.encode_image(&s.image)?,
        };
        cache.insert(s.meta.id.clone(), f.values().iter().map(|&v| v as f32).collect())?;
    }
    cache.write_to(&a.out)?;
    println!("wrote {} features to {}", cache.len(), a.out.display());
    Ok(())
}

fn train_val_split(all: &Dataset, val_count: usize, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if val_count == 0 {
        return Ok((all.subset(&(0..all.len()).collect::<Vec<_>>())?, None));
    }
    if val_count >= all.len() {
        bail!("val_count {val_count} leaves no training samples out of {}", all.len());
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x76616c));
    let cut = all.len() - val_count;
    Ok((all.subset(&order[..cut])?, Some(all.subset(&order[cut..])?)))
}

fn load_config(path: Option<&Path>, profile: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = profile {
        cfg = cfg.with_profile(p.parse::<TargetProfile>()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let mut ds = match (&d.path, d.format) {
        (None, DatasetFormat::Synth) => synth_dataset(d.synth_count, d.synth_seed),
        (Some(p), f) => load_dataset(p, f, d.split)?,
        (None, f) => bail!("data.path is required for the {f:?} format"),
    };
    if d.format == DatasetFormat::Synth {
        ds.materialize()?;
    }
    Ok(ds)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.target_profile.as_deref())?;
    if let Some(out) = a.out {
        cfg.checkpoint_dir = out;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let all = config_dataset(&cfg)?;
    let (train_set, val_set) = train_val_split(&all, cfg.data.val_count, cfg.seed)?;
    log::info!(
        "training on {} samples ({} held out), {} epochs, batch {}",
        train_set.len(),
        val_set.as_ref().map_or(0, |v| v.len()),
        cfg.epochs,
        cfg.batch_size
    );
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg.clone(), &Checkpoint::load(p)?, true)?,
        None => Trainer::new(cfg.clone(), true)?,
    };
    let outcome = trainer.run(&train_set, val_set.as_ref())?;
    let last = outcome.log.last();
    println!(
        "finished: {} steps, final loss {}, best validation EPE {}",
        outcome.checkpoint.meta.step,
        last.map_or("n/a".into(), |r| format!("{:.6}", r.total)),
        outcome.best_val_epe.map_or("n/a".into(), |e| format!("{e:.3} mm"))
    );
    println!("checkpoints in {}", cfg.checkpoint_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut ds = a.data.load()?;
    if ds.name() == "synth" {
        ds.materialize()?;
    }
    let report = evaluate_epe(&ck, &ds)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !a.json {
        println!("\n{}", report.table());
    }
    Ok(())
}

fn cv(a: CrossValidateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let mut grid = Vec::new();
    for mode in &a.modes {
        let fusion_mode = match mode.as_str() {
            "concat" => FusionMode::Concat,
            "sum" => FusionMode::Sum,
            other => bail!("unknown fusion mode '{other}'"),
        };
        for &image_ratio in &a.ratios {
            for &lambda3 in &a.lambda3 {
                grid.push(GridPoint { image_ratio, lambda3, fusion_mode });
            }
        }
    }
    let data = config_dataset(&cfg)?;
    let result = cross_validate(&cfg, &data, a.k, &grid)?;
    for (p, m) in grid.iter().zip(&result.mean_epe) {
        println!("ratio {:.2}  lambda3 {:<6}  {:?}  mean EPE {:.3} mm", p.image_ratio, p.lambda3, p.fusion_mode, m);
    }
    println!("{}", serde_json::to_string_pretty(&result.best)?);
    Ok(())
}

fn rank(a: RankArgs) -> Result<()> {
    let enc = a.clip.encoder()?;
    let image = load_png(&a.image)?;
    let prompt = prompt_from_text(&a.prompt)?;
    let query = build_aug_feature(enc.as_ref(), &image, &prompt, a.weight)?;
    let cache = FeatureCache::read_from(&a.gallery_cache)?;
    let gallery = records_from_cache(&cache, "gallery")?;
    let ranked = rank_excluding(&query, &gallery, a.exclude.as_deref())?;
    println!("{:>4}  {:<24} {:>10}", "rank", "sample", "cosine");
    for (i, r) in ranked.iter().take(a.top_k).enumerate() {
        println!("{:>4}  {:<24} {:>10.6}", i + 1, r.sample_id, r.score);
    }
    if let Some(sheet_path) = &a.contact_sheet {
        let manifest = a.gallery_manifest.as_ref().context("--contact-sheet needs --gallery-manifest")?;
        let ds = load_dataset(manifest, DatasetFormat::Synth, Split::Test)?;
        let mut by_id = std::collections::HashMap::new();
        for i in 0..ds.len() {
            let s = ds.get(i)?;
            by_id.insert(s.meta.id.clone(), s.image);
        }
        let images: Vec<Image> = ranked
            .iter()
            .take(a.top_k)
            .map(|r| by_id.remove(&r.sample_id).with_context(|| format!("{} not in the manifest", r.sample_id)))
            .collect::<Result<_>>()?;
        save_png(&contact_sheet(&images, 5)?, sheet_path)?;
        println!("contact sheet written to {}", sheet_path.display());
    }
    Ok(())
}

/// Accepts free text; vocabulary prompts are matched back to their slots.
fn prompt_from_text(text: &str) -> Result<Prompt> {
    if let Some(p) = enumerate_prompts().into_iter().find(|p| p.text == text) {
        return Ok(p);
    }
    if text.trim().is_empty() {
        bail!("prompt must not be empty");
    }
    let fallback = render_prompt(PromptConfig::new(0, 0, 0, 0, 0))?;
    Ok(Prompt { text: text.to_string(), config: fallback.config })
}

fn export(a: ExportArgs) -> Result<()> {
    if a.caches.len() != a.tags.len() {
        bail!("{} caches but {} tags", a.caches.len(), a.tags.len());
    }
    let projection: Projection = a.projection.parse()?;
    let mut records = Vec::new();
    for (path, tag) in a.caches.iter().zip(&a.tags) {
        let cache = FeatureCache::read_from(path).with_context(|| format!("reading {}", path.display()))?;
        records.extend(records_from_cache(&cache, tag)?);
    }
    export_embeddings_to(&records, projection, &a.out)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}
