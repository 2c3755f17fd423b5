use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pro2sam::data::{
    generate_synth, load_examples, load_synth, preprocess, DatasetKind, Example, PreprocessMode, Split,
    SynthSpec,
};
use pro2sam::eval_metrics::{
    max_box_acc_v2, merge_class_predictions, BoxAccInput, ClassPrediction, EvalReport, Localization,
    PredictionRecord, BOX_ACC_THRESHOLDS, DEFAULT_TAU_STEPS,
};
use pro2sam::gtformer::load_checkpoint;
use pro2sam::io::{file_key, read_json, read_jsonl, write_json, write_jsonl};
use pro2sam::losses::LossWeights;
use pro2sam::mask_matching::{select_mask, MatchResult, DEFAULT_MAP_THRESHOLD};
use pro2sam::mask_provider::{GalleryCache, GridPromptConfig, MaskProvider};
use pro2sam::pipeline::{
    generate_galleries, infer, split_validation, ExperimentConfig, InferMode, InferOptions, Trainer,
};
use pro2sam::visualize::{render_overlay, save_png};
use pro2sam::HeatMap;

#[derive(Parser)]
#[command(
    name = "pro2sam",
    version,
    about = "Weakly supervised object localization with GTFormer and mask matching"
)]
struct Cli {
    /// Log filter, e.g. `info` or `pro2sam=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes corpus.
    Synth(SynthArgs),
    /// Train GTFormer.
    Train(TrainArgs),
    /// Build mask galleries for a dataset split.
    GenMasks(GenMasksArgs),
    /// Predict boxes for a dataset split.
    Infer(InferArgs),
    /// Match cached galleries against saved foreground maps.
    Match(MatchArgs),
    /// Compute localization metrics from prediction records.
    Evaluate(EvaluateArgs),
    /// Render localization overlays.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    max_distractors: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss weights as `mu:lambda`, e.g. `1:0.5`.
    #[arg(long)]
    loss_ratio: Option<String>,
    #[arg(long)]
    num_global_tokens: Option<usize>,
    /// Keep the map branch but disable attention modulation.
    #[arg(long)]
    no_gta_modulation: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct ProviderArgs {
    /// `fake` (synthetic corpora only) or `sam`.
    #[arg(long, default_value = "fake")]
    provider: String,
    #[arg(long)]
    sam_weights: Option<PathBuf>,
    /// vit_b, vit_l, vit_h or tiny.
    #[arg(long, default_value = "vit_h")]
    sam_variant: String,
}

#[derive(Args)]
struct GenMasksArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 32)]
    grid_side: usize,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// pro2sam or gtformer-only.
    #[arg(long, default_value = "pro2sam")]
    mode: String,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value = "fake")]
    provider: String,
    /// Gallery configuration hash; inferred when the cache holds exactly one.
    #[arg(long)]
    config_hash: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MAP_THRESHOLD)]
    threshold: f32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value = "fake")]
    provider: String,
    #[arg(long)]
    config_hash: Option<String>,
    /// Directory of 16-bit grayscale maps named by image key.
    #[arg(long)]
    maps: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAP_THRESHOLD)]
    threshold: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// External classifier output merged before scoring.
    #[arg(long)]
    class_predictions: Option<PathBuf>,
    /// Saved maps for a MaxBoxAccV2 threshold sweep.
    #[arg(long, requires = "image_size")]
    maps: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TAU_STEPS)]
    tau_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Checkpoint whose experiment config names the dataset.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    matches: Option<PathBuf>,
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Render at most this many records.
    #[arg(long)]
    limit: Option<usize>,
}

fn write_manifest(dir: &Path, command: &str, extra: serde_json::Value) -> Result<()> {
    let record = serde_json::json!({
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "code_version": env!("CARGO_PKG_VERSION"),
        "details": extra,
    });
    write_json(&dir.join(format!("{command}_manifest.json")), &record)?;
    Ok(())
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<Example>> {
    let ds = cfg
        .dataset
        .load(split)
        .with_context(|| format!("loading {:?} split from {}", split, cfg.dataset.root.display()))?;
    Ok(load_examples(&ds, cfg.workers)?)
}

fn experiment_of(checkpoint: &Path, root: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(
        ckpt.extra
            .get("experiment")
            .context("checkpoint carries no experiment config")?,
    )?;
    if let Some(r) = root {
        cfg.dataset.root = r.clone();
    }
    Ok(cfg)
}

fn resolve_hash(cache: &GalleryCache, provider: &str, given: Option<&String>) -> Result<String> {
    if let Some(h) = given {
        return Ok(h.clone());
    }
    let hashes = cache.config_hashes(provider)?;
    match hashes.as_slice() {
        [one] => Ok(one.clone()),
        [] => bail!("no {provider} galleries under {}", cache.root().display()),
        _ => bail!("several gallery configurations found ({hashes:?}); pass --config-hash"),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = a.classes {
        spec.num_classes = v;
    }
    if let Some(v) = a.train_per_class {
        spec.train_per_class = v;
    }
    if let Some(v) = a.test_per_class {
        spec.test_per_class = v;
    }
    if let Some(v) = a.canvas {
        spec.canvas = v;
    }
    if let Some(v) = a.max_distractors {
        spec.max_distractors = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let mut ds = generate_synth(&spec)?;
    ds.write(&a.out)?;
    log::info!(
        "wrote {} images to {} (digest {})",
        ds.items.len(),
        a.out.display(),
        ds.digest()
    );
    write_manifest(&a.out, "synth", serde_json::to_value(&spec)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut trainer = if let Some(ckpt) = &a.resume {
        Trainer::resume(ckpt)?
    } else {
        let mut cfg: ExperimentConfig = match &a.config {
            Some(p) => read_json(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &a.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &a.dataset_root {
            cfg.dataset.root = v.clone();
        }
        if let Some(v) = a.epochs {
            cfg.schedule.epochs = v;
        }
        if let Some(v) = a.batch_size {
            cfg.schedule.batch_size = v;
        }
        if let Some(v) = a.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(r) = &a.loss_ratio {
            cfg.loss = LossWeights::from_ratio(r)?;
        }
        if let Some(v) = a.num_global_tokens {
            cfg.model.num_global_tokens = v;
        }
        if a.no_gta_modulation {
            cfg.model.gta_modulation = false;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.workers {
            cfg.workers = v;
        }
        Trainer::from_config(cfg)?
    };
    let out = trainer.config().output_dir.clone();
    trainer = trainer.with_output_dir(&out);
    let all = load_split(trainer.config(), Split::Train)?;
    let (train, val) = split_validation(&all, trainer.config().schedule.val_fraction);
    log::info!("training on {} images, validating on {}", train.len(), val.len());
    let summary = trainer.fit(&train, &val)?;
    println!(
        "epochs {}  train acc {:.2}%  best val Top-1 Loc {}",
        summary.epochs_run,
        summary.final_train_accuracy,
        summary
            .best_val_top1_loc
            .map_or("n/a".into(), |v| format!("{v:.2}%"))
    );
    if let Some(p) = &summary.best_checkpoint {
        println!("best checkpoint {}", p.display());
    }
    Ok(())
}

fn build_provider(p: &ProviderArgs, cfg: &ExperimentConfig) -> Result<Box<dyn MaskProvider>> {
    match p.provider.as_str() {
        "fake" => {
            if cfg.dataset.kind != DatasetKind::Synth {
                bail!("the fake provider needs a synthetic corpus");
            }
            let synth = load_synth(&cfg.dataset.root)?;
            Ok(Box::new(synth.fake_provider(&cfg.dataset.preprocess)?))
        }
        "sam" => {
            use pro2sam::mask_provider::sam::{SamProvider, SamSettings};
            let weights = p.sam_weights.as_ref().context("--sam-weights is required")?;
            let settings = SamSettings {
                variant: p.sam_variant.parse()?,
                ..Default::default()
            };
            Ok(Box::new(SamProvider::load(weights, settings)?))
        }
        other => bail!("unknown provider {other:?}"),
    }
}

fn cmd_gen_masks(a: GenMasksArgs) -> Result<()> {
    let cfg: ExperimentConfig = read_json(&a.config)?;
    let split: Split = a.split.parse()?;
    let examples = load_split(&cfg, split)?;
    let provider = build_provider(&a.provider, &cfg)?;
    let cache = GalleryCache::new(&a.cache);
    let grid = GridPromptConfig {
        grid_side: a.grid_side,
    };
    let s = generate_galleries(
        &examples,
        &cfg.dataset.preprocess,
        provider.as_ref(),
        &grid,
        &cache,
        a.workers,
    )?;
    println!(
        "{} galleries ({} masks, {} empty) under config {}",
        s.images, s.masks, s.empty, s.config_hash
    );
    write_manifest(
        &a.cache,
        "gen-masks",
        serde_json::json!({"config_hash": s.config_hash, "provider": a.provider.provider, "split": a.split}),
    )
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = experiment_of(&a.checkpoint, a.dataset_root.as_ref())?;
    let mode: InferMode = a.mode.parse()?;
    let examples = load_split(&cfg, a.split.parse()?)?;
    let (cache, hash) = match (&a.cache, mode) {
        (Some(c), InferMode::Pro2Sam) => {
            let cache = GalleryCache::new(c);
            let hash = resolve_hash(&cache, &a.provider, a.config_hash.as_ref())?;
            (Some(cache), hash)
        }
        (None, InferMode::Pro2Sam) => bail!("--cache is required in pro2sam mode"),
        _ => (None, String::new()),
    };
    let opts = InferOptions {
        mode,
        map_threshold: a.threshold,
        batch_size: a.batch_size,
        workers: a.workers,
    };
    let preds = infer(
        &ckpt.model,
        &examples,
        &cfg.dataset.preprocess,
        |id| match &cache {
            Some(c) => c.read(id, &a.provider, &hash),
            None => Ok(None),
        },
        &opts,
    )?;
    let maps_dir = a.out.join("maps");
    for p in &preds {
        p.map
            .save_png16(&maps_dir.join(format!("{}.png", file_key(&p.record.image_id))))?;
    }
    let records: Vec<&PredictionRecord> = preds.iter().map(|p| &p.record).collect();
    let matches: Vec<&MatchResult> = preds.iter().map(|p| &p.matched).collect();
    write_jsonl(&a.out.join("predictions.jsonl"), &records)?;
    write_jsonl(&a.out.join("matches.jsonl"), &matches)?;
    let fallbacks = matches.iter().filter(|m| m.fallback_used).count();
    let owned: Vec<PredictionRecord> = preds.into_iter().map(|p| p.record).collect();
    let report = EvalReport::from_records(&owned)?;
    print!("{}", report.to_table());
    println!("fallback used on {fallbacks} of {} images", owned.len());
    write_manifest(
        &a.out,
        "infer",
        serde_json::json!({"mode": a.mode, "config_hash": hash, "threshold": a.threshold}),
    )
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let cache = GalleryCache::new(&a.cache);
    let hash = resolve_hash(&cache, &a.provider, a.config_hash.as_ref())?;
    let mut results = Vec::new();
    for g in cache.list(&a.provider, &hash)? {
        let path = a.maps.join(format!("{}.png", file_key(&g.image_id)));
        if !path.exists() {
            log::warn!("{}: no map at {}, skipping", g.image_id, path.display());
            continue;
        }
        let map = HeatMap::load_png16(&path)?;
        let r = select_mask(&g, &map, a.threshold)?;
        if r.fallback_used {
            log::info!("{}: fallback used", g.image_id);
        }
        results.push(r);
    }
    write_jsonl(&a.out, &results)?;
    println!("matched {} images", results.len());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut records: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    if let Some(p) = &a.class_predictions {
        let ext: Vec<ClassPrediction> = read_jsonl(p)?;
        merge_class_predictions(&mut records, &ext)?;
    }
    let mut report = EvalReport::from_records(&records)?;
    if let (Some(dir), Some(side)) = (&a.maps, a.image_size) {
        let inputs = records
            .iter()
            .map(|r| {
                let map = HeatMap::load_png16(&dir.join(format!("{}.png", file_key(&r.image_id))))?;
                Ok(BoxAccInput {
                    localization: Localization::Map(map),
                    gt_boxes: r.gt_boxes.clone(),
                    height: side,
                    width: side,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let curves = max_box_acc_v2(&inputs, &BOX_ACC_THRESHOLDS, a.tau_steps)?;
        report = report.with_curves(&curves);
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_visualize(a: VisualizeArgs) -> Result<()> {
    let cfg = experiment_of(&a.checkpoint, a.dataset_root.as_ref())?;
    let examples = load_split(&cfg, a.split.parse()?)?;
    let by_id: HashMap<&str, &Example> = examples.iter().map(|e| (e.image_id.as_str(), e)).collect();
    let records: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    let matches: HashMap<String, MatchResult> = match &a.matches {
        Some(p) => read_jsonl::<MatchResult>(p)?
            .into_iter()
            .map(|m| (m.image_id.clone(), m))
            .collect(),
        None => HashMap::new(),
    };
    let mut written = 0;
    for r in records.iter().take(a.limit.unwrap_or(usize::MAX)) {
        let e = by_id
            .get(r.image_id.as_str())
            .with_context(|| format!("{} not in the dataset split", r.image_id))?;
        let p = preprocess(&e.image, &[], &cfg.dataset.preprocess, PreprocessMode::Eval)?;
        let map = match &a.maps {
            Some(d) => {
                let path = d.join(format!("{}.png", file_key(&r.image_id)));
                if path.exists() {
                    Some(HeatMap::load_png16(&path)?)
                } else {
                    None
                }
            }
            None => None,
        };
        let mask = matches.get(&r.image_id).map(|m| &m.final_mask);
        let img = render_overlay(&p.rgb, map.as_ref(), mask, &r.gt_boxes, Some(&r.predicted_box));
        save_png(&img, &a.out.join(format!("{}.png", file_key(&r.image_id))))?;
        written += 1;
    }
    println!("wrote {written} overlays to {}", a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::GenMasks(a) => cmd_gen_masks(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Match(a) => cmd_match(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Visualize(a) => cmd_visualize(a),
    }
}
