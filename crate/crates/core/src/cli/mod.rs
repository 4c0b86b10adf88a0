//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure during training.

mod config;
mod grid;

pub use config::{parse_config_text, ConfigLayers, EncoderChoice, RunConfig, ENCODER_KEYS, ENV_PREFIX};
pub use grid::{read_grid, sidecar_path, write_atomic, CellKind, CellMeta, GridCell, ImageGrid, GRID_PAD, SIDECAR_HEADER};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{generate_synthetic_dataset, load_dataset, Dataset, ShapeKind, SyntheticSpec, MAX_CAPTIONS};
use crate::error::{Error, Result};
use crate::evaluation::{
    generate_per_class, per_class_diversity, train_probe_classifier, EvalReport, MsSsimConfig, ProbeClassifier,
    DEFAULT_PAIRS_PER_CLASS, DEFAULT_SPLITS, discriminability_score,
};
use crate::image::Image;
use crate::network::Model;
use crate::text_encoder::{format_table_row, interpolate_embeddings, EncoderBackend, TextEmbedding};
use crate::training::{
    check_compatible, load_checkpoint, noise_vector, save_checkpoint, train, Checkpoint, LossLog, TrainOptions,
    TrainingState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const DEFAULT_PROBE_STEPS: usize = 500;

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "tacgan", version, about = "Text conditioned auxiliary classifier GAN")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Overrides any config key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub set: Vec<(String, String)>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset to --out.
    MakeDataset(MakeDatasetArgs),
    /// Train on dataset_root, writing checkpoints and the loss log to --out.
    Train(TrainArgs),
    /// Sample a grid with one row per caption.
    Sample(SampleArgs),
    /// Interpolate between two noise vectors for a fixed caption.
    InterpZ(InterpZArgs),
    /// Interpolate between two caption embeddings for a fixed noise vector.
    InterpText(InterpTextArgs),
    /// Diversity and discriminability reports for training and generated data.
    Evaluate(EvaluateArgs),
    /// Print embedding table rows for captions.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = MAX_CAPTIONS)]
    pub captions: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Total number of steps; overrides `steps` and `epochs`.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint up to the same total step count.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A caption; may be repeated.
    #[arg(long = "caption")]
    pub captions: Vec<String>,
    /// File with one caption per line.
    #[arg(long)]
    pub captions_file: Option<PathBuf>,
    /// Images per caption.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Append a column with a dataset image carrying the caption, when one exists.
    #[arg(long)]
    pub ground_truth: bool,
}

#[derive(Debug, Args)]
pub struct InterpZArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub caption: String,
    /// Seeds of the two endpoint noise vectors.
    #[arg(long, num_args = 2, value_names = ["SEED_A", "SEED_B"], required = true)]
    pub z_seeds: Vec<u64>,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct InterpTextArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "from")]
    pub from: String,
    #[arg(long = "to")]
    pub to: String,
    /// Seed of the fixed noise vector; defaults to the run seed.
    #[arg(long)]
    pub z_seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Generated images per class.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Image pairs per class for MS-SSIM.
    #[arg(long, default_value_t = DEFAULT_PAIRS_PER_CLASS)]
    pub pairs: usize,
    #[arg(long, default_value_t = DEFAULT_PROBE_STEPS)]
    pub probe_steps: usize,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(required = true)]
    pub captions: Vec<String>,
    /// Use the encoder recorded in this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the exit status.
pub fn run<I, T>(args: I, env: impl IntoIterator<Item = (String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, env) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut flags = cli.set.clone();
    if let Some(seed) = cli.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    if let Command::Train(t) = &cli.command {
        if let Some(steps) = t.steps {
            flags.push(("steps".into(), steps.to_string()));
        }
        if let Some(every) = t.checkpoint_every {
            flags.push(("checkpoint_every".into(), every.to_string()));
        }
    }
    let layers = ConfigLayers::gather(cli.config.as_deref(), env, &flags)?;
    let cfg = RunConfig::from_layers(&layers)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::MakeDataset(a) => cmd_make_dataset(&cfg, a, out),
        Command::Train(a) => cmd_train(&cfg, a, out),
        Command::Sample(a) => cmd_sample(&cfg, &layers, a, out),
        Command::InterpZ(a) => cmd_interp_z(&cfg, &layers, a, out),
        Command::InterpText(a) => cmd_interp_text(&cfg, &layers, a, out),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &layers, a, out),
        Command::Embed(a) => cmd_embed(&cfg, &layers, a, out),
    }
}

fn require_out<'a>(out: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    out.ok_or_else(|| Error::Config(format!("this command needs --out <{what}>")))
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

pub fn cmd_make_dataset(cfg: &RunConfig, args: &MakeDatasetArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "dataset dir")?;
    if args.classes == 0 || args.classes > ShapeKind::ALL.len() {
        return Err(Error::Config(format!("--classes must be between 1 and {}", ShapeKind::ALL.len())));
    }
    let mut spec = SyntheticSpec::shapes(args.classes, args.per_class, args.resolution, cfg.seed);
    spec.captions_per_image = args.captions;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let summary = generate_synthetic_dataset(&spec, out)?;
    println!(
        "wrote {} images, {} classes, {} captions to {}",
        summary.n_images,
        summary.n_classes,
        summary.n_captions,
        out.display()
    );
    Ok(())
}

fn run_meta(cfg: &RunConfig, root: &Path) -> BTreeMap<String, String> {
    let mut meta: BTreeMap<String, String> = cfg.encoder.to_pairs().into_iter().collect();
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("batch_size".into(), cfg.batch_size.to_string());
    meta.insert("dataset_root".into(), root.display().to_string());
    meta
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs, out: Option<&Path>) -> Result<()> {
    let root = cfg
        .dataset_root
        .as_deref()
        .ok_or_else(|| Error::Config("train needs dataset_root".into()))?;
    existing(root, "dataset_root")?;
    let ck_dir = out
        .or(cfg.checkpoint_dir.as_deref())
        .ok_or_else(|| Error::Config("train needs --out or checkpoint_dir".into()))?;
    let dataset = load_dataset(root, cfg.model.resolution)?;
    let mut model_cfg = cfg.model.clone();
    match cfg.n_classes {
        Some(n) if n != dataset.n_classes() => {
            return Err(Error::Config(format!(
                "n_classes is {n} but {} has {} classes",
                root.display(),
                dataset.n_classes()
            )))
        }
        _ => model_cfg.n_classes = dataset.n_classes(),
    }
    let encoder = cfg.encoder.build(model_cfg.text_dim)?;
    let meta = run_meta(cfg, root);
    let mut state = match &args.resume {
        Some(path) => {
            existing(path, "checkpoint")?;
            let ck = load_checkpoint(path)?;
            if ck.state.model.config != model_cfg {
                return Err(Error::Config(format!("{} was trained with a different model config", path.display())));
            }
            for key in ["seed", "batch_size"] {
                if ck.meta.get(key).is_some_and(|v| v != &meta[key]) {
                    return Err(Error::Config(format!(
                        "{} was trained with {key} = {}, this run has {}",
                        path.display(),
                        ck.meta[key],
                        meta[key]
                    )));
                }
            }
            ck.state
        }
        None => TrainingState::new(Model::new(model_cfg, cfg.seed)?, cfg.adam),
    };
    check_compatible(&state.model, &dataset, &encoder).map_err(|e| Error::Config(e.to_string()))?;
    let total = cfg.total_steps(dataset.len());
    if state.step > total {
        return Err(Error::Config(format!(
            "checkpoint is at step {} beyond the requested {total}",
            state.step
        )));
    }

    fs::create_dir_all(ck_dir).map_err(|e| Error::io(ck_dir, e))?;
    let log_path = cfg.log_path.clone().unwrap_or_else(|| ck_dir.join("losses.tsv"));
    if args.resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log = LossLog::open(&log_path)?;
    let opts = TrainOptions {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let every = cfg.checkpoint_every;
    let remaining = total - state.step;
    train(&mut state, &dataset, &encoder, &opts, remaining, |s, l| {
        log.append(s.step, l)?;
        if s.step % every == 0 {
            let ck = Checkpoint {
                state: s.clone(),
                meta: meta.clone(),
            };
            save_checkpoint(&ck_dir.join(format!("step_{:06}.ckpt", s.step)), &ck)?;
        }
        Ok(())
    })?;
    let final_path = ck_dir.join("final.ckpt");
    save_checkpoint(&final_path, &Checkpoint { state, meta })?;
    println!("trained {total} steps; wrote {} and {}", final_path.display(), log_path.display());
    Ok(())
}

/// A checkpoint plus the encoder that goes with it.
pub struct Trained {
    pub model: Model,
    pub encoder: EncoderBackend,
    pub meta: BTreeMap<String, String>,
}

/// Loads `path`; the encoder comes from the config when any encoder key is
/// set explicitly, else from the checkpoint.
pub fn load_trained(path: &Path, cfg: &RunConfig, layers: &ConfigLayers) -> Result<Trained> {
    existing(path, "checkpoint")?;
    let ck = load_checkpoint(path)?;
    let choice = if ENCODER_KEYS.iter().any(|k| layers.is_explicit(k)) {
        cfg.encoder.clone()
    } else {
        EncoderChoice::from_values(|k| ck.meta.get(k).cloned())?
    };
    let model = ck.state.model;
    let encoder = choice.build(model.config.text_dim)?;
    Ok(Trained {
        model,
        encoder,
        meta: ck.meta,
    })
}

fn embed_all(encoder: &EncoderBackend, captions: &[String]) -> Result<Vec<TextEmbedding>> {
    captions.iter().map(|c| encoder.embed(c)).collect()
}

fn dataset_root(cfg: &RunConfig, trained: &Trained) -> Result<PathBuf> {
    cfg.dataset_root
        .clone()
        .or_else(|| trained.meta.get("dataset_root").map(PathBuf::from))
        .ok_or_else(|| Error::Config("no dataset_root in the config or the checkpoint".into()))
}

fn noise_label(seed: u64) -> String {
    format!("seed={seed},index=0")
}

pub fn cmd_sample(cfg: &RunConfig, layers: &ConfigLayers, args: &SampleArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "grid.png")?;
    let mut captions = args.captions.clone();
    if let Some(file) = &args.captions_file {
        let text = fs::read_to_string(file).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
        captions.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string));
    }
    if captions.is_empty() {
        return Err(Error::Config("sample needs at least one caption".into()));
    }
    if args.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let trained = load_trained(&args.checkpoint, cfg, layers)?;
    let embeddings = embed_all(&trained.encoder, &captions)?;
    let truth: Option<Dataset> = if args.ground_truth {
        let root = dataset_root(cfg, &trained)?;
        existing(&root, "dataset_root")?;
        Some(load_dataset(&root, trained.model.config.resolution)?)
    } else {
        None
    };

    let model = &trained.model;
    let nz = model.config.noise_dim;
    let cols = args.n + usize::from(truth.is_some());
    let mut grid = ImageGrid::new(captions.len(), cols, model.config.resolution)?;
    for (row, (caption, emb)) in captions.iter().zip(&embeddings).enumerate() {
        for j in 0..args.n {
            let z = noise_vector(cfg.seed, j as u64, nz);
            let meta = CellMeta::generated(caption, format!("seed={},index={j}", cfg.seed), None);
            grid.place(row, j, model.generate(emb, &z)?, meta)?;
        }
        let found = truth
            .as_ref()
            .and_then(|ds| ds.instances().iter().find(|i| i.captions.iter().any(|c| c == caption)));
        if let Some(inst) = found {
            let meta = CellMeta {
                kind: CellKind::GroundTruth,
                caption: caption.clone(),
                noise: String::new(),
                alpha: None,
                source: inst.image_path.clone(),
            };
            grid.place(row, args.n, inst.image.clone(), meta)?;
        }
    }
    grid.save(out)?;
    println!("wrote {}x{} grid to {}", grid.rows(), grid.cols(), out.display());
    Ok(())
}

fn alphas(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Config("--steps must be at least 2".into()));
    }
    Ok((0..steps).map(|i| i as f64 / (steps - 1) as f64).collect())
}

pub fn cmd_interp_z(cfg: &RunConfig, layers: &ConfigLayers, args: &InterpZArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "grid.png")?;
    let alphas = alphas(args.steps)?;
    let trained = load_trained(&args.checkpoint, cfg, layers)?;
    let model = &trained.model;
    let emb = trained.encoder.embed(&args.caption)?;
    let nz = model.config.noise_dim;
    let (a, b) = (args.z_seeds[0], args.z_seeds[1]);
    let (z1, z2) = (noise_vector(a, 0, nz), noise_vector(b, 0, nz));
    let mut grid = ImageGrid::new(1, alphas.len(), model.config.resolution)?;
    for (i, &alpha) in alphas.iter().enumerate() {
        let z: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
        let noise = format!("lerp({},{})", noise_label(a), noise_label(b));
        grid.place(0, i, model.generate(&emb, &z)?, CellMeta::generated(&args.caption, noise, Some(alpha)))?;
    }
    grid.save(out)?;
    println!("wrote {}-step noise interpolation to {}", alphas.len(), out.display());
    Ok(())
}

pub fn cmd_interp_text(cfg: &RunConfig, layers: &ConfigLayers, args: &InterpTextArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "grid.png")?;
    let alphas = alphas(args.steps)?;
    let trained = load_trained(&args.checkpoint, cfg, layers)?;
    let model = &trained.model;
    let from = trained.encoder.embed(&args.from)?;
    let to = trained.encoder.embed(&args.to)?;
    let seed = args.z_seed.unwrap_or(cfg.seed);
    let z = noise_vector(seed, 0, model.config.noise_dim);
    let caption = format!("{} -> {}", args.from, args.to);
    let mut grid = ImageGrid::new(1, alphas.len(), model.config.resolution)?;
    for (i, &alpha) in alphas.iter().enumerate() {
        let emb = interpolate_embeddings(&from, &to, alpha)?;
        grid.place(0, i, model.generate(&emb, &z)?, CellMeta::generated(&caption, noise_label(seed), Some(alpha)))?;
    }
    grid.save(out)?;
    println!("wrote {}-step caption interpolation to {}", alphas.len(), out.display());
    Ok(())
}

fn report_for(
    samples: &[(&Image, usize)],
    probe: &ProbeClassifier,
    ms: &MsSsimConfig,
    pairs: usize,
    seed: u64,
    config: BTreeMap<String, String>,
    label: &str,
) -> Result<EvalReport> {
    let diversity = per_class_diversity(samples, ms, pairs, seed)?;
    for c in &diversity.omitted {
        eprintln!("warning: {label} class {c} has fewer than two images; omitted from the MS-SSIM report");
    }
    let images: Vec<&Image> = samples.iter().map(|(i, _)| *i).collect();
    let probs = probe.predict_batch(&images)?;
    let (score_mean, score_std) = discriminability_score(&probs, DEFAULT_SPLITS.min(probs.len()))?;
    Ok(EvalReport {
        diversity,
        score_mean,
        score_std,
        seed,
        config,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig, layers: &ConfigLayers, args: &EvaluateArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "report dir")?;
    if args.n == 0 || args.pairs == 0 || args.probe_steps == 0 {
        return Err(Error::Config("--n, --pairs and --probe-steps must be positive".into()));
    }
    let trained = load_trained(&args.checkpoint, cfg, layers)?;
    let root = dataset_root(cfg, &trained)?;
    existing(&root, "dataset_root")?;
    let model = &trained.model;
    let dataset = load_dataset(&root, model.config.resolution)?;
    check_compatible(model, &dataset, &trained.encoder).map_err(|e| Error::Config(e.to_string()))?;
    let ms = MsSsimConfig::for_side(model.config.resolution)?;

    let probe = train_probe_classifier(&dataset, args.probe_steps, cfg.seed)?;
    let mut echo: BTreeMap<String, String> = model.config.to_pairs().into_iter().collect();
    echo.insert("checkpoint".into(), args.checkpoint.display().to_string());
    echo.insert("dataset_root".into(), root.display().to_string());
    echo.insert("encoder".into(), trained.encoder.id());
    echo.insert("n_per_class".into(), args.n.to_string());
    echo.insert("pairs_per_class".into(), args.pairs.to_string());
    echo.insert("probe_steps".into(), args.probe_steps.to_string());
    echo.insert("ms_ssim_scales".into(), ms.n_scales.to_string());

    let generated = generate_per_class(model, &dataset, &trained.encoder, args.n, cfg.seed)?;
    let gen_samples: Vec<(&Image, usize)> = generated.iter().map(|g| (&g.image, g.class_id)).collect();
    let gen_report = report_for(&gen_samples, &probe.classifier, &ms, args.pairs, cfg.seed, echo.clone(), "generated")?;
    let real_samples: Vec<(&Image, usize)> = dataset.instances().iter().map(|i| (&i.image, i.class_id)).collect();
    let real_report = report_for(&real_samples, &probe.classifier, &ms, args.pairs, cfg.seed, echo, "training")?;

    let mut summary = gen_report.summary_value();
    summary["training"] = real_report.summary_value();
    summary["probe_held_out_accuracy"] = probe.held_out_accuracy.into();
    let json = serde_json::to_string_pretty(&summary).expect("serializable") + "\n";
    write_atomic(&out.join("generated.tsv"), gen_report.to_tsv().as_bytes())?;
    write_atomic(&out.join("training.tsv"), real_report.to_tsv().as_bytes())?;
    write_atomic(&out.join("summary.json"), json.as_bytes())?;
    println!(
        "generated MS-SSIM {:.4} +- {:.4}, training {:.4} +- {:.4}, score {:.4} +- {:.4}; reports in {}",
        gen_report.diversity.overall_mean,
        gen_report.diversity.overall_std,
        real_report.diversity.overall_mean,
        real_report.diversity.overall_std,
        gen_report.score_mean,
        gen_report.score_std,
        out.display()
    );
    Ok(())
}

pub fn cmd_embed(cfg: &RunConfig, layers: &ConfigLayers, args: &EmbedArgs, out: Option<&Path>) -> Result<()> {
    let encoder = match &args.checkpoint {
        Some(path) => load_trained(path, cfg, layers)?.encoder,
        None => cfg.encoder.build(cfg.model.text_dim)?,
    };
    let mut text = String::new();
    for (caption, emb) in args.captions.iter().zip(embed_all(&encoder, &args.captions)?) {
        text.push_str(&format_table_row(caption, &emb));
        text.push('\n');
    }
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
