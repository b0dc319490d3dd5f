//! Command-line entry point.

use std::error::Error;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use emogen_core::evaluate::{self, ConditionalGenerator, GridConfig, ModelGenerator};
use emogen_core::generate::{self, ConditionSchedule};
use emogen_core::model::{transfer_weights, HeadKind, Model, ModelConfig, Variant};
use emogen_core::training::Trainer;
use emogen_core::{gradcheck, seeded_rng, ConditionPair};

use crate::client::{FeatureClient, FeatureSource, FixtureSource, LiveSource};
use crate::config::RunConfig;
use crate::corpus::{self, DatasetManifest, Split};
use crate::fit::{self, FitOptions, Song};
use crate::{checkpoint, files, reports};

type BoxError = Box<dyn Error + Send + Sync>;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

#[derive(Parser, Debug)]
#[command(name = "emogen", version, about = "Emotion-conditioned symbolic music generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}`; expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan MIDI files, join audio features and write the dataset and manifest.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        /// Never touch the network; read features from the fixture table.
        #[arg(long)]
        offline: bool,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Train the unconditional model on every MIDI file under `midi_root`.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Initialize a conditional variant from a vanilla checkpoint and train it
    /// on the labeled training split.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample a token sequence and render it to MIDI.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        valence: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        arousal: Option<f64>,
        /// JSON condition schedule.
        #[arg(long, conflicts_with_all = ["valence", "arousal"])]
        schedule: Option<PathBuf>,
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Teacher-forced NLL and top-1/top-5 accuracy on the test split.
    EvalPredict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the valence/arousal regression model on the training split.
    TrainRegressor {
        #[command(flatten)]
        common: Common,
    },
    /// Grid emotion error of conditional generators scored by a regressor.
    /// Pass every generator and the regressor with `--checkpoint`.
    EvalEmotion {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::BuildDataset { common, .. }
            | Command::Pretrain { common }
            | Command::Finetune { common, .. }
            | Command::Generate { common, .. }
            | Command::EvalPredict { common, .. }
            | Command::TrainRegressor { common }
            | Command::EvalEmotion { common, .. }
            | Command::Gradcheck { common } => common,
        }
    }
}

/// Parses `argv` (program name first) and runs the command. Returns 0 on
/// success, 2 on usage errors and 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, BoxError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_snapshot(out: &Path, cfg: &RunConfig) -> Result<(), BoxError> {
    fs::create_dir_all(out)?;
    checkpoint::write_atomic(&out.join(RESOLVED_CONFIG_FILE), cfg.to_text().as_bytes())?;
    Ok(())
}

fn execute(command: Command) -> Result<i32, BoxError> {
    let common = command.common().clone();
    let mut cfg = resolve(&common)?;
    match &command {
        Command::Finetune { variant: Some(v), .. } | Command::Generate { variant: Some(v), .. } => cfg.variant = *v,
        _ => {}
    }
    if let Command::Generate { tokens: Some(n), .. } | Command::EvalEmotion { tokens: Some(n), .. } = &command {
        cfg.max_tokens = *n;
    }
    if let Command::BuildDataset { fixtures: Some(f), .. } = &command {
        cfg.fixtures = Some(f.clone());
    }
    let out = common.out.as_path();
    write_snapshot(out, &cfg)?;
    match command {
        Command::BuildDataset { offline, .. } => build_dataset(&cfg, out, offline),
        Command::Pretrain { .. } => pretrain(&cfg, out),
        Command::Finetune { checkpoint, .. } => finetune(&cfg, out, &checkpoint),
        Command::Generate { checkpoint, valence, arousal, schedule, variant, .. } => {
            generate_cmd(&cfg, out, &checkpoint, variant, valence, arousal, schedule.as_deref())
        }
        Command::EvalPredict { checkpoint, .. } => eval_predict(&cfg, out, &checkpoint),
        Command::TrainRegressor { .. } => train_regressor(&cfg, out),
        Command::EvalEmotion { checkpoint, .. } => eval_emotion(&cfg, out, &checkpoint),
        Command::Gradcheck { .. } => run_gradcheck(&cfg),
    }
}

fn build_dataset(cfg: &RunConfig, out: &Path, offline: bool) -> Result<i32, BoxError> {
    let source: Box<dyn FeatureSource> = match (&cfg.fixtures, offline) {
        (Some(path), _) => Box::new(FixtureSource::load(path)?),
        (None, true) => return Err("--offline needs a fixture table (--fixtures or `fixtures` in the config)".into()),
        (None, false) => Box::new(LiveSource::from_env()?),
    };
    let cache = cfg.feature_cache.clone().unwrap_or_else(|| out.join("feature_cache.json"));
    let mut client = FeatureClient::new(source, Some(cache))?;
    let scan = corpus::scan_and_dedup(&cfg.midi_root)?;
    let matches = corpus::read_match_table(&cfg.match_table)?;
    let (dataset, names) = corpus::join_labels(&scan.kept, &matches, &mut client)?;
    client.flush()?;
    corpus::write_json(&out.join("dataset.json"), &dataset)?;
    let labeled = corpus::labeled_songs(&dataset, &names);
    let manifest = corpus::build_manifest(&labeled)?;
    corpus::write_json(&out.join("manifest.json"), &manifest)?;
    let summary = serde_json::json!({
        "unique_files": scan.kept.len(),
        "duplicates": scan.duplicates,
        "skipped": scan.skipped.iter().map(|(p, r)| serde_json::json!({"path": p, "reason": r})).collect::<Vec<_>>(),
        "matched": dataset.len(),
        "labeled": labeled.len(),
        "train": manifest.split(Split::Train).count(),
        "test": manifest.split(Split::Test).count(),
        "feature_requests": client.source_calls,
    });
    corpus::write_json(&out.join("build_summary.json"), &summary)?;
    log::info!("{summary}");
    Ok(0)
}

fn manifest_songs(cfg: &RunConfig, split: Split) -> Result<Vec<Song>, BoxError> {
    let manifest: DatasetManifest = corpus::read_json(&cfg.manifest)?;
    let songs: Vec<Song> = manifest.split(split).map(|e| Song::load(Path::new(&e.file), Some(e.condition))).collect::<Result<_, _>>()?;
    if songs.is_empty() {
        return Err(format!("manifest {} has no {split:?} songs", cfg.manifest.display()).into());
    }
    Ok(songs)
}

fn open_metrics(out: &Path) -> Result<BufWriter<File>, BoxError> {
    Ok(BufWriter::new(File::create(out.join(fit::METRICS_FILE))?))
}

fn fit_options(cfg: &RunConfig, out: &Path) -> FitOptions {
    FitOptions {
        steps: cfg.steps,
        checkpoint_every: cfg.checkpoint_every,
        augment: cfg.augment,
        out_dir: Some(out.to_path_buf()),
        target_loss: None,
    }
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<i32, BoxError> {
    if cfg.variant != Variant::Vanilla {
        return Err("pretraining trains the vanilla model; use finetune for conditional variants".into());
    }
    let scan = corpus::scan_and_dedup(&cfg.midi_root)?;
    let mut songs = Vec::with_capacity(scan.kept.len());
    for f in &scan.kept {
        match Song::load(&f.path, None) {
            Ok(s) => songs.push(s),
            Err(e) => log::warn!("{e}"),
        }
    }
    let model_cfg = cfg.model_config(Variant::Vanilla, HeadKind::Language);
    let model = Model::new(model_cfg.clone(), &mut seeded_rng(cfg.seed))?;
    log::info!("{} songs, {} parameters", songs.len(), model_cfg.param_count());
    let mut trainer = Trainer::new(model, cfg.train_spec(model_cfg.max_len));
    let mut metrics = open_metrics(out)?;
    let stats = fit::fit(&mut trainer, &songs, &fit_options(cfg, out), Some(&mut metrics))?;
    metrics.flush()?;
    log::info!("final loss {:.4}", stats.last().map_or(f64::NAN, |s| s.loss));
    Ok(0)
}

/// The vanilla trunk's config with the target variant's inputs.
pub fn conditional_config(vanilla: &ModelConfig, variant: Variant, d_cond: usize) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size: variant.vocab_size(),
        d_cond: match variant {
            Variant::ContinuousConcatenated if d_cond > 0 => d_cond,
            Variant::ContinuousConcatenated => vanilla.d_model / 4,
            _ => 0,
        },
        ..vanilla.clone()
    }
}

fn finetune(cfg: &RunConfig, out: &Path, ckpt: &Path) -> Result<i32, BoxError> {
    if !cfg.variant.is_conditional() {
        return Err("finetune needs a conditional --variant".into());
    }
    let (vanilla, _) = checkpoint::load(ckpt)?;
    let target = conditional_config(&vanilla.config, cfg.variant, if cfg.full_scale { 192 } else { cfg.d_cond });
    let model = transfer_weights(&vanilla, target, cfg.embedding_transfer, &mut seeded_rng(cfg.seed ^ 0x7A5F))?;
    let songs = manifest_songs(cfg, Split::Train)?;
    let max_len = model.config.max_len;
    let mut trainer = Trainer::new(model, cfg.train_spec(max_len));
    let mut metrics = open_metrics(out)?;
    fit::fit(&mut trainer, &songs, &fit_options(cfg, out), Some(&mut metrics))?;
    metrics.flush()?;
    Ok(0)
}

fn generate_cmd(
    cfg: &RunConfig,
    out: &Path,
    ckpt: &Path,
    variant: Option<Variant>,
    valence: Option<f64>,
    arousal: Option<f64>,
    schedule: Option<&Path>,
) -> Result<i32, BoxError> {
    let (model, _) = checkpoint::load(ckpt)?;
    let v = model.config.variant;
    if variant.is_some_and(|want| want != v) {
        return Err(format!("checkpoint holds a {} model, not {}", v.name(), cfg.variant.name()).into());
    }
    let schedule = match (schedule, valence, arousal) {
        (Some(p), _, _) => Some(files::read_schedule(p)?),
        (None, Some(va), Some(ar)) => Some(ConditionSchedule::constant(ConditionPair::new(va, ar)?)),
        (None, None, None) => None,
        _ => return Err("give both --valence and --arousal".into()),
    };
    if v.is_conditional() != schedule.is_some() {
        return Err(if v.is_conditional() {
            format!("the {} model needs --valence/--arousal or --schedule", v.name()).into()
        } else {
            "the vanilla model takes no condition".into()
        });
    }
    let sampler = cfg.sampler(model.config.max_len);
    let tokens = generate::generate(&model, schedule.as_ref(), &[], &sampler)?;
    files::write_tokens(&out.join("generated.tokens"), &tokens)?;
    checkpoint::write_atomic(&out.join("generated.mid"), &files::render_midi(&tokens))?;
    log::info!("{} tokens written to {}", tokens.len(), out.display());
    Ok(0)
}

fn eval_predict(cfg: &RunConfig, out: &Path, ckpt: &Path) -> Result<i32, BoxError> {
    let (model, _) = checkpoint::load(ckpt)?;
    let conditional = model.config.variant.is_conditional();
    let songs: Vec<_> =
        manifest_songs(cfg, Split::Test)?.into_iter().map(|s| (s.tokens, if conditional { s.condition } else { None })).collect();
    let metrics = evaluate::eval_prediction(&model, &songs, model.config.max_len)?;
    corpus::write_json(&out.join("prediction.json"), &metrics)?;
    println!("nll {:.4}  top1 {:.4}  top5 {:.4}  chunks {}", metrics.nll, metrics.top1, metrics.top5, metrics.n_chunks);
    Ok(0)
}

fn train_regressor(cfg: &RunConfig, out: &Path) -> Result<i32, BoxError> {
    let train = manifest_songs(cfg, Split::Train)?;
    let test = manifest_songs(cfg, Split::Test)?;
    let model_cfg = cfg.model_config(Variant::Vanilla, HeadKind::Regression);
    let model = Model::new(model_cfg.clone(), &mut seeded_rng(cfg.seed))?;
    let mut trainer = Trainer::new(model, cfg.train_spec(model_cfg.max_len));
    let mut metrics = open_metrics(out)?;
    fit::fit_regressor(&mut trainer, &train, cfg.steps, Some(&mut metrics))?;
    metrics.flush()?;
    checkpoint::save(&out.join("regressor.ckpt"), &trainer.model, serde_json::json!({"step": trainer.step_count()}))?;
    let mse = fit::regression_mse(&trainer.model, &test)?;
    corpus::write_json(&out.join("regressor_eval.json"), &serde_json::json!({"validation_mse": mse}))?;
    println!("validation mse {mse:.5}");
    Ok(0)
}

fn eval_emotion(cfg: &RunConfig, out: &Path, ckpts: &[PathBuf]) -> Result<i32, BoxError> {
    let mut regressor = None;
    let mut generators = Vec::new();
    for p in ckpts {
        let (m, _) = checkpoint::load(p)?;
        match (m.config.head, m.config.variant.is_conditional()) {
            (HeadKind::Regression, _) if regressor.is_none() => regressor = Some(m),
            (HeadKind::Regression, _) => return Err("more than one regression checkpoint given".into()),
            (HeadKind::Language, true) => generators.push((p.clone(), m)),
            (HeadKind::Language, false) => return Err(format!("{} is not a conditional generator", p.display()).into()),
        }
    }
    let regressor = regressor.ok_or("no regression checkpoint among --checkpoint")?;
    if generators.is_empty() {
        return Err("no conditional generator among --checkpoint".into());
    }
    let wrapped: Vec<ModelGenerator<'_, Model<f32>>> =
        generators.iter().map(|(_, m)| ModelGenerator { model: m, sampler: cfg.sampler(m.config.max_len) }).collect();
    let mut named: Vec<(String, &(dyn ConditionalGenerator + Sync))> = Vec::new();
    for ((path, m), g) in generators.iter().zip(&wrapped) {
        let mut name = m.config.variant.name().to_string();
        if named.iter().any(|(n, _)| *n == name) {
            name = format!("{name}:{}", path.display());
        }
        named.push((name, g));
    }
    let grid = GridConfig { values: cfg.grid_values(), samples_per_pair: cfg.samples_per_pair, seed: cfg.seed };
    let report = evaluate::inference_error_grid(&named, &regressor, &grid)?;
    reports::write_emotion_report(out, "emotion_report", &report)?;
    for (name, r) in &report {
        println!("{name}: mean error {:.4}", r.mean_error);
    }
    Ok(0)
}

fn run_gradcheck(cfg: &RunConfig) -> Result<i32, BoxError> {
    let seeds: Vec<u64> = (0..cfg.gradcheck_seeds as u64).map(|s| cfg.seed + s).collect();
    let reports = gradcheck::run(&seeds)?;
    let mut ok = true;
    for r in &reports {
        println!("{:<24} {:.3e} {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
        ok &= r.passed();
    }
    Ok(if ok { 0 } else { 1 })
}
