//! `hifi` — train, score and evaluate the anomaly detector from the shell.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 runtime failure.

mod convert;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hifi_core::dataio::{
    apply_normalizer, fit_normalizer, load_labels, load_series, make_windows, split_train_val,
    write_labels, write_series, LabelSeries, RawSeries, SeriesFormat,
};
use hifi_core::eval::{best_f1_sweep, report_text, score_dataset, DetectionResult, ScoreLatents};
use hifi_core::graphfi;
use hifi_core::kv;
use hifi_core::model::{get_normalizer, init_params, set_normalizer, HifiConfig, Variant};
use hifi_core::synthetic::{generate, SyntheticSpec};
use hifi_core::train::{train, TrainConfig};
use hifi_core::{checkpoint, selfcheck};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "hifi", version, about = "Multivariate time-series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a public dataset distribution into per-entity text triples.
    Convert {
        /// Source layout: smd, smap, msl or generic.
        #[arg(long)]
        dataset: String,
        /// Root of the source distribution.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the bundled coupled-sinusoid benchmark series.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long = "t_train", default_value_t = 5000)]
        t_train: usize,
        #[arg(long = "t_test", default_value_t = 2000)]
        t_test: usize,
        #[arg(long, default_value_t = 5)]
        channels: usize,
    },
    /// Train a model on a data directory (train.txt [+ test.txt/labels.txt]).
    Train {
        /// Directory with train.txt, or a directory of per-entity
        /// subdirectories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key = value config file with [model] and [train] sections; flags
        /// override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Write per-timestamp anomaly scores for a test series.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        latents: LatentFlags,
    },
    /// Score a test series and report best-F1 metrics under point-adjust.
    Evaluate {
        /// Checkpoint file, or (for per-entity data) a directory of
        /// per-entity training outputs.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        latents: LatentFlags,
    },
    /// Train and evaluate every model variant on one data directory.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Write the learned sparse interaction graph as an edge list.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the embedded invariant suite.
    Selfcheck,
}

/// Model hyperparameter flags; names mirror the config fields.
#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    d3: Option<usize>,
    #[arg(long = "d_k")]
    d_k: Option<usize>,
    #[arg(long = "num_heads")]
    num_heads: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "K")]
    k_depth: Option<usize>,
    #[arg(long = "k_topk")]
    k_topk: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long = "squared_recon")]
    squared_recon: Option<bool>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut HifiConfig) -> Result<()> {
        if let Some(v) = self.w {
            cfg.w = v;
        }
        if let Some(v) = self.d1 {
            cfg.d1 = v;
        }
        if let Some(v) = self.d2 {
            cfg.d2 = v;
        }
        if let Some(v) = self.d3 {
            cfg.d3 = v;
        }
        if let Some(v) = self.d_k {
            cfg.d_k = v;
        }
        if let Some(v) = self.num_heads {
            cfg.num_heads = v;
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.k_depth {
            cfg.k_depth = v;
        }
        if let Some(v) = self.k_topk {
            cfg.k_topk = v;
        }
        if let Some(v) = &self.variant {
            cfg.variant = Variant::parse(v)?;
        }
        if let Some(v) = self.squared_recon {
            cfg.squared_recon = v;
        }
        Ok(())
    }
}

/// Training protocol flags; names mirror the config fields.
#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "val_fraction")]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "grad_clip")]
    grad_clip: Option<f64>,
    #[arg(long = "log_every")]
    log_every: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long = "clip_normalized")]
    clip_normalized: Option<bool>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.grad_clip {
            cfg.grad_clip = Some(v);
        }
        if let Some(v) = self.log_every {
            cfg.log_every = Some(v);
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.clip_normalized {
            cfg.clip_normalized = v;
        }
    }
}

#[derive(Args, Clone, Copy)]
struct LatentFlags {
    /// Use z = mu instead of sampling (exact reproducibility).
    #[arg(long = "deterministic_latents", default_value_t = false)]
    deterministic: bool,
    /// Noise seed for sampled scoring.
    #[arg(long = "eps_seed", default_value_t = 1)]
    eps_seed: u64,
}

impl LatentFlags {
    fn mode(&self) -> ScoreLatents {
        if self.deterministic {
            ScoreLatents::Deterministic
        } else {
            ScoreLatents::Sampled {
                eps_seed: self.eps_seed,
            }
        }
    }
}

/// 1 for bad input or config, 2 for runtime failures (I/O, NaN loss, ...).
/// Plain message errors come from layout/usage validation in this crate.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hifi_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { dataset, input, out } => cmd_convert(&dataset, &input, &out),
        Command::Synth {
            out,
            seed,
            t_train,
            t_test,
            channels,
        } => cmd_synth(&out, seed, t_train, t_test, channels),
        Command::Train {
            data,
            out,
            config,
            model,
            train,
        } => cmd_train(&data, &out, config.as_deref(), &model, &train),
        Command::Score {
            checkpoint,
            data,
            out,
            latents,
        } => cmd_score(&checkpoint, &data, &out, latents),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            latents,
        } => cmd_evaluate(&checkpoint, &data, &out, latents),
        Command::Ablate {
            data,
            out,
            config,
            model,
            train,
        } => cmd_ablate(&data, &out, config.as_deref(), &model, &train),
        Command::ExportGraph { checkpoint, out } => cmd_export_graph(&checkpoint, &out),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn cmd_convert(dataset: &str, input: &Path, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let entities = match dataset {
        "smd" => convert::convert_smd(input, out)?,
        "smap" => convert::convert_telemetry(input, out, "SMAP")?,
        "msl" => convert::convert_telemetry(input, out, "MSL")?,
        "generic" => convert::convert_generic(input, out)?,
        other => bail!("unknown dataset {other:?} (expected smd, smap, msl or generic)"),
    };
    println!("converted {} entities into {}", entities.len(), out.display());
    let mut m = RunManifest::new("convert", t0);
    m.extra("dataset", dataset);
    m.extra("entities", entities.len().to_string());
    m.input_file(&input.join("."))?;
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn cmd_synth(out: &Path, seed: u64, t_train: usize, t_test: usize, channels: usize) -> Result<()> {
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        t_train,
        t_test,
        channels,
        seed,
    };
    let data = generate(&spec);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_series(&out.join("train.txt"), &data.train)?;
    write_series(&out.join("test.txt"), &data.test)?;
    write_labels(&out.join("labels.txt"), &data.labels)?;
    println!(
        "wrote synthetic series ({} train, {} test, {} channels, {} anomaly segments) to {}",
        t_train,
        t_test,
        channels,
        data.segments.len(),
        out.display()
    );
    let mut m = RunManifest::new("synth", t0);
    m.extra("seed", seed.to_string());
    m.extra("t_train", t_train.to_string());
    m.extra("t_test", t_test.to_string());
    m.extra("channels", channels.to_string());
    m.output_file(&out.join("train.txt"))?;
    m.output_file(&out.join("test.txt"))?;
    m.output_file(&out.join("labels.txt"))?;
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

/// A data directory either holds the triple directly or one subdirectory
/// per entity.
fn entity_dirs(data: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !data.is_dir() {
        bail!("data directory {} does not exist", data.display());
    }
    if data.join("train.txt").exists() {
        let name = data
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "data".to_string());
        return Ok(vec![(name, data.to_path_buf())]);
    }
    let mut entities: Vec<(String, PathBuf)> = std::fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("train.txt").exists())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().to_string(),
                p.clone(),
            )
        })
        .collect();
    entities.sort();
    if entities.is_empty() {
        bail!(
            "no data found: expected train.txt in {} or in per-entity subdirectories",
            data.display()
        );
    }
    Ok(entities)
}

fn load_entity(dir: &Path) -> Result<(RawSeries, Option<(RawSeries, LabelSeries)>)> {
    let train_path = dir.join("train.txt");
    let train = load_series(&train_path, SeriesFormat::detect(&train_path))?;
    let test_path = dir.join("test.txt");
    let label_path = dir.join("labels.txt");
    let test = if test_path.exists() {
        if !label_path.exists() {
            bail!(
                "missing label file: {} exists but {} does not",
                test_path.display(),
                label_path.display()
            );
        }
        let series = load_series(&test_path, SeriesFormat::detect(&test_path))?;
        let labels = load_labels(&label_path)?;
        Some((series, labels))
    } else {
        None
    };
    Ok((train, test))
}

fn build_configs(
    d: usize,
    config: Option<&Path>,
    model: &ModelFlags,
    tflags: &TrainFlags,
) -> Result<(HifiConfig, TrainConfig)> {
    let (mut cfg, mut tcfg) = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let mut map = kv::parse(&text)?;
            map.insert("model.d".into(), d.to_string());
            map.entry("train.seed".into()).or_insert_with(|| "1".into());
            (HifiConfig::from_kv(&map)?, TrainConfig::from_kv(&map)?)
        }
        None => (HifiConfig::with_channels(d), TrainConfig::with_seed(1)),
    };
    cfg.d = d;
    model.apply(&mut cfg)?;
    tflags.apply(&mut tcfg);
    cfg.validate()?;
    tcfg.validate()?;
    Ok((cfg, tcfg))
}

fn train_one_entity(
    entity_dir: &Path,
    out_dir: &Path,
    cfg: &HifiConfig,
    tcfg: &TrainConfig,
) -> Result<PathBuf> {
    let (train_series, _) = load_entity(entity_dir)?;
    if train_series.channels() != cfg.d {
        bail!(
            "config expects {} channels but {} has {}",
            cfg.d,
            entity_dir.display(),
            train_series.channels()
        );
    }
    let norm = fit_normalizer(&train_series);
    let normed = apply_normalizer(&norm, &train_series, tcfg.clip_normalized)?;
    let windows = make_windows(&normed, cfg.w, tcfg.stride)?;
    let (tr, va) = split_train_val(&windows, tcfg.val_fraction, tcfg.seed)?;

    let mut params = init_params(cfg, tcfg.seed);
    set_normalizer(&mut params, &norm)?;
    let outcome = train(params, cfg, tcfg, &tr, &va)?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let ckpt_path = out_dir.join("checkpoint.hifi");
    checkpoint::save(&ckpt_path, &outcome.best_params, cfg)?;
    std::fs::write(out_dir.join("trainlog.tsv"), outcome.log.to_text())
        .with_context(|| "writing trainlog.tsv")?;
    println!(
        "{}: trained {} epochs, best epoch {}, val loss {:.6}",
        entity_dir.display(),
        outcome.log.epochs.len(),
        outcome.log.best_epoch,
        outcome.log.epochs[outcome.log.best_epoch].val_loss
    );
    Ok(ckpt_path)
}

fn cmd_train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    model: &ModelFlags,
    tflags: &TrainFlags,
) -> Result<()> {
    let t0 = Instant::now();
    let entities = entity_dirs(data)?;
    let multi = entities.len() > 1;
    let (first_train, _) = load_entity(&entities[0].1)?;
    let (cfg, tcfg) = build_configs(first_train.channels(), config, model, tflags)?;

    let mut manifest = RunManifest::new("train", t0);
    manifest.configs(&cfg, &tcfg);
    for (name, dir) in &entities {
        let entity_out = if multi { out.join(name) } else { out.to_path_buf() };
        let ckpt = train_one_entity(dir, &entity_out, &cfg, &tcfg)?;
        manifest.input_file(&dir.join("train.txt"))?;
        manifest.output_file(&ckpt)?;
    }
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn score_entity(
    ckpt_path: &Path,
    entity_dir: &Path,
    latents: LatentFlags,
) -> Result<(hifi_core::eval::ScoreSeries, HifiConfig)> {
    let (params, cfg) = checkpoint::load(ckpt_path)?;
    let (_, test) = load_entity(entity_dir)?;
    let Some((test_series, labels)) = test else {
        bail!(
            "no test data: expected test.txt and labels.txt in {}",
            entity_dir.display()
        );
    };
    if test_series.channels() != cfg.d {
        bail!(
            "checkpoint expects {} channels but {} has {}",
            cfg.d,
            entity_dir.display(),
            test_series.channels()
        );
    }
    let norm = get_normalizer(&params)?;
    let normed = apply_normalizer(&norm, &test_series, true)?;
    let scores = score_dataset(&params, &cfg, &normed, &labels, latents.mode())?;
    Ok((scores, cfg))
}

fn cmd_score(ckpt: &Path, data: &Path, out: &Path, latents: LatentFlags) -> Result<()> {
    let t0 = Instant::now();
    let entities = entity_dirs(data)?;
    if entities.len() != 1 {
        bail!("score expects a single-entity data directory; use evaluate for multi-entity runs");
    }
    let (scores, _) = score_entity(ckpt, &entities[0].1, latents)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("scores.txt");
    std::fs::write(&path, scores.to_text()).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} scores to {}", scores.len(), path.display());
    let mut m = RunManifest::new("score", t0);
    m.extra("checkpoint", ckpt.display().to_string());
    m.extra("deterministic_latents", latents.deterministic.to_string());
    m.extra("eps_seed", latents.eps_seed.to_string());
    m.input_file(ckpt)?;
    m.output_file(&path)?;
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, data: &Path, out: &Path, latents: LatentFlags) -> Result<()> {
    let t0 = Instant::now();
    let entities = entity_dirs(data)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("evaluate", t0);
    manifest.extra("deterministic_latents", latents.deterministic.to_string());
    manifest.extra("eps_seed", latents.eps_seed.to_string());

    let mut totals = (0usize, 0usize, 0usize);
    let mut per_entity: Vec<(String, DetectionResult)> = Vec::new();
    for (name, dir) in &entities {
        let entity_ckpt = if entities.len() == 1 && ckpt.is_file() {
            ckpt.to_path_buf()
        } else {
            ckpt.join(name).join("checkpoint.hifi")
        };
        let (scores, _) = score_entity(&entity_ckpt, dir, latents)?;
        let best = best_f1_sweep(&scores)?;
        let entity_out = if entities.len() == 1 {
            out.to_path_buf()
        } else {
            let d = out.join(name);
            std::fs::create_dir_all(&d)?;
            d
        };
        std::fs::write(entity_out.join("scores.txt"), scores.to_text())?;
        std::fs::write(entity_out.join("metrics.txt"), report_text(&best))?;
        totals.0 += best.tp;
        totals.1 += best.fp;
        totals.2 += best.fn_;
        manifest.input_file(&entity_ckpt)?;
        per_entity.push((name.clone(), best));
    }

    for (name, r) in &per_entity {
        println!(
            "{name}: f1_best={:.4} precision={:.4} recall={:.4} threshold={}",
            r.f1, r.precision, r.recall, r.threshold
        );
    }
    if per_entity.len() > 1 {
        let micro = DetectionResult::from_counts(f64::NAN, totals.0, totals.1, totals.2);
        println!(
            "micro-average: f1={:.4} precision={:.4} recall={:.4} over {} entities",
            micro.f1,
            micro.precision,
            micro.recall,
            per_entity.len()
        );
        std::fs::write(
            out.join("metrics.txt"),
            format!(
                "entities = {}\nmicro_f1 = {}\nmicro_precision = {}\nmicro_recall = {}\n",
                per_entity.len(),
                micro.f1,
                micro.precision,
                micro.recall
            ),
        )?;
    }
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn cmd_ablate(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    model: &ModelFlags,
    tflags: &TrainFlags,
) -> Result<()> {
    let t0 = Instant::now();
    let entities = entity_dirs(data)?;
    if entities.len() != 1 {
        bail!("ablate expects a single-entity data directory");
    }
    let dir = &entities[0].1;
    let (train_series, _) = load_entity(dir)?;
    let (base_cfg, tcfg) = build_configs(train_series.channels(), config, model, tflags)?;

    let mut table = String::from("variant\tf1_best\tprecision\trecall\tthreshold\n");
    let mut manifest = RunManifest::new("ablate", t0);
    manifest.configs(&base_cfg, &tcfg);
    for variant in Variant::ALL {
        let mut cfg = base_cfg.clone();
        cfg.variant = variant;
        let entity_out = out.join(variant.as_str());
        let ckpt = train_one_entity(dir, &entity_out, &cfg, &tcfg)?;
        let (scores, _) = score_entity(
            &ckpt,
            dir,
            LatentFlags {
                deterministic: true,
                eps_seed: 1,
            },
        )?;
        let best = best_f1_sweep(&scores)?;
        std::fs::write(entity_out.join("metrics.txt"), report_text(&best))?;
        println!(
            "{variant}: f1_best={:.4} precision={:.4} recall={:.4}",
            best.f1, best.precision, best.recall
        );
        table.push_str(&format!(
            "{variant}\t{}\t{}\t{}\t{}\n",
            best.f1, best.precision, best.recall, best.threshold
        ));
        manifest.output_file(&ckpt)?;
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.tsv"), table)?;
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn cmd_export_graph(ckpt: &Path, out: &Path) -> Result<()> {
    let (params, cfg) = checkpoint::load(ckpt)?;
    if !cfg.variant.uses_graph() {
        return Err(anyhow!(hifi_core::Error::Validation(format!(
            "variant {} has no interaction graph",
            cfg.variant
        ))));
    }
    let get2 = |n: &str| -> Result<ndarray::Array2<f64>> {
        Ok(params.get(n)?.clone().into_dimensionality()?)
    };
    let learner = graphfi::GraphLearner {
        e1: get2("graphfi.e1")?,
        e2: get2("graphfi.e2")?,
        theta1: get2("graphfi.theta1")?,
        theta2: get2("graphfi.theta2")?,
    };
    let graph = graphfi::interaction_graph(&learner, cfg.k_topk)?;
    std::fs::write(out, graphfi::edge_list(&graph.a_sparse))
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} edges to {}",
        graph.a_sparse.iter().filter(|&&v| v != 0.0).count(),
        out.display()
    );
    Ok(())
}

fn cmd_selfcheck() -> Result<()> {
    let results = selfcheck::run_all();
    print!("{}", selfcheck::render_table(&results));
    if selfcheck::all_passed(&results) {
        Ok(())
    } else {
        Err(anyhow!(hifi_core::Error::Train(
            "selfcheck failed".to_string()
        )))
    }
}
