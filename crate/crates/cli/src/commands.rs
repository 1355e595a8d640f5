use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use vqunet_core::config::{Layers, ENV_PREFIX};
use vqunet_core::dataset::synthetic::{generate_synthetic, SyntheticConfig};
use vqunet_core::dataset::{load_dataset, load_labels, LoadOptions};
use vqunet_core::detect::{self, evaluate_auc, score_clip, write_heatmap, ClipScores, ScoreSeries};
use vqunet_core::explain::{
    self, calibration_scores, evaluate_map, explain_clips, percentile, read_records, write_records, DetectionSet,
    LabelAliases, DEFAULT_EXCLUDED,
};
use vqunet_core::manifest::ManifestWriter;
use vqunet_core::plot::write_plots;
use vqunet_core::train::{load_checkpoint, run_ablation, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "vqunet", version, about = "Vector-quantized U-Net video anomaly detection and explanation")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &'static str {
        match (self.quiet, self.verbose) {
            (true, _) => "warn",
            (false, 0) => "info",
            (false, 1) => "debug",
            _ => "trace",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset with injected anomalies.
    GenSynthetic(GenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train and evaluate the temporal × codebook matrix.
    Ablate(AblateArgs),
    /// Score test frames with a checkpoint.
    Score(ScoreArgs),
    /// Frame-level AUC of saved scores.
    EvalAuc(EvalAucArgs),
    /// Rank detection boxes by saliency.
    Explain(ExplainArgs),
    /// Per-class average precision of saved explanations.
    EvalMap(EvalMapArgs),
    /// ROC curve and per-clip score timelines.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value`. Precedence: defaults < --config file < `VQUNET_*`
    /// environment variables (`__` nests) < --override.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let cfg = Layers::from_file(self.config.as_deref())?
            .with_env(ENV_PREFIX, std::env::vars())
            .with_overrides(self.overrides.iter().cloned())
            .resolve(&TrainConfig::default())?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square frame size used for the proportional defaults.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
    #[arg(long, default_value = "per_video_minmax")]
    normalization: String,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root (frames and labels).
    #[arg(long = "dataset", visible_alias = "labels")]
    data: PathBuf,
    /// Registered dataset layout.
    #[arg(long, default_value = "ucsd_avenue")]
    layout: String,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "per_video_minmax")]
    normalization: String,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Also write a saliency heatmap PNG per frame.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Debug, Args)]
struct EvalAucArgs {
    /// Directory of per-clip score CSVs.
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Report only this normalization; default reports `none` and `per_video_minmax`.
    #[arg(long)]
    normalization: Option<String>,
    /// Write the reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregatorChoice {
    Sum,
    Mean,
    Both,
}

impl AggregatorChoice {
    fn names(self) -> &'static [&'static str] {
        match self {
            AggregatorChoice::Sum => &["sum"],
            AggregatorChoice::Mean => &["mean"],
            AggregatorChoice::Both => &["sum", "mean"],
        }
    }
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Test-split detections; defaults to `<data>/testing/detections.jsonl`.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Normal-split detections for threshold calibration; defaults to
    /// `<data>/training/detections.jsonl`.
    #[arg(long)]
    calibration_detections: Option<PathBuf>,
    /// Absolute box-score threshold (skips calibration).
    #[arg(long, conflicts_with = "percentile")]
    threshold: Option<f64>,
    /// Percentile of calibration box scores used as threshold.
    #[arg(long, default_value_t = 99.0)]
    percentile: f64,
    /// Box aggregation; each mode writes its own subdirectory.
    #[arg(long, value_enum, default_value_t = AggregatorChoice::Both)]
    aggregator: AggregatorChoice,
    /// `from,to` CSV of label rewrites.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Frame size `WxH` the detection boxes refer to, when it differs from
    /// the model input size.
    #[arg(long, value_parser = parse_size)]
    detections_size: Option<(usize, usize)>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Debug, Args)]
struct EvalMapArgs {
    /// Directory of per-clip explanation JSONL files, or an `explain` output
    /// directory with one subdirectory per aggregator.
    #[arg(long)]
    explanations: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Classes left out of the mean; replaces the default list.
    #[arg(long)]
    exclude: Vec<String>,
    /// Evaluate every class, including the default exclusions.
    #[arg(long, conflicts_with = "exclude")]
    include_all: bool,
    /// CSV report path; defaults to `map.csv` next to each evaluated record set.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "per_video_minmax")]
    normalization: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn args() -> Vec<String> {
    std::env::args().skip(1).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Score(a) => score(a),
        Command::EvalAuc(a) => eval_auc(a),
        Command::Explain(a) => explain_cmd(a),
        Command::EvalMap(a) => eval_map(a),
        Command::Plot(a) => plot(a),
    }
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    // No environment layer: generation is fully described by file, flags and seed.
    let cfg = Layers::from_file(a.config.config.as_deref())?
        .with_overrides(a.config.overrides.iter().cloned())
        .resolve(&SyntheticConfig::for_size(a.size, a.size))?;
    let summary = generate_synthetic(&cfg, a.seed, &a.out)?;
    let anomalous: usize = summary.anomalous_frames.values().sum();
    println!(
        "wrote {} training and {} test clips ({} anomalous frames) to {}",
        summary.train_clips,
        summary.test_clips,
        anomalous,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.train_config()?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    let mut manifest = ManifestWriter::start(
        &cfg.out_dir,
        "train",
        args(),
        serde_json::to_value(&cfg)?,
        Some(cfg.seed),
    )?;
    let outcome = train(&cfg)?;
    for e in &outcome.epochs {
        manifest.timing(&format!("epoch_{}", e.epoch), e.seconds);
    }
    manifest.output(&outcome.last_checkpoint);
    manifest.output(&outcome.best_checkpoint);
    manifest.output(&outcome.metrics_csv);
    let codebook_csv = cfg.out_dir.join("codebook.csv");
    if codebook_csv.is_file() {
        manifest.output(codebook_csv);
    }
    let last = outcome.epochs.last().context("no epoch ran")?;
    println!(
        "trained {} epochs ({} steps): pred {:.4} total {:.4}; checkpoint {}",
        outcome.epochs.len(),
        outcome.steps,
        last.mean_pred,
        last.mean_total,
        outcome.last_checkpoint.display()
    );
    manifest.finish()?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.train_config()?;
    cfg.validate()?;
    detect::registry().get(&a.normalization)?;
    let mut manifest = ManifestWriter::start(&a.out, "ablate", args(), serde_json::to_value(&cfg)?, Some(cfg.seed))?;
    let started = Instant::now();
    let dataset = load_dataset(&cfg.dataset_root, &cfg.layout, &cfg.load_options())?;
    manifest.timing("load", started.elapsed().as_secs_f64());
    let report = run_ablation(&cfg, &dataset, &a.out, &a.normalization)?;
    for c in &report.cells {
        manifest.timing(&c.dir_name(), c.seconds);
        if let Some(ck) = &c.checkpoint {
            manifest.output(ck);
        }
    }
    for f in ["ablation.md", "ablation.csv", "ablation.json"] {
        manifest.output(a.out.join(f));
    }
    print!("{}", report.table());
    manifest.finish()?;
    Ok(())
}

struct Loaded {
    model: vqunet_core::model::VqUNet<f32>,
    size: Option<(usize, usize)>,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ck = load_checkpoint(path)?;
    let size = ck.meta.image_size.map(|[w, h]| (w, h));
    Ok(Loaded { model: ck.model, size })
}

fn test_options(size: Option<(usize, usize)>) -> LoadOptions {
    LoadOptions {
        image_size: size,
        skip_training: true,
        ..LoadOptions::default()
    }
}

fn heatmap_path(dir: &Path, clip: &str, frame: usize) -> PathBuf {
    dir.join(clip).join(format!("{frame:06}.png"))
}

fn score(a: ScoreArgs) -> Result<()> {
    detect::registry().get(&a.normalization)?;
    let mut manifest = ManifestWriter::start(
        &a.out,
        "score",
        args(),
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data.data,
            "layout": a.data.layout,
            "normalization": a.normalization,
            "batch_size": a.batch_size,
        }),
        None,
    )?;
    let loaded = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data.data, &a.data.layout, &test_options(loaded.size))?;
    let heat_dir = a.out.join("heatmaps");
    let mut clips = Vec::with_capacity(ds.testing.len());
    for clip in &ds.testing {
        let scores: ClipScores = score_clip(&loaded.model, clip, a.batch_size, |map, _| {
            if a.heatmaps {
                write_heatmap(map, None, &heatmap_path(&heat_dir, &map.clip_id, map.frame_index))?;
            }
            Ok(())
        })?;
        clips.push(scores);
    }
    let series = ScoreSeries { clips };
    let score_dir = a.out.join("scores");
    series.write_csv_dir(&score_dir, &a.normalization)?;
    manifest.output(&score_dir);
    if a.heatmaps {
        manifest.output(&heat_dir);
    }
    println!(
        "scored {} frames in {} clips into {}",
        series.frames(),
        series.clips.len(),
        score_dir.display()
    );
    if !ds.labels.is_empty() {
        match evaluate_auc(&series, &ds.labels, &a.normalization) {
            Ok(r) => println!("auc ({}) {:.4}", r.normalization, r.auc),
            Err(e) => warn!("auc unavailable: {e}"),
        }
    }
    manifest.finish()?;
    Ok(())
}

fn eval_auc(a: EvalAucArgs) -> Result<()> {
    let series = ScoreSeries::read_csv_dir(&a.scores)?;
    let labels = load_labels(&a.data.data, &a.data.layout)?;
    if labels.is_empty() {
        bail!(vqunet_core::Error::Eval(format!(
            "no test labels under {}",
            a.data.data.display()
        )));
    }
    let names: Vec<String> = match &a.normalization {
        Some(n) => vec![n.clone()],
        None => ["none", "per_video_minmax"].map(String::from).to_vec(),
    };
    let reports = names
        .iter()
        .map(|n| evaluate_auc(&series, &labels, n))
        .collect::<vqunet_core::Result<Vec<_>>>()?;
    for r in &reports {
        println!("{:<18} auc {:.4} ({} frames, {} anomalous)", r.normalization, r.auc, r.frames, r.anomalous);
    }
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&reports)?;
        std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

/// Detections moved into model-input coordinates and clipped to the frame.
fn prepare_detections(
    path: &Path,
    from: Option<(usize, usize)>,
    to: (usize, usize),
) -> Result<DetectionSet> {
    let mut set = DetectionSet::load(path)?;
    if let Some(from) = from {
        if from != to {
            set.rescale(from, to);
        }
    }
    let dropped = set.clip_to(to.0, to.1);
    if dropped > 0 {
        warn!("{}: dropped {dropped} boxes outside the frame", path.display());
    }
    Ok(set)
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let mut manifest = ManifestWriter::start(
        &a.out,
        "explain",
        args(),
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data.data,
            "layout": a.data.layout,
            "threshold": a.threshold,
            "percentile": a.percentile,
            "aggregator": a.aggregator.names(),
            "aliases": a.aliases,
            "detections_size": a.detections_size,
        }),
        None,
    )?;
    let loaded = load_model(&a.checkpoint)?;
    let opts = LoadOptions {
        skip_training: a.threshold.is_some(),
        ..test_options(loaded.size)
    };
    let ds = load_dataset(&a.data.data, &a.data.layout, &opts)?;
    let size = ds
        .testing
        .iter()
        .find_map(|c| c.frame_size())
        .context("test split has no frames")?;
    let det_path = a
        .detections
        .clone()
        .unwrap_or_else(|| a.data.data.join("testing").join("detections.jsonl"));
    let detections = prepare_detections(&det_path, a.detections_size, size)?;
    let aliases = match &a.aliases {
        Some(p) => LabelAliases::load(p)?,
        None => LabelAliases::default(),
    };
    let calibration = if a.threshold.is_none() {
        let p = a
            .calibration_detections
            .clone()
            .unwrap_or_else(|| a.data.data.join("training").join("detections.jsonl"));
        if p.is_file() && !ds.training.is_empty() {
            Some(prepare_detections(&p, a.detections_size, size)?)
        } else {
            warn!(
                "no calibration detections at {}; calibrating on unlabeled test boxes",
                p.display()
            );
            None
        }
    } else {
        None
    };
    let heat_dir = a.out.join("heatmaps");
    for (i, name) in a.aggregator.names().iter().enumerate() {
        let aggregator = explain::registry().get(name)?;
        let threshold = match a.threshold {
            Some(t) => t,
            None => {
                let scores = match &calibration {
                    Some(set) => calibration_scores(&loaded.model, &ds.training, set, aggregator, a.batch_size)?,
                    None => calibration_scores(&loaded.model, &ds.testing, &detections, aggregator, a.batch_size)?,
                };
                percentile(&scores, a.percentile)?
            }
        };
        info!("{name}: box-score threshold {threshold}");
        let write_maps = a.heatmaps && i == 0;
        let mut records = explain_clips(
            &loaded.model,
            &ds.testing,
            &detections,
            threshold,
            aggregator,
            a.batch_size,
            |map| {
                if write_maps {
                    write_heatmap(map, None, &heatmap_path(&heat_dir, &map.clip_id, map.frame_index))?;
                }
                Ok(())
            },
        )?;
        aliases.apply_records(&mut records);
        let dir = a.out.join(name);
        write_records(&dir, &records)?;
        manifest.output(&dir);
        manifest.manifest.config[format!("threshold_{name}")] = serde_json::json!(threshold);
        let flagged = records.iter().flat_map(|r| &r.entries).filter(|e| e.anomalous).count();
        println!(
            "{name}: {} frames, {flagged} boxes flagged (threshold {threshold:.4}) -> {}",
            records.len(),
            dir.display()
        );
    }
    if a.heatmaps {
        manifest.output(&heat_dir);
    }
    manifest.finish()?;
    Ok(())
}

/// Record sets under `dir`: the directory itself when it holds JSONL files,
/// else each aggregator subdirectory that does.
fn record_dirs(dir: &Path) -> Result<Vec<(Option<String>, PathBuf)>> {
    let has_jsonl = |d: &Path| -> Result<bool> {
        Ok(std::fs::read_dir(d)
            .with_context(|| format!("reading {}", d.display()))?
            .filter_map(|e| e.ok())
            .any(|e| e.path().extension().is_some_and(|x| x == "jsonl")))
    };
    if has_jsonl(dir)? {
        return Ok(vec![(None, dir.to_path_buf())]);
    }
    let mut found = Vec::new();
    for name in explain::registry().names() {
        let sub = dir.join(name);
        if sub.is_dir() && has_jsonl(&sub)? {
            found.push((Some(name.to_string()), sub));
        }
    }
    if found.is_empty() {
        bail!(vqunet_core::Error::Eval(format!(
            "no explanation records under {}",
            dir.display()
        )));
    }
    Ok(found)
}

fn eval_map(a: EvalMapArgs) -> Result<()> {
    let labels = load_labels(&a.data.data, &a.data.layout)?;
    let exclude: Vec<String> = if a.include_all {
        Vec::new()
    } else if a.exclude.is_empty() {
        DEFAULT_EXCLUDED.iter().map(|s| s.to_string()).collect()
    } else {
        a.exclude.clone()
    };
    for (name, dir) in record_dirs(&a.explanations)? {
        let records = read_records(&dir)?;
        let report = evaluate_map(&records, &labels, &exclude)?;
        let out = match (&a.out, &name) {
            (Some(p), None) => p.clone(),
            (Some(p), Some(n)) => p.with_file_name(format!(
                "{}_{n}.csv",
                p.file_stem().and_then(|s| s.to_str()).unwrap_or("map")
            )),
            (None, _) => dir.join("map.csv"),
        };
        report.write_csv(&out)?;
        if let Some(n) = &name {
            println!("[{n}]");
        }
        print!("{}", report.to_csv());
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let mut manifest = ManifestWriter::start(
        &a.out,
        "plot",
        args(),
        serde_json::json!({
            "scores": a.scores,
            "data": a.data.data,
            "layout": a.data.layout,
            "normalization": a.normalization,
        }),
        None,
    )?;
    let series = ScoreSeries::read_csv_dir(&a.scores)?;
    let labels = load_labels(&a.data.data, &a.data.layout)?;
    let written = write_plots(&series, &labels, &a.normalization, &a.out)?;
    for p in &written {
        manifest.output(p);
    }
    println!("wrote {} plots to {}", written.len(), a.out.display());
    manifest.finish()?;
    Ok(())
}
