//! `mmgr` command line: dataset generation, flow caching, per-stream
//! training and scoring, score fusion, evaluation and the full pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use super::workflow::{ensure_flow, load_model, save_model, score_accuracy, train_stream, StreamConfig, StreamKind};
use super::{accuracy, change_analysis, confusion, PredictionSet};
use crate::config::KvConfig;
use crate::consensus::Aggregation;
use crate::error::{Error, Result};
use crate::flow::{compute_sequence_flow, HsParams};
use crate::fusion::{
    fuse_scores, pipeline_predict_all, read_predictions_csv, score_stream, write_predictions_csv, FusionSpec,
    Pipeline, StreamModel, StreamScore, WeightedStream,
};
use crate::video::dataset::load_sample_modalities;
use crate::video::{save_sample, write_dataset, DatasetManifest, Modality, SynthConfig, VideoSample};

#[derive(Debug, Parser)]
#[command(name = "mmgr", version, about = "Multi-modal gesture recognition toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic gesture dataset (train and test splits).
    Gen(GenArgs),
    /// Compute and cache optical flow next to the rgb frames of a split.
    Flow(FlowArgs),
    /// Train one stream and write `<out>.cfg` and `<out>.ckpt`. Frame size
    /// defaults to that of the data.
    Train(TrainArgs),
    /// Score a split with a trained stream and write a score CSV.
    Score(ScoreArgs),
    /// Fuse score CSVs with weights into a fused CSV and a predictions CSV.
    Fuse(FuseArgs),
    /// Accuracy, confusion matrix and change analysis from CSVs.
    Eval(EvalArgs),
    /// Score a split with every configured stream and fuse end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    #[arg(long, default_value_t = 5)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-frame rgb noise level.
    #[arg(long)]
    pub rgb_noise: Option<f32>,
    #[arg(long)]
    pub depth_noise: Option<f32>,
    /// Add a moving distractor blob to rgb.
    #[arg(long)]
    pub distractor: bool,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Config file with `flow_alpha` and `flow_iterations`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's modality.
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output prefix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Model prefix written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub agg: Option<Aggregation>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Score CSVs to fuse.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// One weight per input; equal weights by default.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Predictions CSV; defaults to `<out>` with a `.pred.csv` suffix.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions (`id,label`) or scores (`id,c0,...`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth `id,label`, e.g. a split manifest.
    #[arg(long)]
    pub truth: PathBuf,
    /// Baseline predictions for change analysis.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Confusion matrix CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Pipeline config: model prefixes per modality plus weights.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub agg: Option<Aggregation>,
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fused score CSV; predictions and per-stream scores go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Loads the given modalities of every sample in a split; flow is computed
/// on the fly when no cached flow exists.
pub fn load_split(root: &Path, split: &str, modalities: &[Modality], flow: &HsParams) -> Result<Vec<VideoSample>> {
    let manifest = DatasetManifest::load(root, split)?;
    let wants_flow = modalities.contains(&Modality::Flow);
    let cached = |id: &str| manifest.sample_dir(id).join(Modality::Flow.as_str()).is_dir();
    let mut samples = manifest
        .entries
        .par_iter()
        .map(|(id, _)| {
            let mut want: Vec<Modality> = modalities.to_vec();
            if wants_flow && !cached(id) {
                want.retain(|&m| m != Modality::Flow);
                if !want.contains(&Modality::Rgb) {
                    want.push(Modality::Rgb);
                }
            }
            load_sample_modalities(&manifest, id, Some(&want))
        })
        .collect::<Result<Vec<_>>>()?;
    if wants_flow {
        ensure_flow(&mut samples, flow)?;
    }
    Ok(samples)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.classes, a.frames, a.height, a.width.unwrap_or(a.height), a.seed);
    cfg.distractor = a.distractor;
    cfg.rgb_noise = a.rgb_noise.unwrap_or(cfg.rgb_noise);
    cfg.depth_noise = a.depth_noise.unwrap_or(cfg.depth_noise);
    let mut splits = vec![("train", a.per_class)];
    if a.test_per_class > 0 {
        splits.push(("test", a.test_per_class));
    }
    for m in write_dataset(&cfg, &a.data, &splits)? {
        println!("{}: {} samples, {} classes", m.split_dir().display(), m.len(), m.classes);
    }
    Ok(())
}

fn cmd_flow(a: &FlowArgs) -> Result<()> {
    let mut params = HsParams::default();
    if let Some(p) = &a.config {
        let kv = KvConfig::load(p)?;
        params.alpha = kv.get_or("flow_alpha", params.alpha)?;
        params.iterations = kv.get_or("flow_iterations", params.iterations)?;
    }
    let manifest = DatasetManifest::load(&a.data, &a.split)?;
    let split_dir = manifest.split_dir();
    manifest.entries.par_iter().try_for_each(|(id, _)| -> Result<()> {
        let s = load_sample_modalities(&manifest, id, Some(&[Modality::Rgb]))?;
        let flow = compute_sequence_flow(s.get(Modality::Rgb)?, &params)?;
        save_sample(&split_dir, &VideoSample::new(id.clone(), s.label, vec![flow])?)
    })?;
    println!("{}: flow for {} samples", split_dir.display(), manifest.len());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut kv = KvConfig::load(&a.config)?;
    if let Some(m) = a.modality {
        kv.set("modality", m);
    }
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    let classes = DatasetManifest::load(&a.data, &a.split)?.classes;
    let mut cfg = StreamConfig::from_kv(&kv, Some(classes))?;
    let samples = load_split(&a.data, &a.split, &[cfg.modality], &cfg.flow)?;
    // frame size defaults to the data's
    if let Some(first) = samples.first() {
        let (h, w) = first.get(cfg.modality)?.frame_size();
        cfg.height = if kv.contains("height") { cfg.height } else { h };
        cfg.width = if kv.contains("width") { cfg.width } else { w };
    }
    let (net, opt, _) = train_stream(&cfg, &samples, |s| log::info!("{} {s}", cfg.modality))?;
    save_model(&a.out, &cfg, &net, Some(&opt))?;
    let (_, acc) = super::workflow::evaluate_stream(&cfg.model(net), &samples, cfg.seed)?;
    println!("trained {} stream: train accuracy {acc:.4}", cfg.modality);
    Ok(())
}

fn scoring_model(prefix: &Path, agg: Option<Aggregation>) -> Result<(StreamConfig, StreamModel)> {
    let (mut cfg, net) = load_model(prefix)?;
    if let Some(h) = agg {
        cfg.agg = h;
    }
    let model = cfg.model(net);
    Ok((cfg, model))
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let (cfg, model) = scoring_model(&a.model, a.agg)?;
    let samples = load_split(&a.data, &a.split, &[cfg.modality], &cfg.flow)?;
    let scores = score_stream(&model, &samples, a.seed)?;
    ensure_parent(&a.out)?;
    scores.write_csv(&a.out)?;
    println!("{} accuracy {:.4}", cfg.modality, score_accuracy(&scores, &samples));
    Ok(())
}

fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    let streams = a
        .inputs
        .iter()
        .enumerate()
        .map(|(i, p)| StreamScore::read_csv(p, &format!("s{i}")))
        .collect::<Result<Vec<_>>>()?;
    let weights = a.weights.clone().unwrap_or_else(|| vec![1.0; streams.len()]);
    let spec = FusionSpec::new(streams.iter().map(|s| s.stream.clone()).collect(), weights, a.normalize)?;
    let fused = fuse_scores(&streams, &spec)?;
    ensure_parent(&a.out)?;
    fused.write_csv(&a.out)?;
    let pred = a.pred.clone().unwrap_or_else(|| with_suffix(&a.out, ".pred.csv"));
    write_predictions_csv(&pred, &fused.predictions())?;
    println!("fused {} samples from {} streams", fused.len(), streams.len());
    Ok(())
}

/// Labels from a predictions CSV or, failing that, argmax of a score CSV.
fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let head = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    if head.lines().next().is_some_and(|l| l.trim() == "id,label") {
        read_predictions_csv(path)
    } else {
        Ok(StreamScore::read_csv(path, "scores")?.predictions())
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let truth = read_labels(&a.truth)?;
    let pred = PredictionSet::join(&read_labels(&a.pred)?, &truth, a.classes)?;
    let acc = accuracy(&pred)?;
    let cm = confusion(&pred)?;
    println!("accuracy {acc:.4} ({}/{})", cm.trace(), cm.total());
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        cm.write_csv(out, false)?;
        cm.write_csv(&with_suffix(out, ".norm.csv"), true)?;
    }
    if let Some(base) = &a.base {
        let base = PredictionSet::join(&read_labels(base)?, &truth, Some(pred.classes))?;
        let changes = change_analysis(&base, &pred)?;
        println!("class,correct,error");
        for (c, (good, bad)) in changes.iter().enumerate() {
            println!("{c},{good},{bad}");
        }
        let (good, bad) = changes.iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
        println!("total,{good},{bad}");
    }
    Ok(())
}

/// Builds a [`Pipeline`] from a config naming model prefixes per modality
/// (`rgb`, `flow`, `depth`, `saliency`) with `weight.<modality>`,
/// `weight.2d`, `weight.3d`, `normalize` and `agg` keys. Relative prefixes
/// resolve against the config's directory.
pub fn pipeline_from_config(path: &Path, agg: Option<Aggregation>) -> Result<(Pipeline, Vec<Modality>, HsParams)> {
    let kv = KvConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let agg = match agg {
        Some(a) => Some(a),
        None => kv.get("agg")?,
    };
    let mut p = Pipeline::new(Vec::new(), Vec::new());
    let mut flow = HsParams::default();
    let mut modalities = Vec::new();
    for m in Modality::ALL {
        let Some(prefix) = kv.raw(m.as_str()) else { continue };
        let (cfg, model) = scoring_model(&base.join(prefix), agg)?;
        if cfg.modality != m {
            return Err(Error::Config(format!("{}: model is a {} stream", m, cfg.modality)));
        }
        if m == Modality::Flow {
            flow = cfg.flow;
        }
        let default = if m == Modality::Depth { 2.0 } else { 1.0 };
        let weight = kv.get_or(&format!("weight.{m}"), default)?;
        let stream = WeightedStream { model, weight };
        match cfg.kind {
            StreamKind::Consensus => p.consensus.push(stream),
            StreamKind::Volume => p.volume.push(stream),
        }
        modalities.push(m);
    }
    p.component_weights = [kv.get_or("weight.2d", 1.0)?, kv.get_or("weight.3d", 1.0)?];
    p.normalize = kv.get_or("normalize", false)?;
    Ok((p, modalities, flow))
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let (mut p, modalities, flow) = pipeline_from_config(&a.config, a.agg)?;
    if let Some(n) = a.normalize {
        p.normalize = n;
    }
    if let Some(w) = &a.weights {
        let w: Vec<f64> = w
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad weight {x:?}"))))
            .collect::<Result<_>>()?;
        if w.len() != 2 {
            return Err(Error::Config("--weights takes the 2d and 3d component weights".into()));
        }
        p.component_weights = [w[0], w[1]];
    }
    p.seed = a.seed;
    let samples = load_split(&a.data, &a.split, &modalities, &flow)?;
    let outputs = pipeline_predict_all(&samples, &p)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ensure_parent(&a.out)?;
    let fused = StreamScore::new("fused", ids.clone(), outputs.iter().map(|o| o.fused.clone()).collect(), false)?;
    fused.write_csv(&a.out)?;
    write_predictions_csv(&with_suffix(&a.out, ".pred.csv"), &fused.predictions())?;
    let order: Vec<Modality> = p.streams().map(|s| s.model.modality()).collect();
    for (k, m) in order.iter().enumerate() {
        let s = StreamScore::new(m.as_str(), ids.clone(), outputs.iter().map(|o| o.streams[k].1.clone()).collect(), false)?;
        s.write_csv(&with_suffix(&a.out, &format!(".{m}.csv")))?;
        println!("{m} accuracy {:.4}", score_accuracy(&s, &samples));
    }
    println!("fused accuracy {:.4}", score_accuracy(&fused, &samples));
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Flow(a) => cmd_flow(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

/// Parses `args`, runs the command and maps failures to exit codes: 2 for
/// usage errors and missing files, 1 otherwise.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("MMGR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("MMGR_THREADS ignored: {e}");
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmgr: {e}");
            ExitCode::from(match e {
                Error::NotFound(_) => 2,
                _ => 1,
            })
        }
    }
}
