//! Stream configuration files and the train / score workflows shared by the
//! command line and the test suites.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::KvConfig;
use crate::consensus::{consensus_train_epoch, Aggregation, SnippetSpec};
use crate::error::{param_err, Error, Result};
use crate::flow::{compute_sequence_flow, HsParams};
use crate::fusion::{sample_volume, score_stream, StreamModel, StreamScore, DEFAULT_CENTER};
use crate::layers::{Network, NetworkConfig, StreamOptions};
use crate::optim::{train_epoch, EpochStats, Sgd, SgdConfig};
use crate::tensor::argmax;
use crate::video::{Augment, Modality, VideoSample, VOLUME_FRAMES};

/// 2D consensus stream or 3D volume stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Consensus,
    Volume,
}

/// Everything needed to build, train and score one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub modality: Modality,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub options: StreamOptions,
    pub segments: usize,
    pub per_segment: usize,
    pub flow_depth: usize,
    pub agg: Aggregation,
    /// Mirrored counterparts of test snippets.
    pub flip_test: bool,
    /// Random horizontal flips of training snippets.
    pub flip_train: bool,
    pub center: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Stop once an epoch reaches this training accuracy.
    pub stop_accuracy: Option<f64>,
    pub flow: HsParams,
}

impl StreamConfig {
    pub fn consensus(modality: Modality, classes: usize, height: usize, width: usize) -> Self {
        Self {
            kind: StreamKind::Consensus,
            modality,
            classes,
            height,
            width,
            widths: vec![16, 32, 32],
            options: StreamOptions::default(),
            segments: 5,
            per_segment: 1,
            flow_depth: 5,
            agg: Aggregation::Mean,
            flip_test: false,
            flip_train: false,
            center: DEFAULT_CENTER,
            epochs: 30,
            batch_size: 8,
            sgd: SgdConfig { learning_rate: 0.01, ..SgdConfig::stream_2d() },
            seed: 0,
            stop_accuracy: None,
            flow: HsParams::default(),
        }
    }

    pub fn volume(modality: Modality, classes: usize, height: usize, width: usize) -> Self {
        Self {
            kind: StreamKind::Volume,
            widths: vec![8, 8, 16, 16, 32, 32, 32, 32],
            sgd: SgdConfig { learning_rate: 0.01, ..SgdConfig::stream_3d() },
            ..Self::consensus(modality, classes, height, width)
        }
    }

    /// Per-sample network input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        let c = match (self.kind, self.modality) {
            (StreamKind::Consensus, Modality::Flow) => 2 * self.flow_depth,
            (_, m) => m.channels(),
        };
        match self.kind {
            StreamKind::Consensus => vec![c, self.height, self.width],
            StreamKind::Volume => vec![c, VOLUME_FRAMES, self.height, self.width],
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let s = self.input_shape();
        match self.kind {
            StreamKind::Consensus => NetworkConfig::stream_2d([s[0], s[1], s[2]], &self.widths, self.classes, self.options),
            StreamKind::Volume => NetworkConfig::stream_3d([s[0], s[1], s[2], s[3]], &self.widths, self.classes, self.options),
        }
    }

    fn snippet_spec(&self, training: bool) -> SnippetSpec {
        SnippetSpec {
            modality: self.modality,
            segments: self.segments,
            per_segment: self.per_segment,
            flow_depth: self.flow_depth,
            augment: if training && self.flip_train { vec![Augment::RandomHFlip] } else { Vec::new() },
            flip_counterparts: !training && self.flip_test,
        }
    }

    /// Reads `stream`, `modality` and optional overrides. `classes` fills in
    /// the class count when the file has none.
    pub fn from_kv(kv: &KvConfig, classes: Option<usize>) -> Result<Self> {
        let modality: Modality = kv.get("modality")?.ok_or_else(|| Error::Config("missing key modality".into()))?;
        let classes = match kv.get::<usize>("classes")? {
            Some(c) => c,
            None => classes.ok_or_else(|| Error::Config("missing key classes".into()))?,
        };
        let height = kv.get_or("height", 64)?;
        let width = kv.get_or("width", height)?;
        let mut c = match kv.raw("stream").unwrap_or("2d") {
            "2d" => Self::consensus(modality, classes, height, width),
            "3d" => Self::volume(modality, classes, height, width),
            other => return Err(Error::Config(format!("stream must be 2d or 3d, got {other:?}"))),
        };
        if let Some(w) = kv.list("widths")? {
            c.widths = w;
        }
        c.options.batch_norm = kv.get_or("batch_norm", c.options.batch_norm)?;
        c.options.dropout_keep = kv.get_or("dropout_keep", c.options.dropout_keep)?;
        c.segments = kv.get_or("segments", c.segments)?;
        c.per_segment = kv.get_or("per_segment", c.per_segment)?;
        c.flow_depth = kv.get_or("flow_depth", c.flow_depth)?;
        c.agg = kv.get_or("agg", c.agg)?;
        c.flip_test = kv.get_or("flip_test", c.flip_test)?;
        c.flip_train = kv.get_or("flip_train", c.flip_train)?;
        c.center = kv.get_or("center", c.center)?;
        c.epochs = kv.get_or("epochs", c.epochs)?;
        c.batch_size = kv.get_or("batch_size", c.batch_size)?;
        c.sgd.learning_rate = kv.get_or("lr", c.sgd.learning_rate)?;
        c.sgd.momentum = kv.get_or("momentum", c.sgd.momentum)?;
        c.sgd.weight_decay = kv.get_or("weight_decay", c.sgd.weight_decay)?;
        c.sgd.clip = kv.get_or("clip", c.sgd.clip)?;
        c.sgd.decay_factor = kv.get_or("lr_decay", c.sgd.decay_factor)?;
        c.sgd.step_interval = kv.get_or("lr_step", c.sgd.step_interval)?;
        c.seed = kv.get_or("seed", c.seed)?;
        c.stop_accuracy = kv.get("stop_accuracy")?;
        c.flow.alpha = kv.get_or("flow_alpha", c.flow.alpha)?;
        c.flow.iterations = kv.get_or("flow_iterations", c.flow.iterations)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("stream", if self.kind == StreamKind::Consensus { "2d" } else { "3d" });
        kv.set("modality", self.modality);
        kv.set("classes", self.classes);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("widths", self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        kv.set("batch_norm", self.options.batch_norm);
        kv.set("dropout_keep", self.options.dropout_keep);
        kv.set("segments", self.segments);
        kv.set("per_segment", self.per_segment);
        kv.set("flow_depth", self.flow_depth);
        kv.set("agg", self.agg);
        kv.set("flip_test", self.flip_test);
        kv.set("flip_train", self.flip_train);
        kv.set("center", self.center);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.sgd.learning_rate);
        kv.set("momentum", self.sgd.momentum);
        kv.set("weight_decay", self.sgd.weight_decay);
        kv.set("clip", self.sgd.clip);
        kv.set("lr_decay", self.sgd.decay_factor);
        kv.set("lr_step", self.sgd.step_interval);
        kv.set("seed", self.seed);
        if let Some(a) = self.stop_accuracy {
            kv.set("stop_accuracy", a);
        }
        kv.set("flow_alpha", self.flow.alpha);
        kv.set("flow_iterations", self.flow.iterations);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.segments == 0 || self.per_segment == 0 || self.flow_depth == 0 {
            return Err(param_err!("batch_size, segments, per_segment and flow_depth must be positive"));
        }
        if self.center >= VOLUME_FRAMES {
            return Err(param_err!("volume centre {} outside [0, {VOLUME_FRAMES})", self.center));
        }
        if self.kind == StreamKind::Volume && self.modality == Modality::Flow {
            return Err(Error::Config("3d streams read rgb, depth or saliency".into()));
        }
        self.sgd.validate()?;
        self.network_config().map(|_| ())
    }

    /// The scoring view of a trained network.
    pub fn model(&self, net: Network<f32>) -> StreamModel {
        match self.kind {
            StreamKind::Consensus => StreamModel::Consensus { net, spec: self.snippet_spec(false), agg: self.agg },
            StreamKind::Volume => StreamModel::Volume { net, modality: self.modality, center: self.center },
        }
    }
}

/// Adds a flow sequence computed from rgb to every sample lacking one.
pub fn ensure_flow(samples: &mut [VideoSample], params: &HsParams) -> Result<()> {
    samples.par_iter_mut().try_for_each(|s| {
        if !s.modalities.contains_key(&Modality::Flow) {
            let flow = compute_sequence_flow(s.get(Modality::Rgb)?, params)?;
            s.insert(flow)?;
        }
        Ok(())
    })
}

/// Trains a fresh network; `on_epoch` sees every epoch summary.
pub fn train_stream(
    cfg: &StreamConfig,
    samples: &[VideoSample],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Network<f32>, Sgd<f32>, Vec<EpochStats>)> {
    cfg.validate()?;
    if let Some(bad) = samples.iter().find(|s| s.label >= cfg.classes) {
        return Err(param_err!("sample {} has label {} but the stream has {} classes", bad.id, bad.label, cfg.classes));
    }
    let mut net = Network::new(cfg.network_config()?, cfg.seed)?;
    let mut opt = Sgd::new(cfg.sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let volumes = match cfg.kind {
        StreamKind::Volume => samples
            .par_iter()
            .map(|s| Ok((sample_volume(s, cfg.modality, cfg.center)?, s.label)))
            .collect::<Result<Vec<_>>>()?,
        StreamKind::Consensus => Vec::new(),
    };
    let spec = cfg.snippet_spec(true);
    for _ in 0..cfg.epochs {
        let stats = match cfg.kind {
            StreamKind::Volume => train_epoch(&mut net, &volumes, &mut opt, cfg.batch_size, &mut rng)?,
            StreamKind::Consensus => consensus_train_epoch(&mut net, samples, &spec, &mut opt, cfg.batch_size, &mut rng)?,
        };
        on_epoch(&stats);
        history.push(stats);
        if cfg.stop_accuracy.is_some_and(|a| stats.accuracy >= a) {
            break;
        }
    }
    Ok((net, opt, history))
}

/// Scores `samples` and returns the scores with their accuracy.
pub fn evaluate_stream(model: &StreamModel, samples: &[VideoSample], seed: u64) -> Result<(StreamScore, f64)> {
    let scores = score_stream(model, samples, seed)?;
    Ok((scores.clone(), score_accuracy(&scores, samples)))
}

/// Fraction of samples whose argmax score equals the label.
pub fn score_accuracy(scores: &StreamScore, samples: &[VideoSample]) -> f64 {
    let correct = samples
        .iter()
        .filter(|s| scores.get(&s.id).is_some_and(|v| argmax(v.data()) == s.label))
        .count();
    correct as f64 / samples.len().max(1) as f64
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

/// Writes `<prefix>.cfg` and `<prefix>.ckpt`.
pub fn save_model(prefix: &Path, cfg: &StreamConfig, net: &Network<f32>, opt: Option<&Sgd<f32>>) -> Result<()> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    cfg.to_kv().save(&with_ext(prefix, ".cfg"))?;
    save_checkpoint(&with_ext(prefix, ".ckpt"), net, opt)
}

pub fn load_model(prefix: &Path) -> Result<(StreamConfig, Network<f32>)> {
    let cfg = StreamConfig::from_kv(&KvConfig::load(&with_ext(prefix, ".cfg"))?, None)?;
    let mut net = Network::new(cfg.network_config()?, cfg.seed)?;
    load_checkpoint(&with_ext(prefix, ".ckpt"))?.restore(&mut net, None)?;
    Ok((cfg, net))
}
