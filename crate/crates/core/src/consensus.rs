//! Segment-based snippet sampling and consensus voting: a video is split
//! into `K` segments, snippets drawn from each are scored by a 2D network,
//! and the `l x T` matrix of snippet probabilities is reduced to one
//! video-level score.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{param_err, shape_err, Error, Result};
use crate::flow::stack_flow;
use crate::layers::{softmax_slice, Mode, Network};
use crate::optim::{apply_update, cross_entropy_loss, with_batch, EpochStats, Sgd};
use crate::tensor::{argmax, Tensor};
use crate::video::{augment_frames, hflip, Augment, Modality, VideoSample};

/// The voting function `h` collapsing snippet columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    #[default]
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            _ => Err(param_err!("unknown aggregation {s:?} (max|mean)")),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Mean => "mean",
        })
    }
}

/// One network input cut from a video.
#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub modality: Modality,
    /// `[3,H,W]` for rgb, `[2L,H,W]` for flow, `[C,H,W]` otherwise.
    pub payload: Tensor<f32>,
    pub frame: usize,
    pub flipped: bool,
}

/// How snippets are cut from a video.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetSpec {
    pub modality: Modality,
    /// Segment count `K`.
    pub segments: usize,
    pub per_segment: usize,
    /// Flow stack depth `L`.
    pub flow_depth: usize,
    /// Random augmentation applied to each snippet payload.
    pub augment: Vec<Augment>,
    /// Adds a mirrored counterpart of every snippet.
    pub flip_counterparts: bool,
}

impl SnippetSpec {
    pub fn new(modality: Modality) -> Self {
        Self { modality, segments: 5, per_segment: 1, flow_depth: 5, augment: Vec::new(), flip_counterparts: false }
    }
}

/// Segment `j` of `K` over `t` frames: `[floor(j t / K), floor((j + 1) t / K))`.
pub fn segment_bounds(t: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(param_err!("segment count must be at least 1"));
    }
    if t < k {
        return Err(param_err!("{t} frames cannot fill {k} segments"));
    }
    Ok((0..k).map(|j| (j * t / k, (j + 1) * t / k)).collect())
}

/// `n` uniform frame indices per segment, segment by segment.
pub fn sample_indices<R: Rng>(t: usize, k: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(k * n);
    for (lo, hi) in segment_bounds(t, k)? {
        for _ in 0..n {
            idx.push(rng.gen_range(lo..hi));
        }
    }
    Ok(idx)
}

/// Payload of one snippet anchored at `frame`.
pub fn snippet_payload(sample: &VideoSample, spec: &SnippetSpec, frame: usize) -> Result<Tensor<f32>> {
    let seq = sample.get(spec.modality)?;
    match spec.modality {
        Modality::Flow => stack_flow(seq, spec.flow_depth, frame),
        _ => seq
            .frames
            .get(frame)
            .cloned()
            .ok_or_else(|| param_err!("frame {frame} outside [0, {})", seq.len())),
    }
}

/// Draws snippets per `spec`, followed by their mirrored counterparts when
/// requested.
pub fn sample_snippets<R: Rng>(sample: &VideoSample, spec: &SnippetSpec, rng: &mut R) -> Result<Vec<Snippet>> {
    let t = sample.get(spec.modality)?.len();
    let frames = sample_indices(t, spec.segments, spec.per_segment, rng)?;
    let mut out = Vec::with_capacity(frames.len() * (1 + usize::from(spec.flip_counterparts)));
    for frame in frames {
        let mut payload = snippet_payload(sample, spec, frame)?;
        if !spec.augment.is_empty() {
            payload = augment_frames(&[payload], spec.modality, &spec.augment, rng)?.remove(0);
        }
        out.push(Snippet { modality: spec.modality, payload, frame, flipped: false });
    }
    if spec.flip_counterparts {
        for i in 0..out.len() {
            let s = &out[i];
            let payload = hflip(&s.payload, s.modality)?;
            out.push(Snippet { payload, flipped: true, ..s.clone() });
        }
    }
    Ok(out)
}

/// `l x T` matrix whose column `j` is the class distribution of snippet `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub values: Tensor<f32>,
}

impl ScoreMatrix {
    /// Stacks `T` probability vectors of length `l` as columns.
    pub fn from_columns(columns: &[Tensor<f32>]) -> Result<Self> {
        let first = columns.first().ok_or_else(|| param_err!("score matrix needs at least one column"))?;
        let l = first.len();
        let t = columns.len();
        let mut values = vec![0.0f32; l * t];
        for (j, c) in columns.iter().enumerate() {
            if c.len() != l {
                return Err(shape_err!("column {j} has {} classes, expected {l}", c.len()));
            }
            let sum: f64 = c.data().iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-4 || c.data().iter().any(|&v| v < 0.0) {
                return Err(param_err!("column {j} is not a probability vector (sum {sum})"));
            }
            for (i, &v) in c.data().iter().enumerate() {
                values[i * t + j] = v;
            }
        }
        Ok(Self { values: Tensor::from_vec(&[l, t], values)? })
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn snippets(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.classes()).map(|i| self.values.get(&[i, j])).collect()
    }
}

/// Per-row maximum or arithmetic mean over the snippet columns.
pub fn aggregate(m: &ScoreMatrix, h: Aggregation) -> Tensor<f32> {
    let t = m.snippets();
    let rows = m.values.data().chunks_exact(t);
    let v = match h {
        Aggregation::Max => rows.map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max)).collect(),
        Aggregation::Mean => rows.map(|r| (r.iter().map(|&x| x as f64).sum::<f64>() / t as f64) as f32).collect(),
    };
    Tensor::from_vec(&[m.classes()], v).expect("one score per class")
}

/// Index of the highest score, lowest index on ties.
pub fn predict_label(scores: &Tensor<f32>) -> usize {
    argmax(scores.data())
}

/// Eval-mode class distribution of every snippet.
pub fn score_snippets(net: &Network<f32>, snippets: &[Snippet]) -> Result<ScoreMatrix> {
    if snippets.is_empty() {
        return Err(param_err!("no snippets to score"));
    }
    let inputs: Vec<Tensor<f32>> = snippets.iter().map(|s| s.payload.clone()).collect();
    let logits = net.infer(&inputs)?;
    let probs: Vec<Tensor<f32>> = logits
        .iter()
        .map(|z| Tensor::from_vec(&[z.len()], softmax_slice(z.data())))
        .collect::<Result<_>>()?;
    ScoreMatrix::from_columns(&probs)
}

/// Samples, scores and aggregates one video.
pub fn score_video<R: Rng>(
    net: &Network<f32>,
    sample: &VideoSample,
    spec: &SnippetSpec,
    h: Aggregation,
    rng: &mut R,
) -> Result<(ScoreMatrix, Tensor<f32>)> {
    let m = score_snippets(net, &sample_snippets(sample, spec, rng)?)?;
    let v = aggregate(&m, h);
    Ok((m, v))
}

/// Forward and backward over a batch of videos given as snippet groups:
/// the logits of a video's snippets are averaged, scored with softmax
/// cross-entropy, and each snippet receives `1/K` of the video gradient.
/// Gradients are averaged over videos. Returns `(loss sum, correct count)`.
fn consensus_forward_backward(net: &mut Network<f32>, videos: &[(Vec<Snippet>, usize)]) -> Result<(f64, usize)> {
    let mut inputs = Vec::new();
    let mut spans = Vec::with_capacity(videos.len());
    for (snips, _) in videos {
        if snips.is_empty() {
            return Err(param_err!("video without snippets"));
        }
        spans.push((inputs.len(), snips.len()));
        inputs.extend(snips.iter().map(|s| s.payload.clone()));
    }
    let logits = net.forward_batch(&inputs, Mode::Train)?;
    let mut upstream = Vec::with_capacity(inputs.len());
    let (mut loss_sum, mut correct) = (0.0, 0);
    for (&(start, k), (_, label)) in spans.iter().zip(videos) {
        let l = logits[start].len();
        let mut mean = vec![0.0f32; l];
        for z in &logits[start..start + k] {
            for (m, &v) in mean.iter_mut().zip(z.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f32);
        let mean = Tensor::from_vec(&[l], mean)?;
        let (loss, mut g) = cross_entropy_loss(&mean, *label)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        loss_sum += loss as f64;
        correct += usize::from(argmax(mean.data()) == *label);
        g.scale(1.0 / (k * videos.len()) as f32);
        upstream.extend(std::iter::repeat_n(g, k));
    }
    net.zero_grad();
    net.backward_batch(&upstream)?;
    Ok((loss_sum, correct))
}

/// One optimizer step on a single video. Returns its loss.
pub fn consensus_train_step<R: Rng>(
    net: &mut Network<f32>,
    sample: &VideoSample,
    spec: &SnippetSpec,
    rng: &mut R,
    opt: &mut Sgd<f32>,
) -> Result<f64> {
    let snippets = sample_snippets(sample, spec, rng)?;
    let (loss, _) = consensus_forward_backward(net, &[(snippets, sample.label)])?;
    apply_update(net, opt)?;
    Ok(loss)
}

/// Computes the consensus gradients of one snippet group without stepping;
/// returns the loss.
pub fn consensus_gradients(net: &mut Network<f32>, snippets: Vec<Snippet>, label: usize) -> Result<f64> {
    Ok(consensus_forward_backward(net, &[(snippets, label)])?.0)
}

/// One shuffled pass over `samples` in mini-batches of videos.
pub fn consensus_train_epoch<R: Rng>(
    net: &mut Network<f32>,
    samples: &[VideoSample],
    spec: &SnippetSpec,
    opt: &mut Sgd<f32>,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(param_err!("training set is empty"));
    }
    if batch_size == 0 {
        return Err(param_err!("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let lr = opt.learning_rate();
    let (mut loss_sum, mut correct) = (0.0, 0);
    for (b, chunk) in crate::optim::batches(&order, batch_size).into_iter().enumerate() {
        let videos = chunk
            .iter()
            .map(|&i| Ok((sample_snippets(&samples[i], spec, rng)?, samples[i].label)))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| with_batch(e, b))?;
        let (l, c) = consensus_forward_backward(net, &videos).map_err(|e| with_batch(e, b))?;
        apply_update(net, opt).map_err(|e| with_batch(e, b))?;
        loss_sum += l;
        correct += c;
    }
    opt.epoch += 1;
    Ok(EpochStats {
        epoch: opt.epoch,
        mean_loss: loss_sum / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
        lr,
    })
}
