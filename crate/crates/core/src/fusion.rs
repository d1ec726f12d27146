//! Late fusion of per-stream class scores and the end-to-end test pipeline:
//! consensus-voted 2D streams and volume-scored 3D streams are fused within
//! their component, then across components.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::consensus::{score_video, Aggregation, SnippetSpec};
use crate::error::{format_err, param_err, shape_err, Error, Result};
use crate::layers::{softmax_slice, Network};
use crate::tensor::{argmax, Tensor};
use crate::video::{build_volume, resample_to, Modality, VideoSample, VOLUME_FRAMES, VOLUME_LEAD};

/// Scores of one stream over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamScore {
    pub stream: String,
    pub ids: Vec<String>,
    pub scores: Vec<Tensor<f32>>,
    /// Set once a softmax has been applied.
    pub normalized: bool,
}

impl StreamScore {
    pub fn new(stream: impl Into<String>, ids: Vec<String>, scores: Vec<Tensor<f32>>, normalized: bool) -> Result<Self> {
        let s = Self { stream: stream.into(), ids, scores, normalized };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.scores.len() {
            return Err(shape_err!("{}: {} ids for {} score vectors", self.stream, self.ids.len(), self.scores.len()));
        }
        let l = self.classes();
        for (id, s) in self.ids.iter().zip(&self.scores) {
            if s.len() != l || l == 0 {
                return Err(shape_err!("{}: sample {id} has {} scores, expected {l}", self.stream, s.len()));
            }
            if self.normalized {
                let sum: f64 = s.data().iter().map(|&v| v as f64).sum();
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(param_err!("{}: sample {id} is flagged normalized but sums to {sum}", self.stream));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.scores.first().map_or(0, Tensor::len)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<f32>> {
        self.ids.iter().position(|i| i == id).map(|k| &self.scores[k])
    }

    /// Argmax label of every sample.
    pub fn predictions(&self) -> Vec<(String, usize)> {
        self.ids.iter().cloned().zip(self.scores.iter().map(|s| argmax(s.data()))).collect()
    }

    /// Writes `id,c0,...,c{l-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        write!(out, "id")?;
        for c in 0..self.classes() {
            write!(out, ",c{c}")?;
        }
        writeln!(out)?;
        for (id, s) in self.ids.iter().zip(&self.scores) {
            write!(out, "{id}")?;
            for v in s.data() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a score CSV. The normalized flag is set when every row sums to 1.
    pub fn read_csv(path: &Path, stream: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let name = path.display().to_string();
        let mut reader = csv::Reader::from_path(path).map_err(|e| format_err!("{name}: {e}"))?;
        let header = reader.headers().map_err(|e| format_err!("{name}: {e}"))?.clone();
        if header.get(0) != Some("id") || header.len() < 2 {
            return Err(format_err!("{name}: expected header id,c0,..."));
        }
        let (mut ids, mut scores) = (Vec::new(), Vec::new());
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| format_err!("{name}: {e}"))?;
            let v = rec
                .iter()
                .skip(1)
                .map(|x| x.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format_err!("{name}: row {}: {e}", row + 1))?;
            ids.push(rec[0].to_string());
            scores.push(Tensor::from_vec(&[v.len()], v)?);
        }
        let normalized = !scores.is_empty()
            && scores.iter().all(|s| (s.data().iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-4);
        Self::new(stream, ids, scores, normalized).map_err(|e| format_err!("{name}: {e}"))
    }
}

/// Writes `id,label` rows.
pub fn write_predictions_csv(path: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut out = String::from("id,label\n");
    for (id, label) in rows {
        out.push_str(&format!("{id},{label}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<(String, usize)>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| format_err!("{name}: {e}"))?;
    reader
        .deserialize::<(String, usize)>()
        .map(|r| r.map_err(|e| format_err!("{name}: {e}")))
        .collect()
}

/// Softmax over every vector when `apply` is set. Scores already flagged as
/// normalized are rejected rather than squashed twice.
pub fn normalize_scores(s: &StreamScore, apply: bool) -> Result<StreamScore> {
    if !apply {
        return Ok(s.clone());
    }
    if s.normalized {
        return Err(Error::State(format!("{}: softmax already applied", s.stream)));
    }
    let scores = s
        .scores
        .iter()
        .map(|v| Tensor::from_vec(v.shape(), softmax_slice(v.data())))
        .collect::<Result<_>>()?;
    Ok(StreamScore { stream: s.stream.clone(), ids: s.ids.clone(), scores, normalized: true })
}

/// Ordered streams with one non-negative weight each.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSpec {
    pub streams: Vec<String>,
    pub weights: Vec<f64>,
    /// Softmax-normalise not yet normalised inputs before fusing.
    pub normalize: bool,
}

impl FusionSpec {
    pub fn new(streams: Vec<String>, weights: Vec<f64>, normalize: bool) -> Result<Self> {
        let s = Self { streams, weights, normalize };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams.len() != self.weights.len() {
            return Err(param_err!("{} streams but {} weights", self.streams.len(), self.weights.len()));
        }
        check_weights(&self.weights)
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(param_err!("fusion weights must be finite and non-negative: {weights:?}"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(param_err!("fusion weights are all zero"));
    }
    Ok(())
}

/// `sum_i w_i s_i / sum_i w_i`.
pub fn weighted_mean(vectors: &[&Tensor<f32>], weights: &[f64]) -> Result<Tensor<f32>> {
    let l = vectors.first().ok_or_else(|| param_err!("nothing to fuse"))?.len();
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0f64; l];
    for (v, &w) in vectors.iter().zip(weights) {
        if v.len() != l {
            return Err(shape_err!("fusing {} scores with {l}", v.len()));
        }
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += w * x as f64;
        }
    }
    Tensor::from_vec(&[l], acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// Weighted mean of the streams named in `spec`, sample by sample in the
/// order of the first stream.
pub fn fuse_scores(streams: &[StreamScore], spec: &FusionSpec) -> Result<StreamScore> {
    spec.validate()?;
    let mut picked = Vec::with_capacity(spec.streams.len());
    for tag in &spec.streams {
        let s = streams
            .iter()
            .find(|s| &s.stream == tag)
            .ok_or_else(|| Error::Config(format!("no scores for stream {tag}")))?;
        picked.push(if spec.normalize && !s.normalized { normalize_scores(s, true)? } else { s.clone() });
    }
    let lookup: Vec<HashMap<&str, &Tensor<f32>>> = picked
        .iter()
        .map(|s| s.ids.iter().map(String::as_str).zip(&s.scores).collect())
        .collect();
    let first = &picked[0];
    for (s, map) in picked.iter().zip(&lookup).skip(1) {
        if s.len() != first.len() {
            if let Some(id) = s.ids.iter().find(|id| !lookup[0].contains_key(id.as_str())) {
                return Err(Error::Alignment(format!("sample {id} of {} is missing from {}", s.stream, first.stream)));
            }
        }
        if let Some(id) = first.ids.iter().find(|id| !map.contains_key(id.as_str())) {
            return Err(Error::Alignment(format!("sample {id} is missing from stream {}", s.stream)));
        }
    }
    let scores = first
        .ids
        .iter()
        .map(|id| {
            let vs: Vec<&Tensor<f32>> = lookup.iter().map(|m| m[id.as_str()]).collect();
            weighted_mean(&vs, &spec.weights).map_err(|e| match e {
                Error::Shape(m) => Error::Alignment(format!("sample {id}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let normalized = picked.iter().all(|s| s.normalized);
    Ok(StreamScore { stream: "fused".into(), ids: first.ids.clone(), scores, normalized })
}

/// A trained stream and how it reads a video.
#[derive(Clone, Debug)]
pub enum StreamModel {
    /// 2D network voted over sampled snippets; scores are probabilities.
    Consensus { net: Network<f32>, spec: SnippetSpec, agg: Aggregation },
    /// 3D network over the volume centred at `center` of the 32-frame
    /// resampled sequence; scores are raw classifier outputs.
    Volume { net: Network<f32>, modality: Modality, center: usize },
}

impl StreamModel {
    pub fn modality(&self) -> Modality {
        match self {
            Self::Consensus { spec, .. } => spec.modality,
            Self::Volume { modality, .. } => *modality,
        }
    }

    pub fn net(&self) -> &Network<f32> {
        match self {
            Self::Consensus { net, .. } | Self::Volume { net, .. } => net,
        }
    }

    /// Video-level score and whether it is already a probability vector.
    pub fn score(&self, sample: &VideoSample, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, bool)> {
        match self {
            Self::Consensus { net, spec, agg } => {
                let (_, v) = score_video(net, sample, spec, *agg, rng)?;
                Ok((v, *agg == Aggregation::Mean))
            }
            Self::Volume { net, modality, center } => {
                let x = sample_volume(sample, *modality, *center)?;
                Ok((net.infer(std::slice::from_ref(&x))?.remove(0), false))
            }
        }
    }
}

/// The volume a 3D stream consumes: the sequence resampled to 32 frames and
/// stacked around `center`.
pub fn sample_volume(sample: &VideoSample, modality: Modality, center: usize) -> Result<Tensor<f32>> {
    let seq = sample.get(modality)?;
    let seq = if seq.len() == VOLUME_FRAMES { seq.clone() } else { resample_to(seq, VOLUME_FRAMES)? };
    build_volume(&seq, center)
}

/// Default volume centre: frames `0..32` with no clamping.
pub const DEFAULT_CENTER: usize = VOLUME_LEAD;

/// Per-sample generator keyed by a seed and the sample id, so scores do not
/// depend on evaluation order.
pub fn sample_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

#[derive(Clone, Debug)]
pub struct WeightedStream {
    pub model: StreamModel,
    pub weight: f64,
}

/// Two fusion levels: within the consensus (2D) and volume (3D) components,
/// then across the components.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub consensus: Vec<WeightedStream>,
    pub volume: Vec<WeightedStream>,
    /// Weights of the consensus and volume components.
    pub component_weights: [f64; 2],
    /// Softmax on raw stream scores before fusing.
    pub normalize: bool,
    pub seed: u64,
}

impl Pipeline {
    pub fn new(consensus: Vec<WeightedStream>, volume: Vec<WeightedStream>) -> Self {
        Self { consensus, volume, component_weights: [1.0, 1.0], normalize: false, seed: 0 }
    }

    pub fn streams(&self) -> impl Iterator<Item = &WeightedStream> {
        self.consensus.iter().chain(&self.volume)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub label: usize,
    pub fused: Tensor<f32>,
    /// `(modality, score)` of every stream, consensus streams first.
    pub streams: Vec<(Modality, Tensor<f32>)>,
    /// Fused score of each non-empty component, consensus first.
    pub components: Vec<Tensor<f32>>,
}

fn fuse_component(
    streams: &[WeightedStream],
    sample: &VideoSample,
    p: &Pipeline,
    out: &mut Vec<(Modality, Tensor<f32>)>,
) -> Result<Option<Tensor<f32>>> {
    if streams.is_empty() {
        return Ok(None);
    }
    let mut vs = Vec::with_capacity(streams.len());
    for s in streams {
        let m = s.model.modality();
        sample
            .modalities
            .get(&m)
            .ok_or_else(|| Error::Config(format!("sample {} lacks the {m} modality", sample.id)))?;
        let mut rng = sample_rng(p.seed, &sample.id);
        let (mut v, normalized) = s.model.score(sample, &mut rng)?;
        if p.normalize && !normalized {
            v = Tensor::from_vec(v.shape(), softmax_slice(v.data()))?;
        }
        out.push((m, v.clone()));
        vs.push(v);
    }
    let weights: Vec<f64> = streams.iter().map(|s| s.weight).collect();
    check_weights(&weights)?;
    Ok(Some(weighted_mean(&vs.iter().collect::<Vec<_>>(), &weights)?))
}

/// Scores a video with every stream, fuses within and across components and
/// returns the argmax label with all intermediate vectors.
pub fn pipeline_predict(sample: &VideoSample, p: &Pipeline) -> Result<PipelineOutput> {
    let mut streams = Vec::new();
    let a = fuse_component(&p.consensus, sample, p, &mut streams)?;
    let b = fuse_component(&p.volume, sample, p, &mut streams)?;
    let (components, weights): (Vec<Tensor<f32>>, Vec<f64>) =
        [a, b].into_iter().zip(p.component_weights).filter_map(|(c, w)| c.map(|c| (c, w))).unzip();
    if components.is_empty() {
        return Err(Error::Config("pipeline has no streams".into()));
    }
    check_weights(&weights)?;
    let fused = weighted_mean(&components.iter().collect::<Vec<_>>(), &weights)?;
    Ok(PipelineOutput { label: argmax(fused.data()), fused, streams, components })
}

/// [`pipeline_predict`] over many samples, in input order.
pub fn pipeline_predict_all(samples: &[VideoSample], p: &Pipeline) -> Result<Vec<PipelineOutput>> {
    samples.par_iter().map(|s| pipeline_predict(s, p)).collect()
}

/// Scores every sample with one stream, in input order.
pub fn score_stream(model: &StreamModel, samples: &[VideoSample], seed: u64) -> Result<StreamScore> {
    let scored = samples
        .par_iter()
        .map(|s| model.score(s, &mut sample_rng(seed, &s.id)))
        .collect::<Result<Vec<_>>>()?;
    let normalized = scored.iter().all(|(_, n)| *n);
    let ids = samples.iter().map(|s| s.id.clone()).collect();
    StreamScore::new(model.modality().as_str(), ids, scored.into_iter().map(|(v, _)| v).collect(), normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{NetworkConfig, StreamOptions};
    use crate::video::FrameSequence;
    use proptest::prelude::*;

    fn v(x: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[x.len()], x.to_vec()).unwrap()
    }

    fn stream(tag: &str, rows: &[(&str, &[f32])]) -> StreamScore {
        StreamScore::new(
            tag,
            rows.iter().map(|r| r.0.to_string()).collect(),
            rows.iter().map(|r| v(r.1)).collect(),
            false,
        )
        .unwrap()
    }

    fn spec(tags: &[&str], w: &[f64]) -> FusionSpec {
        FusionSpec::new(tags.iter().map(|t| t.to_string()).collect(), w.to_vec(), false).unwrap()
    }

    #[test]
    fn normalization_examples() {
        let s = stream("depth", &[("a", &[0.0, 3f32.ln()])]);
        assert_eq!(normalize_scores(&s, false).unwrap(), s);
        let n = normalize_scores(&s, true).unwrap();
        assert!((n.scores[0].data()[0] - 0.25).abs() < 1e-6 && (n.scores[0].data()[1] - 0.75).abs() < 1e-6);
        assert!(n.normalized);
        assert!(matches!(normalize_scores(&n, true), Err(Error::State(_))));
    }

    #[test]
    fn fusion_examples() {
        let d = stream("depth", &[("a", &[0.6, 0.4])]);
        let s = stream("saliency", &[("a", &[0.2, 0.8])]);
        let f = fuse_scores(&[d.clone(), s.clone()], &spec(&["depth", "saliency"], &[2.0, 1.0])).unwrap();
        let x = f.scores[0].data();
        assert!((x[0] - 0.4667).abs() < 1e-4 && (x[1] - 0.5333).abs() < 1e-4);
        let only = fuse_scores(&[d.clone(), s], &spec(&["depth", "saliency"], &[1.0, 0.0])).unwrap();
        assert_eq!(only.scores, d.scores);
        let same = fuse_scores(&[d.clone(), StreamScore { stream: "rgb".into(), ..d.clone() }], &spec(&["depth", "rgb"], &[3.0, 5.0])).unwrap();
        assert_eq!(same.scores, d.scores);
    }

    #[test]
    fn missing_samples_name_the_id() {
        let a = stream("rgb", &[("x", &[0.5, 0.5]), ("y", &[0.1, 0.9])]);
        let b = stream("flow", &[("x", &[0.5, 0.5])]);
        let err = fuse_scores(&[a.clone(), b.clone()], &spec(&["rgb", "flow"], &[1.0, 1.0])).unwrap_err();
        assert!(matches!(&err, Error::Alignment(m) if m.contains('y')), "{err}");
        let err = fuse_scores(&[a, b], &spec(&["flow", "rgb"], &[1.0, 1.0])).unwrap_err();
        assert!(matches!(&err, Error::Alignment(m) if m.contains('y')), "{err}");
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(FusionSpec::new(vec!["a".into()], vec![0.0], false).is_err());
        assert!(FusionSpec::new(vec!["a".into()], vec![1.0, 2.0], false).is_err());
        assert!(FusionSpec::new(vec!["a".into()], vec![-1.0], false).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = StreamScore::new("rgb", vec!["a".into(), "b".into()], vec![v(&[0.1, 0.9]), v(&[0.7, 0.3])], true).unwrap();
        let p = dir.path().join("s.csv");
        s.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("id,c0,c1\na,0.1,0.9\n"));
        assert_eq!(StreamScore::read_csv(&p, "rgb").unwrap(), s);
        let q = dir.path().join("p.csv");
        write_predictions_csv(&q, &s.predictions()).unwrap();
        assert_eq!(read_predictions_csv(&q).unwrap(), vec![("a".to_string(), 1), ("b".to_string(), 0)]);
        assert!(matches!(StreamScore::read_csv(&dir.path().join("none.csv"), "x"), Err(Error::NotFound(_))));
    }

    fn tiny_sample() -> VideoSample {
        let seq = |m: Modality, c: usize| {
            let frames = (0..12)
                .map(|t| Tensor::from_vec(&[c, 4, 4], (0..c * 16).map(|i| ((i + t) % 5) as f32 / 5.0).collect()).unwrap())
                .collect();
            FrameSequence::new(m, frames).unwrap()
        };
        VideoSample::new("s", 0, vec![seq(Modality::Rgb, 3), seq(Modality::Depth, 1)]).unwrap()
    }

    #[test]
    fn single_stream_pipeline_equals_the_stream() {
        let net = Network::new(NetworkConfig::stream_2d([3, 4, 4], &[2], 3, StreamOptions::default()).unwrap(), 1).unwrap();
        let model = StreamModel::Consensus { net, spec: SnippetSpec::new(Modality::Rgb), agg: Aggregation::Mean };
        let sample = tiny_sample();
        let p = Pipeline::new(vec![WeightedStream { model: model.clone(), weight: 1.0 }], vec![]);
        let out = pipeline_predict(&sample, &p).unwrap();
        let (alone, _) = model.score(&sample, &mut sample_rng(0, "s")).unwrap();
        assert_eq!(out.fused, alone);
        assert_eq!(out.label, argmax(alone.data()));

        let vol = Network::new(NetworkConfig::stream_3d([1, 32, 4, 4], &[2], 3, StreamOptions::default()).unwrap(), 2).unwrap();
        let depth = StreamModel::Volume { net: vol, modality: Modality::Depth, center: DEFAULT_CENTER };
        let both = Pipeline::new(
            vec![WeightedStream { model, weight: 1.0 }],
            vec![WeightedStream { model: depth.clone(), weight: 2.0 }],
        );
        let out = pipeline_predict(&sample, &both).unwrap();
        assert_eq!(out.streams.len(), 2);
        assert_eq!(out.components.len(), 2);
        let sal_net = depth.net().clone();
        let sal = StreamModel::Volume { net: sal_net, modality: Modality::Saliency, center: 0 };
        let sal = Pipeline::new(vec![], vec![WeightedStream { model: sal, weight: 1.0 }]);
        assert!(matches!(pipeline_predict(&sample, &sal), Err(Error::Config(_))));
    }

    fn random_streams(n: usize, l: usize, seed: u64) -> Vec<StreamScore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let z: Vec<f32> = (0..l).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
                StreamScore::new(format!("s{k}"), vec!["a".into()], vec![v(&softmax_slice(&z))], true).unwrap()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn fusion_properties(n in 1usize..5, l in 2usize..6, seed in any::<u64>(), w in proptest::collection::vec(0.1f64..5.0, 5)) {
            let streams = random_streams(n, l, seed);
            let tags: Vec<String> = streams.iter().map(|s| s.stream.clone()).collect();
            let w = &w[..n];
            let f = fuse_scores(&streams, &FusionSpec::new(tags.clone(), w.to_vec(), false).unwrap()).unwrap();
            let doubled: Vec<f64> = w.iter().map(|x| x * 2.0).collect();
            let g = fuse_scores(&streams, &FusionSpec::new(tags.clone(), doubled, false).unwrap()).unwrap();
            for (a, b) in f.scores[0].data().iter().zip(g.scores[0].data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            prop_assert_eq!(argmax(f.scores[0].data()), argmax(g.scores[0].data()));
            for c in 0..l {
                let col: Vec<f32> = streams.iter().map(|s| s.scores[0].data()[c]).collect();
                let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(f.scores[0].data()[c] >= lo - 1e-6 && f.scores[0].data()[c] <= hi + 1e-6);
            }
            let rev_tags: Vec<String> = tags.iter().rev().cloned().collect();
            let rev_w: Vec<f64> = w.iter().rev().copied().collect();
            let r = fuse_scores(&streams, &FusionSpec::new(rev_tags, rev_w, false).unwrap()).unwrap();
            for (a, b) in f.scores[0].data().iter().zip(r.scores[0].data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            let eq = fuse_scores(&streams, &FusionSpec::new(tags, vec![1.0; n], false).unwrap()).unwrap();
            prop_assert!((eq.scores[0].sum() - 1.0).abs() <= 1e-6);
        }
    }
}
