//! On-disk layout: `<root>/<split>/manifest.csv` lists `id,label`;
//! `<root>/<split>/<id>/<modality>/<index:05>.<ext>` holds the frames and
//! `<root>/dataset.cfg` records the class count.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{flo, netpbm, FrameSequence, Modality, VideoSample};
use crate::config::KvConfig;
use crate::error::{format_err, param_err, Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DATASET_CONFIG: &str = "dataset.cfg";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<(String, usize)>,
    pub classes: usize,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: &str, entries: Vec<(String, usize)>, classes: usize) -> Result<Self> {
        let m = Self { root: root.into(), split: split.to_string(), entries, classes };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (id, label) in &self.entries {
            if !seen.insert(id.as_str()) {
                return Err(format_err!("duplicate sample id {id:?}"));
            }
            if *label >= self.classes {
                return Err(format_err!("sample {id}: label {label} outside [0, {})", self.classes));
            }
        }
        Ok(())
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.split_dir().join(id)
    }

    pub fn label_of(&self, id: &str) -> Result<usize> {
        self.entries
            .iter()
            .find(|(i, _)| i == id)
            .map(|&(_, l)| l)
            .ok_or_else(|| Error::NotFound(self.sample_dir(id)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads the split's manifest. The class count comes from `dataset.cfg`
    /// when present, else from the largest label.
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let path = root.join(split).join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::NotFound(path));
        }
        let mut reader = csv::Reader::from_path(&path).map_err(|e| format_err!("{}: {e}", path.display()))?;
        let mut entries = Vec::new();
        for rec in reader.deserialize::<(String, usize)>() {
            entries.push(rec.map_err(|e| format_err!("{}: {e}", path.display()))?);
        }
        let cfg_path = root.join(DATASET_CONFIG);
        let classes = if cfg_path.exists() {
            KvConfig::load(&cfg_path)?.get::<usize>("classes")?
        } else {
            None
        };
        let classes = classes.unwrap_or_else(|| entries.iter().map(|e| e.1 + 1).max().unwrap_or(0));
        Self::new(root, split, entries, classes)
    }

    /// Writes the manifest and the root class-count file.
    pub fn save(&self) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(self.split_dir())?;
        let path = self.split_dir().join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| format_err!("{}: {e}", path.display()))?;
        let io = |e: csv::Error| format_err!("{}: {e}", path.display());
        w.write_record(["id", "label"]).map_err(io)?;
        for (id, label) in &self.entries {
            w.write_record([id.as_str(), &label.to_string()]).map_err(io)?;
        }
        w.flush()?;
        let mut cfg = KvConfig::default();
        cfg.set("classes", self.classes);
        cfg.save(&self.root.join(DATASET_CONFIG))
    }
}

fn frame_path(dir: &Path, m: Modality, index: usize) -> PathBuf {
    dir.join(m.as_str()).join(format!("{index:05}.{}", m.extension()))
}

fn read_frame(path: &Path, m: Modality) -> Result<Tensor<f32>> {
    match m {
        Modality::Flow => flo::read_frame(path),
        _ => netpbm::read_frame(path),
    }
}

fn modality_frames(dir: &Path, m: Modality) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == m.extension()))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads the listed modalities of one sample; `None` loads every modality
/// directory present.
pub fn load_sample_modalities(manifest: &DatasetManifest, id: &str, only: Option<&[Modality]>) -> Result<VideoSample> {
    let label = manifest.label_of(id)?;
    let dir = manifest.sample_dir(id);
    if !dir.is_dir() {
        return Err(Error::NotFound(dir));
    }
    let mut sequences = Vec::new();
    for m in Modality::ALL {
        let mdir = dir.join(m.as_str());
        let wanted = only.is_none_or(|o| o.contains(&m));
        if !wanted {
            continue;
        }
        if !mdir.is_dir() {
            if only.is_some() {
                return Err(Error::NotFound(mdir));
            }
            continue;
        }
        let files = modality_frames(&mdir, m)?;
        if files.is_empty() {
            return Err(format_err!("{}: no .{} frames", mdir.display(), m.extension()));
        }
        let frames = files
            .par_iter()
            .map(|p| read_frame(p, m))
            .collect::<Result<Vec<_>>>()?;
        sequences.push(FrameSequence::new(m, frames).map_err(|e| format_err!("{}: {e}", mdir.display()))?);
    }
    if sequences.is_empty() {
        return Err(format_err!("{}: no modality directories", dir.display()));
    }
    VideoSample::new(id, label, sequences)
}

pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<VideoSample> {
    load_sample_modalities(manifest, id, None)
}

/// Writes every modality of `sample` below `split_dir/<id>/`.
pub fn save_sample(split_dir: &Path, sample: &VideoSample) -> Result<()> {
    if sample.id.is_empty() || sample.id.contains(['/', '\\']) {
        return Err(param_err!("sample id {:?} is not a directory name", sample.id));
    }
    let dir = split_dir.join(&sample.id);
    for (m, seq) in &sample.modalities {
        fs::create_dir_all(dir.join(m.as_str()))?;
        for (i, f) in seq.frames.iter().enumerate() {
            let p = frame_path(&dir, *m, i);
            match m {
                Modality::Flow => flo::write_frame(&p, f)?,
                _ => netpbm::write_frame(&p, f)?,
            }
        }
    }
    Ok(())
}
