//! Metrics, confusion matrices, before/after fusion change analysis,
//! checkpoints, stream workflows and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod workflow;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{param_err, Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// `(id, true label, predicted label)` triples over `classes` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub classes: usize,
    pub entries: Vec<(String, usize, usize)>,
}

impl PredictionSet {
    pub fn new(classes: usize, entries: Vec<(String, usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (id, t, p) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(param_err!("duplicate prediction id {id:?}"));
            }
            if *t >= classes || *p >= classes {
                return Err(param_err!("sample {id}: labels ({t}, {p}) outside [0, {classes})"));
            }
        }
        Ok(Self { classes, entries })
    }

    /// Joins predictions with ground truth by id. Every predicted id must have
    /// a truth row; the class count is the larger of `classes` and the
    /// labels seen.
    pub fn join(predicted: &[(String, usize)], truth: &[(String, usize)], classes: Option<usize>) -> Result<Self> {
        let truth_map: HashMap<&str, usize> = truth.iter().map(|(i, l)| (i.as_str(), *l)).collect();
        let entries = predicted
            .iter()
            .map(|(id, p)| {
                truth_map
                    .get(id.as_str())
                    .map(|&t| (id.clone(), t, *p))
                    .ok_or_else(|| Error::Alignment(format!("sample {id} has no ground truth")))
            })
            .collect::<Result<Vec<_>>>()?;
        let seen = entries.iter().map(|e| e.1.max(e.2) + 1).max().unwrap_or(0);
        Self::new(classes.unwrap_or(0).max(seen), entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Fraction of correct predictions.
pub fn accuracy(p: &PredictionSet) -> Result<f64> {
    if p.is_empty() {
        return Err(param_err!("accuracy of an empty prediction set"));
    }
    Ok(p.entries.iter().filter(|e| e.1 == e.2).count() as f64 / p.len() as f64)
}

/// Counts with rows indexed by the true class and columns by the prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
            })
            .collect()
    }

    /// `true,p0,...,p{l-1}` with one row per true class.
    pub fn to_csv(&self, normalized: bool) -> String {
        let mut out = String::from("true");
        for c in 0..self.classes() {
            write!(out, ",p{c}").unwrap();
        }
        out.push('\n');
        let rows = self.row_normalized();
        for (t, row) in self.counts.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for (c, &n) in row.iter().enumerate() {
                if normalized {
                    write!(out, ",{}", rows[t][c]).unwrap();
                } else {
                    write!(out, ",{n}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, normalized: bool) -> Result<()> {
        std::fs::write(path, self.to_csv(normalized))?;
        Ok(())
    }
}

pub fn confusion(p: &PredictionSet) -> Result<ConfusionMatrix> {
    if p.is_empty() {
        return Err(param_err!("confusion matrix of an empty prediction set"));
    }
    let mut counts = vec![vec![0u64; p.classes]; p.classes];
    for (_, t, pred) in &p.entries {
        counts[*t][*pred] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Per true class: `(correct, error)` where `correct` counts samples the base
/// got wrong and the fused set got right, and `error` the reverse.
pub fn change_analysis(base: &PredictionSet, fused: &PredictionSet) -> Result<Vec<(usize, usize)>> {
    if base.len() != fused.len() {
        return Err(Error::Alignment(format!("{} base predictions vs {} fused", base.len(), fused.len())));
    }
    let lookup: HashMap<&str, (usize, usize)> = fused.entries.iter().map(|(i, t, p)| (i.as_str(), (*t, *p))).collect();
    let mut out = vec![(0, 0); base.classes.max(fused.classes)];
    for (id, t, bp) in &base.entries {
        let &(ft, fp) = lookup
            .get(id.as_str())
            .ok_or_else(|| Error::Alignment(format!("sample {id} is missing from the fused predictions")))?;
        if ft != *t {
            return Err(Error::Alignment(format!("sample {id}: true label {t} vs {ft}")));
        }
        match (bp == t, fp == *t) {
            (false, true) => out[*t].0 += 1,
            (true, false) => out[*t].1 += 1,
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rows: &[(usize, usize)], classes: usize) -> PredictionSet {
        PredictionSet::new(classes, rows.iter().enumerate().map(|(i, &(t, p))| (format!("s{i}"), t, p)).collect())
            .unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&set(&[(0, 0), (1, 1)], 2)).unwrap(), 1.0);
        assert_eq!(accuracy(&set(&[(0, 0), (1, 0)], 2)).unwrap(), 0.5);
        assert_eq!(accuracy(&set(&[(0, 0), (1, 1), (2, 2), (2, 0)], 3)).unwrap(), 0.75);
        assert!(matches!(accuracy(&set(&[], 2)), Err(Error::Param(_))));
    }

    #[test]
    fn confusion_examples() {
        let perfect = confusion(&set(&[(0, 0), (1, 1), (2, 2), (1, 1)], 3)).unwrap();
        assert_eq!(perfect.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let zeros = confusion(&set(&[(0, 0), (1, 0), (2, 0)], 3)).unwrap();
        assert!(zeros.counts.iter().all(|r| r[1] == 0 && r[2] == 0 && r[0] == 1));
        let m = confusion(&set(&[(0, 1), (0, 0), (0, 0), (2, 1)], 3)).unwrap();
        let n = m.row_normalized();
        assert!((n[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(n[1], vec![0.0; 3]);
        assert_eq!(m.to_csv(false), "true,p0,p1,p2\n0,2,1,0\n1,0,0,0\n2,0,1,0\n");
    }

    #[test]
    fn change_analysis_examples() {
        let a = set(&[(0, 0), (0, 1), (1, 1)], 2);
        assert_eq!(change_analysis(&a, &a).unwrap(), vec![(0, 0), (0, 0)]);
        let wrong = set(&[(0, 1), (0, 1), (1, 0)], 2);
        let right = set(&[(0, 0), (0, 0), (1, 1)], 2);
        assert_eq!(change_analysis(&wrong, &right).unwrap(), vec![(2, 0), (1, 0)]);
        // right->right, wrong->wrong, wrong->right, right->wrong, all class 1
        let base = set(&[(1, 1), (1, 0), (1, 0), (1, 1)], 2);
        let fused = set(&[(1, 1), (1, 0), (1, 1), (1, 0)], 2);
        assert_eq!(change_analysis(&base, &fused).unwrap(), vec![(0, 0), (1, 1)]);
        let other = PredictionSet::new(2, vec![("zz".into(), 1, 1), ("s1".into(), 1, 0), ("s2".into(), 1, 0), ("s3".into(), 1, 0)]).unwrap();
        assert!(matches!(change_analysis(&base, &other), Err(Error::Alignment(_))));
    }

    #[test]
    fn join_aligns_by_id() {
        let truth = vec![("a".to_string(), 0), ("b".to_string(), 1)];
        let p = PredictionSet::join(&[("b".into(), 1), ("a".into(), 1)], &truth, Some(3)).unwrap();
        assert_eq!(p.classes, 3);
        assert_eq!(accuracy(&p).unwrap(), 0.5);
        assert!(matches!(PredictionSet::join(&[("c".into(), 0)], &truth, None), Err(Error::Alignment(_))));
    }

    proptest! {
        #[test]
        fn metric_identities(rows in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
                             flips in proptest::collection::vec(0usize..4, 40)) {
            let p = set(&rows, 4);
            let c = confusion(&p).unwrap();
            prop_assert_eq!(c.total() as usize, rows.len());
            prop_assert!((accuracy(&p).unwrap() - c.trace() as f64 / c.total() as f64).abs() < 1e-12);
            for (t, row) in c.counts.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<u64>() as usize, rows.iter().filter(|r| r.0 == t).count());
            }
            let other: Vec<(usize, usize)> = rows.iter().zip(&flips).map(|(&(t, _), &f)| (t, f)).collect();
            let q = set(&other, 4);
            let ab = change_analysis(&p, &q).unwrap();
            let ba = change_analysis(&q, &p).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert_eq!((x.0, x.1), (y.1, y.0));
            }
        }
    }
}
