//! Class balancing, splits, correlations, k-Means and a small 1D CNN.

mod cnn;
mod kmeans;
mod train;

pub use cnn::{gradient_check, CnnArch, CnnModel, CnnParams};
pub use kmeans::{elbow_ratio, elbow_scan, kmeans_fit, kmeans_fit_from, KMeansModel, KMEANS_MAX_ITER, KMEANS_TOLERANCE};
pub use train::{
    ablation_suite, cnn_assign, cnn_evaluate, cnn_train, AblationEntry, EpochRecord, EvalReport, Hyper, TrainReport,
};

use crate::trace::{FeatureSet, Trace};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("need at least two classes")]
    SingleClass,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("k = {k} exceeds the {n} available points")]
    KTooLarge { k: usize, n: usize },
    #[error("expected vectors of length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty training or validation split")]
    EmptySplit,
    #[error("record {0} has no ground-truth class")]
    MissingLabel(usize),
    #[error("class {0} is unknown to the model")]
    UnknownClass(u8),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Labelled feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub features: FeatureSet,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(vectors: Vec<Vec<f64>>, labels: Vec<u8>, features: FeatureSet) -> Result<Self, LearnError> {
        if vectors.len() != labels.len() {
            return Err(LearnError::ShapeMismatch {
                expected: vectors.len(),
                got: labels.len(),
            });
        }
        let width = features.len();
        if let Some(v) = vectors.iter().find(|v| v.len() != width) {
            return Err(LearnError::ShapeMismatch {
                expected: width,
                got: v.len(),
            });
        }
        Ok(Dataset {
            vectors,
            labels,
            features,
            normalization: None,
        })
    }

    /// Features of every record; all records must carry a ground-truth class.
    pub fn from_trace(trace: &Trace, features: &FeatureSet) -> Result<Self, LearnError> {
        let labels = trace_labels(trace)?;
        let vectors = trace.records.iter().map(|r| features.extract(r)).collect();
        Dataset::new(vectors, labels, features.clone())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            vectors: indices.iter().map(|&i| self.vectors[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features: self.features.clone(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        class_counts(&self.labels)
    }

    /// Returns a copy with `norm` applied to every vector.
    pub fn normalized(&self, norm: &Normalization) -> Dataset {
        Dataset {
            vectors: self.vectors.iter().map(|v| norm.apply(v)).collect(),
            labels: self.labels.clone(),
            features: self.features.clone(),
            normalization: Some(norm.clone()),
        }
    }
}

pub fn trace_labels(trace: &Trace) -> Result<Vec<u8>, LearnError> {
    trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| r.ground_truth_class.ok_or(LearnError::MissingLabel(i)))
        .collect()
}

pub fn class_counts(labels: &[u8]) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

/// Z-score statistics for the leading metadata columns; payload columns
/// pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(vectors: &[Vec<f64>], meta_len: usize) -> Normalization {
        let n = vectors.len().max(1) as f64;
        let mut mean = vec![0.0; meta_len];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; meta_len];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for ((x, m), s) in out.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
        out
    }
}

fn indices_by_class(labels: &[u8]) -> BTreeMap<u8, Vec<usize>> {
    let mut by: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    by
}

/// Indices downsampling every class to the minority count (optionally capped),
/// in ascending order.
pub fn balanced_indices<R: Rng + ?Sized>(labels: &[u8], cap: Option<usize>, rng: &mut R) -> Result<Vec<usize>, LearnError> {
    let by = indices_by_class(labels);
    if by.len() < 2 {
        return Err(LearnError::SingleClass);
    }
    let mut take = by.values().map(Vec::len).min().expect("two classes");
    if let Some(c) = cap {
        take = take.min(c);
    }
    let mut out = Vec::with_capacity(take * by.len());
    for idx in by.values() {
        out.extend(rand::seq::index::sample(rng, idx.len(), take).into_iter().map(|j| idx[j]));
    }
    out.sort_unstable();
    Ok(out)
}

pub fn balance_classes<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Result<Dataset, LearnError> {
    Ok(dataset.subset(&balanced_indices(&dataset.labels, None, rng)?))
}

/// Per-class shuffled split; each class contributes `round(n * val_fraction)`
/// validation samples (at least one when it has two or more).
pub fn stratified_split_indices<R: Rng + ?Sized>(labels: &[u8], val_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut idx in indices_by_class(labels).into_values() {
        idx.shuffle(rng);
        let mut n_val = (idx.len() as f64 * val_fraction).round() as usize;
        if idx.len() >= 2 {
            n_val = n_val.clamp(1, idx.len() - 1);
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn stratified_split<R: Rng + ?Sized>(dataset: &Dataset, val_fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
    let (t, v) = stratified_split_indices(&dataset.labels, val_fraction, rng);
    (dataset.subset(&t), dataset.subset(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub feature: String,
    pub r: f64,
    pub zero_variance: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Pearson r of every feature column against the numeric class label.
pub fn pearson_correlations(dataset: &Dataset) -> Result<Vec<Correlation>, LearnError> {
    if dataset.len() < 2 {
        return Err(LearnError::TooFewSamples {
            needed: 2,
            got: dataset.len(),
        });
    }
    let y: Vec<f64> = dataset.labels.iter().map(|&l| l as f64).collect();
    Ok(dataset
        .features
        .columns()
        .into_iter()
        .enumerate()
        .map(|(j, feature)| {
            let x: Vec<f64> = dataset.vectors.iter().map(|v| v[j]).collect();
            let r = pearson(&x, &y);
            Correlation {
                feature,
                r: r.unwrap_or(0.0),
                zero_variance: r.is_none(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::FeatureVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labelled(counts: &[(u8, usize)]) -> Vec<u8> {
        counts.iter().flat_map(|&(c, n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn balancing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = balanced_indices(&labelled(&[(1, 100), (2, 20)]), None, &mut rng).unwrap();
        let labels = labelled(&[(1, 100), (2, 20)]);
        let picked: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        assert_eq!(class_counts(&picked), BTreeMap::from([(1, 20), (2, 20)]));

        let labels = labelled(&[(1, 50), (2, 30), (3, 10)]);
        let idx = balanced_indices(&labels, None, &mut rng).unwrap();
        let picked: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        assert_eq!(class_counts(&picked), BTreeMap::from([(1, 10), (2, 10), (3, 10)]));

        let labels = labelled(&[(1, 7), (2, 7)]);
        assert_eq!(balanced_indices(&labels, None, &mut rng).unwrap(), (0..14).collect::<Vec<_>>());
        assert_eq!(balanced_indices(&labels, Some(3), &mut rng).unwrap().len(), 6);
        assert!(matches!(
            balanced_indices(&labelled(&[(1, 5)]), None, &mut rng),
            Err(LearnError::SingleClass)
        ));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels = labelled(&[(1, 100), (2, 50)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, v) = stratified_split_indices(&labels, 0.1, &mut rng);
        assert_eq!(t.len() + v.len(), 150);
        let vl: Vec<u8> = v.iter().map(|&i| labels[i]).collect();
        assert_eq!(class_counts(&vl), BTreeMap::from([(1, 10), (2, 5)]));
        assert!(t.iter().all(|i| !v.contains(i)));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn normalization_uses_fit_statistics() {
        let fs = FeatureSet::from(FeatureVariant::WithoutPayload);
        let train = vec![vec![1.0; 14], vec![3.0; 14]];
        let val = vec![vec![10.0; 14], vec![30.0; 14]];
        let n = Normalization::fit(&train, fs.meta_len());
        assert_eq!(n.apply(&val[0])[0], 8.0);
        assert_ne!(Normalization::fit(&val, 14), n);
        let constant = Normalization::fit(&[vec![5.0; 3], vec![5.0; 3]], 3);
        assert_eq!(constant.apply(&[5.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn payload_columns_pass_through() {
        let n = Normalization::fit(&[vec![0.0, 0.2], vec![2.0, 0.4]], 1);
        assert_eq!(n.apply(&[1.0, 0.7]), vec![0.0, 0.7]);
    }
}
