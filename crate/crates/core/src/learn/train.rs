use super::cnn::{CnnArch, CnnModel, CnnParams};
use super::{balanced_indices, stratified_split_indices, trace_labels, Dataset, LearnError, Normalization};
use crate::trace::{FeatureSet, Trace};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub validation_fraction: f64,
    /// Upper bound on samples per class after balancing.
    pub max_per_class: Option<usize>,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            conv1_filters: 32,
            conv2_filters: 64,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            validation_fraction: 0.1,
            max_per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub features: String,
    pub classes: Vec<u8>,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_validation_loss: f64,
    pub final_validation_accuracy: f64,
    /// `confusion[true][predicted]` on the validation split, in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub features: String,
    pub classes: Vec<u8>,
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// `confusion[true][predicted]` in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    /// Recall per class; absent for classes with no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Number of samples predicted as each class.
    pub assignments: Vec<usize>,
}

impl EvalReport {
    pub fn class_accuracy(&self, class: u8) -> Option<f64> {
        let i = self.classes.iter().position(|&c| c == class)?;
        self.per_class_accuracy[i]
    }
}

struct Adam {
    m: CnnParams,
    v: CnnParams,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &CnnParams) -> Self {
        let mut zero = p.clone();
        zero.groups_mut().into_iter().for_each(|g| g.fill(0.0));
        Adam {
            m: zero.clone(),
            v: zero,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut CnnParams, grads: &CnnParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let gs = grads.groups();
        for (((p, m), v), g) in params
            .groups_mut()
            .into_iter()
            .zip(self.m.groups_mut())
            .zip(self.v.groups_mut())
            .zip(gs)
        {
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn class_index(classes: &[u8], labels: &[u8]) -> Result<Vec<usize>, LearnError> {
    labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).ok_or(LearnError::UnknownClass(*l)))
        .collect()
}

/// Inference-mode loss and predicted output indices for normalized inputs.
fn score(model: &CnnModel, x: &[f64], targets: &[usize]) -> (f64, Vec<usize>) {
    let width = model.arch.input_len;
    let o = model.arch.outputs;
    let n = targets.len();
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(n);
    for (xc, tc) in x.chunks(256 * width).zip(targets.chunks(256)) {
        let logits = model.logits(xc, tc.len());
        loss += model.loss(&logits, tc).0 * tc.len() as f64;
        preds.extend(logits.chunks(o).map(|r| model.decide(r)));
    }
    (loss / n.max(1) as f64, preds)
}

fn summarize(classes: &[u8], targets: &[usize], preds: &[usize]) -> (Vec<Vec<usize>>, Vec<Option<f64>>, Vec<usize>) {
    let c = classes.len();
    let mut confusion = vec![vec![0usize; c]; c];
    let mut assignments = vec![0usize; c];
    for (&t, &p) in targets.iter().zip(preds) {
        confusion[t][p] += 1;
        assignments[p] += 1;
    }
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    (confusion, per_class, assignments)
}

fn accuracy(targets: &[usize], preds: &[usize]) -> f64 {
    let hit = targets.iter().zip(preds).filter(|(a, b)| a == b).count();
    hit as f64 / targets.len().max(1) as f64
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len().max(1) as f64
}

/// Mini-batch Adam on cross-entropy with early stopping on validation loss.
/// Metadata columns are z-scored with statistics from `train` only. Returns
/// the model from the epoch with the lowest validation loss.
pub fn cnn_train(train: &Dataset, val: &Dataset, hyper: &Hyper, seed: u64) -> Result<(CnnModel, TrainReport), LearnError> {
    if train.is_empty() || val.is_empty() {
        return Err(LearnError::EmptySplit);
    }
    if train.features != val.features {
        return Err(LearnError::ShapeMismatch {
            expected: train.width(),
            got: val.width(),
        });
    }
    let width = train.width();
    let classes: Vec<u8> = train.class_counts().into_keys().collect();
    let train_t = class_index(&classes, &train.labels)?;
    let val_t = class_index(&classes, &val.labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Normalization::fit(&train.vectors, train.features.meta_len());
    let arch = CnnArch::new(width, hyper.conv1_filters, hyper.conv2_filters, classes.len())?;
    let mut model = CnnModel::init(arch, classes.clone(), train.features.clone(), norm, seed, &mut rng);
    model.bn_momentum = hyper.bn_momentum;
    model.bn_epsilon = hyper.bn_epsilon;
    let x_train = model.prepare(&train.vectors)?;
    let x_val = model.prepare(&val.vectors)?;

    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, CnnModel)> = None;
    let mut stale = 0;
    let mut batch_x = Vec::with_capacity(hyper.batch_size * width);
    let mut batch_t = Vec::with_capacity(hyper.batch_size);
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            batch_x.clear();
            batch_t.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&x_train[i * width..(i + 1) * width]);
                batch_t.push(train_t[i]);
            }
            let (loss, grads, cache) = model.train_step(&batch_x, &batch_t);
            loss_sum += loss * chunk.len() as f64;
            correct += cache
                .logits
                .chunks(arch.outputs)
                .zip(&batch_t)
                .filter(|(r, &t)| model.decide(r) == t)
                .count();
            adam.step(&mut model.params, &grads, hyper.learning_rate);
            model.update_running(&cache);
        }
        let (val_loss, preds) = score(&model, &x_val, &val_t);
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy: accuracy(&val_t, &preds),
        });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    let eval = cnn_evaluate(&model, val)?;
    let report = TrainReport {
        features: train.features.label(),
        classes,
        train_samples: train.len(),
        validation_samples: val.len(),
        epochs,
        best_epoch,
        final_validation_loss: eval.loss,
        final_validation_accuracy: eval.accuracy,
        confusion: eval.confusion,
        per_class_accuracy: eval.per_class_accuracy.into_iter().map(|a| a.unwrap_or(0.0)).collect(),
        balanced_accuracy: eval.balanced_accuracy,
    };
    Ok((model, report))
}

/// Threshold 0.5 for a sigmoid head, argmax for softmax.
pub fn cnn_evaluate(model: &CnnModel, dataset: &Dataset) -> Result<EvalReport, LearnError> {
    let targets = class_index(&model.classes, &dataset.labels)?;
    let x = model.prepare(&dataset.vectors)?;
    let (loss, preds) = score(model, &x, &targets);
    let (confusion, per_class_accuracy, assignments) = summarize(&model.classes, &targets, &preds);
    Ok(EvalReport {
        features: model.features.label(),
        classes: model.classes.clone(),
        samples: dataset.len(),
        loss,
        accuracy: accuracy(&targets, &preds),
        balanced_accuracy: mean_present(&per_class_accuracy),
        confusion,
        per_class_accuracy,
        assignments,
    })
}

/// Predicted class counts for unlabelled raw vectors.
pub fn cnn_assign(model: &CnnModel, vectors: &[Vec<f64>]) -> Result<BTreeMap<u8, usize>, LearnError> {
    let mut counts: BTreeMap<u8, usize> = model.classes.iter().map(|&c| (c, 0)).collect();
    let x = model.prepare(vectors)?;
    let width = model.arch.input_len;
    for chunk in x.chunks(256 * width) {
        let b = chunk.len() / width;
        for row in model.logits(chunk, b).chunks(model.arch.outputs) {
            *counts.get_mut(&model.classes[model.decide(row)]).expect("known class") += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub features: FeatureSet,
    pub model: CnnModel,
    pub report: TrainReport,
}

/// Trains one model per feature set on the same balanced records and the
/// same train/validation split.
pub fn ablation_suite(trace: &Trace, sets: &[FeatureSet], hyper: &Hyper, seed: u64) -> Result<Vec<AblationEntry>, LearnError> {
    let labels = trace_labels(trace)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = balanced_indices(&labels, hyper.max_per_class, &mut rng)?;
    let chosen_labels: Vec<u8> = chosen.iter().map(|&i| labels[i]).collect();
    let (t, v) = stratified_split_indices(&chosen_labels, hyper.validation_fraction, &mut rng);
    let pick = |idx: &[usize], fs: &FeatureSet| {
        let vectors = idx.iter().map(|&j| fs.extract(&trace.records[chosen[j]])).collect();
        let labels = idx.iter().map(|&j| chosen_labels[j]).collect();
        Dataset::new(vectors, labels, fs.clone())
    };
    sets.iter()
        .map(|fs| {
            let (model, report) = cnn_train(&pick(&t, fs)?, &pick(&v, fs)?, hyper, seed)?;
            Ok(AblationEntry {
                features: fs.clone(),
                model,
                report,
            })
        })
        .collect()
}
