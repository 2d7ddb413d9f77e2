//! Stratified k-fold cross validation of the classifier, with per-epoch
//! metrics, early stopping and CSV/SVG reports.

mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{LabelLevel, Spectrum};
use crate::error::{ensure, Result};
use crate::optim::{amsgrad_step, OptState, OptimHyper};
use crate::recognize::{argmax_confidence, build_classifier, classifier_forward, ClassifierConfig, ClassifierParams};
use crate::rng::{derive_seed, shuffled, stream};
use crate::tensor::{ops, GradTape, Tensor};

pub use report::{emit_curves, read_metrics, write_metrics};

/// Disjoint index partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn val_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Shuffles each class with its own seeded stream, then deals samples to the
/// folds round-robin; the dealing position carries over between classes.
pub fn make_folds(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    ensure!(k >= 2, "make_folds", "k must be at least 2, got {}", k);
    ensure!(k <= labels.len(), "make_folds", "k = {} exceeds {} samples", k, labels.len());
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (class, members) in by_class {
        let order = shuffled(members.len(), &mut stream(seed, &[0xF01D, class as u64]));
        for o in order {
            folds[next % k].push(members[o]);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { seed, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: OptimHyper,
    pub patience: usize,
    /// Stop a fold once validation accuracy stalls for `patience` epochs.
    pub early_stop: bool,
    pub label_level: LabelLevel,
    /// Restrict training to one session; `None` runs every session present separately.
    pub session: Option<Spectrum>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 5,
            batch_size: 8,
            epochs: 17,
            optim: OptimHyper::default(),
            patience: 3,
            early_stop: false,
            label_level: LabelLevel::Identity,
            session: None,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig";
        ensure!(self.k >= 2, OP, "k must be at least 2, got {}", self.k);
        ensure!(self.batch_size > 0 && self.epochs > 0, OP, "batch size and epochs must be positive");
        ensure!(self.patience > 0, OP, "patience must be positive");
        self.optim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One row of the metrics table. Folds and epochs count from 1; accuracy is a
/// percentage. Values are rounded to 6 decimals so the CSV form is exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fold: usize,
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub loss: f64,
}

pub(crate) fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl MetricsRecord {
    pub fn new(fold: usize, epoch: usize, split: Split, accuracy: f64, loss: f64) -> Self {
        MetricsRecord { fold, epoch, split, accuracy: quantize(accuracy), loss: quantize(loss) }
    }
}

/// Normalized classifier inputs `[3,S,S]` with dense class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ClassifierDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        ensure!(
            images.len() == labels.len(),
            "ClassifierDataset",
            "{} images but {} labels",
            images.len(),
            labels.len()
        );
        ensure!(
            labels.iter().all(|&l| l < num_classes),
            "ClassifierDataset",
            "label out of range for {} classes",
            num_classes
        );
        if let Some(first) = images.first() {
            ensure!(
                images.iter().all(|t| t.shape() == first.shape()),
                "ClassifierDataset",
                "images differ in shape"
            );
        }
        Ok(ClassifierDataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Ok((Tensor::stack(&items)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

const EVAL_BATCH: usize = 64;

/// Accuracy (percent) and mean cross-entropy over `indices`.
pub fn evaluate(params: &ClassifierParams, data: &ClassifierDataset, indices: &[usize]) -> Result<(f64, f64)> {
    ensure!(!indices.is_empty(), "evaluate", "empty sample set");
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let logits = crate::recognize::logits(&x, params)?;
        let (a, l) = score(&logits, &y)?;
        correct += a;
        loss += l * chunk.len() as f64;
    }
    let n = indices.len() as f64;
    Ok((100.0 * correct as f64 / n, loss / n))
}

/// Correct predictions and mean cross-entropy of a logits batch.
fn score(logits: &Tensor, targets: &[usize]) -> Result<(usize, f64)> {
    let c = logits.shape()[1];
    let correct = logits
        .data()
        .chunks_exact(c)
        .zip(targets)
        .filter(|(row, &t)| argmax_confidence(row).0 == t)
        .count();
    Ok((correct, ops::cross_entropy(logits, targets)? as f64))
}

/// True when each of the last `patience` entries failed to exceed the best
/// value recorded before it.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let mut best = history[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &v in &history[split..] {
        if v > best {
            return false;
        }
        best = best.max(v);
    }
    true
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub params: ClassifierParams,
    pub records: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub best_loss: f64,
}

/// Trains on every fold but `fold` and validates on `fold` after each epoch.
/// Train metrics are running averages over the epoch's batches. The returned
/// parameters are those of the first epoch reaching the best validation accuracy.
pub fn train_classifier_fold(
    data: &ClassifierDataset,
    fold: usize,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    ccfg: &ClassifierConfig,
) -> Result<FoldResult> {
    cfg.validate()?;
    ensure!(fold < plan.k(), "train_classifier_fold", "fold {} of {}", fold, plan.k());
    let train = plan.train_indices(fold);
    let val = plan.val_indices(fold);
    ensure!(!train.is_empty(), "train_classifier_fold", "empty training set for fold {}", fold);
    ensure!(!val.is_empty(), "train_classifier_fold", "empty validation set for fold {}", fold);
    let ccfg = ClassifierConfig { num_classes: data.num_classes, ..ccfg.clone() };
    let mut params = build_classifier(&ccfg, derive_seed(cfg.seed, &[0xF0, fold as u64]))?;
    let mut state = OptState::new(&params.params);
    let mut records = Vec::with_capacity(2 * cfg.epochs);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, ClassifierParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, &[0xBA7C, fold as u64, epoch as u64]);
        let order: Vec<usize> = shuffled(train.len(), &mut rng).into_iter().map(|i| train[i]).collect();
        let (mut correct, mut loss_sum) = (0usize, 0.0f64);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let mut tape = GradTape::new();
            let xv = tape.leaf(x);
            let logits = classifier_forward(&mut tape, xv, &params)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let (c, l) = score(tape.value(logits), &y)?;
            correct += c;
            loss_sum += l * chunk.len() as f64;
            let grads = tape.backward(loss)?.for_params(&params.params);
            amsgrad_step(&mut params.params, &grads, &mut state, &cfg.optim)?;
        }
        let n = train.len() as f64;
        records.push(MetricsRecord::new(fold + 1, epoch, Split::Train, 100.0 * correct as f64 / n, loss_sum / n));
        let (acc, loss) = evaluate(&params, data, val)?;
        let rec = MetricsRecord::new(fold + 1, epoch, Split::Val, acc, loss);
        records.push(rec);
        history.push(rec.accuracy);
        if best.as_ref().is_none_or(|b| rec.accuracy > b.1) {
            best = Some((epoch, rec.accuracy, rec.loss, params.clone()));
        }
        if cfg.early_stop && early_stop(&history, cfg.patience) {
            break;
        }
    }
    let (best_epoch, best_accuracy, best_loss, params) = best.expect("at least one epoch");
    Ok(FoldResult { fold, params, records, best_epoch, best_accuracy, best_loss })
}

#[derive(Debug, Clone)]
pub struct CrossvalReport {
    pub records: Vec<MetricsRecord>,
    /// Best validation accuracy per fold.
    pub benchmarks: Vec<f64>,
    /// Mean of the benchmarks.
    pub average_accuracy: f64,
    /// Unweighted mean of the per-fold validation losses at the benchmark epochs.
    pub mean_loss: f64,
    pub folds: Vec<FoldResult>,
}

/// Runs every fold (in parallel) and merges the results in fold order.
pub fn run_crossval(data: &ClassifierDataset, cfg: &TrainConfig, ccfg: &ClassifierConfig) -> Result<CrossvalReport> {
    cfg.validate()?;
    let plan = make_folds(&data.labels, cfg.k, cfg.seed)?;
    let folds = (0..cfg.k)
        .into_par_iter()
        .map(|f| train_classifier_fold(data, f, &plan, cfg, ccfg))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricsRecord> = folds.iter().flat_map(|f| f.records.iter().copied()).collect();
    let benchmarks: Vec<f64> = folds.iter().map(|f| f.best_accuracy).collect();
    let average_accuracy = benchmarks.iter().sum::<f64>() / benchmarks.len() as f64;
    let mean_loss = folds.iter().map(|f| f.best_loss).sum::<f64>() / folds.len() as f64;
    Ok(CrossvalReport { records, benchmarks, average_accuracy, mean_loss, folds })
}

/// Per-fold benchmark as read back from a metrics table: the max of each
/// fold's validation accuracy column, in fold order.
pub fn benchmarks_from_records(records: &[MetricsRecord]) -> Vec<f64> {
    let mut by_fold: BTreeMap<usize, f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Val) {
        let e = by_fold.entry(r.fold).or_insert(f64::NEG_INFINITY);
        *e = e.max(r.accuracy);
    }
    by_fold.into_values().collect()
}

/// Mean of the per-session average accuracies.
pub fn overall_accuracy(reports: &[CrossvalReport]) -> Option<f64> {
    (!reports.is_empty()).then(|| reports.iter().map(|r| r.average_accuracy).sum::<f64>() / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(p: &FoldPlan) -> Vec<usize> {
        p.folds.iter().map(Vec::len).collect()
    }

    #[test]
    fn fold_examples() {
        assert_eq!(sizes(&make_folds(&[0; 10], 5, 1).unwrap()), vec![2; 5]);
        assert_eq!(sizes(&make_folds(&[0; 11], 5, 1).unwrap()), vec![3, 2, 2, 2, 2]);
        let labels: Vec<usize> = (0..10).map(|i| i / 5).collect();
        let p = make_folds(&labels, 5, 9).unwrap();
        for f in &p.folds {
            let mut cls: Vec<usize> = f.iter().map(|&i| labels[i]).collect();
            cls.sort_unstable();
            assert_eq!(cls, vec![0, 1]);
        }
        assert!(make_folds(&[0; 3], 5, 0).is_err());
    }

    #[test]
    fn train_indices_complement_fold() {
        let p = make_folds(&[0, 1, 0, 1, 2, 2, 0], 3, 4).unwrap();
        for f in 0..3 {
            let mut all = [p.train_indices(f), p.val_indices(f).to_vec()].concat();
            all.sort_unstable();
            assert_eq!(all, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop(&[90.0, 91.0, 91.0], 2));
        assert!(early_stop(&[90.0, 91.0, 91.0, 91.0], 2));
        assert!(!early_stop(&[1.0, 2.0, 3.0, 4.0, 5.0], 1));
        assert!(!early_stop(&[5.0], 3));
        assert!(early_stop(&[5.0, 4.0, 3.0, 2.0], 3));
    }

    #[test]
    fn records_are_quantized() {
        let r = MetricsRecord::new(1, 1, Split::Val, 100.0 / 3.0, 0.123_456_789);
        assert_eq!(r.accuracy, 33.333_333);
        assert_eq!(r.loss, 0.123_457);
    }

    #[test]
    fn benchmark_is_column_max() {
        let recs = vec![
            MetricsRecord::new(1, 1, Split::Val, 50.0, 1.0),
            MetricsRecord::new(1, 2, Split::Val, 75.0, 1.0),
            MetricsRecord::new(1, 2, Split::Train, 99.0, 1.0),
            MetricsRecord::new(2, 1, Split::Val, 60.0, 1.0),
        ];
        assert_eq!(benchmarks_from_records(&recs), vec![75.0, 60.0]);
    }
}
