//! Error rate, micro-F1, and length-bucket breakdowns over predicted
//! label sets.

use std::collections::BTreeSet;

use crate::text::Example;

/// Evaluation summary. Error rate counts exact set mismatches (top-1
/// mismatch for single-label); micro-F1 pools per-(example, class)
/// decisions, the multi-label convention.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct Metrics {
    pub error_rate: f64,
    pub micro_f1: f64,
    pub n_examples: usize,
    /// (upper bound or usize::MAX, metrics) per length bucket, when asked.
    pub buckets: Vec<(usize, Metrics)>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    examples: usize,
    mismatches: usize,
    tp: usize,
    fp: usize,
    fne: usize,
}

impl Counts {
    fn add(&mut self, predicted: &BTreeSet<usize>, gold: &BTreeSet<usize>) {
        self.examples += 1;
        if predicted != gold {
            self.mismatches += 1;
        }
        self.tp += predicted.intersection(gold).count();
        self.fp += predicted.difference(gold).count();
        self.fne += gold.difference(predicted).count();
    }

    fn metrics(&self) -> Metrics {
        let error_rate = self.mismatches as f64 / self.examples.max(1) as f64;
        let denom = 2 * self.tp + self.fp + self.fne;
        let micro_f1 = if denom == 0 { 1.0 } else { 2.0 * self.tp as f64 / denom as f64 };
        Metrics { error_rate, micro_f1, n_examples: self.examples, buckets: Vec::new() }
    }
}

/// Score predictions against gold label sets, optionally broken down by
/// text token length. `bucket_bounds` like [100, 250, 500] produce four
/// buckets: <100, 100..250, 250..500, and >=500.
pub fn score_predictions(
    examples: &[Example],
    predictions: &[BTreeSet<usize>],
    bucket_bounds: Option<&[usize]>,
) -> Metrics {
    assert_eq!(examples.len(), predictions.len(), "one prediction per example");
    let mut total = Counts::default();
    let bounds: Vec<usize> = match bucket_bounds {
        Some(b) => {
            let mut v = b.to_vec();
            v.push(usize::MAX);
            v
        }
        None => Vec::new(),
    };
    let mut per_bucket = vec![Counts::default(); bounds.len()];
    for (ex, pred) in examples.iter().zip(predictions) {
        total.add(pred, &ex.labels);
        if !bounds.is_empty() {
            let len = ex.tokens.len();
            let idx = bounds.iter().position(|&b| len < b).unwrap_or(bounds.len() - 1);
            per_bucket[idx].add(pred, &ex.labels);
        }
    }
    let mut metrics = total.metrics();
    metrics.buckets = bounds
        .iter()
        .zip(&per_bucket)
        .map(|(&b, c)| (b, c.metrics()))
        .collect();
    metrics
}

/// Exhaustive confusion-matrix recomputation used as the oracle in tests:
/// walks every (example, class) cell instead of set operations.
pub fn brute_force_metrics(examples: &[Example], predictions: &[BTreeSet<usize>], n_classes: usize) -> (f64, f64) {
    let mut mism = 0usize;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (ex, pred) in examples.iter().zip(predictions) {
        if *pred != ex.labels {
            mism += 1;
        }
        for c in 0..n_classes {
            match (pred.contains(&c), ex.labels.contains(&c)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
    }
    let error = mism as f64 / examples.len().max(1) as f64;
    let denom = 2 * tp + fp + fne;
    let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    (error, f1)
}

/// Epochs until the error first comes within 10% (relative) of the run's
/// final error; measures convergence speed on an epoch log.
pub fn epochs_to_near_final(epoch_errors: &[f64]) -> usize {
    let final_err = *epoch_errors.last().expect("non-empty epoch log");
    let threshold = final_err * 1.10 + 1e-9;
    for (i, &e) in epoch_errors.iter().enumerate() {
        if e <= threshold {
            return i + 1;
        }
    }
    epoch_errors.len()
}
