//! Pixel-wise confusion counts and the precision / recall / accuracy / F1
//! report derived from them.

use crate::data::{stack_samples, BinaryMask, Sample};
use crate::error::{contract, Error, Result};
use crate::model::Network;
use crate::par;

/// Pixel tallies with lane as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        self.merge(rhs)
    }
}

pub fn confusion_counts(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    contract!(
        (pred.h, pred.w) == (truth.h, truth.w),
        "prediction is {}x{} but ground truth is {}x{}",
        pred.h,
        pred.w,
        truth.h,
        truth.w
    );
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        contract!(p <= 1 && t <= 1, "mask entries must be binary, got {p} and {t}");
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    /// `(tp + tn) / total`.
    pub accuracy_standard: f64,
    /// `(tp + fn) / total`. This is the lane prevalence rather than a
    /// correctness rate; reported for comparison with published figures.
    pub accuracy_paper: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Ratio metrics from counts. Any ratio with a zero denominator is 0.
pub fn metrics_from_counts(c: ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Config("confusion counts are all zero".into()));
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        precision,
        recall,
        accuracy_standard: ratio(c.tp + c.tn, total),
        accuracy_paper: ratio(c.tp + c.fn_, total),
        f1,
        counts: c,
    })
}

pub const REPORT_HEADER: &str = "epochs,precision,recall,accuracy_standard,accuracy_paper,f1";

impl MetricsReport {
    /// One report row labelled with the epoch count.
    pub fn csv_row(&self, epochs: usize) -> String {
        format!(
            "{epochs},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.precision, self.recall, self.accuracy_standard, self.accuracy_paper, self.f1
        )
    }
}

/// Per-sample arg-max predictions of `net`, in dataset order.
pub fn predict_masks(net: &Network, samples: &[Sample], batch_size: usize) -> Result<Vec<BinaryMask>> {
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size.max(1)).collect();
    let per_batch = par::map_indices(chunks.len(), |i| -> Result<Vec<BinaryMask>> {
        let (images, _) = stack_samples(chunks[i])?;
        let classes = net.predict(&images)?;
        Ok((0..classes.n).map(|n| BinaryMask::from_class_map(&classes, n)).collect())
    });
    let mut out = Vec::with_capacity(samples.len());
    for b in per_batch {
        out.extend(b?);
    }
    Ok(out)
}

/// Confusion counts pooled over every pixel of every sample.
pub fn dataset_counts(net: &Network, samples: &[Sample], batch_size: usize) -> Result<ConfusionCounts> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let preds = predict_masks(net, samples, batch_size)?;
    preds
        .iter()
        .zip(samples)
        .try_fold(ConfusionCounts::default(), |acc, (p, s)| {
            Ok(acc + confusion_counts(p, &BinaryMask::from_one_hot(&s.mask))?)
        })
}

/// Micro-averaged report over the dataset.
pub fn evaluate_dataset_metrics(
    net: &Network,
    samples: &[Sample],
    batch_size: usize,
) -> Result<MetricsReport> {
    metrics_from_counts(dataset_counts(net, samples, batch_size)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, data: Vec<u8>) -> BinaryMask {
        BinaryMask::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn perfect_and_complement() {
        let truth = mask(4, 4, (0..16).map(|i| u8::from(i % 4 == 0)).collect());
        let c = confusion_counts(&truth, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 12 });
        let inv = mask(4, 4, truth.data.iter().map(|v| 1 - v).collect());
        let c = confusion_counts(&inv, &truth).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion_counts(&truth, &mask(2, 8, vec![0; 16])).is_err());
    }

    #[test]
    fn worked_example() {
        let r = metrics_from_counts(ConfusionCounts { tp: 4, fp: 1, fn_: 2, tn: 3 }).unwrap();
        let r4 = |v: f64| (v * 1e4).round() / 1e4;
        assert_eq!(r4(r.precision), 0.8);
        assert_eq!(r4(r.recall), 0.6667);
        assert_eq!(r4(r.accuracy_standard), 0.7);
        assert_eq!(r4(r.accuracy_paper), 0.6);
        assert_eq!(r4(r.f1), 0.7273);
        assert_eq!(r.csv_row(30), "30,0.800000,0.666667,0.700000,0.600000,0.727273");
    }

    #[test]
    fn degenerate_counts() {
        let r = metrics_from_counts(ConfusionCounts { tp: 9, fp: 0, fn_: 0, tn: 0 }).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = metrics_from_counts(ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 1 }).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(matches!(
            metrics_from_counts(ConfusionCounts::default()),
            Err(Error::Config(_))
        ));
    }

    fn random_mask(rng: &mut Rng, h: usize, w: usize) -> BinaryMask {
        mask(h, w, (0..h * w).map(|_| u8::from(rng.uniform(0.0, 1.0) < 0.3)).collect())
    }

    #[test]
    fn counts_match_double_loop() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let (p, t) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
            let c = confusion_counts(&p, &t).unwrap();
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for y in 0..16 {
                for x in 0..16 {
                    match (p.get(y, x) == 1, t.get(y, x) == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
            assert_eq!(c, ConfusionCounts { tp, fp, fn_, tn });
        }
    }

    proptest! {
        #[test]
        fn count_invariants(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let mut rng = Rng::new(seed);
            let (p, t) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
            let c = confusion_counts(&p, &t).unwrap();
            prop_assert_eq!(c.total(), (h * w) as u64);
            let s = confusion_counts(&t, &p).unwrap();
            prop_assert_eq!((s.tp, s.tn, s.fp, s.fn_), (c.tp, c.tn, c.fn_, c.fp));

            let r = metrics_from_counts(c).unwrap();
            let err_rate = (c.fp + c.fn_) as f64 / c.total() as f64;
            prop_assert!((r.accuracy_standard + err_rate - 1.0).abs() < 1e-12);
            if r.precision + r.recall > 0.0 {
                let hm = 2.0 * r.precision * r.recall / (r.precision + r.recall);
                prop_assert!((r.f1 - hm).abs() < 1e-12);
            }
            if r.precision > 0.0 && r.recall > 0.0 {
                prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
                prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
            }
        }
    }
}
