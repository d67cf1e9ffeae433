//! Confusion-matrix accounting and per-class precision/recall/F1 reporting.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::raster::{ClassMap, FOREST, NON_FOREST, UNLABELED};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: pred {pred} pixels, truth {truth} pixels")]
    DimensionMismatch { pred: usize, truth: usize },
    #[error("prediction contains code {0}; must be dense 0/1")]
    SparsePrediction(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Counts indexed (truth, prediction) over {non-forest, forest}; pixels with
/// truth = 255 are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    /// counts[t][p] with 0 = non-forest, 1 = forest
    pub counts: [[u64; 2]; 2],
}

/// Per-class precision/recall/F1; `None` encodes an undefined 0/0 ratio,
/// which is distinct from a score of zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn confusion(pred: &ClassMap, truth: &ClassMap) -> Result<ConfusionMatrix, MetricsError> {
    confusion_slices(&pred.values, &truth.values)
}

pub fn confusion_slices(pred: &[u8], truth: &[u8]) -> Result<ConfusionMatrix, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::DimensionMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(truth) {
        if t == UNLABELED {
            continue;
        }
        if p != NON_FOREST && p != FOREST {
            return Err(MetricsError::SparsePrediction(p));
        }
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// (tp, fp, fn, tn) with `positive` as the positive class code (0 or 1).
    pub fn rates(&self, positive: u8) -> (u64, u64, u64, u64) {
        let p = positive as usize;
        let n = 1 - p;
        (
            self.counts[p][p],
            self.counts[n][p],
            self.counts[p][n],
            self.counts[n][n],
        )
    }

    pub fn prf(&self, positive: u8) -> Prf {
        let (tp, fp, fn_, _) = self.rates(positive);
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    2.0 * precision * recall / (precision + recall)
}

/// One evaluation record per (method, class). Field order is the on-disk key
/// order; keep it stable.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub method: String,
    pub class: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub seed: u64,
    pub config_hash: String,
}

/// Expand a confusion matrix into the two per-class records of a method.
pub fn records_for(
    method: &str,
    cm: &ConfusionMatrix,
    seed: u64,
    config_hash: &str,
) -> Vec<EvalRecord> {
    [(NON_FOREST, "non-forest"), (FOREST, "forest")]
        .iter()
        .map(|&(code, class)| {
            let prf = cm.prf(code);
            let (tp, fp, fn_, tn) = cm.rates(code);
            EvalRecord {
                method: method.to_string(),
                class: class.to_string(),
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                tp,
                fp,
                fn_,
                tn,
                seed,
                config_hash: config_hash.to_string(),
            }
        })
        .collect()
}

/// Write evaluation.json: a JSON array of records in caller order, with stable
/// key order, so identical inputs reproduce identical bytes.
pub fn write_evaluation<P: AsRef<Path>>(
    records: &[EvalRecord],
    path: P,
) -> Result<(), MetricsError> {
    let mut out = serde_json::to_vec_pretty(records)?;
    out.push(b'\n');
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cmap(data: Vec<u8>) -> ClassMap {
        let n = data.len();
        ClassMap::new(1, n, data).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let truth = cmap(vec![0, 1, 1, 0, 1]);
        let cm = confusion(&truth.clone(), &truth).unwrap();
        assert_eq!(cm.counts[0][1] + cm.counts[1][0], 0);
        assert_eq!(cm.counts[0][0] + cm.counts[1][1], 5);
    }

    #[test]
    fn unlabeled_truth_is_excluded() {
        let pred = cmap(vec![0, 1, 0, 1]);
        let truth = cmap(vec![255, 255, 255, 255]);
        let cm = confusion(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn two_by_two_hand_case() {
        let cm = confusion_slices(&[0, 1, 1, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!(cm.counts[0][0], 1);
        assert_eq!(cm.counts[1][1], 1);
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.counts[1][0], 1);
    }

    #[test]
    fn sparse_prediction_is_rejected() {
        assert!(matches!(
            confusion_slices(&[255], &[0]),
            Err(MetricsError::SparsePrediction(255))
        ));
    }

    #[test]
    fn zero_over_zero_is_undefined_not_zero() {
        let cm = ConfusionMatrix {
            counts: [[5, 0], [0, 0]],
        };
        let prf = cm.prf(FOREST);
        assert_eq!(prf.precision, None);
        assert_eq!(prf.recall, None);
        assert_eq!(prf.f1, None);
        // whereas a genuinely wrong classifier scores Some(0.0)
        let cm = ConfusionMatrix {
            counts: [[0, 5], [3, 0]],
        };
        let prf = cm.prf(FOREST);
        assert_eq!(prf.precision, Some(0.0));
        assert_eq!(prf.recall, Some(0.0));
        assert_eq!(prf.f1, None);
    }

    #[test]
    fn published_pr_pairs_reproduce_their_f1() {
        assert!((f1_from_pr(0.90, 0.973) - 0.935).abs() < 1.5e-3);
        assert!((f1_from_pr(0.902, 0.983) - 0.940).abs() < 1.5e-3);
    }

    #[test]
    fn record_json_has_stable_key_order() {
        let cm = confusion_slices(&[0, 1, 1], &[0, 1, 0]).unwrap();
        let records = records_for("dense", &cm, 7, "abc123");
        let text = serde_json::to_string(&records).unwrap();
        let m = text.find("\"method\"").unwrap();
        let c = text.find("\"class\"").unwrap();
        let p = text.find("\"precision\"").unwrap();
        let f = text.find("\"fn\"").unwrap();
        assert!(m < c && c < p && p < f);
        assert_eq!(records.len(), 2);
    }

    proptest! {
        #[test]
        fn swapping_positive_class_is_an_involution(
            counts in proptest::array::uniform4(0u64..1000)
        ) {
            let cm = ConfusionMatrix {
                counts: [[counts[0], counts[1]], [counts[2], counts[3]]],
            };
            // forest-positive rates are the non-forest-positive rates with
            // (tp <-> tn) and (fp <-> fn)
            let (tp, fp, fn_, tn) = cm.rates(FOREST);
            let (tp2, fp2, fn2, tn2) = cm.rates(NON_FOREST);
            prop_assert_eq!((tp, fp, fn_, tn), (tn2, fn2, fp2, tp2));
        }

        #[test]
        fn f1_lies_between_precision_and_recall(
            counts in proptest::array::uniform4(0u64..1000)
        ) {
            let cm = ConfusionMatrix {
                counts: [[counts[0], counts[1]], [counts[2], counts[3]]],
            };
            let prf = cm.prf(FOREST);
            if let (Some(p), Some(r), Some(f)) = (prf.precision, prf.recall, prf.f1) {
                prop_assert!(f <= p.max(r) + 1e-12);
                prop_assert!(f >= p.min(r) - 1e-12);
            }
        }

        #[test]
        fn counts_are_order_invariant(
            pixels in proptest::collection::vec((0u8..2, prop_oneof![Just(0u8), Just(1u8), Just(255u8)]), 1..200),
            seed in 0u64..1000,
        ) {
            let pred: Vec<u8> = pixels.iter().map(|&(p, _)| p).collect();
            let truth: Vec<u8> = pixels.iter().map(|&(_, t)| t).collect();
            let a = confusion_slices(&pred, &truth).unwrap();
            let mut order: Vec<usize> = (0..pixels.len()).collect();
            let mut rng = crate::seeds::rng(seed, "metrics.shuffle");
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let pred2: Vec<u8> = order.iter().map(|&i| pred[i]).collect();
            let truth2: Vec<u8> = order.iter().map(|&i| truth[i]).collect();
            let b = confusion_slices(&pred2, &truth2).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
