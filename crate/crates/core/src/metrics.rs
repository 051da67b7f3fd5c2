//! Failure-prediction metrics. Correct predictions are the positive class:
//! a confidence score should rank them above mistakes. All metrics are pure
//! functions of immutable record slices with brute-force-checkable
//! definitions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, Tensor};

/// One evaluated test sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub confidence: f64,
    pub predicted: usize,
    pub true_label: usize,
    pub correct: bool,
}

impl EvalRecord {
    pub fn new(confidence: f64, predicted: usize, true_label: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::OutOfRange {
                what: "confidence",
                value: confidence,
            });
        }
        Ok(EvalRecord {
            confidence,
            predicted,
            true_label,
            correct: predicted == true_label,
        })
    }
}

/// Selective risk at each coverage k/n, k = 1..n.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskCoverageCurve {
    /// (coverage, risk) pairs with strictly increasing coverage.
    pub points: Vec<(f64, f64)>,
    /// Confidence of the k-th admitted record (non-increasing). Equal
    /// adjacent values mark a tie group: a confidence threshold can only
    /// realize the coverages at group boundaries.
    pub thresholds: Vec<f64>,
}

/// Maximum softmax probability of one logit row.
pub fn msp_confidence(logits: &Tensor) -> Result<f64> {
    if logits.shape().len() != 1 || logits.shape()[0] < 2 {
        return Err(Error::ShapeMismatch {
            op: "msp_confidence",
            detail: format!("need [K] with K ≥ 2, got {:?}", logits.shape()),
        });
    }
    Ok(softmax_row(logits.data())
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Indices of `records` sorted by confidence descending; ties keep their
/// original order (stable), which fixes every downstream metric under
/// duplicate confidences.
fn confidence_order(records: &[EvalRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .confidence
            .partial_cmp(&records[a].confidence)
            .expect("confidences are finite")
    });
    order
}

/// Risk (error rate among the top-k most confident) at each coverage k/n.
pub fn risk_coverage_curve(records: &[EvalRecord]) -> Result<RiskCoverageCurve> {
    if records.is_empty() {
        return Err(Error::EmptyInput("risk_coverage_curve"));
    }
    let n = records.len();
    let order = confidence_order(records);
    let mut wrong = 0usize;
    let mut points = Vec::with_capacity(n);
    let mut thresholds = Vec::with_capacity(n);
    for (k, &ix) in order.iter().enumerate() {
        if !records[ix].correct {
            wrong += 1;
        }
        points.push(((k + 1) as f64 / n as f64, wrong as f64 / (k + 1) as f64));
        thresholds.push(records[ix].confidence);
    }
    Ok(RiskCoverageCurve { points, thresholds })
}

/// Area under the risk–coverage curve: the mean of the n per-record risk
/// values (uniform-step Riemann sum), where each record's risk is taken at
/// the end of its confidence tie group — the smallest admissible set a
/// threshold rule can actually produce. This makes the area depend only on
/// the confidence ordering, so duplicating every record leaves it unchanged.
/// Tables display this ×10³.
pub fn aurc(curve: &RiskCoverageCurve) -> f64 {
    let n = curve.points.len();
    let mut total = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && curve.thresholds[j + 1] == curve.thresholds[i] {
            j += 1;
        }
        total += (j - i + 1) as f64 * curve.points[j].1;
        i = j + 1;
    }
    total / n as f64
}

fn split_counts(records: &[EvalRecord]) -> Result<(usize, usize)> {
    let pos = records.iter().filter(|r| r.correct).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both correct and incorrect records, got {pos} correct / {neg} incorrect"
        )));
    }
    Ok((pos, neg))
}

/// Probability that a random correct prediction outranks a random incorrect
/// one, ties counted ½ (Mann–Whitney). Computed with midranks.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let (pos, neg) = split_counts(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .confidence
            .partial_cmp(&records[b].confidence)
            .expect("confidences are finite")
    });
    // midrank sum over the positive class
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && records[order[j + 1]].confidence == records[order[i]].confidence
        {
            j += 1;
        }
        // ranks are 1-based; all ties share the average rank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &ix in &order[i..=j] {
            if records[ix].correct {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// False-positive rate at the largest confidence threshold that keeps at
/// least 95% of correct predictions (no interpolation; the threshold is one
/// of the observed confidences, classification rule confidence ≥ threshold).
pub fn fpr_at_95_tpr(records: &[EvalRecord]) -> Result<f64> {
    fpr_at_tpr(records, 0.95)
}

pub fn fpr_at_tpr(records: &[EvalRecord], tpr_floor: f64) -> Result<f64> {
    let (pos, neg) = split_counts(records)?;
    let order = confidence_order(records);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        // advance over the whole tie group: a threshold equal to this
        // confidence admits every record at or above it
        let mut j = i;
        while j + 1 < order.len()
            && records[order[j + 1]].confidence == records[order[i]].confidence
        {
            j += 1;
        }
        for &ix in &order[i..=j] {
            if records[ix].correct {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if tp as f64 / pos as f64 >= tpr_floor {
            return Ok(fp as f64 / neg as f64);
        }
        i = j + 1;
    }
    unreachable!("TPR reaches 1.0 once every record is admitted");
}

/// Fraction of correct predictions.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Mean per-class recall over the classes present among the true labels.
pub fn balanced_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("balanced_accuracy"));
    }
    let k = records.iter().map(|r| r.true_label).max().unwrap() + 1;
    let mut total = vec![0usize; k];
    let mut hit = vec![0usize; k];
    for r in records {
        total[r.true_label] += 1;
        if r.correct {
            hit[r.true_label] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..k {
        if total[c] > 0 {
            sum += hit[c] as f64 / total[c] as f64;
            classes += 1;
        }
    }
    Ok(sum / classes as f64)
}

/// The four headline numbers for one evaluation split. AURC is stored raw
/// (multiply by 10³ for table display); AUROC and FPR95 are undefined when a
/// split has no mistakes (or no hits) and are reported as absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub aurc: f64,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
}

impl MetricReport {
    pub fn aurc_x1000(&self) -> f64 {
        self.aurc * 1000.0
    }
}

/// Compute all metrics over one record set.
pub fn compute_report(records: &[EvalRecord]) -> Result<MetricReport> {
    let acc = accuracy(records)?;
    let curve = risk_coverage_curve(records)?;
    let aurc_v = aurc(&curve);
    let (auroc_v, fpr_v) = match split_counts(records) {
        Ok(_) => (Some(auroc(records)?), Some(fpr_at_95_tpr(records)?)),
        Err(_) => (None, None),
    };
    Ok(MetricReport {
        accuracy: acc,
        aurc: aurc_v,
        auroc: auroc_v,
        fpr95: fpr_v,
    })
}

/// Write records as `confidence,predicted,true_label` lines (no header).
pub fn write_prediction_dump(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.confidence, r.predicted, r.true_label));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a prediction dump; a leading `confidence,predicted,true_label`
/// header line is tolerated.
pub fn read_prediction_dump(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line.starts_with("confidence") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::DataFormat(format!(
                "{}:{}: expected 'confidence,predicted,true_label', got '{line}'",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |what: &str, s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::DataFormat(format!(
                    "{}:{}: bad {what} value '{s}'",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let confidence = parse("confidence", parts[0])?;
        let predicted = parse("predicted", parts[1])? as usize;
        let true_label = parse("true_label", parts[2])? as usize;
        records.push(EvalRecord::new(confidence, predicted, true_label)?);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("prediction dump"));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn rec(confidence: f64, correct: bool) -> EvalRecord {
        EvalRecord::new(confidence, if correct { 0 } else { 1 }, 0).unwrap()
    }

    /// Direct-definition AURC: each record is admitted together with every
    /// record at or above its confidence (a threshold rule cannot split a
    /// tie); its risk is the error rate of that admitted set. No sorting.
    fn aurc_brute(records: &[EvalRecord]) -> f64 {
        let mut total = 0.0;
        for r in records {
            let admitted: Vec<&EvalRecord> =
                records.iter().filter(|o| o.confidence >= r.confidence).collect();
            let wrong = admitted.iter().filter(|o| !o.correct).count();
            total += wrong as f64 / admitted.len() as f64;
        }
        total / records.len() as f64
    }

    /// Direct-definition AUROC: all (correct, incorrect) pairs, ties ½.
    fn auroc_brute(records: &[EvalRecord]) -> f64 {
        let pos: Vec<f64> = records.iter().filter(|r| r.correct).map(|r| r.confidence).collect();
        let neg: Vec<f64> = records.iter().filter(|r| !r.correct).map(|r| r.confidence).collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &q in &neg {
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() as f64 * neg.len() as f64)
    }

    /// Direct-definition FPR@95TPR: try thresholds from high to low.
    fn fpr95_brute(records: &[EvalRecord]) -> f64 {
        let mut thresholds: Vec<f64> = records.iter().map(|r| r.confidence).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = records.iter().filter(|r| r.correct).count() as f64;
        let neg = records.len() as f64 - pos;
        for &t in &thresholds {
            let tp = records.iter().filter(|r| r.correct && r.confidence >= t).count() as f64;
            if tp / pos >= 0.95 {
                let fp = records.iter().filter(|r| !r.correct && r.confidence >= t).count() as f64;
                return fp / neg;
            }
        }
        1.0
    }

    #[test]
    fn msp_cases() {
        let c = msp_confidence(&Tensor::from_vec(vec![0.0; 10])).unwrap();
        assert!((c - 0.1).abs() < 1e-12);
        let c = msp_confidence(&Tensor::from_vec(vec![500.0, 0.0, 0.0])).unwrap();
        assert!(c > 1.0 - 1e-12 && c <= 1.0);
        let c = msp_confidence(&Tensor::from_vec(vec![1f64.ln(), 3f64.ln()])).unwrap();
        assert!((c - 0.75).abs() < 1e-12);
    }

    #[test]
    fn curve_all_correct_and_all_wrong() {
        let all_c: Vec<EvalRecord> = (0..5).map(|i| rec(0.5 + 0.1 * i as f64 / 10.0, true)).collect();
        let curve = risk_coverage_curve(&all_c).unwrap();
        assert!(curve.points.iter().all(|&(_, r)| r == 0.0));
        assert_eq!(aurc(&curve), 0.0);

        let all_w: Vec<EvalRecord> = (0..5).map(|i| rec(0.5 + 0.01 * i as f64, false)).collect();
        let curve = risk_coverage_curve(&all_w).unwrap();
        assert!(curve.points.iter().all(|&(_, r)| r == 1.0));
        assert_eq!(aurc(&curve), 1.0);
    }

    #[test]
    fn curve_three_record_example() {
        let records = vec![rec(0.9, true), rec(0.8, false), rec(0.7, true)];
        let curve = risk_coverage_curve(&records).unwrap();
        let expect = [(1.0 / 3.0, 0.0), (2.0 / 3.0, 0.5), (1.0, 1.0 / 3.0)];
        for ((cov, risk), (ecov, erisk)) in curve.points.iter().zip(expect) {
            assert!((cov - ecov).abs() < 1e-12 && (risk - erisk).abs() < 1e-12);
        }
        assert!((aurc(&curve) - (0.0 + 0.5 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
        // coverages strictly increasing, one point per record
        assert_eq!(curve.points.len(), 3);
        assert!(curve.points.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn aurc_invariant_to_record_duplication() {
        let mut rng = crate::rng::seeded(2);
        for _ in 0..200 {
            let n = rng.random_range(2..10);
            let records: Vec<EvalRecord> = (0..n)
                .map(|_| rec(rng.random::<f64>(), rng.random::<bool>()))
                .collect();
            let mut doubled = records.clone();
            doubled.extend(records.iter().copied());
            let a = aurc(&risk_coverage_curve(&records).unwrap());
            let b = aurc(&risk_coverage_curve(&doubled).unwrap());
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn aurc_invariant_to_monotone_transform() {
        let mut rng = crate::rng::seeded(3);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let records: Vec<EvalRecord> = (0..n)
                .map(|_| rec(rng.random::<f64>(), rng.random::<bool>()))
                .collect();
            // strictly increasing map [0,1] → [0,1]
            let mapped: Vec<EvalRecord> = records
                .iter()
                .map(|r| {
                    let c = (r.confidence * 0.9 + 0.05).powi(3);
                    EvalRecord::new(c, r.predicted, r.true_label).unwrap()
                })
                .collect();
            let a = aurc(&risk_coverage_curve(&records).unwrap());
            let b = aurc(&risk_coverage_curve(&mapped).unwrap());
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_cases() {
        // correct {0.9, 0.7}, wrong {0.8} → (1 + 0)/2
        let records = vec![rec(0.9, true), rec(0.8, false), rec(0.7, true)];
        assert!((auroc(&records).unwrap() - 0.5).abs() < 1e-15);

        let separated = vec![rec(0.9, true), rec(0.8, true), rec(0.3, false)];
        assert_eq!(auroc(&separated).unwrap(), 1.0);

        let ties: Vec<EvalRecord> = (0..6).map(|i| rec(0.4, i % 2 == 0)).collect();
        assert_eq!(auroc(&ties).unwrap(), 0.5);

        let degenerate: Vec<EvalRecord> = (0..4).map(|i| rec(0.1 * i as f64, true)).collect();
        assert!(matches!(auroc(&degenerate), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_flip_symmetry() {
        let mut rng = crate::rng::seeded(4);
        for _ in 0..200 {
            let n = rng.random_range(3..12);
            let records: Vec<EvalRecord> = (0..n)
                .map(|_| rec((rng.random::<f64>() * 8.0).round() / 8.0, rng.random::<bool>()))
                .collect();
            if split_counts(&records).is_err() {
                continue;
            }
            // flip correctness of each record by rewriting its true label
            let flipped: Vec<EvalRecord> = records
                .iter()
                .map(|r| {
                    let label = if r.correct { r.predicted + 1 } else { r.predicted };
                    EvalRecord::new(r.confidence, r.predicted, label).unwrap()
                })
                .collect();
            let a = auroc(&records).unwrap();
            let b = auroc(&flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b} != 1");
        }
    }

    #[test]
    fn fpr95_threshold_cases() {
        let mut records = vec![rec(0.9, true), rec(0.8, true), rec(0.7, true), rec(0.6, true)];
        records.push(rec(0.65, false));
        assert_eq!(fpr_at_95_tpr(&records).unwrap(), 1.0);

        let mut records = vec![rec(0.9, true), rec(0.8, true), rec(0.7, true), rec(0.6, true)];
        records.push(rec(0.5, false));
        assert_eq!(fpr_at_95_tpr(&records).unwrap(), 0.0);

        let separated = vec![rec(0.99, true), rec(0.95, true), rec(0.2, false), rec(0.1, false)];
        assert_eq!(fpr_at_95_tpr(&separated).unwrap(), 0.0);
    }

    #[test]
    fn fpr95_non_increasing_when_wrong_confidence_drops() {
        let mut rng = crate::rng::seeded(5);
        for _ in 0..200 {
            let n = rng.random_range(4..12);
            let records: Vec<EvalRecord> = (0..n)
                .map(|_| rec(rng.random::<f64>(), rng.random::<bool>()))
                .collect();
            if split_counts(&records).is_err() {
                continue;
            }
            let target = records.iter().position(|r| !r.correct).unwrap();
            let mut lowered = records.clone();
            lowered[target].confidence *= rng.random::<f64>();
            let a = fpr_at_95_tpr(&records).unwrap();
            let b = fpr_at_95_tpr(&lowered).unwrap();
            assert!(b <= a + 1e-15);
        }
    }

    #[test]
    fn metric_implementations_match_brute_force_oracles() {
        let mut rng = crate::rng::seeded(6);
        let mut checked = 0;
        while checked < 1000 {
            let n = rng.random_range(2..=12);
            // quantized confidences produce plenty of ties
            let records: Vec<EvalRecord> = (0..n)
                .map(|_| rec((rng.random::<f64>() * 6.0).round() / 6.0, rng.random::<bool>()))
                .collect();
            let a = aurc(&risk_coverage_curve(&records).unwrap());
            assert!((a - aurc_brute(&records)).abs() < 1e-12);
            if split_counts(&records).is_ok() {
                assert!((auroc(&records).unwrap() - auroc_brute(&records)).abs() < 1e-12);
                assert!((fpr_at_95_tpr(&records).unwrap() - fpr95_brute(&records)).abs() < 1e-12);
            }
            checked += 1;
        }
    }

    #[test]
    fn accuracy_cases() {
        let all: Vec<EvalRecord> = (0..4).map(|i| rec(0.2 * i as f64, true)).collect();
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let half: Vec<EvalRecord> = (0..10).map(|i| rec(0.05 * i as f64, i % 2 == 0)).collect();
        assert_eq!(accuracy(&half).unwrap(), 0.5);
        let three: Vec<EvalRecord> = (0..4).map(|i| rec(0.2 * i as f64, i != 0)).collect();
        assert_eq!(accuracy(&three).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn balanced_accuracy_weights_classes_equally() {
        // class 0: 3 of 3 correct; class 1: 0 of 1 correct → (1 + 0)/2
        let records = vec![
            EvalRecord::new(0.9, 0, 0).unwrap(),
            EvalRecord::new(0.9, 0, 0).unwrap(),
            EvalRecord::new(0.9, 0, 0).unwrap(),
            EvalRecord::new(0.9, 0, 1).unwrap(),
        ];
        assert_eq!(balanced_accuracy(&records).unwrap(), 0.5);
        assert_eq!(accuracy(&records).unwrap(), 0.75);
    }

    #[test]
    fn perfect_accuracy_means_zero_aurc() {
        let mut rng = crate::rng::seeded(7);
        let records: Vec<EvalRecord> = (0..50).map(|_| rec(rng.random::<f64>(), true)).collect();
        assert_eq!(accuracy(&records).unwrap(), 1.0);
        assert_eq!(aurc(&risk_coverage_curve(&records).unwrap()), 0.0);
    }

    #[test]
    fn report_handles_degenerate_splits() {
        let records: Vec<EvalRecord> = (0..5).map(|i| rec(0.1 * i as f64 + 0.2, true)).collect();
        let rep = compute_report(&records).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(rep.aurc, 0.0);
        assert!(rep.auroc.is_none() && rep.fpr95.is_none());
    }

    #[test]
    fn prediction_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let records = vec![
            EvalRecord::new(0.9125, 3, 3).unwrap(),
            EvalRecord::new(0.4, 1, 7).unwrap(),
            EvalRecord::new(1.0 / 3.0, 0, 0).unwrap(),
        ];
        write_prediction_dump(&records, &path).unwrap();
        let loaded = read_prediction_dump(&path).unwrap();
        assert_eq!(loaded, records);

        std::fs::write(&path, "confidence,predicted,true_label\n0.5,1,1\n").unwrap();
        let with_header = read_prediction_dump(&path).unwrap();
        assert_eq!(with_header.len(), 1);

        std::fs::write(&path, "0.5,1\n").unwrap();
        assert!(read_prediction_dump(&path).is_err());
        std::fs::write(&path, "1.5,1,1\n").unwrap();
        assert!(read_prediction_dump(&path).is_err());
    }
}
