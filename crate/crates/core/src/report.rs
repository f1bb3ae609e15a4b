//! Classification metrics (accuracy, precision, recall, F-measure, AUC),
//! aggregation across runs, and machine-readable result emission with
//! best/second-best marking per column.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Counts at the given threshold; a probability equal to the threshold
/// predicts positive.
pub fn confusion(labels: &[f64], probabilities: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    if labels.is_empty() || labels.len() != probabilities.len() {
        return Err(Error::InvalidData("confusion needs equal, non-empty inputs".into()));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&y, &p) in labels.iter().zip(probabilities) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::BadLabel(y));
        }
        let pred_pos = p >= threshold;
        match (y == 1.0, pred_pos) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Threshold metrics. Precision of a model that predicts no positives is
/// defined as 0 and flagged degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub degenerate_precision: bool,
}

pub fn metrics(c: &ConfusionCounts) -> ThresholdMetrics {
    let total = c.total() as f64;
    let accuracy = (c.tp + c.tn) as f64 / total;
    let (precision, degenerate) = if c.tp + c.fp == 0 {
        (0.0, true)
    } else {
        (c.tp as f64 / (c.tp + c.fp) as f64, false)
    };
    let recall = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ThresholdMetrics { accuracy, precision, recall, f_measure, degenerate_precision: degenerate }
}

/// Rank-based (Mann-Whitney) AUC; tied scores contribute one half.
pub fn auc(labels: &[f64], probabilities: &[f64]) -> Result<f64> {
    if labels.len() != probabilities.len() || labels.is_empty() {
        return Err(Error::InvalidData("auc needs equal, non-empty inputs".into()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&y, &p) in labels.iter().zip(probabilities) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::BadLabel(y));
        }
        if y == 1.0 {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    // rank statistic via sorting: U / (n_pos * n_neg)
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&p| (p, true))
        .chain(neg.iter().map(|&p| (p, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut u = 0.0;
    let mut i = 0usize;
    let mut neg_seen = 0.0f64;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let tie_pos = all[i..j].iter().filter(|(_, is_pos)| *is_pos).count() as f64;
        let tie_neg = (j - i) as f64 - tie_pos;
        u += tie_pos * (neg_seen + tie_neg / 2.0);
        neg_seen += tie_neg;
        i = j;
    }
    Ok(u / (pos.len() as f64 * neg.len() as f64))
}

/// One evaluated model: the five metrics of a single run/fold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricValues {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub auc: f64,
}

impl MetricValues {
    pub fn as_array(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.f_measure, self.auc]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { accuracy: a[0], precision: a[1], recall: a[2], f_measure: a[3], auc: a[4] }
    }
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "precision", "recall", "f_measure", "auc"];

/// Aggregated row: per-metric mean and population standard deviation across
/// runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub mean: MetricValues,
    pub std: MetricValues,
    pub runs: usize,
}

/// Unweighted mean and population standard deviation over rows.
pub fn aggregate(variant: &str, rows: &[MetricValues]) -> Result<MetricsRow> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; 5];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.as_array()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 5];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.as_array()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Ok(MetricsRow {
        variant: variant.to_string(),
        mean: MetricValues::from_array(mean),
        std: MetricValues::from_array([var[0].sqrt(), var[1].sqrt(), var[2].sqrt(), var[3].sqrt(), var[4].sqrt()]),
        runs: rows.len(),
    })
}

/// Evaluates probabilities against labels at threshold 0.5.
pub fn evaluate(labels: &[f64], probabilities: &[f64]) -> Result<MetricValues> {
    let c = confusion(labels, probabilities, 0.5)?;
    let m = metrics(&c);
    Ok(MetricValues {
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f_measure: m.f_measure,
        auc: auc(labels, probabilities)?,
    })
}

/// Per-column ranking marks mirroring a results table: `**` for the best
/// value, `*` for the second best.
fn rank_marks(rows: &[MetricsRow]) -> Vec<[&'static str; 5]> {
    let mut marks = vec![[""; 5]; rows.len()];
    for col in 0..5 {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            rows[b].mean.as_array()[col]
                .partial_cmp(&rows[a].mean.as_array()[col])
                .unwrap()
        });
        if let Some(&best) = order.first() {
            marks[best][col] = "**";
        }
        if let Some(&second) = order.get(1) {
            marks[second][col] = "*";
        }
    }
    marks
}

/// Emitted result files: `results.csv` and `results.json`.
///
/// CSV columns: `variant, accuracy, accuracy_std, precision, precision_std,
/// recall, recall_std, f_measure, f_measure_std, auc, auc_std, best_marks,
/// runs, config_hash`. `best_marks` packs the per-column ranking as five
/// slots separated by `|` (`**` best, `*` second best).
pub fn emit(rows: &[MetricsRow], out_dir: &Path, config_hash: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir)?;
    let marks = rank_marks(rows);
    let mut csv = String::new();
    csv.push_str("variant");
    for name in METRIC_NAMES {
        csv.push_str(&format!(",{name},{name}_std"));
    }
    csv.push_str(",best_marks,runs,config_hash\n");
    for (row, mark) in rows.iter().zip(&marks) {
        csv.push_str(&row.variant);
        for (m, s) in row.mean.as_array().iter().zip(row.std.as_array()) {
            csv.push_str(&format!(",{m:.6},{s:.6}"));
        }
        csv.push_str(&format!(",{}|{}|{}|{}|{}", mark[0], mark[1], mark[2], mark[3], mark[4]));
        csv.push_str(&format!(",{},{}\n", row.runs, config_hash));
    }
    std::fs::write(out_dir.join("results.csv"), &csv)?;

    #[derive(Serialize)]
    struct JsonRow<'a> {
        variant: &'a str,
        mean: &'a MetricValues,
        std: &'a MetricValues,
        best_marks: Vec<&'static str>,
        runs: usize,
    }
    #[derive(Serialize)]
    struct JsonOut<'a> {
        config_hash: &'a str,
        rows: Vec<JsonRow<'a>>,
    }
    let json = JsonOut {
        config_hash,
        rows: rows
            .iter()
            .zip(&marks)
            .map(|(r, m)| JsonRow {
                variant: &r.variant,
                mean: &r.mean,
                std: &r.std,
                best_marks: m.to_vec(),
                runs: r.runs,
            })
            .collect(),
    };
    std::fs::write(out_dir.join("results.json"), serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

/// Parses a `results.csv` produced by [`emit`].
pub fn parse_results_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidData("empty results file".into()))?;
    if !header.starts_with("variant,accuracy") {
        return Err(Error::InvalidData(format!("unexpected header: {header}")));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 14 {
            return Err(Error::InvalidData(format!("bad results row: {line}")));
        }
        let p = |i: usize| -> Result<f64> {
            parts[i]
                .parse::<f64>()
                .map_err(|e| Error::InvalidData(format!("bad number {}: {e}", parts[i])))
        };
        out.push(MetricsRow {
            variant: parts[0].to_string(),
            mean: MetricValues::from_array([p(1)?, p(3)?, p(5)?, p(7)?, p(9)?]),
            std: MetricValues::from_array([p(2)?, p(4)?, p(6)?, p(8)?, p(10)?]),
            runs: parts[12]
                .parse()
                .map_err(|e| Error::InvalidData(format!("bad runs: {e}")))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_basics() {
        let labels = [1.0, 1.0, 0.0, 0.0];
        let probs = [0.9, 0.2, 0.1, 0.8];
        let c = confusion(&labels, &probs, 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });

        // tie at the threshold predicts positive
        let c = confusion(&[1.0], &[0.5], 0.5).unwrap();
        assert_eq!(c.tp, 1);

        assert!(confusion(&[], &[], 0.5).is_err());
        assert!(confusion(&[2.0], &[0.5], 0.5).is_err());
    }

    #[test]
    fn confusion_matches_loop_oracle() {
        let labels: Vec<f64> = (0..50).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let probs: Vec<f64> = (0..50).map(|i| ((i as f64 * 0.37).sin() + 1.0) / 2.0).collect();
        let c = confusion(&labels, &probs, 0.5).unwrap();
        let mut oracle = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
        for i in 0..50 {
            match (labels[i] == 1.0, probs[i] >= 0.5) {
                (true, true) => oracle.tp += 1,
                (true, false) => oracle.fn_ += 1,
                (false, true) => oracle.fp += 1,
                (false, false) => oracle.tn += 1,
            }
        }
        assert_eq!(c, oracle);
        assert_eq!(c.total(), 50);
    }

    #[test]
    fn metric_formulas() {
        let m = metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 2 });
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f_measure - 2.0 / 3.0).abs() < 1e-12);
        assert!(!m.degenerate_precision);

        let perfect = metrics(&ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 4 });
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.precision, 1.0);
        assert_eq!(perfect.recall, 1.0);
        assert_eq!(perfect.f_measure, 1.0);

        let degen = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 2, tn: 5 });
        assert_eq!(degen.precision, 0.0);
        assert!(degen.degenerate_precision);
    }

    #[test]
    fn auc_known_cases() {
        let perfect = auc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.2, 0.8, 0.9]).unwrap();
        assert_eq!(perfect, 1.0);
        let ties = auc(&[0.0, 1.0, 0.0, 1.0], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(ties, 0.5);
        assert!(auc(&[1.0, 1.0], &[0.3, 0.4]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let labels: Vec<f64> = (0..40).map(|i| ((i * 13) % 5 < 2) as u8 as f64).collect();
        let probs: Vec<f64> = (0..40)
            .map(|i| {
                let v = ((i as f64 * 0.61).cos() + 1.0) / 2.0;
                (v * 10.0).round() / 10.0 // coarse grid to force ties
            })
            .collect();
        let got = auc(&labels, &probs).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..40 {
            if labels[i] != 1.0 {
                continue;
            }
            for j in 0..40 {
                if labels[j] != 0.0 {
                    continue;
                }
                den += 1.0;
                if probs[i] > probs[j] {
                    num += 1.0;
                } else if probs[i] == probs[j] {
                    num += 0.5;
                }
            }
        }
        assert!((got - num / den).abs() < 1e-12);
    }

    #[test]
    fn auc_is_rank_invariant() {
        let labels: Vec<f64> = (0..30).map(|i| (i % 2) as f64).collect();
        let probs: Vec<f64> = (0..30).map(|i| ((i as f64 * 0.7).sin() + 1.1) / 2.3).collect();
        let base = auc(&labels, &probs).unwrap();
        let squashed: Vec<f64> = probs.iter().map(|&p| 1.0 / (1.0 + (-5.0 * p).exp())).collect();
        let got = auc(&labels, &squashed).unwrap();
        assert!((base - got).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rules() {
        let one = MetricValues::from_array([0.7, 0.6, 0.5, 0.55, 0.8]);
        let row = aggregate("m", &[one]).unwrap();
        assert_eq!(row.std.as_array(), [0.0; 5]);

        let row = aggregate("m", &[one, one, one]).unwrap();
        assert_eq!(row.std.as_array(), [0.0; 5]);

        // two-value case against the hand formula
        let a = MetricValues::from_array([0.6, 0.6, 0.6, 0.6, 0.6]);
        let b = MetricValues::from_array([0.8, 0.8, 0.8, 0.8, 0.8]);
        let row = aggregate("m", &[a, b]).unwrap();
        assert!((row.mean.accuracy - 0.7).abs() < 1e-12);
        assert!((row.std.accuracy - 0.1).abs() < 1e-12);

        // permutation invariance of the mean
        let c = MetricValues::from_array([0.5, 0.2, 0.9, 0.4, 0.7]);
        let r1 = aggregate("m", &[a, b, c]).unwrap();
        let r2 = aggregate("m", &[c, a, b]).unwrap();
        assert_eq!(r1.mean.as_array(), r2.mean.as_array());

        assert!(aggregate("m", &[]).is_err());
    }

    #[test]
    fn emit_roundtrip_and_marking() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            aggregate("alpha", &[MetricValues::from_array([0.7, 0.7, 0.7, 0.7, 0.7])]).unwrap(),
            aggregate("bravo", &[MetricValues::from_array([0.9, 0.6, 0.8, 0.75, 0.85])]).unwrap(),
            aggregate("charlie", &[MetricValues::from_array([0.8, 0.65, 0.9, 0.7, 0.6])]).unwrap(),
        ];
        emit(&rows, dir.path(), "cfg123").unwrap();
        let back = parse_results_csv(&dir.path().join("results.csv")).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.variant, b.variant);
            for (x, y) in a.mean.as_array().iter().zip(b.mean.as_array()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        // best marking matches an argmax oracle on the accuracy column
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let bravo_line = csv.lines().find(|l| l.starts_with("bravo")).unwrap();
        assert!(bravo_line.contains("**"));
        let json = std::fs::read_to_string(dir.path().join("results.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["rows"][1]["best_marks"][0], "**");
        assert_eq!(v["rows"][2]["best_marks"][0], "*");
    }
}
