//! Pixel confusion counts and the segmentation scores derived from them.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, o: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Binarizes `pred` at `threshold` (strictly greater is foreground) and
/// counts against `truth` (foreground where >= 0.5).
pub fn confusion<T: Element>(pred: &Tensor<T>, truth: &Tensor<T>, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "confusion",
            lhs: pred.shape(),
            rhs: truth.shape(),
        });
    }
    Ok(confusion_slices(pred.data(), truth.data(), threshold))
}

pub(crate) fn confusion_slices<T: Element>(pred: &[T], truth: &[T], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p.as_f64() > threshold, t.as_f64() >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f2: f64,
}

/// `num / den`, with an empty denominator scored 1 when both masks are empty
/// and 0 otherwise.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricRow {
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    let precision = ratio(c.tp, c.tp + c.fp, both_empty);
    let recall = ratio(c.tp, c.tp + c.fn_, both_empty);
    let f2 = if both_empty {
        1.0
    } else if precision + recall == 0.0 {
        0.0
    } else {
        5.0 * precision * recall / (4.0 * precision + recall)
    };
    MetricRow {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, both_empty),
        precision,
        recall,
        specificity: ratio(c.tn, c.tn + c.fp, c.tn + c.fp == 0),
        accuracy: ratio(c.tp + c.tn, c.total(), true),
        f2,
    }
}

impl MetricRow {
    pub fn mean(rows: &[MetricRow]) -> Option<MetricRow> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let s = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(MetricRow {
            dsc: s(|r| r.dsc),
            iou: s(|r| r.iou),
            precision: s(|r| r.precision),
            recall: s(|r| r.recall),
            specificity: s(|r| r.specificity),
            accuracy: s(|r| r.accuracy),
            f2: s(|r| r.f2),
        })
    }
}

/// Per-sample counts for an (N, C, H, W) prediction/truth pair.
pub fn per_sample_confusion<T: Element>(pred: &Tensor<T>, truth: &Tensor<T>, threshold: f64) -> Result<Vec<ConfusionCounts>> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "confusion",
            lhs: pred.shape(),
            rhs: truth.shape(),
        });
    }
    Ok((0..pred.shape().n)
        .map(|n| confusion_slices(pred.sample(n), truth.sample(n), threshold))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Unweighted mean over images.
    #[default]
    MeanOverImages,
    /// Counts summed over every pixel of the set, then scored once.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    /// Summary of per-iteration wall times in seconds.
    pub fn from_seconds(samples: &[f64]) -> Option<LatencyStats> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(LatencyStats {
            iterations: n,
            mean_ms: mean * 1e3,
            median_ms: median * 1e3,
            p95_ms: s[rank - 1] * 1e3,
            fps: 1.0 / mean,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub parameters: usize,
    pub rows: Vec<ImageRow>,
    pub skipped: Vec<(String, String)>,
    pub aggregation: Aggregation,
    pub aggregate: Option<MetricRow>,
    pub latency: Option<LatencyStats>,
}

impl MetricsReport {
    pub fn new(parameters: usize, rows: Vec<ImageRow>, skipped: Vec<(String, String)>, aggregation: Aggregation) -> Self {
        let aggregate = match aggregation {
            Aggregation::MeanOverImages => MetricRow::mean(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>()),
            Aggregation::Pooled => {
                let total = rows.iter().fold(ConfusionCounts::default(), |a, r| a.merge(&r.counts));
                (!rows.is_empty()).then(|| compute_metrics(&total))
            }
        };
        MetricsReport {
            parameters,
            rows,
            skipped,
            aggregation,
            aggregate,
            latency: None,
        }
    }

    const HEADER: [&'static str; 8] = ["Parameters", "DSC", "mIoU", "Recall", "Precision", "F2", "Accuracy", "FPS"];

    fn summary_cells(&self) -> [String; 8] {
        let a = self.aggregate;
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        [
            self.parameters.to_string(),
            f(a.map(|r| r.dsc)),
            f(a.map(|r| r.iou)),
            f(a.map(|r| r.recall)),
            f(a.map(|r| r.precision)),
            f(a.map(|r| r.f2)),
            f(a.map(|r| r.accuracy)),
            self.latency.map_or_else(|| "-".to_string(), |l| format!("{:.2}", l.fps)),
        ]
    }

    /// CSV: one row per image, then an aggregate row with id `mean` (or
    /// `pooled`). The summary columns follow the table order.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Other(format!("csv: {e}"));
        w.write_record([
            "image",
            "Parameters",
            "DSC",
            "mIoU",
            "Recall",
            "Precision",
            "F2",
            "Accuracy",
            "FPS",
            "Specificity",
            "tp",
            "fp",
            "tn",
            "fn",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.id.clone(),
                self.parameters.to_string(),
                format!("{:.6}", m.dsc),
                format!("{:.6}", m.iou),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.f2),
                format!("{:.6}", m.accuracy),
                String::new(),
                format!("{:.6}", m.specificity),
                r.counts.tp.to_string(),
                r.counts.fp.to_string(),
                r.counts.tn.to_string(),
                r.counts.fn_.to_string(),
            ])
            .map_err(csv_err)?;
        }
        if let Some(m) = &self.aggregate {
            let id = match self.aggregation {
                Aggregation::MeanOverImages => "mean",
                Aggregation::Pooled => "pooled",
            };
            w.write_record([
                id.to_string(),
                self.parameters.to_string(),
                format!("{:.6}", m.dsc),
                format!("{:.6}", m.iou),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.f2),
                format!("{:.6}", m.accuracy),
                self.latency.map_or_else(String::new, |l| format!("{:.4}", l.fps)),
                format!("{:.6}", m.specificity),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Other(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Aligned single-row summary in the table column order.
    pub fn pretty(&self) -> String {
        let cells = self.summary_cells();
        let widths: Vec<usize> = Self::HEADER.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let mut s = String::new();
        for (h, w) in Self::HEADER.iter().zip(&widths) {
            let _ = write!(s, "{h:>w$}  ");
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, "{c:>w$}  ");
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "skipped {} image(s)", self.skipped.len());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn hand_table() {
        let m = compute_metrics(&counts(1, 1, 1, 1));
        assert_eq!(m.dsc, 0.5);
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.f2, 0.5);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn empty_mask_conventions() {
        let m = compute_metrics(&counts(0, 0, 0, 16));
        assert_eq!((m.dsc, m.iou, m.precision, m.recall, m.f2), (1.0, 1.0, 1.0, 1.0, 1.0));
        let m = compute_metrics(&counts(0, 3, 0, 13));
        assert_eq!((m.dsc, m.iou, m.precision), (0.0, 0.0, 0.0));
        assert_eq!(m.recall, 0.0);
        let m = compute_metrics(&counts(0, 0, 4, 12));
        assert_eq!((m.dsc, m.precision, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn confusion_threshold_cases() {
        let t = Tensor::<f32>::zeros((1, 1, 4, 4));
        let p = Tensor::full((1, 1, 4, 4), 0.6f32);
        assert_eq!(confusion(&p, &t, 0.5).unwrap().fp, 16);
        assert_eq!(confusion(&t, &t, 0.5).unwrap(), counts(0, 0, 0, 16));
        assert!(confusion(&p, &Tensor::zeros((1, 1, 4, 3)), 0.5).is_err());
    }

    #[test]
    fn latency_stats() {
        let l = LatencyStats::from_seconds(&[0.3, 0.1, 0.2, 0.4]).unwrap();
        assert!((l.median_ms - 250.0).abs() < 1e-9);
        assert!((l.fps - 4.0).abs() < 1e-9);
        assert!((l.p95_ms - 400.0).abs() < 1e-9);
    }

    #[test]
    fn pretty_has_column_order() {
        let r = MetricsReport::new(10, vec![], vec![], Aggregation::MeanOverImages);
        let first = r.pretty().lines().next().unwrap().split_whitespace().collect::<Vec<_>>().join(",");
        assert_eq!(first, "Parameters,DSC,mIoU,Recall,Precision,F2,Accuracy,FPS");
    }
}
