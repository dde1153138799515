//! Balanced accuracy, F1 and ROC AUC for binary scores.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{metric} is undefined: {reason}")]
    Undefined { metric: &'static str, reason: String },
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("score {0} is outside [0, 1]")]
    Score(f64),
    #[error("label {0} is not 0 or 1")]
    Label(u8),
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    scores: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
    confusion: Confusion,
}

impl EvalResult {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        Self::with_threshold(scores, labels, DEFAULT_THRESHOLD)
    }

    pub fn with_threshold(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::Length {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(MetricError::Score(s));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(MetricError::Label(l));
        }
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(&labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(Self {
            scores,
            labels,
            threshold,
            confusion: c,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn confusion(&self) -> Confusion {
        self.confusion
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self, metric: &'static str) -> Result<(usize, usize), MetricError> {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(MetricError::Undefined {
                metric,
                reason: "labels contain a single class".into(),
            });
        }
        Ok((pos, neg))
    }
}

pub fn bacc(r: &EvalResult) -> Result<f64, MetricError> {
    r.class_counts("bacc")?;
    let c = r.confusion;
    let sens = c.tp as f64 / (c.tp + c.fn_) as f64;
    let spec = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok((sens + spec) / 2.0)
}

pub fn f1(r: &EvalResult) -> Result<f64, MetricError> {
    let c = r.confusion;
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Err(MetricError::Undefined {
            metric: "f1",
            reason: "no positive labels or predictions".into(),
        });
    }
    Ok(2.0 * c.tp as f64 / denom as f64)
}

/// Mann–Whitney AUC with ties counted as one half.
///
/// Runs in `O(n log n)`: samples are ranked by score and each tie group of
/// positives is credited with half of the negatives in the same group.
pub fn auc(r: &EvalResult) -> Result<f64, MetricError> {
    let (pos, neg) = r.class_counts("auc")?;
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r.scores[a].total_cmp(&r.scores[b]));
    // twice the pair credit keeps the sum integral
    let mut credit2: u128 = 0;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && r.scores[order[j]] == r.scores[order[i]] {
            if r.labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        credit2 += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(credit2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Area under the ROC polyline by the trapezoid rule, thresholds swept from
/// the highest score down.
pub fn auc_trapezoid(r: &EvalResult) -> Result<f64, MetricError> {
    let (pos, neg) = r.class_counts("auc")?;
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r.scores[b].total_cmp(&r.scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = r.scores[order[i]];
        while i < order.len() && r.scores[order[i]] == s {
            if r.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub bacc: f64,
    pub f1: f64,
    pub auc: f64,
}

impl MetricSummary {
    pub fn compute(r: &EvalResult) -> Result<Self, MetricError> {
        Ok(Self {
            bacc: bacc(r)?,
            f1: f1(r)?,
            auc: auc(r)?,
        })
    }
}

pub const METRICS_CSV_HEADER: &str = "run_id,strategy,seed,bacc,f1,auc,trainable_params,total_params";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub metrics: MetricSummary,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl MetricRow {
    /// Metrics use the shortest decimal form that round-trips to the same `f64`.
    pub fn to_csv_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{}",
            self.run_id,
            self.strategy,
            self.seed,
            self.metrics.bacc,
            self.metrics.f1,
            self.metrics.auc,
            self.trainable_params,
            self.total_params
        )
        .unwrap();
        s
    }
}

/// Merges `rows` into an existing metrics table, replacing rows with the same
/// `run_id` and keeping the result sorted by `run_id`.
pub fn merge_metric_rows(existing: &str, rows: &[MetricRow]) -> String {
    let mut lines: std::collections::BTreeMap<String, String> = existing
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| l.split(',').next().map(|id| (id.to_string(), l.to_string())))
        .collect();
    for r in rows {
        lines.insert(r.run_id.clone(), r.to_csv_line());
    }
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for l in lines.values() {
        out.push_str(l);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(scores: &[f64], labels: &[u8]) -> EvalResult {
        EvalResult::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn spec_examples() {
        let r = result(&[1.0, 0.0, 0.0, 0.0], &[1, 1, 0, 0]);
        assert_eq!(bacc(&r).unwrap(), 0.75);
        assert_eq!(f1(&r).unwrap(), 2.0 / 3.0);
        let r = result(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert_eq!(auc(&r).unwrap(), 0.75);
        let r = result(&[0.3; 4], &[0, 1, 0, 1]);
        assert_eq!(auc(&r).unwrap(), 0.5);
        let r = result(&[0.9; 4], &[0, 1, 0, 1]);
        assert_eq!(bacc(&r).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_inputs() {
        let r = result(&[0.2, 0.9], &[1, 1]);
        assert!(bacc(&r).is_err());
        assert!(auc(&r).is_err());
        let r = result(&[0.2, 0.1], &[0, 0]);
        assert!(f1(&r).is_err());
        let r = result(&[0.2, 0.9], &[1, 0]);
        assert_eq!(f1(&r).unwrap(), 0.0);
        assert!(EvalResult::new(vec![1.5], vec![1]).is_err());
        assert!(EvalResult::new(vec![0.5], vec![2]).is_err());
        assert!(EvalResult::new(vec![0.5], vec![]).is_err());
    }

    #[test]
    fn csv_merge_is_keyed_and_sorted() {
        let row = |id: &str, auc: f64| MetricRow {
            run_id: id.into(),
            strategy: "pt".into(),
            seed: 0,
            metrics: MetricSummary { bacc: 0.5, f1: 0.5, auc },
            trainable_params: 10,
            total_params: 100,
        };
        let a = merge_metric_rows("", &[row("b", 0.6), row("a", 0.7)]);
        let b = merge_metric_rows(&a, &[row("b", 0.9)]);
        let lines: Vec<_> = b.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("b,") && lines[2].contains(",0.9,"));
        assert_eq!(merge_metric_rows(&b, &[]), b);
    }
}
