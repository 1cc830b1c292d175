//! Timeline metrics: per-step confusion scores, early- and
//! consistency-weighted F1, confident time.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

/// One address's predicted probabilities over the timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    pub address: String,
    pub label: u8,
    pub p: Vec<f64>,
}

impl PredictionTrace {
    pub fn decisions(&self) -> Vec<u8> {
        self.p.iter().map(|&p| u8::from(p > THRESHOLD)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub t: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of addresses whose decision at `t` equals the one at `t + 1`.
    /// 1.0 at the last step.
    pub consistent: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(truth: &[u8], pred: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, _) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        if n == 0 { 0.0 } else { (self.tp + self.tn) as f64 / n as f64 }
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

fn check_traces(traces: &[PredictionTrace]) -> Result<usize> {
    let n = traces.first().map(|t| t.p.len()).unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    if let Some(bad) = traces.iter().find(|t| t.p.len() != n) {
        return Err(Error::InvalidInput(format!(
            "address {} has {} steps, expected {n}",
            bad.address,
            bad.p.len()
        )));
    }
    Ok(n)
}

pub fn timeline_metrics(traces: &[PredictionTrace]) -> Result<Vec<StepScores>> {
    let n = check_traces(traces)?;
    let truth: Vec<u8> = traces.iter().map(|t| t.label).collect();
    let decisions: Vec<Vec<u8>> = traces.iter().map(|t| t.decisions()).collect();
    Ok((0..n)
        .map(|i| {
            let pred: Vec<u8> = decisions.iter().map(|d| d[i]).collect();
            let c = Confusion::from_pairs(&truth, &pred);
            let consistent = if i + 1 < n {
                decisions.iter().filter(|d| d[i] == d[i + 1]).count() as f64 / decisions.len() as f64
            } else {
                1.0
            };
            StepScores {
                t: i + 1,
                accuracy: c.accuracy(),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                consistent,
            }
        })
        .collect())
}

/// Σ F1_i/√i ÷ Σ 1/√i over i = 1..N.
pub fn f1_early(f1: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &f) in f1.iter().enumerate() {
        let w = 1.0 / ((i + 1) as f64).sqrt();
        num += f * w;
        den += w;
    }
    if den == 0.0 { 0.0 } else { num / den }
}

/// Σ √i·F1_i·c_i ÷ Σ √i over i = 1..N−1, `c_i` the consistent fraction.
pub fn f1_consistency(f1: &[f64], consistent: &[f64]) -> f64 {
    let n = f1.len().min(consistent.len());
    if n < 2 {
        return f1.first().copied().unwrap_or(0.0) * consistent.first().copied().unwrap_or(1.0);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n - 1 {
        let w = ((i + 1) as f64).sqrt();
        num += w * f1[i] * consistent[i];
        den += w;
    }
    num / den
}

/// Smallest 1-based step from which the decision never changes and equals
/// the label. `None` when the final decision is wrong.
pub fn confident_time(decisions: &[u8], label: u8) -> Option<usize> {
    if decisions.last() != Some(&label) {
        return None;
    }
    let wrong = decisions.iter().rposition(|&d| d != label);
    Some(wrong.map_or(1, |i| i + 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressConfidence {
    pub address: String,
    pub label: u8,
    /// `None` serializes as null ("no-confidence").
    pub t_fc: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub confident: usize,
    pub no_confidence: usize,
    pub median_positive: Option<f64>,
    pub median_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub addresses: usize,
    pub positives: usize,
    pub steps: Vec<StepScores>,
    pub mean_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub f1_early: f64,
    pub f1_consistency: f64,
    pub confidence: ConfidenceSummary,
    pub confident_times: Vec<AddressConfidence>,
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

pub fn evaluate(traces: &[PredictionTrace]) -> Result<EvalReport> {
    let steps = timeline_metrics(traces)?;
    let mean = |f: fn(&StepScores) -> f64| steps.iter().map(f).sum::<f64>() / steps.len() as f64;
    let f1: Vec<f64> = steps.iter().map(|s| s.f1).collect();
    let cons: Vec<f64> = steps.iter().map(|s| s.consistent).collect();
    let confident_times: Vec<AddressConfidence> = traces
        .iter()
        .map(|t| AddressConfidence {
            address: t.address.clone(),
            label: t.label,
            t_fc: confident_time(&t.decisions(), t.label),
        })
        .collect();
    let mut pos: Vec<f64> = confident_times
        .iter()
        .filter(|c| c.label == 1)
        .filter_map(|c| c.t_fc.map(|t| t as f64))
        .collect();
    let mut all: Vec<f64> = confident_times.iter().filter_map(|c| c.t_fc.map(|t| t as f64)).collect();
    let confident = all.len();
    Ok(EvalReport {
        addresses: traces.len(),
        positives: traces.iter().filter(|t| t.label == 1).count(),
        mean_accuracy: mean(|s| s.accuracy),
        mean_precision: mean(|s| s.precision),
        mean_recall: mean(|s| s.recall),
        mean_f1: mean(|s| s.f1),
        f1_early: f1_early(&f1),
        f1_consistency: f1_consistency(&f1, &cons),
        confidence: ConfidenceSummary {
            confident,
            no_confidence: traces.len() - confident,
            median_positive: median(&mut pos),
            median_all: median(&mut all),
        },
        confident_times,
        steps,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// One row per step, then a `mean` row and an `f1_early`/`f1_consistency`
    /// summary row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "accuracy", "precision", "recall", "f1", "consistent"])?;
        for s in &self.steps {
            w.write_record(&[
                s.t.to_string(),
                s.accuracy.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.f1.to_string(),
                s.consistent.to_string(),
            ])?;
        }
        w.write_record(&[
            "mean".to_string(),
            self.mean_accuracy.to_string(),
            self.mean_precision.to_string(),
            self.mean_recall.to_string(),
            self.mean_f1.to_string(),
            String::new(),
        ])?;
        w.write_record(&[
            "f1_early".to_string(),
            String::new(),
            String::new(),
            String::new(),
            self.f1_early.to_string(),
            String::new(),
        ])?;
        w.write_record(&[
            "f1_consistency".to_string(),
            String::new(),
            String::new(),
            String::new(),
            self.f1_consistency.to_string(),
            String::new(),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Writes `address,t,S` rows.
pub fn write_survival_curves(path: &Path, curves: &[(String, Vec<f64>)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut body = String::from("address,t,S\n");
    for (addr, s) in curves {
        for (i, v) in s.iter().enumerate() {
            body.push_str(&format!("{addr},{},{v}\n", i + 1));
        }
    }
    out.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Rank-based ROC AUC with ties counted half.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l == 1).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(addr: &str, label: u8, p: &[f64]) -> PredictionTrace {
        PredictionTrace {
            address: addr.into(),
            label,
            p: p.to_vec(),
        }
    }

    #[test]
    fn perfect_predictor() {
        let t = vec![trace("a", 1, &[0.9; 4]), trace("b", 0, &[0.1; 4])];
        let r = evaluate(&t).unwrap();
        for s in &r.steps {
            assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
        }
        assert_eq!(r.f1_early, 1.0);
        assert_eq!(r.f1_consistency, 1.0);
    }

    #[test]
    fn all_negative_predictor() {
        let t = vec![trace("a", 1, &[0.1; 3]), trace("b", 0, &[0.1; 3]), trace("c", 0, &[0.2; 3])];
        let s = timeline_metrics(&t).unwrap();
        assert!(s.iter().all(|s| s.recall == 0.0 && s.precision == 0.0 && s.f1 == 0.0));
        assert!((s[0].accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn early_weighting() {
        let f1 = [1.0, 0.0, 0.0, 0.0];
        let want = 1.0 / (1.0 + 1.0 / 2f64.sqrt() + 1.0 / 3f64.sqrt() + 0.5);
        assert!((f1_early(&f1) - want).abs() < 1e-15);
        assert!(f1_early(&f1) > 0.25);
    }

    #[test]
    fn late_flip_lowers_consistency_score() {
        let t = vec![
            trace("a", 1, &[0.9, 0.9, 0.9, 0.1]),
            trace("b", 0, &[0.1, 0.1, 0.1, 0.9]),
        ];
        let r = evaluate(&t).unwrap();
        assert!(r.f1_consistency < r.f1_early);
    }

    #[test]
    fn confident_time_cases() {
        assert_eq!(confident_time(&[1, 1, 1], 1), Some(1));
        let mut d = vec![0u8; 8];
        d.extend([1u8; 16]);
        assert_eq!(confident_time(&d, 1), Some(9));
        assert_eq!(confident_time(&[0, 1, 0, 1, 0], 1), None);
        assert_eq!(confident_time(&[], 1), None);
    }

    #[test]
    fn ragged_traces_rejected() {
        let t = vec![trace("a", 1, &[0.9; 4]), trace("b", 0, &[0.1; 3])];
        assert!(evaluate(&t).is_err());
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]), 0.5);
    }

    proptest! {
        #[test]
        fn matches_naive_confusion(
            rows in prop::collection::vec((0u8..2, prop::collection::vec(0.0f64..1.0, 5)), 1..30)
        ) {
            let traces: Vec<PredictionTrace> = rows
                .iter()
                .enumerate()
                .map(|(i, (l, p))| trace(&i.to_string(), *l, p))
                .collect();
            let steps = timeline_metrics(&traces).unwrap();
            for (i, s) in steps.iter().enumerate() {
                let (mut tp, mut fp, mut fneg, mut tn) = (0.0, 0.0, 0.0, 0.0);
                for t in &traces {
                    let pred = t.p[i] >= 0.5;
                    match (t.label == 1, pred) {
                        (true, true) => tp += 1.0,
                        (false, true) => fp += 1.0,
                        (true, false) => fneg += 1.0,
                        (false, false) => tn += 1.0,
                    }
                }
                let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
                let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
                prop_assert!((s.accuracy - (tp + tn) / traces.len() as f64).abs() < 1e-12);
                prop_assert!((s.precision - prec).abs() < 1e-12);
                prop_assert!((s.recall - rec).abs() < 1e-12);
                prop_assert!((s.f1 - f1).abs() < 1e-12);
                for v in [s.accuracy, s.precision, s.recall, s.f1, s.consistent] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn constant_f1_is_fixed_point(c in 0.0f64..1.0, n in 2usize..40) {
            let f1 = vec![c; n];
            prop_assert!((f1_early(&f1) - c).abs() < 1e-12);
            prop_assert!((f1_consistency(&f1, &vec![1.0; n]) - c).abs() < 1e-12);
        }

        #[test]
        fn appending_weighted_value_is_stable(f1 in prop::collection::vec(0.0f64..1.0, 2..30)) {
            let e = f1_early(&f1);
            let mut g = f1.clone();
            g.push(e);
            prop_assert!((f1_early(&g) - e).abs() < 1e-12);
        }
    }
}
