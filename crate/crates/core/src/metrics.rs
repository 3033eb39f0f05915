//! Threshold metrics, AUROC and ROC export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "scores vs labels",
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::invalid(format!("label {bad} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    Ok((pos, labels.len() as u64 - pos))
}

fn require_both(pos: u64, neg: u64) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both classes present"));
    }
    Ok(())
}

/// Tie groups of `scores` in descending order, as (positives, negatives) per group.
fn descending_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let (s, y) = (scores[i], labels[i]);
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if y == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, u64::from(y == 1), u64::from(y != 1))),
        }
    }
    groups
}

/// Twice the Mann-Whitney U of the positives: `2 * (#pos > neg) + #ties`.
fn doubled_u(groups: &[(f64, u64, u64)]) -> u64 {
    // Walking from the top score down, each positive outranks every negative
    // in later groups and ties the negatives in its own group.
    let total_neg: u64 = groups.iter().map(|g| g.2).sum();
    let mut neg_seen = 0;
    let mut acc = 0;
    for &(_, p, n) in groups {
        acc += p * (2 * (total_neg - neg_seen - n) + n);
        neg_seen += n;
    }
    acc
}

/// Rank-based AUROC: `P(score+ > score-) + P(tie) / 2`. O(n log n).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    require_both(pos, neg)?;
    let u2 = doubled_u(&descending_groups(scores, labels));
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (fpr, tpr) from (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<(f64, f64)>,
    /// Trapezoid area, accumulated in integers so it equals [`auroc`] exactly.
    pub area: f64,
}

pub fn roc_export(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    require_both(pos, neg)?;
    let groups = descending_groups(scores, labels);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut doubled_area = 0u64;
    for &(_, p, n) in &groups {
        let (tp0, fp0) = (tp, fp);
        tp += p;
        fp += n;
        doubled_area += (fp - fp0) * (tp + tp0);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        area: doubled_area as f64 / (2 * pos * neg) as f64,
    })
}

/// Floating-point trapezoid rule over arbitrary ROC points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn roc_to_csv(points: &[(f64, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in points {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_roc_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    crate::io::write_atomic(path, &roc_to_csv(points)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    /// Ratio metrics are `None` when their denominator is zero.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    /// `None` when only one class is present.
    pub auroc: Option<f64>,
    pub roc_points: Vec<(f64, f64)>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion_and_rates(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (auroc, roc_points) = if pos > 0 && neg > 0 {
        let roc = roc_export(scores, labels)?;
        (Some(roc.area), roc.points)
    } else {
        (None, Vec::new())
    };
    Ok(EvalReport {
        n: scores.len(),
        threshold,
        tp,
        fp,
        tn,
        fn_,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
        auroc,
        roc_points,
    })
}

impl EvalReport {
    /// Rates for fixed counts, without scores (no AUROC or ROC).
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64, threshold: f64) -> Self {
        let n = tp + fp + tn + fn_;
        EvalReport {
            n: n as usize,
            threshold,
            tp,
            fp,
            tn,
            fn_,
            accuracy: if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 },
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            ppv: ratio(tp, tp + fp),
            npv: ratio(tn, tn + fn_),
            auroc: None,
            roc_points: Vec::new(),
        }
    }

    /// Human-readable summary with rates as percentages.
    pub fn summary(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{:.2}%", 100.0 * x));
        format!(
            "n={} threshold={} tp={} fp={} tn={} fn={}\naccuracy {:.2}%  sensitivity {}  specificity {}  ppv {}  npv {}  auroc {}",
            self.n,
            self.threshold,
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            100.0 * self.accuracy,
            pct(self.sensitivity),
            pct(self.specificity),
            pct(self.ppv),
            pct(self.npv),
            self.auroc.map_or("undefined".to_string(), |a| format!("{:.4}", a)),
        )
    }
}

/// Per-participant scores: mean sample score, with the participant labelled
/// positive if any sample is. Output is ordered by participant id.
pub fn aggregate_by_participant(participants: &[&str], scores: &[f64], labels: &[u8]) -> Result<(Vec<String>, Vec<f64>, Vec<u8>)> {
    if participants.len() != scores.len() || scores.len() != labels.len() {
        return Err(Error::invalid("participant, score and label lengths differ"));
    }
    let mut acc: BTreeMap<&str, (f64, usize, u8)> = BTreeMap::new();
    for ((p, s), y) in participants.iter().zip(scores).zip(labels) {
        let e = acc.entry(p).or_insert((0.0, 0, 0));
        e.0 += s;
        e.1 += 1;
        e.2 = e.2.max(*y);
    }
    let mut ids = Vec::new();
    let mut out_s = Vec::new();
    let mut out_y = Vec::new();
    for (p, (s, n, y)) in acc {
        ids.push(p.to_string());
        out_s.push(s / n as f64);
        out_y.push(y);
    }
    Ok((ids, out_s, out_y))
}
