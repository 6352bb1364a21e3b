//! Threshold sweeps over pair scores: ROC and precision-recall curves.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{energy, LabeledPair, SiameseError, SiameseNet};

/// One operating point: pairs scoring strictly below `threshold` are
/// declared the same identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocRow {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Ordered by increasing threshold, from `(0, 0)` to `(1, 1)`.
    pub rows: Vec<RocRow>,
    pub auc: f64,
    /// Accuracy at [`EvalReport::threshold`].
    pub accuracy: f64,
    /// The most accurate threshold, placed midway between neighbouring
    /// observed scores.
    pub threshold: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl EvalReport {
    pub fn roc_points(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.fpr, r.tpr)).collect()
    }

    pub fn pr_points(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.recall, r.precision)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr,precision,recall\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.threshold, r.fpr, r.tpr, r.precision, r.recall).unwrap();
        }
        writeln!(
            out,
            "# auc={} accuracy={} threshold={} positives={} negatives={}",
            self.auc, self.accuracy, self.threshold, self.positives, self.negatives
        )
        .unwrap();
        out
    }
}

/// `(score, same)` for every pair, in input order.
pub fn pair_scores(net: &SiameseNet, pairs: &[LabeledPair]) -> Result<Vec<(f64, bool)>, SiameseError> {
    pairs.par_iter().map(|p| Ok((energy(&net.embed(&p.a)?, &net.embed(&p.b)?)?, p.same))).collect()
}

pub fn eval_roc(net: &SiameseNet, pairs: &[LabeledPair]) -> Result<EvalReport, SiameseError> {
    roc_from_scores(&pair_scores(net, pairs)?)
}

/// Fraction of samples classified correctly by `score < threshold`.
pub fn accuracy_at(samples: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = samples.iter().filter(|(s, same)| (*s < threshold) == *same).count();
    correct as f64 / samples.len() as f64
}

pub fn roc_from_scores(samples: &[(f64, bool)]) -> Result<EvalReport, SiameseError> {
    let positives = samples.iter().filter(|s| s.1).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(SiameseError::SingleClass);
    }
    if samples.iter().any(|s| s.0.is_nan()) {
        return Err(SiameseError::InvalidConfig("NaN score".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let row = |threshold: f64, tp: usize, fp: usize| {
        let tpr = tp as f64 / positives as f64;
        RocRow {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr,
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: tpr,
        }
    };
    let (mut tp, mut fp) = (0, 0);
    let mut rows = Vec::new();
    // operating points paired with a threshold that sits between scores
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut consider = |tp: usize, fp: usize, threshold: f64| {
        let acc = (tp + negatives - fp) as f64 / samples.len() as f64;
        if acc > best.0 {
            best = (acc, threshold);
        }
    };
    let mut i = 0;
    let mut previous: Option<f64> = None;
    while i < sorted.len() {
        let score = sorted[i].0;
        rows.push(row(score, tp, fp));
        consider(tp, fp, previous.map_or(score, |p| p + (score - p) / 2.0));
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        previous = Some(score);
    }
    let top = previous.unwrap();
    let above = top.next_up();
    rows.push(row(above, tp, fp));
    consider(tp, fp, above);

    let auc = rows.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
    Ok(EvalReport { rows, auc, accuracy: best.0, threshold: best.1, positives, negatives })
}
