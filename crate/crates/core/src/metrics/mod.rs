//! Accuracy, precision, recall, F1 and ROC AUC for the crossing class, and
//! per-horizon aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TteBand;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
    pub threshold: f64,
}

fn check_inputs(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not 0 or 1")));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts at `p >= threshold` plus the derived rates. Precision
/// and recall are 0 when undefined, and so is F1 when both are 0. AUC is
/// attached when both classes are present.
pub fn classification_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    check_inputs(probs, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let auc = match auc_roc(probs, labels) {
        Ok(a) => Some(a),
        Err(Error::Metric(_)) if tp + fn_ == 0 || tn + fp == 0 => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        n: probs.len(),
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, probs.len()),
        precision,
        recall,
        f1,
        auc,
        threshold,
    })
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)`, ties counting 1/2.
///
/// Scores are ranked with average ranks for ties, so the cost is
/// `O(n log n)`. A single-class label set is an error.
pub fn auc_roc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // sum of positive ranks, doubled to stay in integers
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean (i + j + 2) / 2
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += pos_in_tie * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = R - p(p+1)/2, all doubled
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// One row of a horizon sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub band: TteBand,
    pub report: MetricsReport,
}

/// Rows sorted by band; rendered as line-delimited JSON, a text table and
/// a plot series `(band midpoint in frames, accuracy, f1, auc)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub rows: Vec<HorizonRow>,
}

pub fn horizon_report(rows: Vec<(TteBand, MetricsReport)>) -> HorizonReport {
    let mut rows: Vec<HorizonRow> = rows
        .into_iter()
        .map(|(band, report)| HorizonRow { band, report })
        .collect();
    rows.sort_by_key(|r| r.band);
    HorizonReport { rows }
}

impl HorizonReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut value = serde_json::to_value(&r.report).expect("report serializes");
            value["band"] = serde_json::Value::String(r.band.to_string());
            out.push_str(&value.to_string());
            out.push('\n');
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::from("band      n      acc     f1      auc\n");
        for r in &self.rows {
            let auc = r.report.auc.map_or("   -  ".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:<8} {:>5}  {:.4}  {:.4}  {}",
                r.band.to_string(),
                r.report.n,
                r.report.accuracy,
                r.report.f1,
                auc
            );
        }
        out
    }

    pub fn series(&self) -> Vec<(f64, f64, f64, Option<f64>)> {
        self.rows
            .iter()
            .map(|r| {
                let mid = 0.5 * (r.band.lo + r.band.hi) as f64;
                (mid, r.report.accuracy, r.report.f1, r.report.auc)
            })
            .collect()
    }
}

impl MetricsReport {
    /// One-line summary.
    pub fn summary(&self) -> String {
        let auc = self.auc.map_or("-".to_string(), |a| format!("{a:.4}"));
        format!(
            "n={} acc={:.4} f1={:.4} auc={} precision={:.4} recall={:.4} (tp={} fp={} tn={} fn={})",
            self.n, self.accuracy, self.f1, auc, self.precision, self.recall, self.tp, self.fp, self.tn, self.fn_
        )
    }
}
