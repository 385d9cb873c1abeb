//! Classification metrics with class 1 (vulnerable) as the positive
//! class, plus per-CWE accuracy breakdowns.

use serde::{Deserialize, Serialize};

/// Confusion counts and derived rates. Any rate whose denominator is
/// zero is reported as 0.0 and `had_zero_denominator` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub had_zero_denominator: bool,
}

/// Computes metrics from `(truth, prediction)` pairs; nonzero = positive.
pub fn classification_metrics(examples: &[(u8, u8)]) -> MetricsReport {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for &(truth, pred) in examples {
        match (truth != 0, pred != 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| -> f64 {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(tp + tn, examples.len());
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        had_zero_denominator: degenerate,
    }
}

/// Accuracy over the records carrying one CWE tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CweRow {
    pub tag: String,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Label for records with no CWE tag at all.
pub const UNTAGGED: &str = "(untagged)";

/// Per-tag accuracy, ranked by support (descending, ties by tag
/// ascending) and cut to the `top_k` most frequent tags. Records
/// carrying several tags count toward each; records carrying none are
/// pooled into a final [`UNTAGGED`] row that is exempt from the cut.
pub fn per_cwe_accuracy(records: &[(Vec<String>, u8, u8)], top_k: usize) -> Vec<CweRow> {
    use std::collections::BTreeMap;
    let mut buckets: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut untagged = (0usize, 0usize);
    for (tags, truth, pred) in records {
        let hit = usize::from(truth == pred);
        if tags.is_empty() {
            untagged.0 += 1;
            untagged.1 += hit;
            continue;
        }
        for tag in tags {
            let slot = buckets.entry(tag).or_insert((0, 0));
            slot.0 += 1;
            slot.1 += hit;
        }
    }
    let mut rows: Vec<CweRow> = buckets
        .into_iter()
        .map(|(tag, (support, correct))| CweRow {
            tag: tag.to_string(),
            support,
            correct,
            accuracy: correct as f64 / support as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.tag.cmp(&b.tag)));
    rows.truncate(top_k);
    if untagged.0 > 0 {
        rows.push(CweRow {
            tag: UNTAGGED.to_string(),
            support: untagged.0,
            correct: untagged.1,
            accuracy: untagged.1 as f64 / untagged.0 as f64,
        });
    }
    rows
}

/// Formats a rate in [0, 1] as a percentage with two decimals.
pub fn format_percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// CSV rendering of a metrics report (rates as percentages).
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in [
        ("accuracy", report.accuracy),
        ("precision", report.precision),
        ("recall", report.recall),
        ("f1", report.f1),
    ] {
        out.push_str(&format!("{name},{}\n", format_percent(value)));
    }
    out.push_str(&format!("true_positives,{}\n", report.true_positives));
    out.push_str(&format!("false_positives,{}\n", report.false_positives));
    out.push_str(&format!("true_negatives,{}\n", report.true_negatives));
    out.push_str(&format!("false_negatives,{}\n", report.false_negatives));
    out
}

/// CSV rendering of a per-CWE breakdown.
pub fn cwe_csv(rows: &[CweRow]) -> String {
    let mut out = String::from("cwe,support,correct,accuracy\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.tag,
            row.support,
            row.correct,
            format_percent(row.accuracy)
        ));
    }
    out
}
