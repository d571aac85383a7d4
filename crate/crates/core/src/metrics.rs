//! Evaluation measures: sequence similarity, probability shift on probe
//! sets and repair cost.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::TokenId;
use crate::repair::RepairOutcome;

/// Positional token agreement over the longer sequence; unmatched tail
/// positions count as misses.
pub fn exact_match(pred: &[TokenId], truth: &[TokenId]) -> f64 {
    let n = pred.len().max(truth.len());
    if n == 0 {
        return 1.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / n as f64
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev / max_len` over characters.
pub fn edit_similarity(pred: &str, truth: &str) -> f64 {
    let a: Vec<char> = pred.chars().collect();
    let b: Vec<char> = truth.chars().collect();
    let n = a.len().max(b.len());
    if n == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&a, &b) as f64 / n as f64
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU-4. Unigram precision is unsmoothed; orders 2..4 use
/// `(matches + 1) / (total + 1)` so short sequences do not collapse to 0.
pub fn bleu4(pred: &[TokenId], truth: &[TokenId]) -> f64 {
    if pred.is_empty() || truth.is_empty() {
        return if pred.is_empty() && truth.is_empty() { 1.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let p = ngram_counts(pred, n);
        let t = ngram_counts(truth, n);
        let total: usize = p.values().sum();
        let matched: usize = p
            .iter()
            .map(|(g, &c)| c.min(t.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_sum += precision.ln();
    }
    let (c, r) = (pred.len() as f64, truth.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1.
pub fn rouge_l(pred: &[TokenId], truth: &[TokenId]) -> f64 {
    if pred.is_empty() || truth.is_empty() {
        return if pred.is_empty() && truth.is_empty() { 1.0 } else { 0.0 };
    }
    let l = lcs_len(pred, truth) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / pred.len() as f64;
    let r = l / truth.len() as f64;
    2.0 * p * r / (p + r)
}

/// One probe sample's view of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeObservation {
    pub p_target: f64,
    /// Probability of the sample's designated wrong token.
    pub p_argmax_token: f64,
    pub correct: bool,
}

impl ProbeObservation {
    pub fn gap(&self) -> f64 {
        self.p_argmax_token - self.p_target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShiftMetrics {
    pub delta_acc: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Accuracy change and MAE/RMSE of the per-sample change in
/// `p(argmax token) − p(target)`. Empty probe sets give all zeros.
pub fn probability_shift_metrics(before: &[ProbeObservation], after: &[ProbeObservation]) -> ShiftMetrics {
    assert_eq!(before.len(), after.len(), "probe observations must pair up");
    if before.is_empty() {
        return ShiftMetrics::default();
    }
    let n = before.len() as f64;
    let acc = |obs: &[ProbeObservation]| obs.iter().filter(|o| o.correct).count() as f64 / n;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (b, a) in before.iter().zip(after) {
        let d = a.gap() - b.gap();
        abs += d.abs();
        sq += d * d;
    }
    ShiftMetrics {
        delta_acc: acc(after) - acc(before),
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    }
}

pub const RATIO_EPS: f64 = 1e-9;

/// `gen / spec`, absent when the specificity side is (numerically) zero.
pub fn balance_ratio(gen: f64, spec: f64) -> Option<f64> {
    (spec > RATIO_EPS).then(|| gen / spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostMetrics {
    pub mean_neurons_per_solved: f64,
    pub mean_seconds_per_solved: f64,
    pub mean_forward_passes_per_solved: f64,
}

/// Means over solved outcomes; `None` if nothing was solved.
pub fn cost_metrics(outcomes: &[RepairOutcome]) -> Option<CostMetrics> {
    let solved: Vec<&RepairOutcome> = outcomes.iter().filter(|o| o.is_solved()).collect();
    if solved.is_empty() {
        return None;
    }
    let n = solved.len() as f64;
    Some(CostMetrics {
        mean_neurons_per_solved: solved.iter().map(|o| o.neurons_patched as f64).sum::<f64>() / n,
        mean_seconds_per_solved: solved.iter().map(|o| o.elapsed_seconds).sum::<f64>() / n,
        mean_forward_passes_per_solved: solved.iter().map(|o| o.forward_passes as f64).sum::<f64>() / n,
    })
}

/// Aggregates keyed by `(method, dataset)`; each metric may be absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: BTreeMap<(String, String), BTreeMap<String, Option<f64>>>,
}

/// Fixed metric order for CSV and tables.
pub const METRIC_NAMES: &[&str] = &[
    "exact_match_before",
    "exact_match",
    "edit_similarity_before",
    "edit_similarity",
    "bleu4_before",
    "bleu4",
    "rouge_l_before",
    "rouge_l",
    "delta_acc_G",
    "delta_acc_S",
    "mae_G",
    "mae_S",
    "rmse_G",
    "rmse_S",
    "ratio_acc",
    "ratio_mae",
    "ratio_rmse",
    "mean_neurons_per_solved",
    "mean_forward_passes_per_solved",
    "solved_rate",
    "skipped_rate",
    "cases",
];

impl MetricsReport {
    pub fn set(&mut self, method: &str, dataset: &str, metric: &str, value: Option<f64>) {
        debug_assert!(METRIC_NAMES.contains(&metric), "unknown metric {metric}");
        self.rows
            .entry((method.to_string(), dataset.to_string()))
            .or_default()
            .insert(metric.to_string(), value);
    }

    pub fn get(&self, method: &str, dataset: &str, metric: &str) -> Option<f64> {
        self.rows
            .get(&(method.to_string(), dataset.to_string()))
            .and_then(|r| r.get(metric).copied().flatten())
    }

    /// `method,dataset,metric,value`; absent values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,dataset,metric,value\n");
        for ((method, dataset), row) in &self.rows {
            for name in METRIC_NAMES {
                if let Some(v) = row.get(*name) {
                    writeln!(out, "{method},{dataset},{name},{}", fmt_csv(*v)).expect("write to string");
                }
            }
        }
        out
    }

    /// One markdown table per dataset, columns limited to metrics present.
    pub fn to_markdown(&self) -> String {
        let mut datasets: Vec<&String> = self.rows.keys().map(|(_, d)| d).collect();
        datasets.sort();
        datasets.dedup();
        let mut out = String::new();
        for ds in datasets {
            let rows: Vec<(&String, &BTreeMap<String, Option<f64>>)> = self
                .rows
                .iter()
                .filter(|((_, d), _)| d == ds)
                .map(|((m, _), r)| (m, r))
                .collect();
            let cols: Vec<&str> = METRIC_NAMES
                .iter()
                .copied()
                .filter(|c| rows.iter().any(|(_, r)| r.contains_key(*c)))
                .collect();
            writeln!(out, "### {ds}\n").expect("write to string");
            write!(out, "| method |").expect("write to string");
            for c in &cols {
                write!(out, " {c} |").expect("write to string");
            }
            out.push_str("\n|---|");
            out.push_str(&"---:|".repeat(cols.len()));
            out.push('\n');
            for (m, r) in rows {
                write!(out, "| {m} |").expect("write to string");
                for c in &cols {
                    let cell = r.get(*c).copied().flatten().map_or("–".to_string(), |v| format!("{v:.4}"));
                    write!(out, " {cell} |").expect("write to string");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_csv(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.9}"))
}
