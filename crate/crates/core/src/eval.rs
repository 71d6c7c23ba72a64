//! Classification metrics and the exact Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("predictions ({preds}) and gold labels ({gold}) differ in length")]
    LengthMismatch { preds: usize, gold: usize },
    #[error("cannot score an empty prediction list")]
    Empty,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("exact test supports 2..=25 non-zero differences, got {0}")]
    SampleSize(usize),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    BinaryF1 { positive: usize },
    MacroF1,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "acc" | "accuracy" => Ok(Metric::Accuracy),
            "binary_f1" => Ok(Metric::BinaryF1 { positive: 1 }),
            "macro_f1" => Ok(Metric::MacroF1),
            other => match other.strip_prefix("binary_f1:") {
                Some(p) => p
                    .parse()
                    .map(|positive| Metric::BinaryF1 { positive })
                    .map_err(|_| format!("bad positive class '{p}'")),
                None => Err(format!(
                    "unknown metric '{other}', expected acc, binary_f1 or macro_f1"
                )),
            },
        }
    }
}

impl Metric {
    pub fn score(&self, preds: &[usize], gold: &[usize], k: usize) -> Result<MetricReport, EvalError> {
        match *self {
            Metric::Accuracy => accuracy(preds, gold),
            Metric::BinaryF1 { positive } => binary_f1(preds, gold, positive),
            Metric::MacroF1 => macro_f1(preds, gold, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassScores>,
}

fn check_lengths(preds: &[usize], gold: &[usize]) -> Result<(), EvalError> {
    if preds.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            gold: gold.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], gold: &[usize]) -> Result<MetricReport, EvalError> {
    check_lengths(preds, gold)?;
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(MetricReport {
        metric: "accuracy".into(),
        value: hits as f64 / preds.len() as f64,
        n: preds.len(),
        per_class: Vec::new(),
    })
}

fn class_scores(preds: &[usize], gold: &[usize], class: usize) -> ClassScores {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(gold) {
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassScores {
        precision,
        recall,
        f1,
    }
}

/// F1 of the positive class.
pub fn binary_f1(preds: &[usize], gold: &[usize], positive: usize) -> Result<MetricReport, EvalError> {
    check_lengths(preds, gold)?;
    let s = class_scores(preds, gold, positive);
    Ok(MetricReport {
        metric: "binary_f1".into(),
        value: s.f1,
        n: preds.len(),
        per_class: vec![s],
    })
}

/// Unweighted mean of per-class F1 over all `k` classes.
pub fn macro_f1(preds: &[usize], gold: &[usize], k: usize) -> Result<MetricReport, EvalError> {
    check_lengths(preds, gold)?;
    if k < 2 {
        return Err(EvalError::Classes(k));
    }
    let per_class: Vec<ClassScores> = (0..k).map(|c| class_scores(preds, gold, c)).collect();
    let value = per_class.iter().map(|s| s.f1).sum::<f64>() / k as f64;
    Ok(MetricReport {
        metric: "macro_f1".into(),
        value,
        n: preds.len(),
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `a` tends to exceed `b`.
    Greater,
    /// `a` tends to fall below `b`.
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a - b`.
    pub w_plus: f64,
    /// Sum of ranks of negative differences.
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact one-tailed Wilcoxon signed-rank test.
///
/// Zero differences are dropped; tied magnitudes get average ranks. The null
/// distribution of `W+` comes from enumerating every one of the `2^n` sign
/// assignments (walked in Gray-code order so each step flips one sign).
pub fn wilcoxon_signed_rank(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            preds: a.len(),
            gold: b.len(),
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(EvalError::AllZeroDifferences);
    }
    let n = diffs.len();
    if !(2..=25).contains(&n) {
        return Err(EvalError::SampleSize(n));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    // Ranks are multiples of 1/2; work in doubled integer units.
    let doubled: Vec<i64> = ranks.iter().map(|r| (r * 2.0).round() as i64).collect();
    let observed = (w_plus * 2.0).round() as i64;
    let extreme = |s: i64| match alternative {
        Alternative::Greater => s >= observed,
        Alternative::Less => s <= observed,
    };
    let mut sum = 0i64;
    let mut signs = 0u32;
    let mut count = extreme(sum) as u64;
    for step in 1u64..(1u64 << n) {
        let bit = step.trailing_zeros() as usize;
        signs ^= 1 << bit;
        if signs & (1 << bit) != 0 {
            sum += doubled[bit];
        } else {
            sum -= doubled[bit];
        }
        count += extreme(sum) as u64;
    }
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n,
        p_value: count as f64 / (1u64 << n) as f64,
    })
}

/// Null counts of `W+` for untied ranks `1..=n`: entry `w` is the number of sign
/// assignments with `W+ = w`, via the recursion `c_n(w) = c_{n-1}(w) + c_{n-1}(w - n)`.
pub fn signed_rank_null_counts(n: usize) -> Vec<u64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in 1..=n {
        for w in (r..=max).rev() {
            counts[w] += counts[w - r];
        }
    }
    counts
}
