//! Classification metrics and paired comparisons between run sets.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{contract_err, Error, Result};
use crate::trainer::RunResult;

/// Significance level for the Wilcoxon test.
pub const ALPHA: f64 = 0.05;
/// Largest sample size that gets an exact p-value.
pub const EXACT_LIMIT: usize = 20;

fn check_pairs(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.is_empty() {
        return Err(contract_err("metrics need at least one prediction"));
    }
    if predictions.len() != labels.len() {
        return Err(contract_err(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Support-weighted mean of per-class F1. A class with no true and no
/// predicted members scores 0 but also has weight 0.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_pairs(predictions, labels)?;
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(contract_err(format!("class {bad} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fne = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fne[l] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fne[c];
        if denom > 0 {
            let f1 = 2.0 * tp[c] as f64 / denom as f64;
            total += f1 * (tp[c] + fne[c]) as f64;
        }
    }
    Ok(total / labels.len() as f64)
}

/// Seed-aligned metric values for a baseline and a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSamples {
    pub baseline: Vec<f64>,
    pub candidate: Vec<f64>,
}

impl PairedSamples {
    pub fn new(baseline: Vec<f64>, candidate: Vec<f64>) -> Result<Self> {
        if baseline.len() != candidate.len() {
            return Err(contract_err(format!(
                "paired samples of different lengths ({} vs {})",
                baseline.len(),
                candidate.len()
            )));
        }
        if baseline.is_empty() {
            return Err(contract_err("paired samples are empty"));
        }
        Ok(Self { baseline, candidate })
    }

    pub fn len(&self) -> usize {
        self.baseline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baseline.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.candidate.iter().zip(&self.baseline).map(|(c, b)| c - b).collect()
    }
}

/// Mid-ranks of `values` (1-based), doubled so ties stay integral.
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, times two
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank p-value on candidate − baseline.
///
/// Zero differences are dropped. For up to [`EXACT_LIMIT`] remaining pairs
/// the p-value is the share of all sign assignments whose `min(W⁺, W⁻)` is
/// at most the observed one; above that a normal approximation with tie and
/// continuity correction is used.
pub fn wilcoxon_signed_rank(paired: &PairedSamples) -> Result<f64> {
    PairedSamples::new(paired.baseline.clone(), paired.candidate.clone())?;
    let diffs: Vec<f64> = paired.differences().into_iter().filter(|&d| d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Input("non-finite paired difference".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_midranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w_plus: u64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(total - w_plus);
    let n = diffs.len();
    if n <= EXACT_LIMIT {
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let hits: u64 =
            counts.iter().enumerate().filter(|&(s, _)| (s as u64).min(total - s as u64) <= w).map(|(_, c)| c).sum();
        return Ok((hits as f64 / 2f64.powi(n as i32)).min(1.0));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((w as f64 / 2.0 - mean + 0.5) / var.sqrt()).min(0.0);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * normal.cdf(z)).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    pub fn name(self) -> &'static str {
        match self {
            Magnitude::Negligible => "negligible",
            Magnitude::Small => "small",
            Magnitude::Medium => "medium",
            Magnitude::Large => "large",
        }
    }

    /// One-letter tag used in report cells.
    pub fn tag(self) -> &'static str {
        match self {
            Magnitude::Negligible => "N",
            Magnitude::Small => "S",
            Magnitude::Medium => "M",
            Magnitude::Large => "L",
        }
    }
}

impl fmt::Display for Magnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Vargha–Delaney A12: the chance that a candidate value beats a baseline
/// value, ties counting half.
pub fn a12(candidate: &[f64], baseline: &[f64]) -> Result<(f64, Magnitude)> {
    if candidate.is_empty() || baseline.is_empty() {
        return Err(contract_err("A12 needs two non-empty samples"));
    }
    // doubled score: 2 per win, 1 per tie
    let mut score = 0u64;
    for c in candidate {
        for b in baseline {
            score += match c.partial_cmp(b) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    let pairs2 = 2 * (candidate.len() * baseline.len()) as u64;
    let value = score as f64 / pairs2 as f64;
    let far = score.max(pairs2 - score);
    let magnitude = if 100 * far >= 71 * pairs2 {
        Magnitude::Large
    } else if 100 * far >= 64 * pairs2 {
        Magnitude::Medium
    } else if 100 * far >= 56 * pairs2 {
        Magnitude::Small
    } else {
        Magnitude::Negligible
    };
    Ok((value, magnitude))
}

/// Baseline epoch time over candidate epoch time.
pub fn speedup(baseline_epoch_time: f64, candidate_epoch_time: f64) -> Result<f64> {
    if !(baseline_epoch_time > 0.0 && candidate_epoch_time > 0.0) {
        return Err(contract_err(format!(
            "epoch times must be positive ({baseline_epoch_time}, {candidate_epoch_time})"
        )));
    }
    Ok(baseline_epoch_time / candidate_epoch_time)
}

/// `3.2919…` → `3.3x`.
pub fn format_speedup(factor: f64) -> String {
    format!("{factor:.1}x")
}

/// Seconds as `m:ss`, rounded to the nearest second.
pub fn format_mmss(seconds: f64) -> String {
    let s = seconds.max(0.0).round() as u64;
    format!("{}:{:02}", s / 60, s % 60)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1w,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1w => "f1w",
        }
    }

    pub fn of(self, run: &RunResult) -> f64 {
        match self {
            Metric::Accuracy => run.test_accuracy,
            Metric::F1w => run.test_f1w,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "f1w" => Ok(Metric::F1w),
            _ => Err(Error::Config(format!("unknown metric `{s}` (expected accuracy or f1w)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    /// Mean candidate value minus mean baseline value.
    pub mean_diff: f64,
    pub p_value: f64,
    pub significant: bool,
    pub a12: f64,
    pub magnitude: Magnitude,
}

pub fn compare(paired: &PairedSamples) -> Result<ComparisonResult> {
    let p_value = wilcoxon_signed_rank(paired)?;
    let (a, magnitude) = a12(&paired.candidate, &paired.baseline)?;
    let n = paired.len() as f64;
    let mean_diff = paired.candidate.iter().sum::<f64>() / n - paired.baseline.iter().sum::<f64>() / n;
    Ok(ComparisonResult { mean_diff, p_value, significant: p_value < ALPHA, a12: a, magnitude })
}

/// Pairs runs by seed; both sets must cover the same seeds exactly once.
pub fn paired_by_seed(baseline: &[RunResult], candidate: &[RunResult], metric: Metric) -> Result<PairedSamples> {
    let sorted = |runs: &[RunResult]| {
        let mut v: Vec<(u64, f64)> = runs.iter().map(|r| (r.seed, metric.of(r))).collect();
        v.sort_by_key(|&(s, _)| s);
        v
    };
    let (b, c) = (sorted(baseline), sorted(candidate));
    let seeds = |v: &[(u64, f64)]| v.iter().map(|&(s, _)| s).collect::<Vec<_>>();
    let (bs, cs) = (seeds(&b), seeds(&c));
    if bs != cs || bs.windows(2).any(|w| w[0] == w[1]) {
        return Err(contract_err(format!("runs are not seed-aligned: baseline {bs:?}, candidate {cs:?}")));
    }
    PairedSamples::new(b.into_iter().map(|x| x.1).collect(), c.into_iter().map(|x| x.1).collect())
}

pub fn compare_to_baseline(
    baseline: &[RunResult],
    candidate: &[RunResult],
    metric: Metric,
) -> Result<ComparisonResult> {
    compare(&paired_by_seed(baseline, candidate, metric)?)
}
