//! Ranking-quality metrics (top-k accuracy, MRR, NDCG) and drift-aware
//! aggregates over time windows (retention rate, degradation rate, temporal
//! stability).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One query's ranked retrieval output with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: u64,
    pub ranked: Vec<u64>,
    pub relevant: BTreeSet<u64>,
    /// Graded relevance: id -> gain >= 0. Ids absent from the map gain 0.
    pub gains: BTreeMap<u64, f64>,
}

impl RankedResult {
    pub fn binary(query_id: u64, ranked: Vec<u64>, relevant: impl IntoIterator<Item = u64>) -> Self {
        let relevant: BTreeSet<u64> = relevant.into_iter().collect();
        let gains = relevant.iter().map(|&id| (id, 1.0)).collect();
        Self { query_id, ranked, relevant, gains }
    }
}

/// Per-window retrieval-quality record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWindow {
    pub window: usize,
    pub topk_acc: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub n_queries: usize,
}

/// Which windowed metric a drift aggregate reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricSelector {
    TopkAcc,
    Mrr,
    Ndcg,
}

impl MetricSelector {
    pub fn pick(self, w: &MetricWindow) -> f64 {
        match self {
            MetricSelector::TopkAcc => w.topk_acc,
            MetricSelector::Mrr => w.mrr,
            MetricSelector::Ndcg => w.ndcg,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty result set")]
    EmptyResults,
    #[error("need at least 2 windows")]
    TooFewWindows,
    #[error("degenerate baseline: selected metric has zero mean")]
    DegenerateBaseline,
}

/// Fraction of queries with at least one relevant id among the first k.
pub fn topk_accuracy(results: &[RankedResult], k: usize) -> Result<f64, MetricsError> {
    assert!(k >= 1);
    if results.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let hits = results
        .iter()
        .filter(|r| r.ranked.iter().take(k).any(|id| r.relevant.contains(id)))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean over queries of 1/rank of the first relevant id (0 when none).
pub fn mrr(results: &[RankedResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let total: f64 = results
        .iter()
        .map(|r| {
            r.ranked
                .iter()
                .position(|id| r.relevant.contains(id))
                .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
        })
        .sum();
    Ok(total / results.len() as f64)
}

fn dcg(gains_in_rank_order: impl Iterator<Item = f64>) -> f64 {
    gains_in_rank_order
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// Mean over queries of DCG@k / IDCG@k with discount 1/log2(rank+1).
/// Queries with zero ideal gain contribute 1.0.
pub fn ndcg(results: &[RankedResult], k: usize) -> Result<f64, MetricsError> {
    assert!(k >= 1);
    if results.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let total: f64 = results
        .iter()
        .map(|r| {
            let actual = dcg(
                r.ranked
                    .iter()
                    .take(k)
                    .map(|id| r.gains.get(id).copied().unwrap_or(0.0)),
            );
            let mut ideal_gains: Vec<f64> = r.gains.values().copied().collect();
            ideal_gains.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let ideal = dcg(ideal_gains.into_iter().take(k));
            if ideal == 0.0 {
                1.0
            } else {
                actual / ideal
            }
        })
        .sum();
    Ok(total / results.len() as f64)
}

fn quarter(n: usize) -> usize {
    // ceil(25%)
    (n + 3) / 4
}

/// Late-quality / early-quality ratio: mean of the selected metric over the
/// last ceil(25%) of windows divided by the mean over the first ceil(25%).
pub fn relevance_retention_rate(
    windows: &[MetricWindow],
    selector: MetricSelector,
) -> Result<f64, MetricsError> {
    if windows.len() < 2 {
        return Err(MetricsError::TooFewWindows);
    }
    let q = quarter(windows.len());
    let first: f64 = windows[..q].iter().map(|w| selector.pick(w)).sum::<f64>() / q as f64;
    let last: f64 =
        windows[windows.len() - q..].iter().map(|w| selector.pick(w)).sum::<f64>() / q as f64;
    if first == 0.0 {
        return Err(MetricsError::DegenerateBaseline);
    }
    Ok((last / first).max(0.0))
}

/// Negated ordinary-least-squares slope of the selected metric against window
/// index; positive values mean degradation.
pub fn retrieval_degradation_rate(
    windows: &[MetricWindow],
    selector: MetricSelector,
) -> Result<f64, MetricsError> {
    if windows.len() < 2 {
        return Err(MetricsError::TooFewWindows);
    }
    let n = windows.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = windows.iter().map(|w| selector.pick(w)).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (i, w) in windows.iter().enumerate() {
        let dx = i as f64 - mean_x;
        cov += dx * (selector.pick(w) - mean_y);
        var += dx * dx;
    }
    Ok(-(cov / var))
}

/// max(0, 1 - coefficient of variation) of the selected metric across windows
/// (population standard deviation).
pub fn temporal_stability(
    windows: &[MetricWindow],
    selector: MetricSelector,
) -> Result<f64, MetricsError> {
    if windows.len() < 2 {
        return Err(MetricsError::TooFewWindows);
    }
    let n = windows.len() as f64;
    let mean = windows.iter().map(|w| selector.pick(w)).sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(MetricsError::DegenerateBaseline);
    }
    let var = windows
        .iter()
        .map(|w| {
            let d = selector.pick(w) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok((1.0 - var.sqrt() / mean).max(0.0))
}

/// Summary drift-aware aggregates for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub retention: f64,
    pub degradation: f64,
    pub stability: f64,
}

pub fn drift_summary(
    windows: &[MetricWindow],
    selector: MetricSelector,
) -> Result<DriftSummary, MetricsError> {
    Ok(DriftSummary {
        retention: relevance_retention_rate(windows, selector)?,
        degradation: retrieval_degradation_rate(windows, selector)?,
        stability: temporal_stability(windows, selector)?,
    })
}

/// CSV emitter: columns window, topk, mrr, ndcg. Fixed 9-digit formatting
/// keeps reruns byte-identical.
pub fn write_metrics_csv<W: Write>(mut w: W, windows: &[MetricWindow]) -> std::io::Result<()> {
    writeln!(w, "window,topk,mrr,ndcg")?;
    for win in windows {
        writeln!(w, "{},{:.9},{:.9},{:.9}", win.window, win.topk_acc, win.mrr, win.ndcg)?;
    }
    Ok(())
}

/// Summary line-delimited record with the drift aggregates.
pub fn write_summary<W: Write>(mut w: W, summary: &DriftSummary) -> std::io::Result<()> {
    writeln!(w, "{}", serde_json::to_string(summary).expect("summary serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn window(i: usize, v: f64) -> MetricWindow {
        MetricWindow { window: i, topk_acc: v, mrr: v, ndcg: v, n_queries: 1 }
    }

    #[test]
    fn topk_accuracy_hand_count() {
        // Hits at ranks (1, 3, none), k=2 -> 1/3.
        let results = vec![
            RankedResult::binary(0, vec![1, 2, 3], [1]),
            RankedResult::binary(1, vec![4, 5, 6], [6]),
            RankedResult::binary(2, vec![7, 8, 9], [99]),
        ];
        assert_abs_diff_eq!(topk_accuracy(&results, 2).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(topk_accuracy(&[], 2), Err(MetricsError::EmptyResults));
    }

    #[test]
    fn topk_accuracy_extremes() {
        let all_hits = vec![
            RankedResult::binary(0, vec![1, 2], [1]),
            RankedResult::binary(1, vec![3, 4], [3]),
        ];
        assert_eq!(topk_accuracy(&all_hits, 1).unwrap(), 1.0);
        let no_hits = vec![RankedResult::binary(0, vec![1, 2], [9])];
        assert_eq!(topk_accuracy(&no_hits, 2).unwrap(), 0.0);
    }

    #[test]
    fn mrr_hand_values() {
        let first_rank = vec![RankedResult::binary(0, vec![1, 2], [1])];
        assert_eq!(mrr(&first_rank).unwrap(), 1.0);
        // Ranks (1, 2) -> (1 + 0.5)/2 = 0.75.
        let ranks_1_2 = vec![
            RankedResult::binary(0, vec![1, 2], [1]),
            RankedResult::binary(1, vec![3, 4], [4]),
        ];
        assert_abs_diff_eq!(mrr(&ranks_1_2).unwrap(), 0.75, epsilon = 1e-12);
        let no_hits = vec![RankedResult::binary(0, vec![1], [9])];
        assert_eq!(mrr(&no_hits).unwrap(), 0.0);
    }

    #[test]
    fn ndcg_hand_values() {
        // Ideal ordering -> 1.0.
        let mut r = RankedResult::binary(0, vec![1, 2], [1]);
        r.gains = [(1, 2.0), (2, 1.0)].into_iter().collect();
        assert_abs_diff_eq!(ndcg(&[r], 2).unwrap(), 1.0, epsilon = 1e-12);

        // Swapped pair: gains (0,1) at ranks (1,2), ideal (1,0), k=2.
        let mut r = RankedResult::binary(0, vec![1, 2], [2]);
        r.gains = [(2, 1.0)].into_iter().collect();
        let expect = (1.0 / 3.0f64.log2()) / (1.0 / 2.0f64.log2());
        let got = ndcg(&[r], 2).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.6309, epsilon = 1e-4);

        // k=1 with relevant at rank 1 -> 1.0.
        let r = RankedResult::binary(0, vec![1, 2], [1]);
        assert_abs_diff_eq!(ndcg(&[r], 1).unwrap(), 1.0, epsilon = 1e-12);

        // Zero ideal gain contributes 1.0.
        let r = RankedResult::binary(0, vec![1, 2], []);
        assert_abs_diff_eq!(ndcg(&[r], 2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn retention_rate_hand_values() {
        let constant: Vec<MetricWindow> = (0..8).map(|i| window(i, 0.6)).collect();
        assert_abs_diff_eq!(
            relevance_retention_rate(&constant, MetricSelector::Ndcg).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // First quarter 0.8, last quarter 0.4 -> 0.5.
        let mut windows: Vec<MetricWindow> = (0..8).map(|i| window(i, 0.6)).collect();
        windows[0] = window(0, 0.8);
        windows[1] = window(1, 0.8);
        windows[6] = window(6, 0.4);
        windows[7] = window(7, 0.4);
        assert_abs_diff_eq!(
            relevance_retention_rate(&windows, MetricSelector::Ndcg).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        let improving: Vec<MetricWindow> = (0..8).map(|i| window(i, 0.1 + 0.1 * i as f64)).collect();
        assert!(relevance_retention_rate(&improving, MetricSelector::Ndcg).unwrap() > 1.0);
    }

    #[test]
    fn degradation_rate_exact_ols_on_lines() {
        let constant: Vec<MetricWindow> = (0..6).map(|i| window(i, 0.4)).collect();
        assert_abs_diff_eq!(
            retrieval_degradation_rate(&constant, MetricSelector::Mrr).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        // metric = 1 - 0.1 t -> slope -0.1 -> degradation 0.1.
        let falling: Vec<MetricWindow> = (0..6).map(|i| window(i, 1.0 - 0.1 * i as f64)).collect();
        assert_abs_diff_eq!(
            retrieval_degradation_rate(&falling, MetricSelector::Mrr).unwrap(),
            0.1,
            epsilon = 1e-9
        );
        // metric = 0.5 + 0.05 t -> degradation -0.05.
        let rising: Vec<MetricWindow> = (0..6).map(|i| window(i, 0.5 + 0.05 * i as f64)).collect();
        assert_abs_diff_eq!(
            retrieval_degradation_rate(&rising, MetricSelector::Mrr).unwrap(),
            -0.05,
            epsilon = 1e-9
        );
    }

    #[test]
    fn degradation_is_antisymmetric_under_reversal() {
        let series: Vec<MetricWindow> =
            [0.9, 0.7, 0.8, 0.4, 0.5].iter().enumerate().map(|(i, &v)| window(i, v)).collect();
        let mut reversed: Vec<MetricWindow> = series.iter().rev().cloned().collect();
        for (i, w) in reversed.iter_mut().enumerate() {
            w.window = i;
        }
        let d = retrieval_degradation_rate(&series, MetricSelector::Ndcg).unwrap();
        let dr = retrieval_degradation_rate(&reversed, MetricSelector::Ndcg).unwrap();
        assert_abs_diff_eq!(d, -dr, epsilon = 1e-12);
    }

    #[test]
    fn stability_hand_cv() {
        let constant: Vec<MetricWindow> = (0..4).map(|i| window(i, 0.7)).collect();
        assert_abs_diff_eq!(
            temporal_stability(&constant, MetricSelector::TopkAcc).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // Series (0.5, 1.5): mean 1, population stdev 0.5 -> 0.5.
        let pair = vec![window(0, 0.5), window(1, 1.5)];
        assert_abs_diff_eq!(
            temporal_stability(&pair, MetricSelector::TopkAcc).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        // Erratic series clipped at 0.
        let erratic = vec![window(0, 0.01), window(1, 2.0), window(2, 0.01), window(3, 2.0)];
        assert!(temporal_stability(&erratic, MetricSelector::TopkAcc).unwrap() >= 0.0);
    }

    #[test]
    fn ranking_metrics_invariant_to_query_order() {
        let results = vec![
            RankedResult::binary(0, vec![1, 2, 3], [2]),
            RankedResult::binary(1, vec![4, 5, 6], [4]),
            RankedResult::binary(2, vec![7, 8, 9], [9]),
        ];
        let mut shuffled = results.clone();
        shuffled.swap(0, 2);
        assert_eq!(mrr(&results), mrr(&shuffled));
        assert_eq!(topk_accuracy(&results, 2), topk_accuracy(&shuffled, 2));
        assert_eq!(ndcg(&results, 3), ndcg(&shuffled, 3));
    }

    #[test]
    fn mrr_equals_top1_accuracy_on_rank1_truncated_lists() {
        // With rankings truncated at the first position, 1/rank is 1 or 0,
        // so the two metrics coincide.
        let results = vec![
            RankedResult::binary(0, vec![1], [1]),
            RankedResult::binary(1, vec![3], [9]),
            RankedResult::binary(2, vec![5], [5]),
        ];
        assert_eq!(mrr(&results).unwrap(), topk_accuracy(&results, 1).unwrap());
    }

    #[test]
    fn csv_format_is_stable() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[window(0, 0.5)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "window,topk,mrr,ndcg\n0,0.500000000,0.500000000,0.500000000\n"
        );
    }
}
