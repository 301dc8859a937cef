//! Recall@N over loop-bearing queries.

use std::fmt::Write as _;

use super::{LoopLabels, TimingReport};

/// Ranked candidate ids for one query, best first, plus the number of
/// scans that were eligible at query time.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub query_id: u64,
    pub ranked: Vec<u64>,
    pub eligible: usize,
}

/// Database size for Recall@1%: scans seen before `query` minus the
/// exclusion window.
pub fn eligible_count(query: u64, exclusion: u64) -> usize {
    query.saturating_sub(exclusion) as usize
}

/// `ceil(0.01 * db_size)`, at least 1.
pub fn one_percent_n(db_size: usize) -> usize {
    db_size.div_ceil(100).max(1)
}

fn hit(q: &RankedQuery, labels: &LoopLabels, n: usize) -> bool {
    q.ranked
        .iter()
        .take(n)
        .any(|&c| labels.is_match(q.query_id, c))
}

/// Fraction of loop-bearing queries whose top-`n` list holds a true match.
/// `n = None` selects Recall@1% per query.
pub fn recall_at_n(queries: &[RankedQuery], labels: &LoopLabels, n: Option<usize>) -> f64 {
    let loops: Vec<&RankedQuery> = queries
        .iter()
        .filter(|q| labels.has_loop(q.query_id))
        .collect();
    if loops.is_empty() {
        return 0.0;
    }
    let hits = loops
        .iter()
        .filter(|q| hit(q, labels, n.unwrap_or_else(|| one_percent_n(q.eligible))))
        .count();
    hits as f64 / loops.len() as f64
}

/// Recall@1 ..= Recall@`max_n`.
pub fn recall_curve(queries: &[RankedQuery], labels: &LoopLabels, max_n: usize) -> Vec<f64> {
    (1..=max_n)
        .map(|n| recall_at_n(queries, labels, Some(n)))
        .collect()
}

/// Expected Recall@1 of a ranker that picks uniformly among the eligible
/// scans.
pub fn random_baseline_recall(labels: &LoopLabels) -> f64 {
    let loops = labels.loop_queries();
    if loops.is_empty() {
        return 0.0;
    }
    let total: f64 = loops
        .iter()
        .map(|&q| {
            labels.matches[q as usize].len() as f64
                / eligible_count(q, labels.exclusion).max(1) as f64
        })
        .sum();
    total / loops.len() as f64
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub sequence: String,
    pub seed: u64,
    pub k: usize,
    pub loop_queries: usize,
    pub queries: usize,
    pub coarse_recall_at_1: f64,
    pub coarse_recall_at_1pct: f64,
    pub recall_at_1: f64,
    pub recall_at_1pct: f64,
    /// Coarse Recall@N for N = 1..=25.
    pub coarse_curve: Vec<f64>,
    pub random_recall_at_1: f64,
    pub overlap_calls: u64,
    pub timings: Option<TimingReport>,
}

impl EvalReport {
    /// One `metric sequence value` line per metric.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let s = &self.sequence;
        let mut line = |k: &str, v: String| writeln!(out, "{k} {s} {v}").expect("write to string");
        line("seed", self.seed.to_string());
        line("k", self.k.to_string());
        line("queries", self.queries.to_string());
        line("loop_queries", self.loop_queries.to_string());
        line("recall@1", format!("{:.6}", self.recall_at_1));
        line("recall@1%", format!("{:.6}", self.recall_at_1pct));
        line("coarse_recall@1", format!("{:.6}", self.coarse_recall_at_1));
        line(
            "coarse_recall@1%",
            format!("{:.6}", self.coarse_recall_at_1pct),
        );
        line("random_recall@1", format!("{:.6}", self.random_recall_at_1));
        line("overlap_calls", self.overlap_calls.to_string());
        for (i, r) in self.coarse_curve.iter().enumerate() {
            line(&format!("coarse_recall@{}", i + 1), format!("{r:.6}"));
        }
        if let Some(t) = &self.timings {
            for st in &t.stages {
                line(
                    &format!("time_ms_mean/{}", st.stage.key()),
                    format!("{:.6}", st.mean_ms),
                );
                line(
                    &format!("time_ms_std/{}", st.stage.key()),
                    format!("{:.6}", st.std_ms),
                );
            }
        }
        out
    }

    /// Two-column `N recall` table for gnuplot.
    pub fn curve_table(&self) -> String {
        let mut out = format!("# N coarse_recall ({})\n", self.sequence);
        for (i, r) in self.coarse_curve.iter().enumerate() {
            writeln!(out, "{} {r:.6}", i + 1).expect("write to string");
        }
        out
    }
}
