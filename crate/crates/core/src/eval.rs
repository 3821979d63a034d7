//! Retrieval evaluation: Recall@K, score/recall correlation, bootstrap
//! intervals, component ablations and overhead timing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::certainty::{CertaintyScore, Combiner, Scorer};
use crate::error::{Error, Result};
use crate::format::Qrels;
use crate::index::NeighborList;
use crate::monitor::{AdaptivePolicy, MonitorConfig};
use crate::par::{self, Execution};
use crate::stats::{bootstrap_ci, correlate, BootstrapCi, Correlation};
use crate::types::EmbeddingSet;

/// `|top-K ∩ relevant| / min(K, |relevant|)`. Repeated ids count once.
pub fn recall_at_k<'a>(retrieved: impl IntoIterator<Item = &'a str>, relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyInput("relevant set is empty".into()));
    }
    if k == 0 {
        return Err(Error::Range("K must be at least 1".into()));
    }
    let hits: BTreeSet<&str> = retrieved.into_iter().take(k).filter(|id| relevant.contains(*id)).collect();
    Ok(hits.len() as f64 / k.min(relevant.len()) as f64)
}

/// Share of a `min(target_k, |relevant|)` target found anywhere in
/// `retrieved`, capped at 1. Equals [`recall_at_k`] when `retrieved` holds
/// at most `target_k` entries, and never decreases as `retrieved` grows.
/// Used to compare an expanded retrieval with its base-K prefix.
pub fn recall_within_budget<'a>(
    retrieved: impl IntoIterator<Item = &'a str>,
    relevant: &BTreeSet<String>,
    target_k: usize,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyInput("relevant set is empty".into()));
    }
    if target_k == 0 {
        return Err(Error::Range("K must be at least 1".into()));
    }
    let hits: BTreeSet<&str> = retrieved.into_iter().filter(|id| relevant.contains(*id)).collect();
    Ok((hits.len() as f64 / target_k.min(relevant.len()) as f64).min(1.0))
}

/// One ablation variant: which signal gates and is correlated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AblationConfig {
    StabilityOnly,
    DensityOnly,
    Combined { combiner: Combiner, alpha: f64, beta: f64 },
}

impl AblationConfig {
    /// Stability-only, density-only, then each combiner with the given
    /// linear weights.
    pub fn standard(alpha: f64, beta: f64) -> Vec<AblationConfig> {
        vec![
            AblationConfig::StabilityOnly,
            AblationConfig::DensityOnly,
            AblationConfig::Combined { combiner: Combiner::Harmonic, alpha, beta },
            AblationConfig::Combined { combiner: Combiner::Linear, alpha, beta },
            AblationConfig::Combined { combiner: Combiner::Product, alpha, beta },
        ]
    }

    pub fn name(&self) -> String {
        match self {
            AblationConfig::StabilityOnly => "quantization stability".into(),
            AblationConfig::DensityOnly => "neighborhood density".into(),
            AblationConfig::Combined { combiner: Combiner::Linear, alpha, .. } => format!("combined linear (alpha={alpha})"),
            AblationConfig::Combined { combiner: Combiner::Harmonic, .. } => "combined harmonic".into(),
            AblationConfig::Combined { combiner: Combiner::Product, .. } => "combined product".into(),
        }
    }

    /// The gating score this variant derives from a full certainty record.
    pub fn score(&self, s: &CertaintyScore) -> Result<f64> {
        match *self {
            AblationConfig::StabilityOnly => Ok(s.stability),
            AblationConfig::DensityOnly => Ok(s.norm_density),
            AblationConfig::Combined { combiner, alpha, beta } => {
                crate::certainty::combine(s.stability, s.norm_density, combiner, alpha, beta)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: AblationConfig,
    /// `None` when either side is constant.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Mean base Recall@K (identical across rows).
    pub mean_recall: f64,
    /// Mean recall when queries scoring below the threshold get the
    /// adaptive policy.
    pub adaptive_mean_recall: f64,
    pub alerts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadTimings {
    /// Median per-query exact search time.
    pub search_ms: f64,
    /// Median per-query certainty scoring time (on top of search).
    pub score_ms: f64,
    /// Median over queries of `score / (search + score)`.
    pub overhead_fraction: f64,
    /// `Σ score / Σ (search + score)` over queries.
    pub aggregate_overhead_fraction: f64,
    pub queries: usize,
    pub repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub queries: usize,
    pub per_query_recall: BTreeMap<String, f64>,
    pub mean_recall: f64,
    /// `None` when scores or recalls are constant (e.g. every query
    /// retrieves all its relevant documents).
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub bootstrap_ci: BootstrapCi,
    pub ablation_rows: Vec<AblationRow>,
    pub timings: Option<OverheadTimings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub bootstrap_resamples: usize,
    pub seed: u64,
    /// Gate for the adaptive-retrieval column of the ablation.
    pub gate: MonitorConfig,
    pub ablation: Vec<AblationConfig>,
    /// 0 skips timing (keeps reports reproducible byte for byte).
    pub timing_repetitions: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bootstrap_resamples: 1000,
            seed: 0,
            gate: MonitorConfig { policy: AdaptivePolicy::ExpandK { factor: 3, cap: 100 }, ..Default::default() },
            ablation: AblationConfig::standard(0.6, 0.4),
            timing_repetitions: 0,
        }
    }
}

/// Per-query retrieval and scoring shared by every report section.
#[derive(Clone, Debug)]
pub struct QueryOutcomes {
    pub ids: Vec<String>,
    /// Exact top-K per query.
    pub base: Vec<NeighborList>,
    /// Exact top-`expanded_k` per query; `base` is a prefix of it.
    pub expanded: Vec<NeighborList>,
    pub expanded_k: usize,
    pub scores: Vec<CertaintyScore>,
    pub recall: Vec<f64>,
}

/// Retrieves and scores every query that has judgments.
pub fn collect_outcomes(
    scorer: &Scorer,
    queries: &EmbeddingSet,
    qrels: &Qrels,
    gate: &MonitorConfig,
    exec: Execution,
) -> Result<QueryOutcomes> {
    let k = scorer.config().k;
    let expanded_k = match gate.policy {
        AdaptivePolicy::ExpandK { factor, cap } => (factor * k).min(cap).max(k),
        AdaptivePolicy::None => k,
    };
    let judged: Vec<usize> = (0..queries.len()).filter(|&i| qrels.contains_key(queries.id(i))).collect();
    if judged.is_empty() {
        return Err(Error::Join("no query has relevance judgments".into()));
    }
    let rows = par::try_map_range(exec, judged.len(), |j| {
        let i = judged[j];
        let (id, q) = (queries.id(i), queries.row(i));
        let expanded = scorer.index().search_exact(q, expanded_k)?;
        let base = expanded.truncated(k);
        let score = scorer.assess_with_neighbors(id, q, &base)?;
        let recall = recall_at_k(base.ids(), &qrels[id], k)?;
        Ok::<_, Error>((id.to_string(), base, expanded, score, recall))
    })?;
    let mut out = QueryOutcomes {
        ids: Vec::new(),
        base: Vec::new(),
        expanded: Vec::new(),
        expanded_k,
        scores: Vec::new(),
        recall: Vec::new(),
    };
    for (id, base, expanded, score, recall) in rows {
        out.ids.push(id);
        out.base.push(base);
        out.expanded.push(expanded);
        out.scores.push(score);
        out.recall.push(recall);
    }
    Ok(out)
}

/// Correlation and gated recall for each ablation variant. Rows share the
/// same queries and retrievals, so they are directly comparable.
pub fn run_ablation(
    outcomes: &QueryOutcomes,
    qrels: &Qrels,
    gate: &MonitorConfig,
    configs: &[AblationConfig],
) -> Result<Vec<AblationRow>> {
    if configs.is_empty() {
        return Err(Error::EmptyInput("no ablation configs".into()));
    }
    let k = outcomes.scores.first().map(|s| s.params.k).unwrap_or(1);
    let recalls: BTreeMap<String, f64> = outcomes.ids.iter().cloned().zip(outcomes.recall.iter().copied()).collect();
    let mean_recall = mean(&outcomes.recall);
    configs
        .iter()
        .map(|cfg| {
            let gated: Vec<f64> = outcomes.scores.iter().map(|s| cfg.score(s)).collect::<Result<_>>()?;
            let by_id: BTreeMap<String, f64> = outcomes.ids.iter().cloned().zip(gated.iter().copied()).collect();
            let (pearson, spearman) = defined(correlate(&by_id, &recalls))?;
            let mut alerts = 0;
            let mut adaptive = Vec::with_capacity(gated.len());
            for (i, &g) in gated.iter().enumerate() {
                let expand = g < gate.threshold && gate.policy != AdaptivePolicy::None;
                if g < gate.threshold {
                    alerts += 1;
                }
                adaptive.push(if expand {
                    recall_within_budget(outcomes.expanded[i].ids(), &qrels[&outcomes.ids[i]], k)?
                } else {
                    outcomes.recall[i]
                });
            }
            Ok(AblationRow {
                name: cfg.name(),
                config: *cfg,
                pearson,
                spearman,
                mean_recall,
                adaptive_mean_recall: mean(&adaptive),
                alerts,
            })
        })
        .collect()
}

/// Maps a zero-variance correlation to `None`.
fn defined(corr: Result<Correlation>) -> Result<(Option<f64>, Option<f64>)> {
    match corr {
        Ok(c) => Ok((Some(c.pearson), Some(c.spearman))),
        Err(Error::Degenerate(_)) => Ok((None, None)),
        Err(e) => Err(e),
    }
}

fn fmt_corr(c: Option<f64>) -> String {
    c.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Correlation of the combined score with per-query recall.
pub fn score_recall_correlation(outcomes: &QueryOutcomes) -> Result<Correlation> {
    let scores: BTreeMap<String, f64> =
        outcomes.ids.iter().cloned().zip(outcomes.scores.iter().map(|s| s.combined)).collect();
    let recalls: BTreeMap<String, f64> = outcomes.ids.iter().cloned().zip(outcomes.recall.iter().copied()).collect();
    correlate(&scores, &recalls)
}

/// Full report: recall, correlation, bootstrap interval, ablation rows and
/// optionally timings.
pub fn evaluate(scorer: &Scorer, queries: &EmbeddingSet, qrels: &Qrels, opts: &EvalOptions) -> Result<EvalReport> {
    let outcomes = collect_outcomes(scorer, queries, qrels, &opts.gate, Execution::default())?;
    let (pearson, spearman) = defined(score_recall_correlation(&outcomes))?;
    let ci = bootstrap_ci(&outcomes.recall, opts.bootstrap_resamples, opts.seed)?;
    let ablation_rows = run_ablation(&outcomes, qrels, &opts.gate, &opts.ablation)?;
    let timings = if opts.timing_repetitions > 0 {
        Some(measure_overhead(queries, scorer, opts.timing_repetitions, true)?)
    } else {
        None
    };
    Ok(EvalReport {
        k: scorer.config().k,
        queries: outcomes.ids.len(),
        per_query_recall: outcomes.ids.iter().cloned().zip(outcomes.recall.iter().copied()).collect(),
        mean_recall: mean(&outcomes.recall),
        pearson,
        spearman,
        bootstrap_ci: ci,
        ablation_rows,
        timings,
    })
}

/// Times exact search and certainty scoring per query on the calling
/// thread. Scoring reuses the search's neighbor list, so its cost is the
/// quantize/reconstruct step plus `K` distance evaluations. With
/// `with_scoring == false` only search is timed and the overhead is zero.
pub fn measure_overhead(queries: &EmbeddingSet, scorer: &Scorer, repetitions: usize, with_scoring: bool) -> Result<OverheadTimings> {
    if repetitions < 3 {
        return Err(Error::config("timing_repetitions", "must be at least 3"));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries to time".into()));
    }
    let k = scorer.config().k;
    let n = queries.len();
    let mut search = vec![Vec::with_capacity(repetitions); n];
    let mut score = vec![Vec::with_capacity(repetitions); n];
    for _ in 0..repetitions {
        for i in 0..n {
            let q = queries.row(i);
            let t0 = Instant::now();
            let list = scorer.index().search_exact(q, k)?;
            let t1 = Instant::now();
            if with_scoring {
                std::hint::black_box(scorer.assess_with_neighbors(queries.id(i), q, &list)?);
            }
            let t2 = Instant::now();
            search[i].push((t1 - t0).as_secs_f64() * 1e3);
            score[i].push((t2 - t1).as_secs_f64() * 1e3);
        }
    }
    let a: Vec<f64> = search.iter_mut().map(|v| median(v)).collect();
    let s: Vec<f64> = if with_scoring { score.iter_mut().map(|v| median(v)).collect() } else { vec![0.0; n] };
    let mut frac: Vec<f64> = a.iter().zip(&s).map(|(a, s)| if a + s > 0.0 { s / (a + s) } else { 0.0 }).collect();
    let (sum_a, sum_s) = (a.iter().sum::<f64>(), s.iter().sum::<f64>());
    Ok(OverheadTimings {
        search_ms: median(&mut a.clone()),
        score_ms: median(&mut s.clone()),
        overhead_fraction: median(&mut frac),
        aggregate_overhead_fraction: if sum_a + sum_s > 0.0 { sum_s / (sum_a + sum_s) } else { 0.0 },
        queries: n,
        repetitions,
    })
}

/// Median over `repetitions` of the mean per-query scoring time (ms),
/// given precomputed neighbor lists.
pub fn scoring_cost(scorer: &Scorer, queries: &EmbeddingSet, neighbors: &[NeighborList], repetitions: usize) -> Result<f64> {
    if neighbors.len() != queries.len() {
        return Err(Error::Join("one neighbor list per query required".into()));
    }
    let mut per_rep = Vec::with_capacity(repetitions);
    for _ in 0..repetitions.max(1) {
        let t = Instant::now();
        for (i, list) in neighbors.iter().enumerate() {
            std::hint::black_box(scorer.assess_with_neighbors(queries.id(i), queries.row(i), list)?);
        }
        per_rep.push(t.elapsed().as_secs_f64() * 1e3 / queries.len().max(1) as f64);
    }
    Ok(median(&mut per_rep))
}

/// Aligned plain-text rendering of a report.
pub fn render_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Queries: {}   K: {}", r.queries, r.k);
    let _ = writeln!(
        out,
        "Recall@{}: {:.4}   95% CI [{:.4}, {:.4}]   (bootstrap, {} resamples)",
        r.k, r.mean_recall, r.bootstrap_ci.low, r.bootstrap_ci.high, r.bootstrap_ci.resamples
    );
    let _ = writeln!(
        out,
        "Score/recall correlation: pearson {}   spearman {}",
        fmt_corr(r.pearson),
        fmt_corr(r.spearman)
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<32} {:>9} {:>9} {:>10} {:>10} {:>7}",
        "Component", "Pearson", "Spearman", "Recall", "Adaptive", "Alerts"
    );
    for row in &r.ablation_rows {
        let _ = writeln!(
            out,
            "{:<32} {:>9} {:>9} {:>10.4} {:>10.4} {:>7}",
            row.name,
            fmt_corr(row.pearson),
            fmt_corr(row.spearman), row.mean_recall, row.adaptive_mean_recall, row.alerts
        );
    }
    if let Some(t) = &r.timings {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>12} {:>10}", "Operation", "Time (ms)", "Overhead");
        let _ = writeln!(out, "{:<24} {:>12.4} {:>10}", "Exact search", t.search_ms, "-");
        let _ = writeln!(out, "{:<24} {:>12.4} {:>9.2}%", "Certainty scoring", t.score_ms, 100.0 * t.overhead_fraction);
        let _ = writeln!(out, "{:<24} {:>12.4} {:>10}", "Total", t.search_ms + t.score_ms, "");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_examples() {
        let relevant = rel(&["a", "b", "c", "d"]);
        let all = ["a", "b", "c", "d", "x"];
        assert_eq!(recall_at_k(all, &relevant, 10).unwrap(), 1.0);
        let half = ["x", "a", "y", "b", "z", "w", "v", "u", "t", "s"];
        assert_eq!(recall_at_k(half, &relevant, 10).unwrap(), 0.5);
        assert_eq!(recall_at_k(["x", "y"], &relevant, 10).unwrap(), 0.0);
        assert!(matches!(recall_at_k(["a"], &BTreeSet::new(), 10), Err(Error::EmptyInput(_))));
        // Only the first K count.
        assert_eq!(recall_at_k(["x", "a"], &relevant, 1).unwrap(), 0.0);
    }

    #[test]
    fn budget_recall_matches_recall_on_short_lists() {
        let relevant = rel(&["a", "b", "c"]);
        let list = ["a", "x", "b"];
        assert_eq!(recall_within_budget(list, &relevant, 3).unwrap(), recall_at_k(list, &relevant, 3).unwrap());
        assert_eq!(recall_within_budget(["a", "b", "c", "x"], &relevant, 2).unwrap(), 1.0);
    }

    #[test]
    fn ablation_names() {
        let names: Vec<String> = AblationConfig::standard(0.6, 0.4).iter().map(|c| c.name()).collect();
        assert_eq!(names[0], "quantization stability");
        assert_eq!(names[1], "neighborhood density");
        assert!(names[3].contains("alpha=0.6"));
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k_when_relevant_fit(
            ranking in prop::collection::vec(0u8..30, 1..40),
            rel_ids in prop::collection::btree_set(0u8..30, 1..5),
        ) {
            let ids: Vec<String> = ranking.iter().map(|i| format!("d{i}")).collect();
            let relevant: BTreeSet<String> = rel_ids.iter().map(|i| format!("d{i}")).collect();
            // With |relevant| ≤ K the denominator is constant and recall can only grow.
            let mut prev = 0.0;
            for k in relevant.len()..=ids.len().max(relevant.len()) {
                let r = recall_at_k(ids.iter().map(String::as_str), &relevant, k).unwrap();
                prop_assert!(r >= prev);
                prop_assert!((0.0..=1.0).contains(&r));
                prev = r;
            }
            // The budget form is monotone for every list prefix.
            let mut prev = 0.0;
            for len in 0..=ids.len() {
                let r = recall_within_budget(ids[..len].iter().map(String::as_str), &relevant, 3).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
        }
    }
}
