//! Streaming quality monitor: scores each query, raises an alert when the
//! combined score falls below a threshold, optionally widens retrieval for
//! alerted queries, and keeps rolling statistics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::certainty::{CertaintyScore, Scorer};
use crate::error::{Error, Result};
use crate::index::NeighborList;
use crate::par::{self, Execution};
use crate::types::EmbeddingSet;

/// What to do for an alerted query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdaptivePolicy {
    #[default]
    None,
    /// Retrieve `min(factor·K, cap)` neighbors instead of `K`.
    ExpandK { factor: usize, cap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Alert when `combined < threshold`.
    pub threshold: f64,
    pub policy: AdaptivePolicy,
    /// Queries per rolling-statistics window.
    pub window: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { threshold: 0.5, policy: AdaptivePolicy::None, window: 100 }
    }
}

impl MonitorConfig {
    pub fn validate(&self, base_k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must lie in [0, 1]"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if let AdaptivePolicy::ExpandK { factor, cap } = self.policy {
            if factor < 2 {
                return Err(Error::config("policy.factor", "must be at least 2"));
            }
            if cap < base_k {
                return Err(Error::config("policy.cap", format!("must be at least the base K ({base_k})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    None,
    ExpandedK(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mean_combined: f64,
    pub alert_rate: f64,
}

impl WindowStats {
    fn of<'a>(items: impl Iterator<Item = &'a (f64, bool)>) -> Self {
        let (mut n, mut sum, mut alerts) = (0usize, 0.0, 0usize);
        for &(c, a) in items {
            n += 1;
            sum += c;
            alerts += a as usize;
        }
        let n = n.max(1) as f64;
        WindowStats { mean_combined: sum / n, alert_rate: alerts as f64 / n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorEvent {
    pub query_id: String,
    pub score: CertaintyScore,
    pub alert: bool,
    pub action: Action,
    /// Statistics over the trailing window, this query included.
    pub window: WindowStats,
}

/// The event-log line written for each query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub query_id: String,
    pub combined: f64,
    pub alert: bool,
    pub action: Action,
    pub window_mean: f64,
}

impl MonitorEvent {
    pub fn record(&self) -> EventRecord {
        EventRecord {
            query_id: self.query_id.clone(),
            combined: self.score.combined,
            alert: self.alert,
            action: self.action,
            window_mean: self.window.mean_combined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorSummary {
    pub total: usize,
    pub alerts: usize,
    pub alert_rate: f64,
    pub mean_combined: f64,
    pub min_combined: f64,
    pub max_combined: f64,
    /// Consecutive non-overlapping windows; the last may be partial.
    pub windows: Vec<WindowStats>,
}

pub struct Monitor<'a> {
    scorer: Scorer<'a>,
    config: MonitorConfig,
    trailing: VecDeque<(f64, bool)>,
    history: Vec<(f64, bool)>,
}

impl<'a> Monitor<'a> {
    pub fn new(scorer: Scorer<'a>, config: MonitorConfig) -> Result<Self> {
        config.validate(scorer.config().k)?;
        Ok(Monitor { scorer, config, trailing: VecDeque::with_capacity(config.window), history: Vec::new() })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn scorer(&self) -> &Scorer<'a> {
        &self.scorer
    }

    /// Scores one query and updates the statistics. Returns the event and
    /// the neighbor list handed back to the caller: base-K normally,
    /// expanded for alerted queries under [`AdaptivePolicy::ExpandK`].
    pub fn process_query(&mut self, query_id: &str, q: &[f64]) -> Result<(MonitorEvent, NeighborList)> {
        let (score, neighbors) = self.score_one(query_id, q)?;
        Ok(self.record(score, neighbors))
    }

    /// Processes `queries` in order. Scoring may run in parallel;
    /// statistics are updated in stream order.
    pub fn process_stream(&mut self, queries: &EmbeddingSet, exec: Execution) -> Result<Vec<(MonitorEvent, NeighborList)>> {
        let this = &*self;
        let scored = par::try_map_range(exec, queries.len(), |i| this.score_one(queries.id(i), queries.row(i)))?;
        Ok(scored.into_iter().map(|(s, n)| self.record(s, n)).collect())
    }

    fn score_one(&self, query_id: &str, q: &[f64]) -> Result<(CertaintyScore, NeighborList)> {
        let base_k = self.scorer.config().k;
        let base = self.scorer.index().search_exact(q, base_k)?;
        let score = self.scorer.assess_with_neighbors(query_id, q, &base)?;
        let neighbors = match self.config.policy {
            AdaptivePolicy::ExpandK { factor, cap } if score.combined < self.config.threshold => {
                self.scorer.index().search_exact(q, (factor * base_k).min(cap))?
            }
            _ => base,
        };
        Ok((score, neighbors))
    }

    fn record(&mut self, score: CertaintyScore, neighbors: NeighborList) -> (MonitorEvent, NeighborList) {
        let alert = score.combined < self.config.threshold;
        let action = match self.config.policy {
            AdaptivePolicy::ExpandK { factor, cap } if alert => {
                Action::ExpandedK((factor * self.scorer.config().k).min(cap))
            }
            _ => Action::None,
        };
        if self.trailing.len() == self.config.window {
            self.trailing.pop_front();
        }
        self.trailing.push_back((score.combined, alert));
        self.history.push((score.combined, alert));
        let event = MonitorEvent {
            query_id: score.query_id.clone(),
            window: WindowStats::of(self.trailing.iter()),
            score,
            alert,
            action,
        };
        (event, neighbors)
    }

    /// Statistics over everything processed so far.
    pub fn summary(&self) -> Result<MonitorSummary> {
        if self.history.is_empty() {
            return Err(Error::EmptyInput("no queries processed".into()));
        }
        let total = self.history.len();
        let alerts = self.history.iter().filter(|(_, a)| *a).count();
        let combined = self.history.iter().map(|(c, _)| *c);
        Ok(MonitorSummary {
            total,
            alerts,
            alert_rate: alerts as f64 / total as f64,
            mean_combined: combined.clone().sum::<f64>() / total as f64,
            min_combined: combined.clone().fold(f64::INFINITY, f64::min),
            max_combined: combined.fold(f64::NEG_INFINITY, f64::max),
            windows: self.history.chunks(self.config.window).map(|c| WindowStats::of(c.iter())).collect(),
        })
    }

    /// Returns the summary and resets the statistics.
    pub fn drain_stats(&mut self) -> Result<MonitorSummary> {
        let summary = self.summary()?;
        self.history.clear();
        self.trailing.clear();
        Ok(summary)
    }
}
