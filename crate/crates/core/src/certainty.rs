//! Per-query certainty scoring.
//!
//! A query embedding gets two signals:
//!
//! * **stability** `S = exp(-‖e − R(Q(e))‖² / 2σ²)`, how well the product
//!   quantizer reproduces it;
//! * **density** `N = K / (Σ ‖e − nᵢ‖² + ε)` over its `K` nearest corpus
//!   neighbors, rank-normalized into `(0, 1]` against a calibration sample.
//!
//! The two are fused by one of three [`Combiner`]s. [`Scorer`] bundles the
//! index, codebook, σ estimate and density calibration needed to score a
//! query end to end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{Index, NeighborList};
use crate::par::{self, Execution};
use crate::pq::{reconstruction_mse, PqCodebook};
use crate::types::{sq_dist, EmbeddingSet};

/// Lower bound applied to every σ² estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// One σ² for all queries: the codebook's reconstruction MSE on a
    /// calibration set.
    #[default]
    GlobalCalibration,
    /// σ̂² per query: mean squared distance to its neighbors.
    PerQueryLocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub mode: SigmaMode,
    pub value: f64,
}

impl SigmaEstimate {
    pub fn new(mode: SigmaMode, value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Range(format!("sigma must be positive and finite, got {value}")));
        }
        Ok(SigmaEstimate { mode, value })
    }
}

/// σ² from the codebook's mean reconstruction error on `calibration`.
pub fn estimate_sigma_global(calibration: &EmbeddingSet, cb: &PqCodebook) -> Result<SigmaEstimate> {
    let mse = reconstruction_mse(calibration, cb)?;
    SigmaEstimate::new(SigmaMode::GlobalCalibration, mse.max(SIGMA_FLOOR))
}

/// σ̂² as the mean squared neighbor distance.
pub fn estimate_sigma_local(neighbors: &NeighborList) -> Result<SigmaEstimate> {
    if neighbors.is_empty() {
        return Err(Error::EmptyInput("local sigma needs at least one neighbor".into()));
    }
    let mean = neighbors.iter().map(|n| n.distance.value()).sum::<f64>() / neighbors.len() as f64;
    SigmaEstimate::new(SigmaMode::PerQueryLocal, mean.max(SIGMA_FLOOR))
}

/// Dispatches on `mode`; `neighbors` is only consulted in per-query mode.
pub fn estimate_sigma(
    mode: SigmaMode,
    calibration: &EmbeddingSet,
    cb: &PqCodebook,
    neighbors: Option<&NeighborList>,
) -> Result<SigmaEstimate> {
    match mode {
        SigmaMode::GlobalCalibration => estimate_sigma_global(calibration, cb),
        SigmaMode::PerQueryLocal => {
            estimate_sigma_local(neighbors.ok_or_else(|| Error::EmptyInput("no neighbor list".into()))?)
        }
    }
}

/// `exp(-err / 2σ²)` for a squared reconstruction error `err`.
pub fn stability_from_error(err: f64, sigma: &SigmaEstimate) -> f64 {
    (-err / (2.0 * sigma.value)).exp().max(f64::MIN_POSITIVE)
}

/// Quantization stability of `e` under `cb`.
pub fn stability_score(e: &[f64], cb: &PqCodebook, sigma: &SigmaEstimate) -> Result<f64> {
    Ok(stability_from_error(cb.quantization_error(e)?, sigma))
}

/// `K / (Σ dᵢ + ε)` from a sum of `k` squared neighbor distances.
pub fn density_from_sum(k: usize, sq_sum: f64, epsilon: f64) -> f64 {
    k as f64 / (sq_sum + epsilon)
}

/// Neighborhood density of a neighbor list.
pub fn density_score(neighbors: &NeighborList, epsilon: f64) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::EmptyInput("density needs at least one neighbor".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Range(format!("epsilon must be positive, got {epsilon}")));
    }
    let sum = neighbors.iter().map(|n| n.distance.value()).sum();
    Ok(density_from_sum(neighbors.len(), sum, epsilon))
}

/// Empirical-CDF rank of `raw` among `calibration`, floored at `1/(n+1)`.
pub fn normalize_density(raw: f64, calibration: &[f64]) -> Result<f64> {
    let mut sorted = calibration.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(DensityCalibration::from_sorted(sorted)?.normalize(raw))
}

/// Sorted calibration densities for repeated rank normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityCalibration {
    sorted: Vec<f64>,
}

impl DensityCalibration {
    pub fn new(mut raws: Vec<f64>) -> Result<Self> {
        raws.sort_by(f64::total_cmp);
        Self::from_sorted(raws)
    }

    fn from_sorted(sorted: Vec<f64>) -> Result<Self> {
        if sorted.is_empty() {
            return Err(Error::EmptyInput("density calibration set is empty".into()));
        }
        Ok(DensityCalibration { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        let n = self.sorted.len();
        let at_or_below = self.sorted.partition_point(|&v| v <= raw);
        (at_or_below as f64 / n as f64).max(1.0 / (n as f64 + 1.0))
    }
}

/// How stability and normalized density are fused.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    /// `2SN / (S + N)`
    #[default]
    Harmonic,
    /// `αS + βN` with `α + β = 1`
    Linear,
    /// `S · N`
    Product,
}

/// Fuses two scores in `(0, 1]`.
pub fn combine(stability: f64, density: f64, combiner: Combiner, alpha: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("stability", stability), ("density", density)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Range(format!("{name} must lie in (0, 1], got {v}")));
        }
    }
    let c = match combiner {
        Combiner::Harmonic => 2.0 * stability * density / (stability + density),
        Combiner::Linear => {
            check_weights(alpha, beta)?;
            alpha * stability + beta * density
        }
        Combiner::Product => stability * density,
    };
    Ok(c.clamp(f64::MIN_POSITIVE, 1.0))
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::Range(format!("weights must lie in [0, 1], got alpha={alpha} beta={beta}")));
    }
    if (alpha + beta - 1.0).abs() > 1e-9 {
        return Err(Error::Range(format!("linear weights must sum to 1, got {}", alpha + beta)));
    }
    Ok(())
}

/// `1 − exp(−score·K / 2D)`, reported next to observed recall but never
/// enforced.
pub fn recall_bound(score: f64, k: usize, dim: usize) -> f64 {
    -(-score * k as f64 / (2.0 * dim as f64)).exp_m1()
}

/// Scoring parameters recorded with every score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub k: usize,
}

/// One scored query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertaintyScore {
    pub query_id: String,
    pub stability: f64,
    pub raw_density: f64,
    pub norm_density: f64,
    pub combined: f64,
    pub combiner: Combiner,
    pub params: ScoreParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub k: usize,
    pub epsilon: f64,
    pub sigma_mode: SigmaMode,
    pub combiner: Combiner,
    pub alpha: f64,
    pub beta: f64,
    /// Corpus rows (taken at an even stride) used to fit σ² and the
    /// density calibration; 0 means all rows.
    pub calibration_rows: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            k: 10,
            epsilon: 1e-6,
            sigma_mode: SigmaMode::GlobalCalibration,
            combiner: Combiner::Harmonic,
            alpha: 0.6,
            beta: 0.4,
            calibration_rows: 2000,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive and finite"));
        }
        if self.combiner == Combiner::Linear {
            check_weights(self.alpha, self.beta).map_err(|e| Error::config("alpha", e.to_string()))?;
        } else if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("alpha", "weights must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn params(&self) -> ScoreParams {
        ScoreParams { alpha: self.alpha, beta: self.beta, epsilon: self.epsilon, k: self.k }
    }
}

/// Everything needed to score queries against one index.
#[derive(Clone, Debug)]
pub struct Scorer<'a> {
    index: &'a Index,
    codebook: &'a PqCodebook,
    config: ScorerConfig,
    global_sigma: SigmaEstimate,
    calibration: DensityCalibration,
}

impl<'a> Scorer<'a> {
    /// Calibrates on a strided sample of the indexed corpus.
    pub fn new(index: &'a Index, codebook: &'a PqCodebook, config: ScorerConfig) -> Result<Self> {
        let sample = index.corpus().strided_sample(config.calibration_rows)?;
        Self::with_calibration(index, codebook, config, &sample)
    }

    /// Calibrates on an explicit set. Rows that are corpus members do not
    /// count themselves as neighbors.
    pub fn with_calibration(
        index: &'a Index,
        codebook: &'a PqCodebook,
        config: ScorerConfig,
        calibration: &EmbeddingSet,
    ) -> Result<Self> {
        config.validate()?;
        codebook.check_dim(index.dim())?;
        if calibration.dim() != index.dim() {
            return Err(Error::Dimension { expected: index.dim(), actual: calibration.dim() });
        }
        let global_sigma = estimate_sigma_global(calibration, codebook)?;
        let raws = par::try_map_range(Execution::default(), calibration.len(), |i| {
            let n = index.search_exact_excluding(calibration.row(i), config.k, Some(calibration.id(i)))?;
            if n.is_empty() {
                return Err(Error::InsufficientData("corpus has no rows besides the calibration row".into()));
            }
            density_score(&n, config.epsilon)
        })?;
        Ok(Scorer { index, codebook, config, global_sigma, calibration: DensityCalibration::new(raws)? })
    }

    /// Assembles a scorer from precomputed parts.
    pub fn from_parts(
        index: &'a Index,
        codebook: &'a PqCodebook,
        config: ScorerConfig,
        global_sigma: SigmaEstimate,
        calibration: DensityCalibration,
    ) -> Result<Self> {
        config.validate()?;
        codebook.check_dim(index.dim())?;
        Ok(Scorer { index, codebook, config, global_sigma, calibration })
    }

    pub fn index(&self) -> &'a Index {
        self.index
    }

    pub fn codebook(&self) -> &'a PqCodebook {
        self.codebook
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn global_sigma(&self) -> SigmaEstimate {
        self.global_sigma
    }

    pub fn calibration(&self) -> &DensityCalibration {
        &self.calibration
    }

    /// The same scorer with a different combiner (and weights).
    pub fn with_combiner(&self, combiner: Combiner, alpha: f64, beta: f64) -> Result<Self> {
        let config = ScorerConfig { combiner, alpha, beta, ..self.config };
        config.validate()?;
        Ok(Scorer { config, ..self.clone() })
    }

    /// Full assessment: quantize, reconstruct, stability; top-K search,
    /// density; normalize; combine.
    pub fn assess(&self, query_id: &str, q: &[f64]) -> Result<CertaintyScore> {
        let neighbors = self.index.search_exact(q, self.config.k)?;
        self.assess_with_neighbors(query_id, q, &neighbors)
    }

    /// Scores `q` using a neighbor list the caller already retrieved. The
    /// neighbor distances are recomputed exactly from the corpus rows, so
    /// lists from approximate scans are fine.
    pub fn assess_with_neighbors(&self, query_id: &str, q: &[f64], neighbors: &NeighborList) -> Result<CertaintyScore> {
        let sq_sum = self.neighbor_sq_sum(q, neighbors)?;
        let sigma = match self.config.sigma_mode {
            SigmaMode::GlobalCalibration => self.global_sigma,
            SigmaMode::PerQueryLocal => {
                SigmaEstimate::new(SigmaMode::PerQueryLocal, (sq_sum / neighbors.len() as f64).max(SIGMA_FLOOR))?
            }
        };
        let stability = stability_score(q, self.codebook, &sigma)?;
        let raw_density = density_from_sum(neighbors.len(), sq_sum, self.config.epsilon);
        let norm_density = self.calibration.normalize(raw_density);
        let combined = combine(stability, norm_density, self.config.combiner, self.config.alpha, self.config.beta)?;
        Ok(CertaintyScore {
            query_id: query_id.to_string(),
            stability,
            raw_density,
            norm_density,
            combined,
            combiner: self.config.combiner,
            params: self.config.params(),
        })
    }

    /// Unnormalized density of `q` over `neighbors`, with the K distances
    /// recomputed from the corpus rows.
    pub fn raw_density(&self, q: &[f64], neighbors: &NeighborList) -> Result<f64> {
        let sq_sum = self.neighbor_sq_sum(q, neighbors)?;
        Ok(density_from_sum(neighbors.len(), sq_sum, self.config.epsilon))
    }

    fn neighbor_sq_sum(&self, q: &[f64], neighbors: &NeighborList) -> Result<f64> {
        self.codebook.check_dim(q.len())?;
        if neighbors.is_empty() {
            return Err(Error::EmptyInput("density needs at least one neighbor".into()));
        }
        let corpus = self.index.corpus();
        Ok(neighbors.iter().map(|n| sq_dist(q, corpus.row(n.row))).sum())
    }

    /// Scores every row of `queries`, output in input order.
    pub fn assess_batch(&self, queries: &EmbeddingSet, exec: Execution) -> Result<Vec<CertaintyScore>> {
        par::try_map_range(exec, queries.len(), |i| self.assess(queries.id(i), queries.row(i)))
    }
}
