//! Synthetic corpora drawn from isotropic Gaussian "wells", one per
//! concept, with ground-truth relevance given by well membership.
//!
//! Wells come in three depth classes by variance. A deep (low-variance)
//! well stands for a sharply defined concept, a shallow one for an
//! ambiguous concept. The probes check the orderings the scoring stack is
//! expected to reproduce on such data.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certainty::{estimate_sigma_global, recall_bound, stability_from_error, CertaintyScore};
use crate::error::{Error, Result};
use crate::format::Qrels;
use crate::pq::PqCodebook;
use crate::types::{sq_dist, Embedding, EmbeddingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthClass {
    Deep,
    Medium,
    Shallow,
}

impl DepthClass {
    pub const ALL: [DepthClass; 3] = [DepthClass::Deep, DepthClass::Medium, DepthClass::Shallow];

    fn band(self, bands: &[f64; 3]) -> f64 {
        bands[self as usize]
    }
}

impl fmt::Display for DepthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthClass::Deep => "deep",
            DepthClass::Medium => "medium",
            DepthClass::Shallow => "shallow",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GravityWell {
    pub concept_id: String,
    pub centroid: Embedding,
    /// Per-coordinate variance σ_c².
    pub variance: f64,
    pub depth_class: DepthClass,
}

/// `‖x − μ‖² / 2σ² + ln(2πσ²)`, the well's negative log-density with the
/// one-dimensional normalizer.
pub fn well_potential(x: &[f64], well: &GravityWell) -> Result<f64> {
    let mu = well.centroid.as_slice();
    if x.len() != mu.len() {
        return Err(Error::Dimension { expected: mu.len(), actual: x.len() });
    }
    let v = well.variance;
    Ok(sq_dist(x, mu) / (2.0 * v) + (2.0 * std::f64::consts::PI * v).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_wells: usize,
    pub docs_per_well: usize,
    pub queries_per_well: usize,
    pub dim: usize,
    /// Variances of the deep, medium and shallow bands, strictly increasing.
    pub variance_bands: [f64; 3],
    /// Minimum centroid distance in units of the largest band's σ.
    pub separation_factor: f64,
    /// Typical pairwise centroid distance as a multiple of the minimum
    /// separation. Values near 1 pack wells tightly, so the broad wells'
    /// neighborhoods reach into adjacent wells.
    pub placement_spread: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_wells: 30,
            docs_per_well: 200,
            queries_per_well: 20,
            dim: 64,
            variance_bands: [0.05, 0.25, 1.0],
            separation_factor: 8.0,
            placement_spread: SPREAD,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_wells", self.num_wells),
            ("docs_per_well", self.docs_per_well),
            ("queries_per_well", self.queries_per_well),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        let [d, m, s] = self.variance_bands;
        if !(d > 0.0 && d < m && m < s && s.is_finite()) {
            return Err(Error::config("variance_bands", "must be positive and strictly increasing"));
        }
        if !(self.separation_factor > 0.0 && self.separation_factor.is_finite()) {
            return Err(Error::config("separation_factor", "must be positive"));
        }
        if !(self.placement_spread > 0.0 && self.placement_spread.is_finite()) {
            return Err(Error::config("placement_spread", "must be positive"));
        }
        Ok(())
    }

    pub fn min_separation(&self) -> f64 {
        self.separation_factor * self.variance_bands[2].sqrt()
    }
}

/// A generated corpus with queries and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInstance {
    pub config: SimConfig,
    pub wells: Vec<GravityWell>,
    pub corpus: EmbeddingSet,
    pub queries: EmbeddingSet,
    pub relevance: Qrels,
    /// Every doc and query id → its concept id.
    pub provenance: BTreeMap<String, String>,
}

const PLACEMENT_ATTEMPTS: usize = 10_000;
const SPREAD: f64 = 1.05;

/// Samples an instance. Well `i` gets depth class `i mod 3`.
pub fn generate_instance(config: &SimConfig) -> Result<SyntheticInstance> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let min_sep = config.min_separation();
    // Centroid coordinates ~ N(0, s²) put the typical pairwise distance at
    // `placement_spread` × the required minimum; rejection handles the rest.
    let scale = config.placement_spread * min_sep / (2.0 * dim as f64).sqrt();

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(config.num_wells);
    for w in 0..config.num_wells {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..dim).map(|_| scale * gaussian(&mut rng)).collect();
            if centroids.iter().all(|c| sq_dist(c, &cand) >= min_sep * min_sep) {
                centroids.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement { wells: w + 1, separation: min_sep, attempts: PLACEMENT_ATTEMPTS });
        }
    }

    let wells: Vec<GravityWell> = centroids
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let depth_class = DepthClass::ALL[i % 3];
            Ok(GravityWell {
                concept_id: format!("w{i:03}"),
                centroid: Embedding::new(c)?,
                variance: depth_class.band(&config.variance_bands),
                depth_class,
            })
        })
        .collect::<Result<_>>()?;

    let mut provenance = BTreeMap::new();
    let mut relevance = Qrels::new();
    let mut doc_data = Vec::with_capacity(config.num_wells * config.docs_per_well * dim);
    let mut doc_ids = Vec::new();
    for well in &wells {
        for j in 0..config.docs_per_well {
            let id = format!("{}-d{j:05}", well.concept_id);
            sample_into(&mut rng, well, &mut doc_data);
            provenance.insert(id.clone(), well.concept_id.clone());
            doc_ids.push(id);
        }
    }
    let mut query_data = Vec::with_capacity(config.num_wells * config.queries_per_well * dim);
    let mut query_ids = Vec::new();
    for well in &wells {
        let docs: std::collections::BTreeSet<String> =
            (0..config.docs_per_well).map(|j| format!("{}-d{j:05}", well.concept_id)).collect();
        for j in 0..config.queries_per_well {
            let id = format!("{}-q{j:04}", well.concept_id);
            sample_into(&mut rng, well, &mut query_data);
            provenance.insert(id.clone(), well.concept_id.clone());
            relevance.insert(id.clone(), docs.clone());
            query_ids.push(id);
        }
    }

    Ok(SyntheticInstance {
        config: *config,
        wells,
        corpus: EmbeddingSet::from_flat(dim, doc_data, doc_ids)?,
        queries: EmbeddingSet::from_flat(dim, query_data, query_ids)?,
        relevance,
        provenance,
    })
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sample_into(rng: &mut impl Rng, well: &GravityWell, out: &mut Vec<f64>) {
    let sd = well.variance.sqrt();
    out.extend(well.centroid.as_slice().iter().map(|&m| m + sd * gaussian(rng)));
}

/// Draws `n` points from one well; used to check the sampler's moments.
pub fn sample_well(well: &GravityWell, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * well.centroid.dim());
    for _ in 0..n {
        sample_into(&mut rng, well, &mut out);
    }
    out
}

impl SyntheticInstance {
    pub fn well(&self, concept_id: &str) -> Option<&GravityWell> {
        self.wells.iter().find(|w| w.concept_id == concept_id)
    }

    /// Depth class of the well an id (doc or query) was drawn from.
    pub fn depth_of(&self, id: &str) -> Option<DepthClass> {
        self.provenance.get(id).and_then(|c| self.well(c)).map(|w| w.depth_class)
    }

    /// Well centroids as an embedding set keyed by concept id.
    pub fn centroid_set(&self) -> Result<EmbeddingSet> {
        EmbeddingSet::from_rows(
            self.config.dim,
            self.wells.iter().map(|w| (w.concept_id.clone(), w.centroid.as_slice().to_vec())),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub depth_class: DepthClass,
    pub queries: usize,
    pub mean_quantization_error: f64,
    pub mean_stability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbeReport {
    pub sigma: f64,
    pub classes: Vec<ClassStats>,
    /// Mean quantization error is weakly increasing deep → medium → shallow.
    pub error_ordered: bool,
}

/// Groups queries by depth class and reports quantization error and
/// stability per class. σ² is the codebook's MSE on the corpus.
pub fn stability_depth_probe(instance: &SyntheticInstance, cb: &PqCodebook) -> Result<StabilityProbeReport> {
    let sigma = estimate_sigma_global(&instance.corpus, cb)?;
    let mut acc: BTreeMap<DepthClass, (usize, f64, f64)> = BTreeMap::new();
    for (id, q) in instance.queries.rows() {
        let class = instance.depth_of(id).ok_or_else(|| Error::Join(format!("query `{id}` has no well")))?;
        let err = cb.quantization_error(q)?;
        let e = acc.entry(class).or_default();
        e.0 += 1;
        e.1 += err;
        e.2 += stability_from_error(err, &sigma);
    }
    let classes: Vec<ClassStats> = acc
        .into_iter()
        .map(|(depth_class, (n, err, stab))| ClassStats {
            depth_class,
            queries: n,
            mean_quantization_error: err / n as f64,
            mean_stability: stab / n as f64,
        })
        .collect();
    let error_ordered = classes.windows(2).all(|w| w[0].mean_quantization_error <= w[1].mean_quantization_error);
    Ok(StabilityProbeReport { sigma: sigma.value, classes, error_ordered })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundProbeReport {
    pub queries: usize,
    pub k: usize,
    pub dim: usize,
    /// Fraction of queries whose observed recall is at least the bound.
    pub satisfied_fraction: f64,
    /// Mean of `recall − bound`.
    pub mean_slack: f64,
}

/// Compares observed Recall@K with `recall_bound(combined, K, D)` per query.
/// Diagnostic only.
pub fn recall_bound_probe(
    scores: &[CertaintyScore],
    recalls: &BTreeMap<String, f64>,
    k: usize,
    dim: usize,
) -> Result<BoundProbeReport> {
    if scores.len() != recalls.len() {
        return Err(Error::Join(format!("{} scores vs {} recalls", scores.len(), recalls.len())));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scored queries".into()));
    }
    let mut satisfied = 0usize;
    let mut slack = 0.0;
    for s in scores {
        let recall = *recalls
            .get(&s.query_id)
            .ok_or_else(|| Error::Join(format!("no recall for query `{}`", s.query_id)))?;
        let bound = recall_bound(s.combined, k, dim);
        if recall >= bound {
            satisfied += 1;
        }
        slack += recall - bound;
    }
    let n = scores.len() as f64;
    Ok(BoundProbeReport { queries: scores.len(), k, dim, satisfied_fraction: satisfied as f64 / n, mean_slack: slack / n })
}
