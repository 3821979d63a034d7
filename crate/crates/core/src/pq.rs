//! Product quantization: per-subspace k-means codebooks, encoding and
//! reconstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::types::{sq_dist, Embedding, EmbeddingSet};

/// Training parameters for a product quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqConfig {
    pub num_subspaces: usize,
    pub centroids_per_subspace: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl PqConfig {
    /// The default configuration for `dim`-dimensional data: about one
    /// subspace per 8 coordinates, 256 centroids, 25 Lloyd iterations.
    pub fn default_for_dim(dim: usize, seed: u64) -> Self {
        PqConfig {
            num_subspaces: default_num_subspaces(dim),
            centroids_per_subspace: 256,
            kmeans_iters: 25,
            seed,
        }
    }

    /// Checks the configuration against a `dim`-dimensional training set
    /// of `rows` rows.
    pub fn validate(&self, dim: usize, rows: usize) -> Result<()> {
        if self.num_subspaces == 0 || !dim.is_multiple_of(self.num_subspaces) {
            return Err(Error::config(
                "num_subspaces",
                format!("{} does not divide dimension {dim}", self.num_subspaces),
            ));
        }
        if self.centroids_per_subspace < 2 {
            return Err(Error::config("centroids_per_subspace", "must be at least 2"));
        }
        if self.centroids_per_subspace > u32::MAX as usize {
            return Err(Error::config("centroids_per_subspace", "too large"));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::config("kmeans_iters", "must be at least 1"));
        }
        if rows < self.centroids_per_subspace {
            return Err(Error::InsufficientData(format!(
                "{rows} training rows for {} centroids",
                self.centroids_per_subspace
            )));
        }
        Ok(())
    }
}

/// `dim / 8` moved to the closest divisor of `dim` (the smaller one on ties).
pub fn default_num_subspaces(dim: usize) -> usize {
    let target = ((dim as f64) / 8.0).round().max(1.0) as usize;
    (1..=dim)
        .filter(|m| dim.is_multiple_of(*m))
        .min_by_key(|&m| (m.abs_diff(target), m))
        .unwrap_or(1)
}

/// One centroid index per subspace.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PqCode(Vec<u32>);

impl PqCode {
    pub fn new(codes: Vec<u32>) -> Self {
        PqCode(codes)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A trained product quantizer: `m` tables of `k` centroids of `sub_dim`
/// coordinates each, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    config: PqConfig,
    sub_dim: usize,
    centroids: Vec<f64>,
}

impl PqCodebook {
    /// Wraps explicit centroid tables laid out `[subspace][centroid][coord]`.
    pub fn from_centroids(config: PqConfig, sub_dim: usize, centroids: Vec<f64>) -> Result<Self> {
        let (m, k) = (config.num_subspaces, config.centroids_per_subspace);
        if m == 0 || k == 0 || sub_dim == 0 {
            return Err(Error::config("num_subspaces", "codebook shape must be non-empty"));
        }
        if centroids.len() != m * k * sub_dim {
            return Err(Error::Dimension { expected: m * k * sub_dim, actual: centroids.len() });
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidValue("non-finite centroid coordinate".into()));
        }
        Ok(PqCodebook { config, sub_dim, centroids })
    }

    pub fn config(&self) -> &PqConfig {
        &self.config
    }

    pub fn num_subspaces(&self) -> usize {
        self.config.num_subspaces
    }

    pub fn centroids_per_subspace(&self) -> usize {
        self.config.centroids_per_subspace
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn dim(&self) -> usize {
        self.sub_dim * self.config.num_subspaces
    }

    pub fn raw_centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Centroid `j` of subspace `s`.
    pub fn centroid(&self, s: usize, j: usize) -> &[f64] {
        let k = self.config.centroids_per_subspace;
        let start = (s * k + j) * self.sub_dim;
        &self.centroids[start..start + self.sub_dim]
    }

    fn subspace_table(&self, s: usize) -> &[f64] {
        let stride = self.config.centroids_per_subspace * self.sub_dim;
        &self.centroids[s * stride..(s + 1) * stride]
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), actual: dim });
        }
        Ok(())
    }

    /// Nearest centroid per subspace, lowest index on ties.
    pub fn quantize(&self, e: &[f64]) -> Result<PqCode> {
        self.check_dim(e.len())?;
        let mut codes = vec![0u32; self.num_subspaces()];
        self.encode_into(e, &mut codes);
        Ok(PqCode(codes))
    }

    pub(crate) fn encode_into(&self, e: &[f64], out: &mut [u32]) {
        for (s, (sub, slot)) in e.chunks_exact(self.sub_dim).zip(out.iter_mut()).enumerate() {
            *slot = nearest(self.subspace_table(s), self.sub_dim, sub).0 as u32;
        }
    }

    /// Concatenation of the centroids selected by `code`.
    pub fn reconstruct(&self, code: &PqCode) -> Result<Embedding> {
        self.validate_code(code.as_slice())?;
        let mut out = Vec::with_capacity(self.dim());
        for (s, &j) in code.as_slice().iter().enumerate() {
            out.extend_from_slice(self.centroid(s, j as usize));
        }
        Embedding::new(out)
    }

    pub(crate) fn validate_code(&self, code: &[u32]) -> Result<()> {
        let (m, k) = (self.num_subspaces(), self.centroids_per_subspace());
        if code.len() != m {
            return Err(Error::Dimension { expected: m, actual: code.len() });
        }
        if let Some((s, &j)) = code.iter().enumerate().find(|(_, &j)| j as usize >= k) {
            return Err(Error::Code { subspace: s, index: j as usize, k });
        }
        Ok(())
    }

    /// `‖e − R(Q(e))‖²`.
    pub fn quantization_error(&self, e: &[f64]) -> Result<f64> {
        let recon = self.reconstruct(&self.quantize(e)?)?;
        Ok(sq_dist(e, recon.as_slice()))
    }
}

/// Index and squared distance of the nearest row of `table`.
#[inline]
pub(crate) fn nearest(table: &[f64], sub_dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, c) in table.chunks_exact(sub_dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Mean over rows of the squared quantization residual.
pub fn reconstruction_mse(set: &EmbeddingSet, cb: &PqCodebook) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("reconstruction_mse needs at least one row".into()));
    }
    cb.check_dim(set.dim())?;
    let errs = par::try_map_range(Execution::default(), set.len(), |i| cb.quantization_error(set.row(i)))?;
    Ok(errs.iter().sum::<f64>() / set.len() as f64)
}

/// Trains one k-means codebook per subspace.
pub fn train_codebook(train: &EmbeddingSet, cfg: &PqConfig) -> Result<PqCodebook> {
    train_codebook_with(train, cfg, Execution::default())
}

pub fn train_codebook_with(train: &EmbeddingSet, cfg: &PqConfig, exec: Execution) -> Result<PqCodebook> {
    cfg.validate(train.dim(), train.len())?;
    let m = cfg.num_subspaces;
    let sub_dim = train.dim() / m;
    let tables = par::try_map_range(exec, m, |s| {
        let points = extract_subspace(train, s, sub_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(subspace_seed(cfg.seed, s));
        kmeans(&points, sub_dim, cfg.centroids_per_subspace, cfg.kmeans_iters, &mut rng)
            .map_err(|e| match e {
                Error::InsufficientData(msg) => Error::InsufficientData(format!("subspace {s}: {msg}")),
                other => other,
            })
    })?;
    PqCodebook::from_centroids(*cfg, sub_dim, tables.concat())
}

fn subspace_seed(seed: u64, s: usize) -> u64 {
    seed ^ (s as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn extract_subspace(set: &EmbeddingSet, s: usize, sub_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(set.len() * sub_dim);
    for (_, row) in set.rows() {
        out.extend_from_slice(&row[s * sub_dim..(s + 1) * sub_dim]);
    }
    out
}

/// Lloyd's algorithm with k-means++ seeding. Returns `k * dim` centroid
/// coordinates.
pub(crate) fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points for {k} centroids")));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = kmeans_pp_seed(points, dim, k, rng)?;

    let mut assign = vec![u32::MAX; n];
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let (j, _) = nearest(&centroids, dim, point(i));
            if *a != j as u32 {
                *a = j as u32;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        sums.fill(0.0);
        counts.fill(0);
        for (i, &a) in assign.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for (acc, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *acc += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for d in 0..dim {
                    centroids[j * dim + d] = sums[j * dim + d] * inv;
                }
            }
        }
        repair_empty_clusters(points, dim, &mut centroids, &mut assign, &mut sums, &mut counts);
    }
    Ok(centroids)
}

/// Gives each empty cluster the point farthest from its own centroid,
/// taken only from clusters that keep at least one member.
fn repair_empty_clusters(
    points: &[f64],
    dim: usize,
    centroids: &mut [f64],
    assign: &mut [u32],
    sums: &mut [f64],
    counts: &mut [usize],
) {
    let k = counts.len();
    if counts.iter().all(|&c| c > 0) {
        return;
    }
    let n = assign.len();
    let mut dist: Vec<f64> = (0..n)
        .map(|i| {
            let a = assign[i] as usize;
            sq_dist(&points[i * dim..(i + 1) * dim], &centroids[a * dim..(a + 1) * dim])
        })
        .collect();
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..n)
            .filter(|&i| counts[assign[i] as usize] > 1)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
        let Some(i) = donor else { break };
        let p = &points[i * dim..(i + 1) * dim];
        let old = assign[i] as usize;
        counts[old] -= 1;
        let inv = 1.0 / counts[old] as f64;
        for d in 0..dim {
            sums[old * dim + d] -= p[d];
            centroids[old * dim + d] = sums[old * dim + d] * inv;
        }
        assign[i] = empty as u32;
        counts[empty] = 1;
        sums[empty * dim..(empty + 1) * dim].copy_from_slice(p);
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(p);
        dist[i] = 0.0;
    }
}

fn kmeans_pp_seed(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientData(format!("fewer than {k} distinct points")));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let chosen = pick.expect("positive total weight implies a candidate");
        let c = point(chosen).to_vec();
        for (i, slot) in d2.iter_mut().enumerate() {
            let d = sq_dist(point(i), &c);
            if d < *slot {
                *slot = d;
            }
        }
        centroids.extend_from_slice(&c);
    }
    Ok(centroids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy4() -> EmbeddingSet {
        EmbeddingSet::from_rows(
            2,
            vec![
                ("a", vec![0.0, 0.0]),
                ("b", vec![0.1, 0.0]),
                ("c", vec![5.0, 5.0]),
                ("d", vec![5.1, 5.0]),
            ],
        )
        .unwrap()
    }

    fn cfg(m: usize, k: usize) -> PqConfig {
        PqConfig { num_subspaces: m, centroids_per_subspace: k, kmeans_iters: 25, seed: 7 }
    }

    /// D=4, m=2, both subspaces use {(0,0),(1,1)}.
    pub(crate) fn toy_codebook() -> PqCodebook {
        PqCodebook::from_centroids(cfg(2, 2), 2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn two_means_on_four_points() {
        // Optimal 2-means by exhaustive enumeration of the 7 non-trivial splits.
        let set = toy4();
        let pts: Vec<&[f64]> = (0..4).map(|i| set.row(i)).collect();
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..15 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&[f64]> =
                    (0..4).filter(|i| ((mask >> i) & 1 == 1) == side).map(|i| pts[i]).collect();
                let mean: Vec<f64> = (0..2)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                cost += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        assert!((best.0 - 0.01).abs() < 1e-12);

        let cb = train_codebook(&set, &cfg(1, 2)).unwrap();
        let mut cents: Vec<Vec<f64>> = (0..2).map(|j| cb.centroid(0, j).to_vec()).collect();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (got, want) in cents.iter().zip([[0.05, 0.0], [5.05, 5.0]]) {
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12, "{got:?}");
        }
        let mse = reconstruction_mse(&set, &cb).unwrap();
        assert!((mse - 0.0025).abs() < 1e-12, "{mse}");
    }

    #[test]
    fn k_distinct_rows_give_zero_distortion() {
        let set = EmbeddingSet::from_rows(
            2,
            vec![("a", vec![0.5, 1.25]), ("b", vec![-2.0, 3.0]), ("c", vec![4.0, 4.0])],
        )
        .unwrap();
        let cb = train_codebook(&set, &cfg(1, 3)).unwrap();
        assert_eq!(reconstruction_mse(&set, &cb).unwrap(), 0.0);
        for (_, row) in set.rows() {
            assert!((0..3).any(|j| cb.centroid(0, j) == row));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let rows: Vec<(String, Vec<f64>)> = (0..200)
            .map(|i| {
                let x = i as f64;
                (format!("r{i}"), vec![(x * 0.37).sin(), (x * 1.3).cos(), (x * 0.11).sin() * 3.0, x / 50.0])
            })
            .collect();
        let set = EmbeddingSet::from_rows(4, rows).unwrap();
        let a = train_codebook_with(&set, &cfg(2, 16), Execution::Parallel).unwrap();
        let b = train_codebook_with(&set, &cfg(2, 16), Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let bits = |cb: &PqCodebook| cb.raw_centroids().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&train_codebook(&set, &cfg(2, 16)).unwrap()));
    }

    #[test]
    fn config_errors() {
        let set = toy4();
        assert!(matches!(
            train_codebook(&set, &cfg(3, 2)),
            Err(Error::Config { field, .. }) if field == "num_subspaces"
        ));
        assert!(matches!(train_codebook(&set, &cfg(1, 5)), Err(Error::InsufficientData(_))));
        assert!(matches!(train_codebook(&set, &cfg(1, 1)), Err(Error::Config { .. })));
        let dup = EmbeddingSet::from_rows(1, vec![("a", vec![1.0]), ("b", vec![1.0]), ("c", vec![1.0])]).unwrap();
        assert!(matches!(train_codebook(&dup, &cfg(1, 2)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn quantize_examples() {
        let cb = toy_codebook();
        assert_eq!(cb.quantize(&[0.9, 1.1, 0.1, -0.1]).unwrap().as_slice(), &[1, 0]);
        assert_eq!(cb.quantize(&[1.0, 1.0, 0.0, 0.0]).unwrap().as_slice(), &[1, 0]);
        // Equidistant from both centroids.
        assert_eq!(cb.quantize(&[0.5, 0.5, 0.5, 0.5]).unwrap().as_slice(), &[0, 0]);
        assert!(matches!(cb.quantize(&[0.0; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reconstruct_examples() {
        let cb = toy_codebook();
        let r = cb.reconstruct(&PqCode::new(vec![1, 0])).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 1.0, 0.0, 0.0]);
        let again = cb.reconstruct(&cb.quantize(r.as_slice()).unwrap()).unwrap();
        assert_eq!(again, r);
        assert!(matches!(
            cb.reconstruct(&PqCode::new(vec![2, 0])),
            Err(Error::Code { subspace: 0, index: 2, k: 2 })
        ));
        assert!(cb.reconstruct(&PqCode::new(vec![0])).is_err());
    }

    #[test]
    fn quantize_beats_every_other_code() {
        let cb = toy_codebook();
        let e = [0.3, 0.8, 0.6, 0.2];
        let best = cb.quantization_error(&e).unwrap();
        for a in 0..2u32 {
            for b in 0..2u32 {
                let r = cb.reconstruct(&PqCode::new(vec![a, b])).unwrap();
                assert!(best <= sq_dist(&e, r.as_slice()));
            }
        }
    }

    #[test]
    fn mse_of_centroid_concatenations_is_zero() {
        let cb = toy_codebook();
        let set = EmbeddingSet::from_rows(
            4,
            vec![("x", vec![0.0, 0.0, 1.0, 1.0]), ("y", vec![1.0, 1.0, 1.0, 1.0])],
        )
        .unwrap();
        assert_eq!(reconstruction_mse(&set, &cb).unwrap(), 0.0);
        assert!(matches!(reconstruction_mse(&EmbeddingSet::empty(4).unwrap(), &cb), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn default_subspaces() {
        assert_eq!(default_num_subspaces(64), 8);
        assert_eq!(default_num_subspaces(128), 16);
        assert_eq!(default_num_subspaces(2), 1);
        assert_eq!(default_num_subspaces(30), 3);
        assert_eq!(default_num_subspaces(7), 1);
    }
}
