//! Exact top-K search and the PQ asymmetric-distance scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::pq::PqCodebook;
use crate::types::{sq_dist, EmbeddingSet, SquaredDistance};

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: String,
    /// Row of the neighbor in the indexed corpus.
    pub row: usize,
    pub distance: SquaredDistance,
}

/// Neighbors ascending by distance, ties by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborList(Vec<Neighbor>);

impl NeighborList {
    pub fn new(mut entries: Vec<Neighbor>) -> Self {
        entries.sort_by(|a, b| {
            a.distance.value().total_cmp(&b.distance.value()).then_with(|| a.id.cmp(&b.id))
        });
        NeighborList(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[Neighbor] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Neighbor> {
        self.0.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|n| n.id.as_str())
    }

    /// The first `k` entries.
    pub fn truncated(&self, k: usize) -> NeighborList {
        NeighborList(self.0.iter().take(k).cloned().collect())
    }
}

impl<'a> IntoIterator for &'a NeighborList {
    type Item = &'a Neighbor;
    type IntoIter = std::slice::Iter<'a, Neighbor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

struct Candidate<'a> {
    dist: f64,
    id: &'a str,
    row: usize,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// Bounded max-heap keeping the `k` smallest candidates.
struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<Candidate<'a>>,
}

impl<'a> TopK<'a> {
    fn new(k: usize) -> Self {
        TopK { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    fn offer(&mut self, dist: f64, id: &'a str, row: usize) {
        if self.heap.len() < self.k {
            self.heap.push(Candidate { dist, id, row });
        } else if let Some(top) = self.heap.peek() {
            if dist < top.dist || (dist == top.dist && id < top.id) {
                self.heap.pop();
                self.heap.push(Candidate { dist, id, row });
            }
        }
    }

    fn into_list(self) -> NeighborList {
        NeighborList(
            self.heap
                .into_sorted_vec()
                .into_iter()
                .map(|c| Neighbor { id: c.id.to_string(), row: c.row, distance: SquaredDistance::from_raw(c.dist) })
                .collect(),
        )
    }
}

/// A searchable corpus, optionally PQ-encoded for ADC scans.
#[derive(Clone, Debug)]
pub struct Index {
    corpus: EmbeddingSet,
    codebook: Option<PqCodebook>,
    codes: Vec<u32>,
}

/// Stores `corpus` and, when a codebook is given, encodes every row.
pub fn build_index(corpus: EmbeddingSet, codebook: Option<PqCodebook>) -> Result<Index> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cannot index an empty corpus".into()));
    }
    let mut codes = Vec::new();
    if let Some(cb) = &codebook {
        cb.check_dim(corpus.dim())?;
        let m = cb.num_subspaces();
        let per_row = par::map_range(Execution::default(), corpus.len(), |i| {
            let mut c = vec![0u32; m];
            cb.encode_into(corpus.row(i), &mut c);
            c
        });
        codes = per_row.concat();
    }
    Ok(Index { corpus, codebook, codes })
}

impl Index {
    pub fn corpus(&self) -> &EmbeddingSet {
        &self.corpus
    }

    pub fn codebook(&self) -> Option<&PqCodebook> {
        self.codebook.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.corpus.dim()
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Stored PQ code of corpus row `i`, if the index was built with a codebook.
    pub fn code(&self, i: usize) -> Option<&[u32]> {
        let m = self.codebook.as_ref()?.num_subspaces();
        Some(&self.codes[i * m..(i + 1) * m])
    }

    fn check_query(&self, q: &[f64], k: usize) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), actual: q.len() });
        }
        if k == 0 {
            return Err(Error::Range("K must be at least 1".into()));
        }
        Ok(())
    }

    /// The `k` rows nearest to `q`.
    pub fn search_exact(&self, q: &[f64], k: usize) -> Result<NeighborList> {
        self.search_exact_excluding(q, k, None)
    }

    /// Like [`Index::search_exact`], but skips the row whose id is
    /// `exclude_id` when it sits at distance exactly zero (a corpus member
    /// querying itself).
    pub fn search_exact_excluding(&self, q: &[f64], k: usize, exclude_id: Option<&str>) -> Result<NeighborList> {
        self.check_query(q, k)?;
        let mut top = TopK::new(k);
        for (row, (id, x)) in self.corpus.rows().enumerate() {
            let d = sq_dist(q, x);
            if d == 0.0 && exclude_id == Some(id) {
                continue;
            }
            top.offer(d, id, row);
        }
        Ok(top.into_list())
    }

    /// Per-query lookup table: squared distance from each query subvector
    /// to every centroid of its subspace, laid out `[subspace][centroid]`.
    pub fn adc_table(&self, q: &[f64]) -> Result<Vec<f64>> {
        let cb = self.codebook.as_ref().ok_or_else(|| Error::config("codebook", "index was built without a codebook"))?;
        cb.check_dim(q.len())?;
        let (m, k, sd) = (cb.num_subspaces(), cb.centroids_per_subspace(), cb.sub_dim());
        let mut table = Vec::with_capacity(m * k);
        for s in 0..m {
            let sub = &q[s * sd..(s + 1) * sd];
            table.extend((0..k).map(|j| sq_dist(sub, cb.centroid(s, j))));
        }
        Ok(table)
    }

    #[inline]
    fn adc_lookup(&self, table: &[f64], k: usize, code: &[u32]) -> f64 {
        code.iter().enumerate().map(|(s, &j)| table[s * k + j as usize]).sum()
    }

    /// Approximate search over the stored PQ codes.
    pub fn search_adc(&self, q: &[f64], k: usize) -> Result<NeighborList> {
        let table = self.adc_table(q)?;
        self.check_query(q, k)?;
        let cb = self.codebook.as_ref().expect("checked by adc_table");
        let (m, kc) = (cb.num_subspaces(), cb.centroids_per_subspace());
        let mut top = TopK::new(k);
        for (row, (id, code)) in self.corpus.ids().iter().zip(self.codes.chunks_exact(m)).enumerate() {
            top.offer(self.adc_lookup(&table, kc, code), id, row);
        }
        Ok(top.into_list())
    }

    /// ADC distance from `q` to every corpus row, in row order.
    pub fn adc_distances(&self, q: &[f64]) -> Result<Vec<f64>> {
        let table = self.adc_table(q)?;
        let cb = self.codebook.as_ref().expect("checked by adc_table");
        let (m, kc) = (cb.num_subspaces(), cb.centroids_per_subspace());
        Ok(self.codes.chunks_exact(m).map(|c| self.adc_lookup(&table, kc, c)).collect())
    }

    /// Exact search for every row of `queries`; output order matches input.
    pub fn batch_search(&self, queries: &EmbeddingSet, k: usize, exec: Execution) -> Result<Vec<NeighborList>> {
        par::try_map_range(exec, queries.len(), |i| self.search_exact(queries.row(i), k))
    }
}

/// Writes TREC run lines, `query_id Q0 doc_id rank score tag`, where the
/// score is the negated squared distance.
pub fn write_run<W: Write>(mut w: W, results: &[(&str, &NeighborList)], tag: &str) -> Result<()> {
    for (qid, list) in results {
        for (rank, n) in list.iter().enumerate() {
            writeln!(w, "{qid} Q0 {} {} {} {tag}", n.id, rank + 1, 0.0 - n.distance.value())?;
        }
    }
    Ok(())
}
