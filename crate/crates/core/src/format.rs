//! On-disk formats: SCRT embedding files (binary or text), SCPQ codebooks
//! and TREC qrels/run files.
//!
//! SCRT binary layout, all integers u32 little-endian:
//!
//! ```text
//! "SCRT" | version | count | dim | count*dim f32 LE (row-major) | count ids, '\n'-terminated
//! ```
//!
//! Any file not starting with the magic bytes is read as text: one row per
//! line, an id followed by `dim` whitespace-separated numbers.
//!
//! SCPQ: `"SCPQ" | version | m | k | sub_dim | m*k*sub_dim f32 LE`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pq::{PqCodebook, PqConfig};
use crate::types::EmbeddingSet;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SCRT";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"SCPQ";
pub const FORMAT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Parse("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported format version {v}")));
    }
    Ok(())
}

/// Parses an embedding file, sniffing binary vs text by the magic bytes.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.starts_with(EMBEDDING_MAGIC) {
        decode_embeddings_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse(format!("not SCRT and not UTF-8 text: {e}")))?;
        parse_embeddings_text(text)
    }
}

fn decode_embeddings_binary(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut cur = Cursor { buf: bytes, pos: 4 };
    check_version(cur.u32()?)?;
    let count = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let data = cur.f32s(count * dim)?;
    let tail = std::str::from_utf8(&bytes[cur.pos..]).map_err(|e| Error::Parse(format!("ids are not UTF-8: {e}")))?;
    let mut ids = Vec::with_capacity(count);
    let mut rest = tail;
    for i in 0..count {
        let nl = rest.find('\n').ok_or_else(|| Error::Parse(format!("missing id for row {i}")))?;
        ids.push(rest[..nl].to_string());
        rest = &rest[nl + 1..];
    }
    if !rest.is_empty() {
        return Err(Error::Parse("trailing bytes after ids".into()));
    }
    EmbeddingSet::from_flat(dim, data, ids)
}

/// Parses the text format. Blank lines and `#` comments are skipped.
pub fn parse_embeddings_text(text: &str) -> Result<EmbeddingSet> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut ids = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().unwrap();
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: `{f}` is not a number", lineno + 1)))?;
            data.push(v);
        }
        let row_dim = data.len() - before;
        match dim {
            None => dim = Some(row_dim),
            Some(d) if d != row_dim => return Err(Error::Dimension { expected: d, actual: row_dim }),
            _ => {}
        }
        ids.push(id.to_string());
    }
    let dim = dim.ok_or_else(|| Error::EmptyInput("text embedding file has no rows".into()))?;
    EmbeddingSet::from_flat(dim, data, ids)
}

/// Serializes to the SCRT binary layout. Coordinates are narrowed to f32.
pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + set.as_flat().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(set.len())?.to_le_bytes());
    out.extend_from_slice(&u32_len(set.dim())?.to_le_bytes());
    for &v in set.as_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for id in set.ids() {
        if id.contains('\n') {
            return Err(Error::InvalidValue(format!("id `{id}` contains a newline")));
        }
        out.extend_from_slice(id.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

/// Text rendering: `id v1 .. vD` per line.
pub fn encode_embeddings_text(set: &EmbeddingSet) -> String {
    let mut out = String::new();
    for (id, row) in set.rows() {
        out.push_str(id);
        for v in row {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidValue(format!("{n} exceeds the u32 header field")))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    decode_embeddings(&fs::read(path)?)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    fs::write(path, encode_embeddings(set)?)?;
    Ok(())
}

/// Serializes a codebook to the SCPQ layout.
pub fn encode_codebook(cb: &PqCodebook) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + cb.raw_centroids().len() * 4);
    out.extend_from_slice(CODEBOOK_MAGIC);
    for v in [FORMAT_VERSION, u32_len(cb.num_subspaces())?, u32_len(cb.centroids_per_subspace())?, u32_len(cb.sub_dim())?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &c in cb.raw_centroids() {
        out.extend_from_slice(&(c as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses an SCPQ codebook. Training parameters other than the shape are
/// not stored, so `kmeans_iters` and `seed` come back as zero.
pub fn decode_codebook(bytes: &[u8]) -> Result<PqCodebook> {
    if !bytes.starts_with(CODEBOOK_MAGIC) {
        return Err(Error::Parse("missing SCPQ magic".into()));
    }
    let mut cur = Cursor { buf: bytes, pos: 4 };
    check_version(cur.u32()?)?;
    let m = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let sub_dim = cur.u32()? as usize;
    let centroids = cur.f32s(m * k * sub_dim)?;
    if cur.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after centroids".into()));
    }
    let config = PqConfig { num_subspaces: m, centroids_per_subspace: k, kmeans_iters: 0, seed: 0 };
    PqCodebook::from_centroids(config, sub_dim, centroids)
}

pub fn read_codebook(path: &Path) -> Result<PqCodebook> {
    decode_codebook(&fs::read(path)?)
}

pub fn write_codebook(path: &Path, cb: &PqCodebook) -> Result<()> {
    fs::write(path, encode_codebook(cb)?)?;
    Ok(())
}

/// Relevance judgments: query id → relevant doc ids.
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

/// Reads `query_id iter doc_id rel` lines; rows with `rel > 0` are relevant.
pub fn parse_qrels<R: Read>(reader: R) -> Result<Qrels> {
    let mut out = Qrels::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [qid, _, doc, rel] = fields[..] else {
            return Err(Error::Parse(format!("qrels line {}: expected 4 fields", lineno + 1)));
        };
        let rel: i64 = rel
            .parse()
            .map_err(|_| Error::Parse(format!("qrels line {}: bad relevance `{rel}`", lineno + 1)))?;
        let entry = out.entry(qid.to_string()).or_default();
        if rel > 0 {
            entry.insert(doc.to_string());
        }
    }
    out.retain(|_, docs| !docs.is_empty());
    Ok(out)
}

pub fn write_qrels<W: Write>(mut w: W, qrels: &Qrels) -> Result<()> {
    for (qid, docs) in qrels {
        for doc in docs {
            writeln!(w, "{qid} 0 {doc} 1")?;
        }
    }
    Ok(())
}

/// One line of a TREC run file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

/// Ranked results per query, ordered by rank.
pub type Run = BTreeMap<String, Vec<RunEntry>>;

/// Reads `query_id Q0 doc_id rank score tag` lines.
pub fn parse_run<R: Read>(reader: R) -> Result<Run> {
    let mut out = Run::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [qid, _, doc, rank, score, _tag] = fields[..] else {
            return Err(Error::Parse(format!("run line {}: expected 6 fields", lineno + 1)));
        };
        let bad = |what: &str| Error::Parse(format!("run line {}: bad {what}", lineno + 1));
        out.entry(qid.to_string()).or_default().push(RunEntry {
            doc_id: doc.to_string(),
            rank: rank.parse().map_err(|_| bad("rank"))?,
            score: score.parse().map_err(|_| bad("score"))?,
        });
    }
    for entries in out.values_mut() {
        entries.sort_by_key(|e| e.rank);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EmbeddingSet {
        EmbeddingSet::from_rows(3, vec![("q1", vec![0.5, -1.0, 2.25]), ("q2", vec![1e-3, 7.0, -0.125])]).unwrap()
    }

    #[test]
    fn binary_layout() {
        let bytes = encode_embeddings(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"SCRT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0.5);
        assert!(bytes.ends_with(b"q1\nq2\n"));
        assert_eq!(bytes.len(), 16 + 6 * 4 + 6);
    }

    #[test]
    fn text_is_sniffed() {
        let set = decode_embeddings(b"a 1 2\n\n# comment\nb 3 4.5\n").unwrap();
        assert_eq!(set.dim(), 2);
        assert_eq!(set.row(1), &[3.0, 4.5]);
        assert!(matches!(decode_embeddings(b"a 1 2\nb 3\n"), Err(Error::Dimension { .. })));
        assert!(matches!(decode_embeddings(b""), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let bytes = encode_embeddings(&sample()).unwrap();
        assert!(decode_embeddings(&bytes[..20]).is_err());
        assert!(decode_embeddings(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn codebook_layout() {
        let cfg = PqConfig { num_subspaces: 2, centroids_per_subspace: 2, kmeans_iters: 3, seed: 1 };
        let cb = PqCodebook::from_centroids(cfg, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_codebook(&cb).unwrap();
        assert_eq!(&bytes[..4], b"SCPQ");
        assert_eq!(bytes.len(), 20 + 16);
        let back = decode_codebook(&bytes).unwrap();
        assert_eq!(back.raw_centroids(), cb.raw_centroids());
        assert_eq!(encode_codebook(&back).unwrap(), bytes);
    }

    #[test]
    fn qrels_and_runs() {
        let q = parse_qrels("q1 0 d1 1\nq1 0 d2 0\nq2 0 d3 2\nq3 0 d4 0\n".as_bytes()).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q["q1"].len(), 1);
        let mut buf = Vec::new();
        write_qrels(&mut buf, &q).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "q1 0 d1 1\nq2 0 d3 1\n");

        let run = parse_run("q1 Q0 d2 2 -0.5 t\nq1 Q0 d1 1 -0.1 t\n".as_bytes()).unwrap();
        assert_eq!(run["q1"][0].doc_id, "d1");
        assert!(parse_run("q1 Q0 d1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn binary_roundtrip_is_bit_identical(
            rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6f32, 5), 0..20)
        ) {
            let set = EmbeddingSet::from_rows(
                5,
                rows.iter().enumerate().map(|(i, r)| (format!("id-{i}"), r.iter().map(|&v| v as f64).collect())),
            ).unwrap();
            let bytes = encode_embeddings(&set).unwrap();
            let back = decode_embeddings(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
        }
    }
}
