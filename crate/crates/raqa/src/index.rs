//! Precomputed document-embedding store with exact top-K inner-product search.
//!
//! Exact search keeps the retrieval path a clean oracle at this corpus scale;
//! sub-linear structures are a documented extension point, not implemented.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::dataio::Corpus;
use crate::encoder::{DualEncoderParams, Side};
use crate::error::{Error, Result};
use crate::matrix::{dot, log_sum_exp};

const MAGIC: &[u8; 4] = b"RQIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    doc_ids: Vec<String>,
    dim: usize,
    /// Row-major, row i belongs to doc_ids[i].
    matrix: Vec<f64>,
    fingerprint: u64,
    id_to_row: HashMap<String, usize>,
}

/// Top-K retrieval output: raw scores non-increasing, probabilities normalized
/// over the returned entries only.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievedEntry>,
}

#[derive(Debug, Clone)]
pub struct RetrievedEntry {
    pub doc_id: String,
    pub raw_score: f64,
    pub prob: f64,
}

/// Encodes every document once with the frozen document encoder.
pub fn build_index(corpus: &Corpus, params: &DualEncoderParams) -> Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dim = params.dim;
    let mut matrix = Vec::with_capacity(corpus.len() * dim);
    let mut doc_ids = Vec::with_capacity(corpus.len());
    for doc in corpus.iter() {
        let v = params.encode(Side::Doc, &doc.norm_tokens);
        matrix.extend_from_slice(&v);
        doc_ids.push(doc.doc_id.clone());
    }
    let id_to_row = doc_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    Ok(EmbeddingIndex {
        doc_ids,
        dim,
        matrix,
        fingerprint: params.doc_fingerprint(),
        id_to_row,
    })
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vec_for(&self, doc_id: &str) -> Result<&[f64]> {
        let row = *self
            .id_to_row
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
        Ok(self.row(row))
    }

    /// Errors unless the index was built from the given encoder's document side.
    pub fn validate_against(&self, params: &DualEncoderParams) -> Result<()> {
        if self.fingerprint != params.doc_fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        Ok(())
    }

    /// Exact top-k by inner product. Ties broken by lexicographically smaller
    /// doc_id; probabilities are a softmax over the returned raw scores only,
    /// so values are not comparable across different k.
    pub fn top_k(&self, query_vec: &[f64], k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::InvalidConfig("top_k requires k >= 1".into()));
        }
        if query_vec.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: query_vec.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, dot(self.row(i), query_vec)))
            .collect();
        if scored.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite("retrieval score".into()));
        }
        let k = k.min(self.len());
        scored.select_nth_unstable_by(k - 1, |a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        scored.truncate(k);
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        let raw: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
        let lse = log_sum_exp(&raw);
        let entries = scored
            .into_iter()
            .map(|(i, s)| RetrievedEntry {
                doc_id: self.doc_ids[i].clone(),
                raw_score: s,
                prob: (s - lse).exp(),
            })
            .collect();
        Ok(RetrievalResult { entries })
    }

    /// Binary index file: magic, version, N, h, fingerprint, row-major matrix,
    /// doc-id table.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(self.len() as u64).to_le_bytes())?;
        f.write_all(&(self.dim as u64).to_le_bytes())?;
        f.write_all(&self.fingerprint.to_le_bytes())?;
        for v in &self.matrix {
            f.write_all(&v.to_le_bytes())?;
        }
        for id in &self.doc_ids {
            let bytes = id.as_bytes();
            f.write_all(&(bytes.len() as u32).to_le_bytes())?;
            f.write_all(bytes)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad index file magic".into()));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != VERSION {
            return Err(Error::Format("unsupported index file version".into()));
        }
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u64buf)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u64buf)?;
        let dim = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u64buf)?;
        let fingerprint = u64::from_le_bytes(u64buf);
        let mut matrix = vec![0.0; n * dim];
        for v in &mut matrix {
            f.read_exact(&mut u64buf)?;
            *v = f64::from_le_bytes(u64buf);
        }
        let mut doc_ids = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut u32buf)?;
            let len = u32::from_le_bytes(u32buf) as usize;
            let mut s = vec![0u8; len];
            f.read_exact(&mut s)?;
            doc_ids.push(
                String::from_utf8(s).map_err(|_| Error::Format("bad doc id utf8".into()))?,
            );
        }
        let id_to_row = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(EmbeddingIndex {
            doc_ids,
            dim,
            matrix,
            fingerprint,
            id_to_row,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Document;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_corpus(n: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "tau"];
        let docs = (0..n)
            .map(|i| {
                let text: Vec<&str> = (0..6)
                    .map(|_| words[rng.gen_range(0..words.len())])
                    .collect();
                Document::new(format!("doc{i:04}"), text.join(" "))
            })
            .collect();
        Corpus::new(docs).unwrap()
    }

    #[test]
    fn one_doc_corpus() {
        let corpus = Corpus::new(vec![Document::new("only", "a single doc")]).unwrap();
        let params = DualEncoderParams::new(64, 8, 1);
        let idx = build_index(&corpus, &params).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(
            idx.row(0),
            params
                .encode(Side::Doc, &corpus.get(0).norm_tokens)
                .as_slice()
        );
    }

    #[test]
    fn rebuild_is_identical() {
        let corpus = small_corpus(20, 3);
        let params = DualEncoderParams::new(64, 8, 2);
        let a = build_index(&corpus, &params).unwrap();
        let b = build_index(&corpus, &params).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn rows_match_per_doc_reencoding() {
        let corpus = small_corpus(1000, 9);
        let params = DualEncoderParams::new(128, 16, 4);
        let idx = build_index(&corpus, &params).unwrap();
        for (i, doc) in corpus.iter().enumerate() {
            let v = params.encode(Side::Doc, &doc.norm_tokens);
            assert_eq!(idx.row(i), v.as_slice(), "row {i}");
        }
    }

    #[test]
    fn identical_embeddings_tie_break_by_doc_id() {
        // All docs share the same text, hence the same embedding.
        let docs: Vec<Document> = (0..8)
            .map(|i| Document::new(format!("d{i}"), "same text"))
            .collect();
        let corpus = Corpus::new(docs).unwrap();
        let params = DualEncoderParams::new(32, 4, 0);
        let idx = build_index(&corpus, &params).unwrap();
        let q = vec![0.3, -0.1, 0.5, 0.2];
        let res = idx.top_k(&q, 5).unwrap();
        let ids: Vec<&str> = res.entries.iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["d0", "d1", "d2", "d3", "d4"]);
        for e in &res.entries {
            assert!((e.prob - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_corpus_size_is_full_ranking() {
        let corpus = small_corpus(30, 5);
        let params = DualEncoderParams::new(64, 8, 6);
        let idx = build_index(&corpus, &params).unwrap();
        let q = params.encode(Side::Query, &["alpha".to_string()]);
        let res = idx.top_k(&q, corpus.len()).unwrap();
        assert_eq!(res.entries.len(), corpus.len());
        for w in res.entries.windows(2) {
            assert!(w[0].raw_score >= w[1].raw_score);
        }
        let psum: f64 = res.entries.iter().map(|e| e.prob).sum();
        assert!((psum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn top_k_matches_brute_force_1000_docs() {
        let corpus = small_corpus(1000, 7);
        let params = DualEncoderParams::new(128, 16, 8);
        let idx = build_index(&corpus, &params).unwrap();
        let q = params.encode(Side::Query, &["gamma".to_string(), "tau".to_string()]);
        for k in [1usize, 5, 50] {
            let res = idx.top_k(&q, k).unwrap();
            // brute force: score every doc independently and full-sort
            let mut all: Vec<(String, f64)> = corpus
                .iter()
                .map(|d| {
                    let v = params.encode(Side::Doc, &d.norm_tokens);
                    let s: f64 = v.iter().zip(&q).map(|(a, b)| a * b).sum();
                    (d.doc_id.clone(), s)
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            for (e, (id, s)) in res.entries.iter().zip(all.iter()) {
                assert_eq!(&e.doc_id, id);
                assert!((e.raw_score - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefix_stability() {
        let corpus = small_corpus(100, 11);
        let params = DualEncoderParams::new(64, 8, 12);
        let idx = build_index(&corpus, &params).unwrap();
        let q = params.encode(Side::Query, &["delta".to_string()]);
        let small = idx.top_k(&q, 5).unwrap();
        let big = idx.top_k(&q, 20).unwrap();
        for (a, b) in small.entries.iter().zip(big.entries.iter()) {
            assert_eq!(a.doc_id, b.doc_id);
            assert_eq!(a.raw_score, b.raw_score);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let corpus = small_corpus(50, 13);
        let params = DualEncoderParams::new(64, 8, 14);
        let mut idx = build_index(&corpus, &params).unwrap();
        let q = params.encode(Side::Query, &["omega".to_string()]);
        let base = idx.top_k(&q, 10).unwrap();
        // Shift every raw score by adding a constant column response: emulate
        // by shifting the stored matrix along a direction aligned with q.
        // Simpler and exact: add a constant to the scores by augmenting probs
        // computed from shifted raw scores directly.
        let shifted: Vec<f64> = base.entries.iter().map(|e| e.raw_score + 123.0).collect();
        let lse = crate::matrix::log_sum_exp(&shifted);
        for (e, s) in base.entries.iter().zip(shifted) {
            assert!((e.prob - (s - lse).exp()).abs() < 1e-12);
        }
        idx.fingerprint ^= 1;
        assert!(idx.validate_against(&params).is_err());
    }

    #[test]
    fn k_zero_errors() {
        let corpus = small_corpus(3, 1);
        let params = DualEncoderParams::new(32, 4, 1);
        let idx = build_index(&corpus, &params).unwrap();
        assert!(idx.top_k(&[0.0; 4], 0).is_err());
    }

    #[test]
    fn file_roundtrip_and_fingerprint_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let corpus = small_corpus(25, 17);
        let params = DualEncoderParams::new(64, 8, 18);
        let idx = build_index(&corpus, &params).unwrap();
        idx.save(&path).unwrap();
        let loaded = EmbeddingIndex::load(&path).unwrap();
        assert_eq!(loaded.matrix, idx.matrix);
        assert_eq!(loaded.doc_ids, idx.doc_ids);
        loaded.validate_against(&params).unwrap();
        let other = DualEncoderParams::new(64, 8, 999);
        assert!(loaded.validate_against(&other).is_err());
    }
}
