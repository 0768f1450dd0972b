//! Dual encoders mapping token sequences to dense vectors.
//!
//! Each side is a hashed bag-of-tokens mean embedding followed by one affine
//! layer and an elementwise tanh. Scores between a query and a document are
//! plain inner products, and the query-side backward pass is derived by hand
//! so every loss in this crate can be checked against finite differences.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Doc,
}

/// Parameters of the query and document encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
    pub query_embedding: Matrix,
    pub query_w: Matrix,
    pub query_b: Vec<f64>,
    pub doc_embedding: Matrix,
    pub doc_w: Matrix,
    pub doc_b: Vec<f64>,
}

/// FNV-1a hash of the token string, reduced modulo the embedding vocabulary.
/// Fixed so that corpora embed identically across runs and platforms.
pub fn hash_token(token: &str, vocab_size: usize) -> usize {
    (fnv1a64(token.as_bytes()) % vocab_size as u64) as usize
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Cached forward pass, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub token_ids: Vec<usize>,
    pub mean: Vec<f64>,
    pub out: Vec<f64>,
}

impl DualEncoderParams {
    /// Embeddings uniform in [-0.1, 0.1], projections fan-in-scaled uniform,
    /// biases zero, all drawn from the stored seed.
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "encoder dim must be at least 2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj_scale = 1.0 / (dim as f64).sqrt();
        let query_embedding = Matrix::uniform(vocab_size, dim, 0.1, &mut rng);
        let query_w = Matrix::uniform(dim, dim, proj_scale, &mut rng);
        let doc_embedding = Matrix::uniform(vocab_size, dim, 0.1, &mut rng);
        let doc_w = Matrix::uniform(dim, dim, proj_scale, &mut rng);
        DualEncoderParams {
            vocab_size,
            dim,
            seed,
            query_embedding,
            query_w,
            query_b: vec![0.0; dim],
            doc_embedding,
            doc_w,
            doc_b: vec![0.0; dim],
        }
    }

    fn side_parts(&self, side: Side) -> (&Matrix, &Matrix, &[f64]) {
        match side {
            Side::Query => (&self.query_embedding, &self.query_w, &self.query_b),
            Side::Doc => (&self.doc_embedding, &self.doc_w, &self.doc_b),
        }
    }

    /// tanh(W * mean(embedding rows of hashed tokens) + b).
    /// An empty token sequence projects the zero vector.
    pub fn encode(&self, side: Side, tokens: &[String]) -> Vec<f64> {
        self.encode_cached(side, tokens).out
    }

    pub fn encode_cached(&self, side: Side, tokens: &[String]) -> EncodeCache {
        let (emb, w, b) = self.side_parts(side);
        let token_ids: Vec<usize> = tokens
            .iter()
            .map(|t| hash_token(t, self.vocab_size))
            .collect();
        let mut mean = vec![0.0; self.dim];
        if !token_ids.is_empty() {
            for &id in &token_ids {
                axpy(&mut mean, 1.0, emb.row(id));
            }
            let inv = 1.0 / token_ids.len() as f64;
            for m in &mut mean {
                *m *= inv;
            }
        }
        let mut out = w.matvec(&mean);
        for (o, bi) in out.iter_mut().zip(b) {
            *o = (*o + bi).tanh();
        }
        EncodeCache {
            token_ids,
            mean,
            out,
        }
    }

    /// Accumulates parameter gradients for one side given dL/d(output).
    pub fn backprop(
        &self,
        side: Side,
        cache: &EncodeCache,
        grad_out: &[f64],
        grad: &mut EncoderGradient,
    ) {
        let (_, w, _) = self.side_parts(side);
        // tanh' = 1 - out^2
        let d_pre: Vec<f64> = grad_out
            .iter()
            .zip(&cache.out)
            .map(|(g, o)| g * (1.0 - o * o))
            .collect();
        let (g_emb, g_w, g_b) = match side {
            Side::Query => (&mut grad.query_embedding, &mut grad.query_w, &mut grad.query_b),
            Side::Doc => (&mut grad.doc_embedding, &mut grad.doc_w, &mut grad.doc_b),
        };
        for (i, &dp) in d_pre.iter().enumerate() {
            axpy(g_w.row_mut(i), dp, &cache.mean);
            g_b[i] += dp;
        }
        if !cache.token_ids.is_empty() {
            let d_mean = w.matvec_t(&d_pre);
            let inv = 1.0 / cache.token_ids.len() as f64;
            for &id in &cache.token_ids {
                axpy(g_emb.row_mut(id), inv, &d_mean);
            }
        }
    }

    /// Hash over the document-side parameters; ties a prebuilt index to the
    /// exact encoder that produced it.
    pub fn doc_fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in self
            .doc_embedding
            .data
            .iter()
            .chain(self.doc_w.data.iter())
            .chain(self.doc_b.iter())
        {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let params: DualEncoderParams = serde_json::from_reader(f)?;
        if !params.query_embedding.is_finite()
            || !params.doc_embedding.is_finite()
            || !params.query_w.is_finite()
            || !params.doc_w.is_finite()
        {
            return Err(Error::NonFinite("encoder checkpoint".into()));
        }
        Ok(params)
    }

    // Flat views over the trainable parameters, used by the optimizer and by
    // finite-difference checks. Order: embedding, projection, bias.

    pub fn query_param_count(&self) -> usize {
        self.query_embedding.data.len() + self.query_w.data.len() + self.query_b.len()
    }

    pub fn all_param_count(&self) -> usize {
        2 * self.query_param_count()
    }

    pub fn query_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.query_param_count());
        out.extend_from_slice(&self.query_embedding.data);
        out.extend_from_slice(&self.query_w.data);
        out.extend_from_slice(&self.query_b);
        out
    }

    pub fn set_query_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.query_param_count());
        let (a, rest) = flat.split_at(self.query_embedding.data.len());
        let (b, c) = rest.split_at(self.query_w.data.len());
        self.query_embedding.data.copy_from_slice(a);
        self.query_w.data.copy_from_slice(b);
        self.query_b.copy_from_slice(c);
    }

    pub fn all_flat(&self) -> Vec<f64> {
        let mut out = self.query_flat();
        out.extend_from_slice(&self.doc_embedding.data);
        out.extend_from_slice(&self.doc_w.data);
        out.extend_from_slice(&self.doc_b);
        out
    }

    pub fn set_all_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.all_param_count());
        let q = self.query_param_count();
        self.set_query_flat(&flat[..q]);
        let rest = &flat[q..];
        let (a, rest) = rest.split_at(self.doc_embedding.data.len());
        let (b, c) = rest.split_at(self.doc_w.data.len());
        self.doc_embedding.data.copy_from_slice(a);
        self.doc_w.data.copy_from_slice(b);
        self.doc_b.copy_from_slice(c);
    }

    /// Adam update on the query side only; the document side stays frozen.
    pub fn adam_step_query(&mut self, adam: &mut Adam, lr: f64, grad: &EncoderGradient) {
        let mut flat = self.query_flat();
        adam.step(lr, &mut flat, &grad.query_flat());
        self.set_query_flat(&flat);
    }

    /// Adam update on both sides (pretraining precedes freezing).
    pub fn adam_step_all(&mut self, adam: &mut Adam, lr: f64, grad: &EncoderGradient) {
        let mut flat = self.all_flat();
        adam.step(lr, &mut flat, &grad.all_flat());
        self.set_all_flat(&flat);
    }
}

/// Inner product between an encoded query and a precomputed document vector.
pub fn score(query_vec: &[f64], doc_vec: &[f64]) -> Result<f64> {
    if query_vec.len() != doc_vec.len() {
        return Err(Error::Dimension {
            expected: query_vec.len(),
            got: doc_vec.len(),
        });
    }
    Ok(dot(query_vec, doc_vec))
}

/// Accumulated gradients for both encoder sides.
#[derive(Debug, Clone)]
pub struct EncoderGradient {
    pub query_embedding: Matrix,
    pub query_w: Matrix,
    pub query_b: Vec<f64>,
    pub doc_embedding: Matrix,
    pub doc_w: Matrix,
    pub doc_b: Vec<f64>,
    pub count: usize,
}

impl EncoderGradient {
    pub fn zeros_like(params: &DualEncoderParams) -> Self {
        EncoderGradient {
            query_embedding: Matrix::zeros(params.vocab_size, params.dim),
            query_w: Matrix::zeros(params.dim, params.dim),
            query_b: vec![0.0; params.dim],
            doc_embedding: Matrix::zeros(params.vocab_size, params.dim),
            doc_w: Matrix::zeros(params.dim, params.dim),
            doc_b: vec![0.0; params.dim],
            count: 0,
        }
    }

    pub fn add(&mut self, other: &EncoderGradient) {
        axpy(&mut self.query_embedding.data, 1.0, &other.query_embedding.data);
        axpy(&mut self.query_w.data, 1.0, &other.query_w.data);
        axpy(&mut self.query_b, 1.0, &other.query_b);
        axpy(&mut self.doc_embedding.data, 1.0, &other.doc_embedding.data);
        axpy(&mut self.doc_w.data, 1.0, &other.doc_w.data);
        axpy(&mut self.doc_b, 1.0, &other.doc_b);
        self.count += other.count;
    }

    pub fn zero_query_side(&mut self) {
        self.query_embedding.data.iter_mut().for_each(|v| *v = 0.0);
        self.query_w.data.iter_mut().for_each(|v| *v = 0.0);
        self.query_b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn query_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.query_embedding.data);
        out.extend_from_slice(&self.query_w.data);
        out.extend_from_slice(&self.query_b);
        out
    }

    pub fn all_flat(&self) -> Vec<f64> {
        let mut out = self.query_flat();
        out.extend_from_slice(&self.doc_embedding.data);
        out.extend_from_slice(&self.doc_w.data);
        out.extend_from_slice(&self.doc_b);
        out
    }
}
