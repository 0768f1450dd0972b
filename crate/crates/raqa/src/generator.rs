//! Closed-vocabulary answer scorer.
//!
//! Stands in for a seq2seq generator with an identical probabilistic
//! interface: it produces log p(answer | query, document) over a fixed answer
//! vocabulary. Inputs are the mean hashed embedding of the concatenated
//! query/document tokens plus two relevance scalars (the raw retrieval score
//! and, per candidate, the count of contiguous occurrences of the candidate's
//! tokens in the query/document token stream).

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{count_seq, normalize, FullQuery, QueryExample, Split};
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, log_softmax, Matrix};
use crate::optim::Adam;

/// Ordered list of unique normalized answer strings.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocab {
    answers: Vec<String>,
}

impl AnswerVocab {
    /// Builds from all training-split answers, normalized and sorted.
    pub fn from_examples(examples: &[QueryExample]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for ex in examples.iter().filter(|e| e.split == Split::Train) {
            for entry in &ex.answers.entries {
                let norm = normalize(&entry.answer).join(" ");
                if !norm.is_empty() {
                    set.insert(norm);
                }
            }
        }
        if set.is_empty() {
            return Err(Error::Format("no training answers to build vocab".into()));
        }
        Ok(AnswerVocab {
            answers: set.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer(&self, i: usize) -> &str {
        &self.answers[i]
    }

    /// Index of a (raw) answer string after normalization.
    pub fn index_of(&self, answer: &str) -> Option<usize> {
        let norm = normalize(answer).join(" ");
        self.answers.binary_search(&norm).ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for a in &self.answers {
            writeln!(f, "{a}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut answers = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.is_empty() {
                answers.push(line);
            }
        }
        if answers.is_empty() {
            return Err(Error::Format("empty vocab file".into()));
        }
        if !answers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Format("vocab file not sorted/unique".into()));
        }
        Ok(AnswerVocab { answers })
    }
}

/// Number of scalar features appended to the embedding features:
/// raw retrieval score and candidate-overlap count.
pub const RELEVANCE_FEATURES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerScorerParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
    pub feature_embedding: Matrix,
    /// |V_a| x (dim + 2) output map; last two columns weight the scalars.
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

/// Document-side input to the scorer. The sentinel (empty tokens, zero score)
/// yields the closed-book path.
#[derive(Debug, Clone, Copy)]
pub struct DocInput<'a> {
    pub tokens: &'a [String],
    pub raw_score: f64,
}

impl<'a> DocInput<'a> {
    pub const CLOSED_BOOK: DocInput<'static> = DocInput {
        tokens: &[],
        raw_score: 0.0,
    };
}

/// Cached forward pass over one (query, document) pair.
#[derive(Debug, Clone)]
pub struct GenForward {
    pub token_ids: Vec<usize>,
    pub mean: Vec<f64>,
    pub raw_score: f64,
    pub overlaps: Vec<f64>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl AnswerScorerParams {
    pub fn new(vocab_size: usize, dim: usize, answer_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_embedding = Matrix::uniform(vocab_size, dim, 0.1, &mut rng);
        let out_scale = 1.0 / ((dim + RELEVANCE_FEATURES) as f64).sqrt();
        let mut out_w = Matrix::uniform(answer_count, dim + RELEVANCE_FEATURES, out_scale, &mut rng);
        // Relevance-feature init. The raw retrieval score is unbounded and
        // identical across candidates, so a random per-answer weight on it
        // would only inject noise: start it at zero. The overlap count starts
        // with a positive copy bias so candidates literally present in the
        // query/document text are favored before any training; answers occur
        // as targets too rarely for a near-zero init to recover this from
        // gradients alone. Training remains free to reshape both columns.
        for a in 0..answer_count {
            let row = out_w.row_mut(a);
            row[dim] = 0.0;
            row[dim + 1] = 2.0;
        }
        AnswerScorerParams {
            vocab_size,
            dim,
            seed,
            feature_embedding,
            out_w,
            out_b: vec![0.0; answer_count],
        }
    }

    pub fn answer_count(&self) -> usize {
        self.out_b.len()
    }

    pub fn forward(&self, vocab: &AnswerVocab, x: &FullQuery, doc: DocInput) -> Result<GenForward> {
        if vocab.is_empty() {
            return Err(Error::Format("empty answer vocabulary".into()));
        }
        if vocab.len() != self.answer_count() {
            return Err(Error::VocabMismatch(format!(
                "scorer built for {} answers, vocab has {}",
                self.answer_count(),
                vocab.len()
            )));
        }
        let combined: Vec<String> = x
            .norm_tokens
            .iter()
            .chain(doc.tokens.iter())
            .cloned()
            .collect();
        let token_ids: Vec<usize> = combined
            .iter()
            .map(|t| crate::encoder::hash_token(t, self.vocab_size))
            .collect();
        let mut mean = vec![0.0; self.dim];
        if !token_ids.is_empty() {
            for &id in &token_ids {
                axpy(&mut mean, 1.0, self.feature_embedding.row(id));
            }
            let inv = 1.0 / token_ids.len() as f64;
            for m in &mut mean {
                *m *= inv;
            }
        }
        let overlaps: Vec<f64> = vocab
            .answers()
            .iter()
            .map(|a| {
                let needle: Vec<String> = a.split(' ').map(|s| s.to_string()).collect();
                count_seq(&combined, &needle) as f64
            })
            .collect();
        let logits: Vec<f64> = (0..vocab.len())
            .map(|a| {
                let row = self.out_w.row(a);
                dot(&row[..self.dim], &mean)
                    + row[self.dim] * doc.raw_score
                    + row[self.dim + 1] * overlaps[a]
                    + self.out_b[a]
            })
            .collect();
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("answer logits".into()));
        }
        let log_probs = log_softmax(&logits);
        Ok(GenForward {
            token_ids,
            mean,
            raw_score: doc.raw_score,
            overlaps,
            logits,
            log_probs,
        })
    }

    /// Log-probabilities over the answer vocabulary.
    pub fn answer_logits(
        &self,
        vocab: &AnswerVocab,
        x: &FullQuery,
        doc: DocInput,
    ) -> Result<Vec<f64>> {
        Ok(self.forward(vocab, x, doc)?.log_probs)
    }

    /// Argmax answer; ties broken by the lexicographically smaller answer
    /// (which is the lower vocab index).
    pub fn best_answer(
        &self,
        vocab: &AnswerVocab,
        x: &FullQuery,
        doc: DocInput,
    ) -> Result<(String, f64)> {
        let fwd = self.forward(vocab, x, doc)?;
        let (best, lp) = best_of(&fwd.log_probs);
        Ok((vocab.answer(best).to_string(), lp))
    }

    pub fn target_log_prob(
        &self,
        vocab: &AnswerVocab,
        x: &FullQuery,
        doc: DocInput,
        target: &str,
    ) -> Result<f64> {
        let idx = vocab
            .index_of(target)
            .ok_or_else(|| Error::VocabMismatch(format!("target {target:?} not in vocab")))?;
        Ok(self.forward(vocab, x, doc)?.log_probs[idx])
    }

    /// Accumulates parameter gradients given dL/d(logits); returns dL/d(raw
    /// retrieval score) so callers can continue backpropagation into the
    /// retriever.
    pub fn backprop(&self, fwd: &GenForward, d_logits: &[f64], grad: &mut GenGradient) -> f64 {
        debug_assert_eq!(d_logits.len(), self.answer_count());
        let mut d_mean = vec![0.0; self.dim];
        let mut d_raw = 0.0;
        for (a, &dl) in d_logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let row = self.out_w.row(a);
            let g_row = grad.out_w.row_mut(a);
            axpy(&mut g_row[..self.dim], dl, &fwd.mean);
            g_row[self.dim] += dl * fwd.raw_score;
            g_row[self.dim + 1] += dl * fwd.overlaps[a];
            grad.out_b[a] += dl;
            axpy(&mut d_mean, dl, &row[..self.dim]);
            d_raw += dl * row[self.dim];
        }
        if !fwd.token_ids.is_empty() {
            let inv = 1.0 / fwd.token_ids.len() as f64;
            for &id in &fwd.token_ids {
                axpy(grad.feature_embedding.row_mut(id), inv, &d_mean);
            }
        }
        d_raw
    }

    pub fn param_count(&self) -> usize {
        self.feature_embedding.data.len() + self.out_w.data.len() + self.out_b.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.feature_embedding.data);
        out.extend_from_slice(&self.out_w.data);
        out.extend_from_slice(&self.out_b);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let (a, rest) = flat.split_at(self.feature_embedding.data.len());
        let (b, c) = rest.split_at(self.out_w.data.len());
        self.feature_embedding.data.copy_from_slice(a);
        self.out_w.data.copy_from_slice(b);
        self.out_b.copy_from_slice(c);
    }

    pub fn adam_step(&mut self, adam: &mut Adam, lr: f64, grad: &GenGradient) {
        let mut flat = self.flat();
        adam.step(lr, &mut flat, &grad.flat());
        self.set_flat(&flat);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let params: AnswerScorerParams = serde_json::from_reader(f)?;
        if !params.feature_embedding.is_finite() || !params.out_w.is_finite() {
            return Err(Error::NonFinite("scorer checkpoint".into()));
        }
        Ok(params)
    }
}

/// Index and value of the maximum entry; ties resolve to the lower index.
pub fn best_of(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

#[derive(Debug, Clone)]
pub struct GenGradient {
    pub feature_embedding: Matrix,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
    pub count: usize,
}

impl GenGradient {
    pub fn zeros_like(params: &AnswerScorerParams) -> Self {
        GenGradient {
            feature_embedding: Matrix::zeros(params.vocab_size, params.dim),
            out_w: Matrix::zeros(params.answer_count(), params.dim + RELEVANCE_FEATURES),
            out_b: vec![0.0; params.answer_count()],
            count: 0,
        }
    }

    pub fn add(&mut self, other: &GenGradient) {
        axpy(
            &mut self.feature_embedding.data,
            1.0,
            &other.feature_embedding.data,
        );
        axpy(&mut self.out_w.data, 1.0, &other.out_w.data);
        axpy(&mut self.out_b, 1.0, &other.out_b);
        self.count += other.count;
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.feature_embedding.data);
        out.extend_from_slice(&self.out_w.data);
        out.extend_from_slice(&self.out_b);
        out
    }
}
