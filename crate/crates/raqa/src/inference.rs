//! Answer production for evaluation: joint decoding over retrieved documents
//! and the closed-book path.

use crate::dataio::{Corpus, FullQuery};
use crate::encoder::{DualEncoderParams, Side};
use crate::error::{Error, Result};
use crate::generator::{AnswerScorerParams, AnswerVocab, DocInput};
use crate::index::{EmbeddingIndex, RetrievalResult};

/// One decoded prediction: the answer/document pair with the highest joint
/// probability, plus the full retrieval result for downstream metrics.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub answer: String,
    pub doc_id: String,
    pub joint_prob: f64,
    pub retrieval: RetrievalResult,
}

/// Joint decoding: retrieve top-K, then pick the (document, answer) pair
/// maximizing p(answer | query, doc) * p(doc | query). The inner argmax over
/// the closed vocabulary is exact. Ties break toward the smaller doc_id, then
/// the lexicographically smaller answer.
pub fn decode_joint(
    enc: &DualEncoderParams,
    gen: &AnswerScorerParams,
    vocab: &AnswerVocab,
    index: &EmbeddingIndex,
    corpus: &Corpus,
    x: &FullQuery,
    k_test: usize,
) -> Result<Decoded> {
    if k_test == 0 {
        return Err(Error::InvalidConfig("decode_joint requires K >= 1".into()));
    }
    let q = enc.encode(Side::Query, &x.norm_tokens);
    let retrieval = index.top_k(&q, k_test)?;
    let mut best: Option<(f64, &str, usize)> = None;
    for entry in &retrieval.entries {
        let doc = corpus.by_id(&entry.doc_id)?;
        let log_probs = gen.answer_logits(
            vocab,
            x,
            DocInput {
                tokens: &doc.norm_tokens,
                raw_score: entry.raw_score,
            },
        )?;
        // Vocab indices are sorted answers, so scanning ascending and keeping
        // the first maximum realizes the lexicographic tie-break within a doc.
        for (a, &lp) in log_probs.iter().enumerate() {
            let joint = lp.exp() * entry.prob;
            let better = match best {
                None => true,
                Some((bj, bd, ba)) => {
                    joint > bj
                        || (joint == bj
                            && (entry.doc_id.as_str() < bd
                                || (entry.doc_id.as_str() == bd
                                    && vocab.answer(a) < vocab.answer(ba))))
                }
            };
            if better {
                best = Some((joint, entry.doc_id.as_str(), a));
            }
        }
    }
    let (joint_prob, doc_id, answer_idx) = best.expect("k >= 1 guarantees a candidate");
    Ok(Decoded {
        answer: vocab.answer(answer_idx).to_string(),
        doc_id: doc_id.to_string(),
        joint_prob,
        retrieval,
    })
}

/// Closed-book decoding: best answer from the query features alone.
pub fn decode_closed_book(
    gen: &AnswerScorerParams,
    vocab: &AnswerVocab,
    x: &FullQuery,
) -> Result<(String, f64)> {
    gen.best_answer(vocab, x, DocInput::CLOSED_BOOK)
}
