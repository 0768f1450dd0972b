//! Joint training of retrieval and answer scoring.
//!
//! The composite loss combines a per-document generation term with retrieval
//! terms driven by a partition of the retrieved documents: scores of documents
//! that are pseudo relevant and correctly answered are pushed up, scores of
//! documents that are neither are pushed down. A marginal-likelihood baseline
//! loss is provided for comparison, plus the ablation variants of both.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    build_full_query, customized_target, most_popular_answer, normalize, pseudo_relevance,
    AnswerSet, Corpus, Document, FullQuery, QueryExample, Split,
};
use crate::encoder::{DualEncoderParams, EncoderGradient, Side};
use crate::error::{Error, Result};
use crate::generator::{best_of, AnswerScorerParams, AnswerVocab, DocInput, GenGradient};
use crate::index::EmbeddingIndex;
use crate::matrix::{axpy, dot, log_softmax};
use crate::optim::{linear_decay, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainingVariant {
    /// Full joint training: partition from predictions and pseudo relevance.
    RaVqa,
    /// Partition from model predictions only.
    NoPr,
    /// Generation targets collapse to the single most popular answer.
    NoCt,
    /// Retriever frozen after pretraining; generator trained alone.
    FrDpr,
    /// No retrieval at all; generator trained on the query alone.
    NoDpr,
    /// Marginal-likelihood baseline loss.
    Rag,
}

impl std::fmt::Display for TrainingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainingVariant::RaVqa => "ra_vqa",
            TrainingVariant::NoPr => "no_pr",
            TrainingVariant::NoCt => "no_ct",
            TrainingVariant::FrDpr => "fr_dpr",
            TrainingVariant::NoDpr => "no_dpr",
            TrainingVariant::Rag => "rag",
        };
        f.write_str(s)
    }
}

/// Index sets over the retrieved documents (0-based). Disjoint; their union
/// may be a strict subset of 0..k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocPartition {
    pub p_plus: Vec<usize>,
    pub p_minus: Vec<usize>,
    pub k: usize,
}

/// Partition rule: standard variants put k in P+ when the prediction matches
/// the target and the document is pseudo relevant, and in P- when it matches
/// neither; the prediction-only variant ignores pseudo relevance.
pub fn partition(
    predictions: &[String],
    targets: &[String],
    h_flags: &[bool],
    variant: TrainingVariant,
) -> Result<DocPartition> {
    let k = predictions.len();
    if targets.len() != k || h_flags.len() != k {
        return Err(Error::Dimension {
            expected: k,
            got: targets.len().min(h_flags.len()),
        });
    }
    let mut p_plus = Vec::new();
    let mut p_minus = Vec::new();
    for i in 0..k {
        let correct = normalize(&predictions[i]) == normalize(&targets[i]);
        match variant {
            TrainingVariant::NoPr => {
                if correct {
                    p_plus.push(i);
                } else {
                    p_minus.push(i);
                }
            }
            _ => {
                if correct && h_flags[i] {
                    p_plus.push(i);
                } else if !correct && !h_flags[i] {
                    p_minus.push(i);
                }
            }
        }
    }
    debug_assert!(p_plus.iter().all(|i| !p_minus.contains(i)));
    Ok(DocPartition { p_plus, p_minus, k })
}

/// A retrieved document paired with its frozen index embedding.
#[derive(Debug, Clone, Copy)]
pub struct RetrievedDoc<'a> {
    pub doc: &'a Document,
    pub vec: &'a [f64],
}

/// Per-step terms and retrieval-score gradients, exposed for logging and for
/// the gradient-sign diagnostics.
#[derive(Debug, Clone)]
pub struct RavqaDiagnostics {
    /// Sum over documents of -log p(target | query, doc).
    pub gen_term: f64,
    /// Sum over P+ of -log p(doc | query).
    pub pos_term: f64,
    /// Sum over P- of +log p(doc | query).
    pub neg_term: f64,
    pub partition: DocPartition,
    pub predictions: Vec<String>,
    pub targets: Vec<String>,
    /// d(loss)/d(raw retrieval score) from the retrieval terms alone.
    pub d_raw_retrieval: Vec<f64>,
    pub retrieval_probs: Vec<f64>,
}

/// Pure arithmetic core of the composite loss, separated so tests can drive
/// it with hand-picked probabilities.
pub fn composite_terms(
    log_p_theta: &[f64],
    target_log_probs: &[f64],
    part: &DocPartition,
) -> (f64, f64, f64) {
    let gen_term: f64 = target_log_probs.iter().map(|lp| -lp).sum();
    let pos_term: f64 = part.p_plus.iter().map(|&i| -log_p_theta[i]).sum();
    let neg_term: f64 = part.p_minus.iter().map(|&i| log_p_theta[i]).sum();
    (gen_term, pos_term, neg_term)
}

/// Composite loss over one example with exact gradients for the query-side
/// encoder parameters and the answer scorer.
///
/// The frozen-retriever variant computes the same loss value but returns a
/// zero encoder gradient. Raw retrieval scores are recomputed live from the
/// encoder so the loss is differentiable in the retriever parameters.
pub fn ravqa_loss(
    enc: &DualEncoderParams,
    gen: &AnswerScorerParams,
    vocab: &AnswerVocab,
    x: &FullQuery,
    answers: &AnswerSet,
    docs: &[RetrievedDoc],
    variant: TrainingVariant,
) -> Result<(f64, EncoderGradient, GenGradient, RavqaDiagnostics)> {
    match variant {
        TrainingVariant::RaVqa
        | TrainingVariant::NoPr
        | TrainingVariant::NoCt
        | TrainingVariant::FrDpr => {}
        _ => {
            return Err(Error::InvalidConfig(format!(
                "variant {variant} is not a composite-loss variant"
            )))
        }
    }
    if docs.is_empty() {
        return Err(Error::InvalidConfig("composite loss needs K >= 1".into()));
    }
    let k = docs.len();
    let q_cache = enc.encode_cached(Side::Query, &x.norm_tokens);
    let raw: Vec<f64> = docs.iter().map(|d| dot(&q_cache.out, d.vec)).collect();
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("retrieval score".into()));
    }
    let log_p_theta = log_softmax(&raw);
    let probs: Vec<f64> = log_p_theta.iter().map(|l| l.exp()).collect();

    let fallback = most_popular_answer(answers)?.to_string();
    let mut targets = Vec::with_capacity(k);
    let mut target_idx = Vec::with_capacity(k);
    let mut predictions = Vec::with_capacity(k);
    let mut h_flags = Vec::with_capacity(k);
    let mut forwards = Vec::with_capacity(k);
    for (i, rd) in docs.iter().enumerate() {
        let target = if variant == TrainingVariant::NoCt {
            fallback.clone()
        } else {
            customized_target(rd.doc, answers)?.to_string()
        };
        let idx = vocab
            .index_of(&target)
            .ok_or_else(|| Error::VocabMismatch(format!("target {target:?} not in vocab")))?;
        let fwd = gen.forward(
            vocab,
            x,
            DocInput {
                tokens: &rd.doc.norm_tokens,
                raw_score: raw[i],
            },
        )?;
        let (best, _) = best_of(&fwd.log_probs);
        predictions.push(vocab.answer(best).to_string());
        h_flags.push(pseudo_relevance(rd.doc, answers));
        targets.push(target);
        target_idx.push(idx);
        forwards.push(fwd);
    }
    let part = partition(&predictions, &targets, &h_flags, variant)?;

    let target_log_probs: Vec<f64> = forwards
        .iter()
        .zip(&target_idx)
        .map(|(f, &t)| f.log_probs[t])
        .collect();
    let (gen_term, pos_term, neg_term) = composite_terms(&log_p_theta, &target_log_probs, &part);
    let loss = gen_term + pos_term + neg_term;
    if !loss.is_finite() {
        return Err(Error::NonFinite("composite loss".into()));
    }

    // Generator gradients plus the generator's pull on each raw score.
    let mut gen_grad = GenGradient::zeros_like(gen);
    let mut d_raw = vec![0.0; k];
    for (i, fwd) in forwards.iter().enumerate() {
        let t = target_idx[i];
        let d_logits: Vec<f64> = fwd
            .log_probs
            .iter()
            .enumerate()
            .map(|(a, &lp)| lp.exp() - if a == t { 1.0 } else { 0.0 })
            .collect();
        d_raw[i] += gen.backprop(fwd, &d_logits, &mut gen_grad);
    }
    gen_grad.count = 1;

    // Retrieval terms: d/d r_j of (sum_{P+} -log p + sum_{P-} +log p).
    let balance = part.p_plus.len() as f64 - part.p_minus.len() as f64;
    let mut d_raw_retrieval = vec![0.0; k];
    for j in 0..k {
        let mut g = balance * probs[j];
        if part.p_plus.contains(&j) {
            g -= 1.0;
        }
        if part.p_minus.contains(&j) {
            g += 1.0;
        }
        d_raw_retrieval[j] = g;
        d_raw[j] += g;
    }

    let mut enc_grad = EncoderGradient::zeros_like(enc);
    if variant != TrainingVariant::FrDpr {
        let mut d_q = vec![0.0; enc.dim];
        for (j, rd) in docs.iter().enumerate() {
            axpy(&mut d_q, d_raw[j], rd.vec);
        }
        enc.backprop(Side::Query, &q_cache, &d_q, &mut enc_grad);
    }
    enc_grad.count = 1;

    let diagnostics = RavqaDiagnostics {
        gen_term,
        pos_term,
        neg_term,
        partition: part,
        predictions,
        targets,
        d_raw_retrieval,
        retrieval_probs: probs,
    };
    Ok((loss, enc_grad, gen_grad, diagnostics))
}

/// Marginal core: loss = -log sum_k exp(log_a_k + log_b_k) with gradients in
/// the joint weights w = softmax(log_a + log_b).
pub fn marginal_loss_core(log_a: &[f64], log_b: &[f64]) -> Result<(f64, Vec<f64>)> {
    debug_assert_eq!(log_a.len(), log_b.len());
    let joint: Vec<f64> = log_a.iter().zip(log_b).map(|(a, b)| a + b).collect();
    let lse = crate::matrix::log_sum_exp(&joint);
    if !lse.is_finite() {
        return Err(Error::NonFinite("marginal answer probability".into()));
    }
    let w: Vec<f64> = joint.iter().map(|j| (j - lse).exp()).collect();
    Ok((-lse, w))
}

/// Baseline loss: negative log of the target answer probability marginalized
/// over the retrieved documents, with exact gradients for both parameter sets.
pub fn rag_loss(
    enc: &DualEncoderParams,
    gen: &AnswerScorerParams,
    vocab: &AnswerVocab,
    x: &FullQuery,
    answers: &AnswerSet,
    docs: &[RetrievedDoc],
) -> Result<(f64, EncoderGradient, GenGradient)> {
    if docs.is_empty() {
        return Err(Error::InvalidConfig("marginal loss needs K >= 1".into()));
    }
    let k = docs.len();
    let target = most_popular_answer(answers)?;
    let t = vocab
        .index_of(target)
        .ok_or_else(|| Error::VocabMismatch(format!("target {target:?} not in vocab")))?;
    let q_cache = enc.encode_cached(Side::Query, &x.norm_tokens);
    let raw: Vec<f64> = docs.iter().map(|d| dot(&q_cache.out, d.vec)).collect();
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("retrieval score".into()));
    }
    let log_b = log_softmax(&raw);
    let forwards: Vec<_> = docs
        .iter()
        .enumerate()
        .map(|(i, rd)| {
            gen.forward(
                vocab,
                x,
                DocInput {
                    tokens: &rd.doc.norm_tokens,
                    raw_score: raw[i],
                },
            )
        })
        .collect::<Result<_>>()?;
    let log_a: Vec<f64> = forwards.iter().map(|f| f.log_probs[t]).collect();
    let (loss, w) = marginal_loss_core(&log_a, &log_b)?;

    let mut gen_grad = GenGradient::zeros_like(gen);
    let mut d_raw = vec![0.0; k];
    for (i, fwd) in forwards.iter().enumerate() {
        // dL/d(log a_i) = -w_i, chained through the log-softmax.
        let d_logits: Vec<f64> = fwd
            .log_probs
            .iter()
            .enumerate()
            .map(|(a, &lp)| w[i] * (lp.exp() - if a == t { 1.0 } else { 0.0 }))
            .collect();
        d_raw[i] += gen.backprop(fwd, &d_logits, &mut gen_grad);
    }
    gen_grad.count = 1;

    // dL/d(raw_j) through the retrieval softmax: b_j - w_j.
    let b: Vec<f64> = log_b.iter().map(|l| l.exp()).collect();
    for j in 0..k {
        d_raw[j] += b[j] - w[j];
    }

    let mut enc_grad = EncoderGradient::zeros_like(enc);
    let mut d_q = vec![0.0; enc.dim];
    for (j, rd) in docs.iter().enumerate() {
        axpy(&mut d_q, d_raw[j], rd.vec);
    }
    enc.backprop(Side::Query, &q_cache, &d_q, &mut enc_grad);
    enc_grad.count = 1;
    Ok((loss, enc_grad, gen_grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointConfig {
    pub variant: TrainingVariant,
    pub k_train: usize,
    pub epochs: usize,
    pub lr_retriever: f64,
    pub lr_generator: f64,
    pub batch_size: usize,
    /// Learning rates decay linearly to zero over this many epochs.
    pub decay_epochs: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            variant: TrainingVariant::RaVqa,
            k_train: 5,
            epochs: 15,
            lr_retriever: 1e-2,
            lr_generator: 1e-4,
            batch_size: 8,
            decay_epochs: 15,
        }
    }
}

/// Joint training loop: per example, retrieve top-K_train with a live query
/// embedding against the frozen index, compute the variant loss, and apply
/// per-component Adam updates. The document encoder and the index are never
/// updated. Deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    mut enc: DualEncoderParams,
    mut gen: AnswerScorerParams,
    vocab: &AnswerVocab,
    corpus: &Corpus,
    index: &EmbeddingIndex,
    examples: &[QueryExample],
    config: &JointConfig,
    seed: u64,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<(DualEncoderParams, AnswerScorerParams)> {
    index.validate_against(&enc)?;
    if config.k_train == 0 {
        return Err(Error::InvalidConfig("k_train must be >= 1".into()));
    }
    let docs_by_id: HashMap<&str, &Document> =
        corpus.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let train: Vec<(&QueryExample, FullQuery)> = examples
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| (e, build_full_query(e)))
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidConfig("no training examples".into()));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let decay_steps = config.decay_epochs as u64 * steps_per_epoch;
    let mut enc_adam = Adam::new(enc.query_param_count());
    let mut gen_adam = Adam::new(gen.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step: u64 = 0;
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "epoch,step,loss,gen_term,pos_term,neg_term,p_plus,p_minus")?;
    }
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut enc_grad = EncoderGradient::zeros_like(&enc);
            let mut gen_grad = GenGradient::zeros_like(&gen);
            let mut batch_loss = 0.0;
            let (mut g_t, mut p_t, mut n_t) = (0.0, 0.0, 0.0);
            let (mut n_plus, mut n_minus) = (0usize, 0usize);
            for &i in chunk {
                let (ex, fq) = &train[i];
                match config.variant {
                    TrainingVariant::NoDpr => {
                        let target = most_popular_answer(&ex.answers)?;
                        let t = vocab.index_of(target).ok_or_else(|| {
                            Error::VocabMismatch(format!("target {target:?} not in vocab"))
                        })?;
                        let fwd = gen.forward(vocab, fq, DocInput::CLOSED_BOOK)?;
                        batch_loss += -fwd.log_probs[t];
                        g_t += -fwd.log_probs[t];
                        let d_logits: Vec<f64> = fwd
                            .log_probs
                            .iter()
                            .enumerate()
                            .map(|(a, &lp)| lp.exp() - if a == t { 1.0 } else { 0.0 })
                            .collect();
                        gen.backprop(&fwd, &d_logits, &mut gen_grad);
                    }
                    variant => {
                        let q_vec = enc.encode(Side::Query, &fq.norm_tokens);
                        let retrieval = index.top_k(&q_vec, config.k_train)?;
                        let docs: Vec<RetrievedDoc> = retrieval
                            .entries
                            .iter()
                            .map(|e| {
                                Ok(RetrievedDoc {
                                    doc: docs_by_id
                                        .get(e.doc_id.as_str())
                                        .copied()
                                        .ok_or_else(|| Error::UnknownDoc(e.doc_id.clone()))?,
                                    vec: index.vec_for(&e.doc_id)?,
                                })
                            })
                            .collect::<Result<_>>()?;
                        if variant == TrainingVariant::Rag {
                            let (loss, eg, gg) =
                                rag_loss(&enc, &gen, vocab, fq, &ex.answers, &docs)?;
                            batch_loss += loss;
                            g_t += loss;
                            enc_grad.add(&eg);
                            gen_grad.add(&gg);
                        } else {
                            let (loss, eg, gg, diag) =
                                ravqa_loss(&enc, &gen, vocab, fq, &ex.answers, &docs, variant)?;
                            batch_loss += loss;
                            g_t += diag.gen_term;
                            p_t += diag.pos_term;
                            n_t += diag.neg_term;
                            n_plus += diag.partition.p_plus.len();
                            n_minus += diag.partition.p_minus.len();
                            enc_grad.add(&eg);
                            gen_grad.add(&gg);
                        }
                    }
                }
            }
            let lr_ret = linear_decay(config.lr_retriever, step, decay_steps);
            let lr_gen = linear_decay(config.lr_generator, step, decay_steps);
            let update_retriever = !matches!(
                config.variant,
                TrainingVariant::FrDpr | TrainingVariant::NoDpr
            );
            if update_retriever {
                enc.adam_step_query(&mut enc_adam, lr_ret, &enc_grad);
            }
            gen.adam_step(&mut gen_adam, lr_gen, &gen_grad);
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "{epoch},{step},{batch_loss},{g_t},{p_t},{n_t},{n_plus},{n_minus}"
                )?;
            }
            step += 1;
        }
    }
    Ok((enc, gen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::AnswerSet;
    use crate::gradcheck::grad_check;
    use crate::index::build_index;
    use rand::Rng;

    fn answers(entries: &[(&str, u32)]) -> AnswerSet {
        AnswerSet::new(entries.iter().map(|(a, c)| (a.to_string(), *c)).collect()).unwrap()
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn partition_standard_rule() {
        let part = partition(
            &strs(&["cake", "pie", "cake"]),
            &strs(&["cake", "cake", "cake"]),
            &[true, false, false],
            TrainingVariant::RaVqa,
        )
        .unwrap();
        assert_eq!(part.p_plus, vec![0]);
        assert_eq!(part.p_minus, vec![1]);
        // index 2: correct but H=0, belongs to neither
    }

    #[test]
    fn partition_all_correct_all_relevant() {
        let part = partition(
            &strs(&["a", "a", "a"]),
            &strs(&["a", "a", "a"]),
            &[true, true, true],
            TrainingVariant::RaVqa,
        )
        .unwrap();
        assert_eq!(part.p_plus, vec![0, 1, 2]);
        assert!(part.p_minus.is_empty());
    }

    #[test]
    fn partition_prediction_only_variant() {
        let part = partition(
            &strs(&["cake", "pie", "cake"]),
            &strs(&["cake", "cake", "cake"]),
            &[true, false, false],
            TrainingVariant::NoPr,
        )
        .unwrap();
        assert_eq!(part.p_plus, vec![0, 2]);
        assert_eq!(part.p_minus, vec![1]);
    }

    #[test]
    fn partition_length_mismatch_errors() {
        assert!(partition(
            &strs(&["a"]),
            &strs(&["a", "b"]),
            &[true],
            TrainingVariant::RaVqa
        )
        .is_err());
    }

    #[test]
    fn empty_partition_reduces_to_generation_term() {
        let part = DocPartition {
            p_plus: vec![],
            p_minus: vec![],
            k: 3,
        };
        let (g, p, n) = composite_terms(&[-1.0, -2.0, -0.5], &[-0.4, -1.1, -0.3], &part);
        assert_eq!(p, 0.0);
        assert_eq!(n, 0.0);
        assert!((g - 1.8).abs() < 1e-12);
    }

    #[test]
    fn single_doc_retrieval_terms_vanish() {
        // K=1: p_theta = 1, log p = 0, so the retrieval terms are 0 whatever
        // the partition says.
        let part = DocPartition {
            p_plus: vec![0],
            p_minus: vec![],
            k: 1,
        };
        let (_, p, n) = composite_terms(&[0.0], &[-0.7], &part);
        assert_eq!(p, 0.0);
        assert_eq!(n, 0.0);
    }

    // A fixed small world used by the full-loss tests.
    struct World {
        enc: DualEncoderParams,
        gen: AnswerScorerParams,
        vocab: AnswerVocab,
        corpus: Corpus,
        examples: Vec<QueryExample>,
    }

    fn world(seed: u64) -> World {
        let corpus = Corpus::new(vec![
            Document::new("d0", "the hawk is a bird of prey"),
            Document::new("d1", "cake is a sweet dessert"),
            Document::new("d2", "completely unrelated words here"),
            Document::new("d3", "pie and cake at the bakery"),
        ])
        .unwrap();
        let examples = vec![
            QueryExample {
                question_id: "q0".into(),
                question: "what dessert is shown?".into(),
                objects: strs(&["plate"]),
                attributes: vec![vec![]],
                caption: "a plate on a table".into(),
                ocr_text: String::new(),
                answers: answers(&[("cake", 3), ("pie", 2)]),
                split: Split::Train,
            },
            QueryExample {
                question_id: "q1".into(),
                question: "what bird is this?".into(),
                objects: strs(&["bird"]),
                attributes: vec![vec![]],
                caption: "a bird in the sky".into(),
                ocr_text: String::new(),
                answers: answers(&[("hawk", 4)]),
                split: Split::Train,
            },
        ];
        let vocab = AnswerVocab::from_examples(&examples).unwrap();
        World {
            enc: DualEncoderParams::new(32, 4, seed),
            gen: AnswerScorerParams::new(32, 4, vocab.len(), seed + 1),
            vocab,
            corpus,
            examples,
        }
    }

    fn retrieved<'a>(
        w: &'a World,
        index: &'a EmbeddingIndex,
        ids: &[&str],
    ) -> Vec<RetrievedDoc<'a>> {
        ids.iter()
            .map(|id| RetrievedDoc {
                doc: w.corpus.by_id(id).unwrap(),
                vec: index.vec_for(id).unwrap(),
            })
            .collect()
    }

    #[test]
    fn composite_loss_matches_straight_line_recomputation() {
        let w = world(3);
        let index = build_index(&w.corpus, &w.enc).unwrap();
        let fq = build_full_query(&w.examples[0]);
        let docs = retrieved(&w, &index, &["d1", "d2", "d3"]);
        let (loss, _, _, diag) = ravqa_loss(
            &w.enc,
            &w.gen,
            &w.vocab,
            &fq,
            &w.examples[0].answers,
            &docs,
            TrainingVariant::RaVqa,
        )
        .unwrap();

        // Independent recomputation: naive softmax over raw scores, scorer
        // log-probs via the public API, partition rule written out inline.
        let q = w.enc.encode(Side::Query, &fq.norm_tokens);
        let raw: Vec<f64> = docs
            .iter()
            .map(|d| d.vec.iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect();
        let denom: f64 = raw.iter().map(|r: &f64| r.exp()).sum();
        let p_theta: Vec<f64> = raw.iter().map(|r| r.exp() / denom).collect();
        let mut expect = 0.0;
        for (i, rd) in docs.iter().enumerate() {
            let target = customized_target(rd.doc, &w.examples[0].answers).unwrap();
            let lp = w
                .gen
                .target_log_prob(
                    &w.vocab,
                    &fq,
                    DocInput {
                        tokens: &rd.doc.norm_tokens,
                        raw_score: raw[i],
                    },
                    target,
                )
                .unwrap();
            expect -= lp;
            let probs = w
                .gen
                .answer_logits(
                    &w.vocab,
                    &fq,
                    DocInput {
                        tokens: &rd.doc.norm_tokens,
                        raw_score: raw[i],
                    },
                )
                .unwrap();
            let (best, _) = best_of(&probs);
            let correct = w.vocab.answer(best) == normalize(target).join(" ");
            let h = pseudo_relevance(rd.doc, &w.examples[0].answers);
            if correct && h {
                expect -= p_theta[i].ln();
            } else if !correct && !h {
                expect += p_theta[i].ln();
            }
        }
        assert!(
            (loss - expect).abs() < 1e-9,
            "loss {loss} vs straight-line {expect}"
        );
        assert_eq!(diag.partition.k, 3);
    }

    #[test]
    fn frozen_variant_returns_zero_encoder_gradient() {
        let w = world(5);
        let index = build_index(&w.corpus, &w.enc).unwrap();
        let fq = build_full_query(&w.examples[0]);
        let docs = retrieved(&w, &index, &["d1", "d3"]);
        let (_, eg, gg, _) = ravqa_loss(
            &w.enc,
            &w.gen,
            &w.vocab,
            &fq,
            &w.examples[0].answers,
            &docs,
            TrainingVariant::FrDpr,
        )
        .unwrap();
        assert!(eg.query_flat().iter().all(|&v| v == 0.0));
        assert!(gg.flat().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn collapsed_targets_match_full_variant_when_no_doc_contains_answers() {
        let w = world(7);
        let index = build_index(&w.corpus, &w.enc).unwrap();
        // d2 contains no answers, and we retrieve only irrelevant docs by
        // giving a question whose answers appear in no document.
        let ex = QueryExample {
            question_id: "qx".into(),
            question: "what is it?".into(),
            objects: vec![],
            attributes: vec![],
            caption: String::new(),
            ocr_text: String::new(),
            answers: answers(&[("cake", 3), ("zebra", 1)]),
            split: Split::Train,
        };
        let fq = build_full_query(&ex);
        let docs = retrieved(&w, &index, &["d0", "d2"]);
        for d in &docs {
            assert!(!pseudo_relevance(d.doc, &ex.answers));
        }
        let (a, _, _, _) = ravqa_loss(
            &w.enc, &w.gen, &w.vocab, &fq, &ex.answers, &docs, TrainingVariant::RaVqa,
        )
        .unwrap();
        let (b, _, _, _) = ravqa_loss(
            &w.enc, &w.gen, &w.vocab, &fq, &ex.answers, &docs, TrainingVariant::NoCt,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marginal_core_examples() {
        // K=1 degenerates to the single conditional.
        let (loss, _) = marginal_loss_core(&[-0.7], &[0.0]).unwrap();
        assert!((loss - 0.7).abs() < 1e-12);
        // p_theta = [0.5, 0.5], p_phi(target) = [0.2, 0.6] -> -ln 0.4
        let (loss, _) = marginal_loss_core(
            &[0.2f64.ln(), 0.6f64.ln()],
            &[0.5f64.ln(), 0.5f64.ln()],
        )
        .unwrap();
        assert!((loss - (-(0.4f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_brute_force_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let k = 4;
            let a: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0f64)).collect();
            let mut b: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0f64)).collect();
            let s: f64 = b.iter().sum();
            for v in &mut b {
                *v /= s;
            }
            let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
            let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
            let (loss, _) = marginal_loss_core(&log_a, &log_b).unwrap();
            let direct: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((loss - (-direct.ln())).abs() < 1e-10);
            // convex combination bound
            let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(direct >= min - 1e-12 && direct <= max + 1e-12);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences_all_variants() {
        for variant in [
            TrainingVariant::RaVqa,
            TrainingVariant::NoPr,
            TrainingVariant::NoCt,
        ] {
            let w = world(11);
            let index = build_index(&w.corpus, &w.enc).unwrap();
            let fq = build_full_query(&w.examples[0]);
            let ids = ["d1", "d2", "d3"];
            // encoder query side
            let flat0 = w.enc.query_flat();
            let f = |flat: &[f64]| {
                let mut enc = w.enc.clone();
                enc.set_query_flat(flat);
                let docs = retrieved(&w, &index, &ids);
                let (loss, eg, _, _) = ravqa_loss(
                    &enc,
                    &w.gen,
                    &w.vocab,
                    &fq,
                    &w.examples[0].answers,
                    &docs,
                    variant,
                )?;
                Ok((loss, eg.query_flat()))
            };
            let err = grad_check(f, &flat0, 1e-6).unwrap();
            assert!(err < 1e-4, "{variant}: encoder max rel err {err}");
            // generator params
            let gflat0 = w.gen.flat();
            let g = |flat: &[f64]| {
                let mut gen = w.gen.clone();
                gen.set_flat(flat);
                let docs = retrieved(&w, &index, &ids);
                let (loss, _, gg, _) = ravqa_loss(
                    &w.enc,
                    &gen,
                    &w.vocab,
                    &fq,
                    &w.examples[0].answers,
                    &docs,
                    variant,
                )?;
                Ok((loss, gg.flat()))
            };
            let err = grad_check(g, &gflat0, 1e-6).unwrap();
            assert!(err < 1e-4, "{variant}: generator max rel err {err}");
        }
    }

    #[test]
    fn marginal_gradients_match_finite_differences() {
        let w = world(13);
        let index = build_index(&w.corpus, &w.enc).unwrap();
        let fq = build_full_query(&w.examples[0]);
        let ids = ["d0", "d1", "d3"];
        let flat0 = w.enc.query_flat();
        let f = |flat: &[f64]| {
            let mut enc = w.enc.clone();
            enc.set_query_flat(flat);
            let docs = retrieved(&w, &index, &ids);
            let (loss, eg, _) =
                rag_loss(&enc, &w.gen, &w.vocab, &fq, &w.examples[0].answers, &docs)?;
            Ok((loss, eg.query_flat()))
        };
        let err = grad_check(f, &flat0, 1e-6).unwrap();
        assert!(err < 1e-4, "encoder max rel err {err}");
        let gflat0 = w.gen.flat();
        let g = |flat: &[f64]| {
            let mut gen = w.gen.clone();
            gen.set_flat(flat);
            let docs = retrieved(&w, &index, &ids);
            let (loss, _, gg) =
                rag_loss(&w.enc, &gen, &w.vocab, &fq, &w.examples[0].answers, &docs)?;
            Ok((loss, gg.flat()))
        };
        let err = grad_check(g, &gflat0, 1e-6).unwrap();
        assert!(err < 1e-4, "generator max rel err {err}");
    }

    /// Retrieval-term gradient signs in the near-balanced regime where the
    /// qualitative claim is a theorem: with ||P+| - |P-|| <= 1 and K >= 2,
    /// descent raises every P+ score and lowers every P- score.
    #[test]
    fn retrieval_gradient_signs_balanced_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let k = rng.gen_range(2..8usize);
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let probs = crate::matrix::softmax(&raw);
            let mut idx: Vec<usize> = (0..k).collect();
            idx.shuffle(&mut rng);
            let n_plus = rng.gen_range(1..=k / 2.max(1)).min(k - 1);
            let n_minus = (n_plus as i64 + rng.gen_range(-1..=1)).clamp(1, (k - n_plus) as i64)
                as usize;
            let p_plus: Vec<usize> = idx[..n_plus].to_vec();
            let p_minus: Vec<usize> = idx[n_plus..n_plus + n_minus].to_vec();
            let balance = p_plus.len() as f64 - p_minus.len() as f64;
            for j in 0..k {
                let mut g = balance * probs[j];
                if p_plus.contains(&j) {
                    g -= 1.0;
                }
                if p_minus.contains(&j) {
                    g += 1.0;
                }
                if p_plus.contains(&j) && probs[j] < 1.0 {
                    assert!(g < 0.0, "P+ gradient must be negative, got {g}");
                }
                if p_minus.contains(&j) && probs[j] > 0.0 {
                    assert!(g > 0.0, "P- gradient must be positive, got {g}");
                }
            }
        }
    }

    /// With a heavily unbalanced partition the full-sum gradient can push a
    /// high-probability P+ document down: |P+| - |P-| = 2 and p_j = 0.6 gives
    /// d/dr_j = 2 * 0.6 - 1 = +0.2.
    #[test]
    fn unbalanced_partition_counterexample() {
        let probs = [0.6, 0.2, 0.1, 0.1];
        let p_plus = [0usize, 1, 2];
        let p_minus = [3usize];
        let balance = p_plus.len() as f64 - p_minus.len() as f64;
        let g0 = balance * probs[0] - 1.0;
        assert!(g0 > 0.0, "expected positive gradient, got {g0}");
    }

    #[test]
    fn train_joint_zero_learning_rates_leave_params_unchanged() {
        let w = world(31);
        let index = build_index(&w.corpus, &w.enc).unwrap();
        let config = JointConfig {
            lr_retriever: 0.0,
            lr_generator: 0.0,
            epochs: 1,
            k_train: 2,
            batch_size: 2,
            ..JointConfig::default()
        };
        let mut log = Vec::new();
        let (enc, gen) = train_joint(
            w.enc.clone(),
            w.gen.clone(),
            &w.vocab,
            &w.corpus,
            &index,
            &w.examples,
            &config,
            0,
            Some(&mut log),
        )
        .unwrap();
        assert_eq!(enc, w.enc);
        assert_eq!(gen, w.gen);
        assert!(!log.is_empty(), "loss log must still be emitted");
    }

    #[test]
    fn frozen_variant_keeps_encoder_identical() {
        let w = world(37);
        let index = build_index(&w.corpus, &w.enc).unwrap();
        let config = JointConfig {
            variant: TrainingVariant::FrDpr,
            epochs: 2,
            k_train: 2,
            batch_size: 2,
            lr_retriever: 1e-2,
            lr_generator: 1e-2,
            ..JointConfig::default()
        };
        let (enc, _) = train_joint(
            w.enc.clone(),
            w.gen.clone(),
            &w.vocab,
            &w.corpus,
            &index,
            &w.examples,
            &config,
            0,
            None,
        )
        .unwrap();
        assert_eq!(enc, w.enc);
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let w = world(41);
        let other = DualEncoderParams::new(32, 4, 999);
        let index = build_index(&w.corpus, &other).unwrap();
        let res = train_joint(
            w.enc.clone(),
            w.gen.clone(),
            &w.vocab,
            &w.corpus,
            &index,
            &w.examples,
            &JointConfig::default(),
            0,
            None,
        );
        assert!(matches!(res, Err(Error::FingerprintMismatch)));
    }
}
