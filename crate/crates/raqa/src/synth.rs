//! Synthetic retrieval-QA task generator.
//!
//! The world is a grid of (entity, slot) pairs, each with a fact document
//! "the <slot> of the <entity> is <answer>". Train and test questions ask
//! about disjoint pairs, but every entity word and slot word occurs on both
//! sides, so a retriever that aligns matching words generalizes to held-out
//! pairs while a bag-of-words closed-book model cannot: each training pair
//! carries its own fresh answer word, and a held-out pair reuses the answer of
//! some asked training pair, making the pair-to-answer map non-additive in the
//! word features.
//!
//! Three question regimes: knowledge-required (answer only in the corpus),
//! closed-book (answer visible in the question's own caption), and
//! unanswerable (answer in no document, question about an entity that has no
//! fact documents).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    contains_seq, normalize, pseudo_relevance, AnswerSet, Corpus, Document, QueryExample, Split,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub entities: usize,
    pub slots: usize,
    pub distractors: usize,
    pub knowledge_questions: usize,
    pub closed_book_questions: usize,
    pub unanswerable_questions: usize,
    /// Fraction of (entity, slot) pairs — and of each question regime —
    /// held out for the test split.
    pub test_fraction: f64,
    /// Probability of attaching a low-count secondary answer to a knowledge
    /// question.
    pub secondary_answer_prob: f64,
    /// Size of the reserved answer pool used by unanswerable questions.
    pub reserved_answers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 40,
            slots: 10,
            distractors: 1600,
            knowledge_questions: 550,
            closed_book_questions: 75,
            unanswerable_questions: 75,
            test_fraction: 2.0 / 7.0,
            secondary_answer_prob: 0.25,
            reserved_answers: 12,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.entities == 0 {
            return Err(Error::InvalidConfig("entities must be >= 1".into()));
        }
        if self.slots == 0 {
            return Err(Error::InvalidConfig("slots must be >= 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "test_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if self.entities * self.slots < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 (entity, slot) pairs to split".into(),
            ));
        }
        if self.unanswerable_questions > 0 && self.reserved_answers == 0 {
            return Err(Error::InvalidConfig(
                "unanswerable questions need a reserved answer pool".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.secondary_answer_prob) {
            return Err(Error::InvalidConfig(
                "secondary_answer_prob must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 50] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ka", "ke", "ki", "ko", "ku",
    "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
    "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su", "ta", "te", "ti", "to", "tu",
    "za", "ze", "zi", "zo", "zu",
];

/// Draws `n` distinct three-syllable words, disjoint from everything drawn
/// earlier through the same `used` set.
fn draw_words(n: usize, used: &mut BTreeSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..3)
            .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
            .collect();
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Pair {
    entity: usize,
    slot: usize,
    answer: String,
    doc_id: String,
}

/// Deterministic generation of the corpus and question set for a seed.
pub fn generate_synthetic_task(
    config: &SynthConfig,
    seed: u64,
) -> Result<(Corpus, Vec<QueryExample>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let entity_words = draw_words(config.entities, &mut used, &mut rng);
    let slot_words = draw_words(config.slots, &mut used, &mut rng);
    let mystery_words = draw_words(8, &mut used, &mut rng);
    let reserved_words = draw_words(config.reserved_answers.max(1), &mut used, &mut rng);
    let filler_words = draw_words(30, &mut used, &mut rng);
    let distractor_words = draw_words(150, &mut used, &mut rng);

    // Split the pair grid; train pairs get fresh unique answer words.
    let n_pairs = config.entities * config.slots;
    let mut pair_ids: Vec<usize> = (0..n_pairs).collect();
    pair_ids.shuffle(&mut rng);
    let n_test_pairs = ((n_pairs as f64 * config.test_fraction).round() as usize)
        .clamp(1, n_pairs - 1);
    let test_set: BTreeSet<usize> = pair_ids[..n_test_pairs].iter().copied().collect();
    let train_pair_ids: Vec<usize> = (0..n_pairs).filter(|p| !test_set.contains(p)).collect();
    let test_pair_ids: Vec<usize> = (0..n_pairs).filter(|p| test_set.contains(p)).collect();
    let answer_words = draw_words(train_pair_ids.len(), &mut used, &mut rng);

    let mut pairs: BTreeMap<usize, Pair> = BTreeMap::new();
    for (i, &p) in train_pair_ids.iter().enumerate() {
        // Train fact docs sort before test fact docs so that, for a training
        // question, the smallest doc id containing its unique answer is the
        // pair's own document.
        pairs.insert(
            p,
            Pair {
                entity: p / config.slots,
                slot: p % config.slots,
                answer: answer_words[i].clone(),
                doc_id: format!("fa{i:05}"),
            },
        );
    }

    // Questions about training pairs.
    let mut examples = Vec::new();
    let regime_counts = |total: usize| {
        let test = (total as f64 * config.test_fraction).round() as usize;
        (total - test.min(total), test.min(total))
    };
    let (k_train, k_test) = regime_counts(config.knowledge_questions);
    let (c_train, c_test) = regime_counts(config.closed_book_questions);
    let (u_train, u_test) = regime_counts(config.unanswerable_questions);

    let knowledge_q = |id: String,
                           pair: &Pair,
                           split: Split,
                           rng: &mut ChaCha8Rng,
                           asked_answers: &[String]|
     -> QueryExample {
        let mut answers = vec![(pair.answer.clone(), rng.gen_range(3..=5u32))];
        if rng.gen_bool(config.secondary_answer_prob) && !asked_answers.is_empty() {
            let alt = asked_answers[rng.gen_range(0..asked_answers.len())].clone();
            if alt != pair.answer {
                answers.push((alt, rng.gen_range(1..=2u32)));
            }
        }
        let caption: Vec<&str> = (0..3)
            .map(|_| filler_words[rng.gen_range(0..filler_words.len())].as_str())
            .collect();
        QueryExample {
            question_id: id,
            question: format!(
                "what {} does the {} have",
                slot_words[pair.slot], entity_words[pair.entity]
            ),
            objects: vec![entity_words[pair.entity].clone()],
            attributes: vec![vec![]],
            caption: caption.join(" "),
            ocr_text: String::new(),
            answers: AnswerSet::new(answers).expect("nonempty synthetic answers"),
            split,
        }
    };

    let mut asked_answers: Vec<String> = Vec::new();
    for i in 0..k_train {
        let p = train_pair_ids[rng.gen_range(0..train_pair_ids.len())];
        let pair = &pairs[&p];
        let ex = knowledge_q(
            format!("know-tr-{i:04}"),
            pair,
            Split::Train,
            &mut rng,
            &asked_answers,
        );
        asked_answers.push(pair.answer.clone());
        examples.push(ex);
    }
    let closed_book_q = |id: String, pair: &Pair, split: Split, rng: &mut ChaCha8Rng| {
        let mut ex = knowledge_q(id, pair, split, rng, &[]);
        // Surface the answer inside the question's own caption.
        ex.caption = format!(
            "{} {} {}",
            filler_words[rng.gen_range(0..filler_words.len())],
            pair.answer,
            filler_words[rng.gen_range(0..filler_words.len())],
        );
        ex
    };
    for i in 0..c_train {
        let p = train_pair_ids[rng.gen_range(0..train_pair_ids.len())];
        let pair = &pairs[&p];
        let ex = closed_book_q(format!("book-tr-{i:04}"), pair, Split::Train, &mut rng);
        asked_answers.push(pair.answer.clone());
        examples.push(ex);
    }

    // Held-out pairs reuse answers of asked training pairs so gold answers
    // stay inside the trainable vocabulary.
    for (i, &p) in test_pair_ids.iter().enumerate() {
        let answer = if asked_answers.is_empty() {
            draw_words(1, &mut used, &mut rng).remove(0)
        } else {
            asked_answers[rng.gen_range(0..asked_answers.len())].clone()
        };
        pairs.insert(
            p,
            Pair {
                entity: p / config.slots,
                slot: p % config.slots,
                answer,
                doc_id: format!("fb{i:05}"),
            },
        );
    }

    for i in 0..k_test {
        let p = test_pair_ids[rng.gen_range(0..test_pair_ids.len())];
        let ex = knowledge_q(
            format!("know-te-{i:04}"),
            &pairs[&p],
            Split::Test,
            &mut rng,
            &[],
        );
        examples.push(ex);
    }
    for i in 0..c_test {
        let p = test_pair_ids[rng.gen_range(0..test_pair_ids.len())];
        examples.push(closed_book_q(
            format!("book-te-{i:04}"),
            &pairs[&p],
            Split::Test,
            &mut rng,
        ));
    }

    // Unanswerable: a mystery entity with no fact documents, a reserved
    // answer contained in no document.
    for (count, tag, split) in [(u_train, "tr", Split::Train), (u_test, "te", Split::Test)] {
        for i in 0..count {
            let mystery = &mystery_words[rng.gen_range(0..mystery_words.len())];
            let slot = rng.gen_range(0..config.slots);
            let answer = reserved_words[i % reserved_words.len()].clone();
            let caption: Vec<&str> = (0..3)
                .map(|_| filler_words[rng.gen_range(0..filler_words.len())].as_str())
                .collect();
            examples.push(QueryExample {
                question_id: format!("none-{tag}-{i:04}"),
                question: format!("what {} does the {} have", slot_words[slot], mystery),
                objects: vec![mystery.clone()],
                attributes: vec![vec![]],
                caption: caption.join(" "),
                ocr_text: String::new(),
                answers: AnswerSet::new(vec![(answer, rng.gen_range(3..=5u32))]).unwrap(),
                split,
            });
        }
    }

    // Corpus: one fact document per pair plus distractors.
    let mut docs = Vec::with_capacity(n_pairs + config.distractors);
    for pair in pairs.values() {
        docs.push(Document::new(
            pair.doc_id.clone(),
            format!(
                "the {} of the {} is {}",
                slot_words[pair.slot], entity_words[pair.entity], pair.answer
            ),
        ));
    }
    for i in 0..config.distractors {
        let len = rng.gen_range(6..=9);
        let text: Vec<&str> = (0..len)
            .map(|_| distractor_words[rng.gen_range(0..distractor_words.len())].as_str())
            .collect();
        docs.push(Document::new(format!("zz{i:05}"), text.join(" ")));
    }
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let corpus = Corpus::new(docs)?;

    // Regime guarantees.
    for ex in &examples {
        if ex.question_id.starts_with("know") || ex.question_id.starts_with("book") {
            debug_assert!(
                corpus.iter().any(|d| pseudo_relevance(d, &ex.answers)),
                "{}: no relevant document",
                ex.question_id
            );
        }
        if ex.question_id.starts_with("none") {
            for e in &ex.answers.entries {
                let needle = normalize(&e.answer);
                if corpus.iter().any(|d| contains_seq(&d.norm_tokens, &needle)) {
                    return Err(Error::Format(format!(
                        "unanswerable question {} has answer {:?} in the corpus",
                        ex.question_id, e.answer
                    )));
                }
            }
        }
    }
    Ok((corpus, examples))
}
