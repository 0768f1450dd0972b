//! Corpus and question ingestion, text normalization, pseudo relevance,
//! and full-query assembly.
//!
//! A question's visual context arrives pre-extracted as text (object labels,
//! attributes, a caption, OCR strings); this module only assembles and
//! normalizes those features. All values are immutable after construction.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One knowledge passage.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub raw_text: String,
    pub norm_tokens: Vec<String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let norm_tokens = normalize(&raw_text);
        Document {
            doc_id: doc_id.into(),
            raw_text,
            norm_tokens,
        }
    }
}

/// Ordered collection of documents with unique ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = BTreeSet::new();
        for d in &documents {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::Format(format!("duplicate doc_id {}", d.doc_id)));
            }
        }
        Ok(Corpus { documents })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter()
    }

    pub fn get(&self, i: usize) -> &Document {
        &self.documents[i]
    }

    pub fn by_id(&self, doc_id: &str) -> Result<&Document> {
        self.documents
            .iter()
            .find(|d| d.doc_id == doc_id)
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))
    }
}

/// Annotated answers with per-answer annotator counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub entries: Vec<AnswerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub answer: String,
    pub count: u32,
}

impl AnswerSet {
    pub fn new(entries: Vec<(String, u32)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyAnswerSet("<unnamed>".into()));
        }
        let mut seen = BTreeSet::new();
        for (a, c) in &entries {
            if *c == 0 {
                return Err(Error::Format(format!("answer {a:?} has zero count")));
            }
            if !seen.insert(a.as_str()) {
                return Err(Error::Format(format!("duplicate answer {a:?}")));
            }
        }
        Ok(AnswerSet {
            entries: entries
                .into_iter()
                .map(|(answer, count)| AnswerEntry { answer, count })
                .collect(),
        })
    }

    /// Annotator count for `y`, compared after normalization.
    pub fn count_of(&self, y: &str) -> u32 {
        let needle = normalize(y);
        self.entries
            .iter()
            .filter(|e| normalize(&e.answer) == needle)
            .map(|e| e.count)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One question with its textual vision features and annotated answers.
#[derive(Debug, Clone)]
pub struct QueryExample {
    pub question_id: String,
    pub question: String,
    pub objects: Vec<String>,
    /// Per-object attribute lists, indexed consistently with `objects`.
    pub attributes: Vec<Vec<String>>,
    pub caption: String,
    pub ocr_text: String,
    pub answers: AnswerSet,
    pub split: Split,
}

/// Assembled query string with section markers, plus its normalized tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FullQuery {
    pub text: String,
    pub norm_tokens: Vec<String>,
}

/// Lowercase, strip punctuation to spaces, split on whitespace.
/// Idempotent on its own output; empty input yields an empty sequence.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// True iff `needle` occurs contiguously in `hay`. Empty needles never match.
pub fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Number of contiguous occurrences of `needle` in `hay`.
pub fn count_seq(hay: &[String], needle: &[String]) -> usize {
    if needle.is_empty() || hay.len() < needle.len() {
        return 0;
    }
    hay.windows(needle.len()).filter(|w| *w == needle).count()
}

fn section(marker: &str, content: &str) -> String {
    if content.is_empty() {
        format!("<{marker}> </{marker}>")
    } else {
        format!("<{marker}> {content} </{marker}>")
    }
}

/// Assemble the full query string: question, objects with attribute prefixes,
/// caption, OCR text, each wrapped in its section markers in fixed order.
pub fn build_full_query(ex: &QueryExample) -> FullQuery {
    let objects = ex
        .objects
        .iter()
        .enumerate()
        .map(|(i, obj)| {
            let attrs = ex.attributes.get(i).map(|a| a.as_slice()).unwrap_or(&[]);
            if attrs.is_empty() {
                obj.clone()
            } else {
                format!("{} {}", attrs.join(" "), obj)
            }
        })
        .collect::<Vec<_>>()
        .join(" | ");
    let text = format!(
        "{} {} {} {}",
        section("q", &ex.question),
        section("obj", &objects),
        section("cap", &ex.caption),
        section("ocr", &ex.ocr_text),
    );
    let norm_tokens = normalize(&text);
    FullQuery { text, norm_tokens }
}

/// Recover the four raw sections (question, objects, caption, ocr) from a
/// full-query string. Inverse of [`build_full_query`] at the section level.
pub fn parse_full_query(text: &str) -> Result<(String, String, String, String)> {
    let mut out = Vec::with_capacity(4);
    for marker in ["q", "obj", "cap", "ocr"] {
        let open = format!("<{marker}> ");
        let close = format!(" </{marker}>");
        let start = text
            .find(&open)
            .ok_or_else(|| Error::Format(format!("missing <{marker}> section")))?
            + open.len();
        // Empty sections render as "<m> </m>", so the close marker's leading
        // space may coincide with the open marker's trailing one.
        let end = text[start - 1..]
            .find(&close)
            .map(|i| start - 1 + i)
            .ok_or_else(|| Error::Format(format!("missing </{marker}> close")))?;
        out.push(if end < start {
            String::new()
        } else {
            text[start..end].to_string()
        });
    }
    let mut it = out.into_iter();
    Ok((
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ))
}

/// Pseudo relevance: 1 iff any answer's normalized token sequence occurs
/// contiguously in the document's normalized tokens.
pub fn pseudo_relevance(z: &Document, s: &AnswerSet) -> bool {
    s.entries
        .iter()
        .any(|e| contains_seq(&z.norm_tokens, &normalize(&e.answer)))
}

/// Answer with the maximum annotator count; ties broken by the
/// lexicographically smallest answer string.
pub fn most_popular_answer(s: &AnswerSet) -> Result<&str> {
    s.entries
        .iter()
        .max_by(|a, b| {
            a.count
                .cmp(&b.count)
                .then_with(|| b.answer.cmp(&a.answer))
        })
        .map(|e| e.answer.as_str())
        .ok_or_else(|| Error::EmptyAnswerSet("<unnamed>".into()))
}

/// Per-document generation target: the most popular answer contained in `z`
/// (token-boundary containment), falling back to the overall most popular
/// answer when none is contained.
pub fn customized_target<'a>(z: &Document, s: &'a AnswerSet) -> Result<&'a str> {
    let contained = s
        .entries
        .iter()
        .filter(|e| contains_seq(&z.norm_tokens, &normalize(&e.answer)))
        .max_by(|a, b| {
            a.count
                .cmp(&b.count)
                .then_with(|| b.answer.cmp(&a.answer))
        });
    match contained {
        Some(e) => Ok(e.answer.as_str()),
        None => most_popular_answer(s),
    }
}

// --- JSONL file formats ---

#[derive(Serialize, Deserialize)]
struct DocLine {
    doc_id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct QuestionLine {
    question_id: String,
    question: String,
    objects: Vec<String>,
    attributes: Vec<Vec<String>>,
    caption: String,
    ocr: String,
    answers: Vec<AnswerEntry>,
    split: Split,
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocLine = serde_json::from_str(&line)?;
        docs.push(Document::new(rec.doc_id, rec.text));
    }
    Corpus::new(docs)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in corpus.iter() {
        let rec = DocLine {
            doc_id: d.doc_id.clone(),
            text: d.raw_text.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn read_questions(path: &Path) -> Result<Vec<QueryExample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionLine = serde_json::from_str(&line)?;
        if rec.question.is_empty() {
            return Err(Error::Format(format!(
                "question {} has empty text",
                rec.question_id
            )));
        }
        if rec.answers.is_empty() {
            return Err(Error::EmptyAnswerSet(rec.question_id));
        }
        let answers = AnswerSet::new(
            rec.answers
                .into_iter()
                .map(|e| (e.answer, e.count))
                .collect(),
        )?;
        out.push(QueryExample {
            question_id: rec.question_id,
            question: rec.question,
            objects: rec.objects,
            attributes: rec.attributes,
            caption: rec.caption,
            ocr_text: rec.ocr,
            answers,
            split: rec.split,
        });
    }
    Ok(out)
}

pub fn write_questions(path: &Path, examples: &[QueryExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let rec = QuestionLine {
            question_id: ex.question_id.clone(),
            question: ex.question.clone(),
            objects: ex.objects.clone(),
            attributes: ex.attributes.clone(),
            caption: ex.caption.clone(),
            ocr: ex.ocr_text.clone(),
            answers: ex.answers.entries.clone(),
            split: ex.split,
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}
