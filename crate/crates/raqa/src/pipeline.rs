//! End-to-end orchestration: config handling, artifact layout, and the
//! synthesize / pretrain / train / eval / sweep stages behind the CLI.
//!
//! Every stage is a pure function of (input files, config, seed) to output
//! files with fixed names inside the run directory, so re-runs are
//! byte-identical.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    build_full_query, read_corpus, read_questions, write_corpus, write_questions, Corpus,
    QueryExample, Split,
};
use crate::dpr::{pretrain, PretrainConfig};
use crate::encoder::DualEncoderParams;
use crate::error::{Error, Result};
use crate::generator::{AnswerScorerParams, AnswerVocab};
use crate::index::{build_index, EmbeddingIndex};
use crate::inference::{decode_closed_book, decode_joint};
use crate::joint::{train_joint, JointConfig, TrainingVariant};
use crate::metrics::{
    aggregate, exact_match, hsr_fsr, prprec_at_k, prrecall_at_k, vqa_score, MetricsReport,
    QuestionRecord,
};
use crate::synth::{generate_synthetic_task, SynthConfig};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const PRETRAINED_ENCODER_FILE: &str = "encoder.json";
pub const INDEX_FILE: &str = "index.bin";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const JOINT_ENCODER_FILE: &str = "encoder_joint.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const RUN_FILE: &str = "run.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

/// One structured config for the whole pipeline. Model sizes and learning
/// rates default to values tuned for the synthetic task; the published
/// BERT/T5-scale rates are far too small for these tiny dense models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder_vocab: usize,
    pub encoder_dim: usize,
    pub generator_vocab: usize,
    pub generator_dim: usize,
    pub k_test: usize,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub joint: JointConfig,
    pub sweep_k_train: Vec<usize>,
    pub sweep_k_test: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder_vocab: 2048,
            encoder_dim: 128,
            generator_vocab: 2048,
            generator_dim: 32,
            k_test: 5,
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            joint: JointConfig::default(),
            sweep_k_train: vec![5],
            sweep_k_test: vec![5, 50],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: TrainingVariant,
    pub k_train: usize,
    pub seed: u64,
}

/// One output line of the predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
    pub doc_id: String,
    pub joint_prob: f64,
    pub closed_book_answer: String,
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(())
}

pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let (corpus, questions) = generate_synthetic_task(&cfg.synth, cfg.seed)?;
    write_corpus(&out_dir.join(CORPUS_FILE), &corpus)?;
    write_questions(&out_dir.join(QUESTIONS_FILE), &questions)?;
    Ok(())
}

pub fn run_pretrain(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    require(&data_dir.join(CORPUS_FILE))?;
    require(&data_dir.join(QUESTIONS_FILE))?;
    let corpus = read_corpus(&data_dir.join(CORPUS_FILE))?;
    let questions = read_questions(&data_dir.join(QUESTIONS_FILE))?;
    let params = DualEncoderParams::new(cfg.encoder_vocab, cfg.encoder_dim, cfg.seed);
    let mut log = Vec::new();
    let params = pretrain(
        params,
        &corpus,
        &questions,
        &cfg.pretrain,
        cfg.seed.wrapping_add(101),
        Some(&mut log),
    )?;
    std::fs::write(out_dir.join(PRETRAIN_LOG_FILE), log)?;
    params.save(&out_dir.join(PRETRAINED_ENCODER_FILE))?;
    let index = build_index(&corpus, &params)?;
    index.save(&out_dir.join(INDEX_FILE))?;
    Ok(())
}

pub fn run_train(
    cfg: &RunConfig,
    data_dir: &Path,
    pretrained_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let corpus = read_corpus(&data_dir.join(CORPUS_FILE))?;
    let questions = read_questions(&data_dir.join(QUESTIONS_FILE))?;
    let variant = cfg.joint.variant;

    let (enc, index) = if variant == TrainingVariant::NoDpr {
        // Retrieval plays no role in training; a fresh encoder and its index
        // are still emitted so evaluation can fill the retrieval columns.
        let enc = DualEncoderParams::new(cfg.encoder_vocab, cfg.encoder_dim, cfg.seed);
        let index = build_index(&corpus, &enc)?;
        (enc, index)
    } else {
        let enc_path = pretrained_dir.join(PRETRAINED_ENCODER_FILE);
        require(&enc_path)?;
        require(&pretrained_dir.join(INDEX_FILE))?;
        let enc = DualEncoderParams::load(&enc_path)?;
        let index = EmbeddingIndex::load(&pretrained_dir.join(INDEX_FILE))?;
        index.validate_against(&enc)?;
        (enc, index)
    };

    let vocab = AnswerVocab::from_examples(&questions)?;
    let gen = AnswerScorerParams::new(
        cfg.generator_vocab,
        cfg.generator_dim,
        vocab.len(),
        cfg.seed.wrapping_add(1),
    );
    let mut log = Vec::new();
    let (enc, gen) = train_joint(
        enc,
        gen,
        &vocab,
        &corpus,
        &index,
        &questions,
        &cfg.joint,
        cfg.seed.wrapping_add(202),
        Some(&mut log),
    )?;
    std::fs::write(out_dir.join(TRAIN_LOG_FILE), log)?;
    enc.save(&out_dir.join(JOINT_ENCODER_FILE))?;
    index.save(&out_dir.join(INDEX_FILE))?;
    gen.save(&out_dir.join(GENERATOR_FILE))?;
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    let manifest = RunManifest {
        variant,
        k_train: cfg.joint.k_train,
        seed: cfg.seed,
    };
    let f = std::io::BufWriter::new(std::fs::File::create(out_dir.join(RUN_FILE))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Decodes and scores every test question. `recall_ks` selects the K values
/// recorded for PRRecall/PRPrec; each must be ≤ `k_test`. For the
/// no-retrieval variant the reported answer is the closed-book one.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    enc: &DualEncoderParams,
    gen: &AnswerScorerParams,
    vocab: &AnswerVocab,
    index: &EmbeddingIndex,
    corpus: &Corpus,
    questions: &[QueryExample],
    variant: TrainingVariant,
    k_test: usize,
    recall_ks: &[usize],
) -> Result<(Vec<QuestionRecord>, Vec<Prediction>)> {
    index.validate_against(enc)?;
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    for ex in questions.iter().filter(|e| e.split == Split::Test) {
        let fq = build_full_query(ex);
        let decoded = decode_joint(enc, gen, vocab, index, corpus, &fq, k_test)?;
        let (closed_book, _) = decode_closed_book(gen, vocab, &fq)?;
        let answer = if variant == TrainingVariant::NoDpr {
            closed_book.clone()
        } else {
            decoded.answer.clone()
        };
        let retrieved: Vec<&crate::dataio::Document> = decoded
            .retrieval
            .entries
            .iter()
            .map(|e| corpus.by_id(&e.doc_id))
            .collect::<Result<_>>()?;
        let mut prrecall_at = std::collections::BTreeMap::new();
        let mut prprec_at = std::collections::BTreeMap::new();
        for &k in recall_ks {
            let k = k.min(retrieved.len());
            prrecall_at.insert(k, prrecall_at_k(&retrieved, &ex.answers, k)?);
            prprec_at.insert(k, prprec_at_k(&retrieved, &ex.answers, k)?);
        }
        let (hsr, fsr) = hsr_fsr(&answer, &closed_book, &ex.answers);
        let oov_gold = if ex
            .answers
            .entries
            .iter()
            .any(|e| vocab.index_of(&e.answer).is_some())
        {
            0.0
        } else {
            1.0
        };
        records.push(QuestionRecord {
            question_id: ex.question_id.clone(),
            vqa_score: vqa_score(&answer, &ex.answers),
            exact_match: exact_match(&answer, &ex.answers),
            prrecall_at,
            prprec_at,
            hsr,
            fsr,
            oov_gold,
        });
        predictions.push(Prediction {
            question_id: ex.question_id.clone(),
            answer,
            doc_id: decoded.doc_id,
            joint_prob: decoded.joint_prob,
            closed_book_answer: closed_book,
        });
    }
    Ok((records, predictions))
}

pub fn run_eval(
    cfg: &RunConfig,
    data_dir: &Path,
    model_dir: &Path,
    out_dir: &Path,
) -> Result<MetricsReport> {
    std::fs::create_dir_all(out_dir)?;
    let corpus = read_corpus(&data_dir.join(CORPUS_FILE))?;
    let questions = read_questions(&data_dir.join(QUESTIONS_FILE))?;
    for name in [JOINT_ENCODER_FILE, GENERATOR_FILE, VOCAB_FILE, INDEX_FILE, RUN_FILE] {
        require(&model_dir.join(name))?;
    }
    let enc = DualEncoderParams::load(&model_dir.join(JOINT_ENCODER_FILE))?;
    let gen = AnswerScorerParams::load(&model_dir.join(GENERATOR_FILE))?;
    let vocab = AnswerVocab::load(&model_dir.join(VOCAB_FILE))?;
    let index = EmbeddingIndex::load(&model_dir.join(INDEX_FILE))?;
    let manifest: RunManifest =
        serde_json::from_reader(BufReader::new(std::fs::File::open(model_dir.join(RUN_FILE))?))?;
    let (records, predictions) = evaluate(
        &enc,
        &gen,
        &vocab,
        &index,
        &corpus,
        &questions,
        manifest.variant,
        cfg.k_test,
        &[cfg.k_test],
    )?;
    let report = aggregate(&records)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join(PREDICTIONS_FILE))?);
    for p in &predictions {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    drop(f);
    let f = std::io::BufWriter::new(std::fs::File::create(out_dir.join(REPORT_JSON_FILE))?);
    serde_json::to_writer_pretty(f, &report)?;
    std::fs::write(out_dir.join(REPORT_TABLE_FILE), report.render_table())?;
    Ok(report)
}

/// Grid over K_train x K_test: trains one model per K_train value from the
/// pretrained checkpoint and evaluates it at every K_test value.
pub fn run_sweep(
    cfg: &RunConfig,
    data_dir: &Path,
    pretrained_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    if cfg.sweep_k_train.is_empty() || cfg.sweep_k_test.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    let mut csv = String::from("k_train,k_test,vqa_score,em,prrecall,prprec,hsr,fsr\n");
    for &k_train in &cfg.sweep_k_train {
        let mut train_cfg = cfg.clone();
        train_cfg.joint.k_train = k_train;
        let model_dir = out_dir.join(format!("model_k{k_train}"));
        run_train(&train_cfg, data_dir, pretrained_dir, &model_dir)?;
        for &k_test in &cfg.sweep_k_test {
            let mut eval_cfg = train_cfg.clone();
            eval_cfg.k_test = k_test;
            let eval_dir = out_dir.join(format!("eval_k{k_train}_kt{k_test}"));
            let report = run_eval(&eval_cfg, data_dir, &model_dir, &eval_dir)?;
            csv.push_str(&format!(
                "{k_train},{k_test},{},{},{},{},{},{}\n",
                report.vqa_score,
                report.em,
                report.prrecall_at[&k_test],
                report.prprec_at[&k_test],
                report.hsr,
                report.fsr,
            ));
        }
    }
    std::fs::write(out_dir.join(SWEEP_FILE), csv)?;
    Ok(())
}

/// Reads the predictions file back; used by report-recomputation oracles.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
