//! Answer, retrieval, and integrated-system metrics with report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{pseudo_relevance, AnswerSet, Document};
use crate::error::{Error, Result};

/// Soft answer accuracy: min(annotator count / 3, 1).
pub fn vqa_score(y: &str, s: &AnswerSet) -> f64 {
    (s.count_of(y) as f64 / 3.0).min(1.0)
}

/// Binary answer accuracy: 1 iff any annotator gave this answer.
pub fn exact_match(y: &str, s: &AnswerSet) -> f64 {
    if s.count_of(y) > 0 {
        1.0
    } else {
        0.0
    }
}

fn check_k(k: usize, retrieved: usize) -> Result<()> {
    if k == 0 || k > retrieved {
        return Err(Error::InvalidConfig(format!(
            "k = {k} out of range for {retrieved} retrieved documents"
        )));
    }
    Ok(())
}

/// 1 iff any of the first k retrieved documents is pseudo relevant.
pub fn prrecall_at_k(retrieved: &[&Document], s: &AnswerSet, k: usize) -> Result<f64> {
    check_k(k, retrieved.len())?;
    Ok(if retrieved[..k].iter().any(|z| pseudo_relevance(z, s)) {
        1.0
    } else {
        0.0
    })
}

/// Fraction of the first k retrieved documents that are pseudo relevant.
pub fn prprec_at_k(retrieved: &[&Document], s: &AnswerSet, k: usize) -> Result<f64> {
    check_k(k, retrieved.len())?;
    let hits = retrieved[..k]
        .iter()
        .filter(|z| pseudo_relevance(z, s))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Hit/free success indicators: a hit needs retrieval (correct with documents,
/// wrong closed-book); a free success is correct either way.
pub fn hsr_fsr(y: &str, y_closed_book: &str, s: &AnswerSet) -> (f64, f64) {
    let with = exact_match(y, s) > 0.0;
    let without = exact_match(y_closed_book, s) > 0.0;
    match (with, without) {
        (true, false) => (1.0, 0.0),
        (true, true) => (0.0, 1.0),
        _ => (0.0, 0.0),
    }
}

/// Per-question metric record, one per evaluated test question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub vqa_score: f64,
    pub exact_match: f64,
    /// K -> PRRecall@K indicator for this question.
    pub prrecall_at: BTreeMap<usize, f64>,
    /// K -> PRPrec@K for this question.
    pub prprec_at: BTreeMap<usize, f64>,
    pub hsr: f64,
    pub fsr: f64,
    /// 1 iff no annotated answer is present in the answer vocabulary.
    pub oov_gold: f64,
}

/// Evaluation-set means plus the derived hit/free ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub vqa_score: f64,
    pub em: f64,
    pub prrecall_at: BTreeMap<usize, f64>,
    pub prprec_at: BTreeMap<usize, f64>,
    pub hsr: f64,
    pub fsr: f64,
    /// Ratio of the aggregated means; absent when fsr is zero.
    pub hf_ratio: Option<f64>,
    pub n_questions: usize,
    pub oov_gold_rate: f64,
}

/// Arithmetic means over the evaluation set. The hit/free ratio is the ratio
/// of the aggregated means, not the mean of per-question ratios.
pub fn aggregate(records: &[QuestionRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no records to aggregate".into()));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&QuestionRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mut prrecall_at = BTreeMap::new();
    let mut prprec_at = BTreeMap::new();
    for r in records {
        for (&k, &v) in &r.prrecall_at {
            *prrecall_at.entry(k).or_insert(0.0) += v / n;
        }
        for (&k, &v) in &r.prprec_at {
            *prprec_at.entry(k).or_insert(0.0) += v / n;
        }
    }
    let hsr = mean(&|r| r.hsr);
    let fsr = mean(&|r| r.fsr);
    Ok(MetricsReport {
        vqa_score: mean(&|r| r.vqa_score),
        em: mean(&|r| r.exact_match),
        prrecall_at,
        prprec_at,
        hsr,
        fsr,
        hf_ratio: if fsr > 0.0 { Some(hsr / fsr) } else { None },
        n_questions: records.len(),
        oov_gold_rate: mean(&|r| r.oov_gold),
    })
}

impl MetricsReport {
    /// Human-readable table; rates rendered as percentages with 2 decimals.
    pub fn render_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let mut out = String::new();
        let _ = writeln!(out, "metric          value");
        let _ = writeln!(out, "--------------  --------");
        let _ = writeln!(out, "VQA Score       {}", pct(self.vqa_score));
        let _ = writeln!(out, "EM              {}", pct(self.em));
        for (k, v) in &self.prrecall_at {
            let _ = writeln!(out, "PRRecall@{k:<6} {}", pct(*v));
        }
        for (k, v) in &self.prprec_at {
            let _ = writeln!(out, "PRPrec@{k:<8} {}", pct(*v));
        }
        let _ = writeln!(out, "HSR             {}", pct(self.hsr));
        let _ = writeln!(out, "FSR             {}", pct(self.fsr));
        match self.hf_ratio {
            Some(r) => {
                let _ = writeln!(out, "H/F             {r:.2}");
            }
            None => {
                let _ = writeln!(out, "H/F             n/a");
            }
        }
        let _ = writeln!(out, "OOV gold rate   {}", pct(self.oov_gold_rate));
        let _ = writeln!(out, "questions       {}", self.n_questions);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answers(entries: &[(&str, u32)]) -> AnswerSet {
        AnswerSet::new(entries.iter().map(|(a, c)| (a.to_string(), *c)).collect()).unwrap()
    }

    #[test]
    fn vqa_score_counts() {
        let s = answers(&[("cake", 3), ("pie", 2), ("tart", 5)]);
        assert_eq!(vqa_score("cake", &s), 1.0);
        assert!((vqa_score("pie", &s) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(vqa_score("tart", &s), 1.0);
        assert_eq!(vqa_score("bread", &s), 0.0);
    }

    #[test]
    fn vqa_score_normalizes_before_matching() {
        let s = answers(&[("New York", 2)]);
        assert!((vqa_score("new york!", &s) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_match_clamps() {
        let s = answers(&[("cake", 5), ("pie", 1)]);
        assert_eq!(exact_match("cake", &s), 1.0);
        assert_eq!(exact_match("pie", &s), 1.0);
        assert_eq!(exact_match("bread", &s), 0.0);
    }

    #[test]
    fn em_dominates_vqa_score() {
        let s = answers(&[("a", 1), ("b", 2), ("c", 4)]);
        for y in ["a", "b", "c", "zzz"] {
            let em = exact_match(y, &s);
            let vs = vqa_score(y, &s);
            assert!(vs <= em);
            if em == 1.0 {
                assert!(vs >= 1.0 / 3.0);
            } else {
                assert_eq!(vs, 0.0);
            }
        }
    }

    fn docs(texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{i}"), *t))
            .collect()
    }

    #[test]
    fn recall_and_precision_hand_cases() {
        let s = answers(&[("hawk", 3)]);
        let ds = docs(&[
            "nothing here",
            "a hawk flies",
            "more nothing",
            "hawk again",
            "still nothing",
        ]);
        let refs: Vec<&Document> = ds.iter().collect();
        assert_eq!(prrecall_at_k(&refs, &s, 1).unwrap(), 0.0);
        assert_eq!(prrecall_at_k(&refs, &s, 2).unwrap(), 1.0);
        assert_eq!(prrecall_at_k(&refs, &s, 5).unwrap(), 1.0);
        assert!((prprec_at_k(&refs, &s, 5).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(prprec_at_k(&refs, &s, 1).unwrap(), 0.0);
        assert!(prrecall_at_k(&refs, &s, 6).is_err());
        assert!(prrecall_at_k(&refs, &s, 0).is_err());
    }

    #[test]
    fn recall_monotone_and_scaled_precision_monotone() {
        let s = answers(&[("sun", 2), ("moon", 1)]);
        let ds = docs(&[
            "the moon rises",
            "dark clouds",
            "sun and sky",
            "empty field",
            "sun again",
            "nothing",
        ]);
        let refs: Vec<&Document> = ds.iter().collect();
        let mut prev_recall = 0.0;
        let mut prev_hits = 0.0;
        for k in 1..=refs.len() {
            let r = prrecall_at_k(&refs, &s, k).unwrap();
            let hits = prprec_at_k(&refs, &s, k).unwrap() * k as f64;
            assert!(r >= prev_recall);
            assert!(hits >= prev_hits - 1e-12);
            prev_recall = r;
            prev_hits = hits;
        }
    }

    #[test]
    fn recall_matches_brute_force_scan() {
        let s = answers(&[("tree", 1)]);
        let ds = docs(&["rock", "tree line", "water", "a tall tree", "sand"]);
        let refs: Vec<&Document> = ds.iter().collect();
        for k in 1..=refs.len() {
            let expect = refs[..k].iter().any(|d| pseudo_relevance(d, &s));
            assert_eq!(prrecall_at_k(&refs, &s, k).unwrap() > 0.0, expect);
        }
    }

    #[test]
    fn hsr_fsr_cases() {
        let s = answers(&[("cake", 3)]);
        assert_eq!(hsr_fsr("cake", "pie", &s), (1.0, 0.0));
        assert_eq!(hsr_fsr("cake", "cake", &s), (0.0, 1.0));
        assert_eq!(hsr_fsr("pie", "cake", &s), (0.0, 0.0));
        assert_eq!(hsr_fsr("pie", "pie", &s), (0.0, 0.0));
    }

    #[test]
    fn hsr_plus_fsr_equals_exact_match() {
        let s = answers(&[("a", 2), ("b", 1)]);
        for y in ["a", "b", "x"] {
            for cb in ["a", "b", "x"] {
                let (h, f) = hsr_fsr(y, cb, &s);
                assert_eq!(h + f, exact_match(y, &s));
                assert!(h + f <= 1.0);
            }
        }
    }

    fn record(id: &str, vqa: f64, em: f64, hsr: f64, fsr: f64) -> QuestionRecord {
        QuestionRecord {
            question_id: id.into(),
            vqa_score: vqa,
            exact_match: em,
            prrecall_at: BTreeMap::from([(5, em)]),
            prprec_at: BTreeMap::from([(5, em / 5.0)]),
            hsr,
            fsr,
            oov_gold: 0.0,
        }
    }

    #[test]
    fn aggregate_single_and_pair() {
        let r = aggregate(&[record("q0", 1.0, 1.0, 1.0, 0.0)]).unwrap();
        assert_eq!(r.vqa_score, 1.0);
        assert_eq!(r.n_questions, 1);
        let r = aggregate(&[
            record("q0", 1.0, 1.0, 1.0, 0.0),
            record("q1", 0.0, 0.0, 0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(r.vqa_score, 0.5);
        assert_eq!(r.em, 0.5);
        assert_eq!(r.prrecall_at[&5], 0.5);
        assert_eq!(r.hf_ratio, None, "fsr = 0 leaves the ratio undefined");
    }

    #[test]
    fn aggregate_ratio_of_means() {
        let r = aggregate(&[
            record("q0", 1.0, 1.0, 1.0, 0.0),
            record("q1", 1.0, 1.0, 0.0, 1.0),
            record("q2", 1.0, 1.0, 1.0, 0.0),
        ])
        .unwrap();
        let ratio = r.hf_ratio.unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_empty_errors() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_roundtrips_through_json() {
        let r = aggregate(&[record("q0", 1.0 / 3.0, 1.0, 0.0, 1.0)]).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        assert!(r.render_table().contains("VQA Score"));
    }
}
