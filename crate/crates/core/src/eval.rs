//! Answer metrics: averaged BLEU-1..4, ROUGE-L F1, open-question token
//! recall and closed-question exact-match precision.
//!
//! Every metric first normalizes text: lowercase, split on whitespace, strip
//! punctuation from both ends of each token, drop tokens left empty.
//!
//! BLEU is sentence-level with clipped n-gram precision and the usual brevity
//! penalty against the reference length closest to the prediction (shorter on
//! ties). An order whose clipped count is zero uses a count of 1e-9; an order
//! for which the prediction has no n-grams at all is left out of the
//! geometric mean. METEOR is not computed and is reported as absent.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::QuestionKind;

pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("empty input")]
    EmptyInput,
    #[error("no {0:?} records")]
    NoRecordsOfKind(QuestionKind),
    #[error("dataset line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("no prediction for record {0}")]
    MissingPrediction(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase().trim_matches(|c: char| c.is_ascii_punctuation()).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Cumulative BLEU-`max_n` of one prediction.
pub fn bleu_n(prediction: &str, references: &[&str], max_n: usize) -> Result<f64, EvalError> {
    let refs: Vec<Vec<String>> = references.iter().map(|r| normalize(r)).filter(|r| !r.is_empty()).collect();
    if refs.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let cand = normalize(prediction);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        if total == 0 {
            continue;
        }
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = counts.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let numerator = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 };
        log_sum += (numerator / total as f64).ln();
        orders += 1;
    }
    let c = cand.len();
    let r = refs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(c), l)).unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Mean of BLEU-1, -2, -3 and -4.
pub fn bleu_avg(prediction: &str, references: &[&str]) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    for n in 1..=4 {
        sum += bleu_n(prediction, references, n)?;
    }
    Ok(sum / 4.0)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(prediction: &str, reference: &str) -> Result<f64, EvalError> {
    let (p, r) = (normalize(prediction), normalize(reference));
    if p.is_empty() || r.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let lcs = lcs_len(&p, &r) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let (prec, rec) = (lcs / p.len() as f64, lcs / r.len() as f64);
    Ok(2.0 * prec * rec / (prec + rec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: String,
    pub reference: String,
    pub question_kind: QuestionKind,
}

/// Share of reference tokens (with multiplicity) that the prediction covers.
pub fn token_recall(prediction: &str, reference: &str) -> f64 {
    let r = normalize(reference);
    if r.is_empty() {
        return 0.0;
    }
    let mut have: HashMap<String, usize> = HashMap::new();
    for t in normalize(prediction) {
        *have.entry(t).or_default() += 1;
    }
    let mut hit = 0;
    for t in &r {
        if let Some(c) = have.get_mut(t).filter(|c| **c > 0) {
            *c -= 1;
            hit += 1;
        }
    }
    hit as f64 / r.len() as f64
}

pub fn open_recall(records: &[EvalRecord]) -> Result<f64, EvalError> {
    let open: Vec<&EvalRecord> = records.iter().filter(|r| r.question_kind == QuestionKind::Open).collect();
    if open.is_empty() {
        return Err(EvalError::NoRecordsOfKind(QuestionKind::Open));
    }
    Ok(open.iter().map(|r| token_recall(&r.prediction, &r.reference)).sum::<f64>() / open.len() as f64)
}

pub fn closed_precision(records: &[EvalRecord]) -> Result<f64, EvalError> {
    let closed: Vec<&EvalRecord> = records.iter().filter(|r| r.question_kind == QuestionKind::Closed).collect();
    if closed.is_empty() {
        return Err(EvalError::NoRecordsOfKind(QuestionKind::Closed));
    }
    let hits = closed.iter().filter(|r| normalize(&r.prediction) == normalize(&r.reference)).count();
    Ok(hits as f64 / closed.len() as f64)
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub kind: QuestionKind,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| EvalError::Schema { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>, EvalError> {
    let records: Vec<DatasetRecord> = parse_lines(text)?;
    for (i, r) in records.iter().enumerate() {
        if r.id.trim().is_empty() || r.question.trim().is_empty() || normalize(&r.answer).is_empty() {
            return Err(EvalError::Schema { line: i + 1, message: "id, question and answer must be non-empty".into() });
        }
    }
    Ok(records)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, EvalError> {
    parse_dataset(&fs::read_to_string(path)?)
}

/// `{id, prediction}` lines, as written by batch runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    parse_lines(&fs::read_to_string(path)?)
}

/// Pairs every dataset record with its prediction by id.
pub fn join(dataset: &[DatasetRecord], predictions: &[Prediction]) -> Result<Vec<EvalRecord>, EvalError> {
    let by_id: HashMap<&str, &str> = predictions.iter().map(|p| (p.id.as_str(), p.prediction.as_str())).collect();
    dataset
        .iter()
        .map(|d| {
            let prediction = by_id.get(d.id.as_str()).ok_or_else(|| EvalError::MissingPrediction(d.id.clone()))?;
            Ok(EvalRecord {
                id: d.id.clone(),
                prediction: prediction.to_string(),
                reference: d.answer.clone(),
                question_kind: d.kind,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub open_records: usize,
    pub closed_records: usize,
    pub bleu: f64,
    pub rouge_l: f64,
    pub open_recall: Option<f64>,
    pub closed_precision: Option<f64>,
    /// Never computed; always `None`.
    pub meteor: Option<f64>,
}

/// Corpus report. BLEU and ROUGE-L are means over all records; an empty
/// prediction scores 0 on both.
pub fn report(records: &[EvalRecord]) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut bleu = 0.0;
    let mut rouge = 0.0;
    for r in records {
        bleu += bleu_avg(&r.prediction, &[&r.reference])?;
        rouge += match rouge_l(&r.prediction, &r.reference) {
            Ok(v) => v,
            Err(EvalError::EmptyInput) => 0.0,
            Err(e) => return Err(e),
        };
    }
    let n = records.len() as f64;
    let count = |k| records.iter().filter(|r| r.question_kind == k).count();
    Ok(MetricsReport {
        records: records.len(),
        open_records: count(QuestionKind::Open),
        closed_records: count(QuestionKind::Closed),
        bleu: bleu / n,
        rouge_l: rouge / n,
        open_recall: open_recall(records).ok(),
        closed_precision: closed_precision(records).ok(),
        meteor: None,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "absent".into());
        writeln!(f, "{:<18} {:>8}", "metric", "value")?;
        writeln!(f, "{:<18} {:>8}", "records", self.records)?;
        writeln!(f, "{:<18} {:>8}", "open (recall)", cell(self.open_recall))?;
        writeln!(f, "{:<18} {:>8}", "closed (precision)", cell(self.closed_precision))?;
        writeln!(f, "{:<18} {:>8}", "BLEU", cell(Some(self.bleu)))?;
        writeln!(f, "{:<18} {:>8}", "ROUGE-L", cell(Some(self.rouge_l)))?;
        write!(f, "{:<18} {:>8}", "METEOR", "absent")
    }
}
