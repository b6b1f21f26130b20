//! Top@1 / Top@10 scoring of ranked prediction files, plus reference baselines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnswerSpace, QaPair};
use crate::oracle::{Oracle, OracleParams};
use crate::scene::SceneGraph;
use crate::templates::{find_template, Category, Hops, QuestionTemplate};

pub const MAX_RANKED: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("missing scene graph(s) for: {}", .0.join(", "))]
    MissingGraphs(Vec<String>),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("re-answering {qid}: {message}")]
    Oracle { qid: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

/// Canonical form used for all answer matching.
///
/// Trims, collapses whitespace, lowercases, drops leading articles and maps
/// the number words zero through twenty to numerals. Idempotent.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let mut tokens: Vec<&str> = lower.split_whitespace().collect();
    let mut start = 0;
    while tokens.len() - start > 1 && matches!(tokens[start], "a" | "an" | "the") {
        start += 1;
    }
    tokens.drain(..start);
    tokens
        .into_iter()
        .map(|t| match NUMBER_WORDS.iter().position(|w| *w == t) {
            Some(n) => n.to_string(),
            None => t.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether `gold` appears among the first `k` ranked answers after normalization.
pub fn accuracy_at_k(gold: &str, ranked: &[String], k: usize) -> bool {
    let g = normalize_answer(gold);
    ranked.iter().take(k).any(|a| normalize_answer(a) == g)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predictions: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    qid: String,
    answers: Vec<String>,
}

/// Reads one `{qid, answers}` object per line.
///
/// Answers that normalize to the same string collapse onto their best rank.
pub fn load_predictions<R: BufRead>(source: R) -> Result<PredictionSet, EvalError> {
    let mut out = PredictionSet::default();
    for (k, line) in source.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Format { line: line_no, message };
        let p: PredictionLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if p.answers.is_empty() {
            return Err(err("answers must not be empty".into()));
        }
        if p.answers.len() > MAX_RANKED {
            return Err(err(format!("{} answers exceed the limit of {MAX_RANKED}", p.answers.len())));
        }
        let mut seen = HashSet::new();
        let answers: Vec<String> = p
            .answers
            .into_iter()
            .filter(|a| seen.insert(normalize_answer(a)))
            .collect();
        if out.predictions.insert(p.qid.clone(), answers).is_some() {
            return Err(err(format!("duplicate qid {}", p.qid)));
        }
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(p: &PredictionSet, mut sink: W) -> Result<(), EvalError> {
    for (qid, answers) in &p.predictions {
        let line = PredictionLine {
            qid: qid.clone(),
            answers: answers.clone(),
        };
        serde_json::to_writer(&mut sink, &line).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub count: usize,
    pub acc1: f64,
    pub acc10: f64,
    #[serde(skip)]
    hits1: usize,
    #[serde(skip)]
    hits10: usize,
}

impl Stratum {
    fn add(&mut self, h1: bool, h10: bool) {
        self.count += 1;
        self.hits1 += h1 as usize;
        self.hits10 += h10 as usize;
    }

    fn finish(&mut self) {
        if self.count > 0 {
            self.acc1 = self.hits1 as f64 / self.count as f64;
            self.acc10 = self.hits10 as f64 / self.count as f64;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Stratum,
    pub by_hops: BTreeMap<Hops, Stratum>,
    pub by_category: BTreeMap<Category, Stratum>,
    /// Dataset questions without a prediction (scored as wrong).
    pub missing_predictions: usize,
    /// Prediction qids not present in the dataset (ignored).
    pub unknown_predictions: usize,
    /// Gold answers outside the supplied answer space, when one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_of_space: Option<usize>,
}

/// Scores `preds` against `dataset`; questions without predictions count as misses.
pub fn evaluate(dataset: &[QaPair], preds: &PredictionSet, space: Option<&AnswerSpace>) -> EvalReport {
    let mut report = EvalReport::default();
    let known: HashSet<&str> = dataset.iter().map(|p| p.qid.as_str()).collect();
    report.unknown_predictions = preds.predictions.keys().filter(|q| !known.contains(q.as_str())).count();
    if report.unknown_predictions > 0 {
        log::warn!("{} prediction(s) reference qids absent from the dataset", report.unknown_predictions);
    }
    let vocab: Option<HashSet<&str>> = space.map(|s| s.entries.iter().map(|e| e.answer.as_str()).collect());
    let mut oos = 0;
    for p in dataset {
        let (h1, h10) = match preds.predictions.get(&p.qid) {
            Some(ranked) => (accuracy_at_k(&p.answer.value, ranked, 1), accuracy_at_k(&p.answer.value, ranked, MAX_RANKED)),
            None => {
                report.missing_predictions += 1;
                (false, false)
            }
        };
        if let Some(v) = &vocab {
            if !v.contains(normalize_answer(&p.answer.value).as_str()) {
                oos += 1;
            }
        }
        report.overall.add(h1, h10);
        report.by_hops.entry(p.hops).or_default().add(h1, h10);
        report.by_category.entry(p.category).or_default().add(h1, h10);
    }
    report.out_of_space = vocab.map(|_| oos);
    report.overall.finish();
    report.by_hops.values_mut().for_each(Stratum::finish);
    report.by_category.values_mut().for_each(Stratum::finish);
    report
}

/// Upper-bound baseline: rank 1 is the oracle's re-answer of each pair's provenance.
pub fn oracle_predictions(
    dataset: &[QaPair],
    graphs: &HashMap<(String, String), SceneGraph>,
    registry: &[QuestionTemplate],
) -> Result<PredictionSet, EvalError> {
    let mut missing: Vec<String> = dataset
        .iter()
        .filter(|p| !graphs.contains_key(&(p.city.clone(), p.scene_id.clone())))
        .map(|p| format!("{}/{}", p.city, p.scene_id))
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(EvalError::MissingGraphs(missing));
    }
    let mut oracles: HashMap<(&str, &str, u64), Oracle<'_>> = HashMap::new();
    let mut out = PredictionSet::default();
    for p in dataset {
        let params = OracleParams {
            near_radius: p.provenance.oracle_params.near_radius,
            tie_tolerance: p.provenance.oracle_params.tie_tolerance,
        };
        let key = (p.city.as_str(), p.scene_id.as_str(), params.near_radius.to_bits() ^ params.tie_tolerance.to_bits());
        let o = oracles
            .entry(key)
            .or_insert_with(|| Oracle::new(&graphs[&(p.city.clone(), p.scene_id.clone())], params));
        let fail = |message: String| EvalError::Oracle {
            qid: p.qid.clone(),
            message,
        };
        let t = find_template(registry, &p.provenance.template_id)
            .ok_or_else(|| fail(format!("unknown template {}", p.provenance.template_id)))?;
        let a = o.answer(t, &p.provenance.binding).map_err(|e| fail(e.to_string()))?;
        out.predictions.insert(p.qid.clone(), vec![a.value]);
    }
    Ok(out)
}

/// Floor baseline: the ten most frequent normalized training answers, for every question.
pub fn majority_baseline(train: &[QaPair], eval: &[QaPair]) -> Result<PredictionSet, EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptyTrain);
    }
    let space = AnswerSpace::build(train);
    let top: Vec<String> = space.entries.iter().take(MAX_RANKED).map(|e| e.answer.clone()).collect();
    Ok(PredictionSet {
        predictions: eval.iter().map(|p| (p.qid.clone(), top.clone())).collect(),
    })
}
