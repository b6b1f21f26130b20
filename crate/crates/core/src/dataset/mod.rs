//! QA pair assembly, answer space, dataset files and splits.

mod paraphrase;
mod split;

pub use paraphrase::{
    paraphrase_dataset, paraphrase_pair, ChatClient, HttpChatClient, LlmConfig, LlmError, ParaphraseOutcome, synonym_table,
    DEFAULT_PROMPT, LLM_KEY_ENV,
};
pub use split::{
    read_split_manifest, split_city_wise, split_sentence_wise, write_split_manifest, CityLists, SplitAssignment,
    SplitError, SplitMode, SplitParams, DEFAULT_RATIOS,
};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::normalize_answer;
use crate::oracle::{Answer, Oracle, OracleParams};
use crate::scene::{GraphIndex, SceneGraph};
use crate::templates::{
    enumerate_bindings_with, find_template, instantiate, Binding, BindingOptions, Category, Hops, Query,
    QuestionTemplate,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Content hash identifying a question: FNV-1a over
/// `city \0 scene_id \0 template_id \0 canonical_binding`, as 16 hex digits.
pub fn qid_for(city: &str, scene_id: &str, template_id: &str, binding: &Binding) -> String {
    let mut h = Fnv1a::new();
    for part in [city, scene_id, template_id] {
        h.write(part.as_bytes());
        h.write(&[0]);
    }
    h.write(binding.canonical().as_bytes());
    format!("{:016x}", h.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedOracleParams {
    pub near_radius: f64,
    pub tie_tolerance: f64,
}

impl From<OracleParams> for RecordedOracleParams {
    fn from(p: OracleParams) -> Self {
        Self {
            near_radius: p.near_radius,
            tie_tolerance: p.tie_tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_id: String,
    pub binding: Binding,
    pub oracle_params: RecordedOracleParams,
    /// Set when the answer rests on a stand-in semantics (e.g. straight-line travel).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub qid: String,
    pub city: String,
    pub scene_id: String,
    pub category: Category,
    pub hops: Hops,
    pub question: String,
    pub answer: Answer,
    pub provenance: Provenance,
    pub paraphrased: bool,
}

#[derive(Clone, Debug)]
pub struct GenerationConfig {
    pub seed: u64,
    /// Cap applied to every template; `None` uses the per-category defaults.
    pub per_template_limit: Option<usize>,
    pub oracle: OracleParams,
    pub bindings: BindingOptions,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_template_limit: None,
            oracle: OracleParams::default(),
            bindings: BindingOptions::default(),
        }
    }
}

/// Default per-template caps, weighted toward relationship and comparison questions.
pub fn default_limit(category: Category) -> usize {
    match category {
        Category::InstanceIdentification => 6,
        Category::UsageInquiry => 4,
        Category::Relationship => 16,
        Category::SpatialComparison => 20,
        Category::UsageComparison => 16,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedBinding {
    pub template_id: String,
    pub binding: Binding,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Generated {
    pub pairs: Vec<QaPair>,
    pub skipped: Vec<SkippedBinding>,
}

fn scene_seed(seed: u64, g: &SceneGraph) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(g.city.as_bytes());
    h.write(&[0]);
    h.write(g.scene_id.as_bytes());
    h.finish()
}

/// Generates QA pairs for one scene, ordered by (template, binding).
pub fn generate_pairs(g: &SceneGraph, registry: &[QuestionTemplate], config: &GenerationConfig) -> Generated {
    let index = GraphIndex::new(g);
    let oracle = Oracle::new(g, config.oracle);
    let seed = scene_seed(config.seed, g);
    let mut out = Generated::default();
    for t in registry {
        let limit = config.per_template_limit.unwrap_or_else(|| default_limit(t.category));
        for b in enumerate_bindings_with(t, &index, seed, limit, &config.bindings) {
            let answer = oracle.answer(t, &b).map_err(|e| e.to_string());
            let question = instantiate(t, &b).map_err(|e| e.to_string());
            match (question, answer) {
                (Ok(question), Ok(answer)) => out.pairs.push(QaPair {
                    qid: qid_for(&g.city, &g.scene_id, &t.id, &b),
                    city: g.city.clone(),
                    scene_id: g.scene_id.clone(),
                    category: t.category,
                    hops: t.hops,
                    question,
                    answer,
                    provenance: Provenance {
                        template_id: t.id.clone(),
                        binding: b,
                        oracle_params: config.oracle.into(),
                        proxy: (t.query == Query::Quicker)
                            .then(|| "straight-line centroid distance as travel proxy".to_string()),
                    },
                    paraphrased: false,
                }),
                (Err(reason), _) | (_, Err(reason)) => {
                    log::debug!("skipping {} binding: {reason}", t.id);
                    out.skipped.push(SkippedBinding {
                        template_id: t.id.clone(),
                        binding: b,
                        reason,
                    });
                }
            }
        }
    }
    out
}

/// Generates over many scenes in parallel; output follows the input scene order.
pub fn generate_dataset(graphs: &[SceneGraph], registry: &[QuestionTemplate], config: &GenerationConfig) -> Generated {
    let parts: Vec<Generated> = graphs.par_iter().map(|g| generate_pairs(g, registry, config)).collect();
    let mut out = Generated::default();
    for p in parts {
        out.pairs.extend(p.pairs);
        out.skipped.extend(p.skipped);
    }
    out
}

/// Drops repeated (question, answer, scene) triples, keeping the first.
pub fn dedup_pairs(pairs: Vec<QaPair>) -> Vec<QaPair> {
    let mut seen = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| {
            seen.insert((
                p.question.clone(),
                p.answer.value.clone(),
                p.city.clone(),
                p.scene_id.clone(),
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub answer: String,
    pub count: usize,
}

/// Normalized answers with frequencies, most frequent first, ties lexicographic.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpace {
    pub entries: Vec<AnswerEntry>,
}

impl AnswerSpace {
    pub fn build(pairs: &[QaPair]) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for p in pairs {
            *counts.entry(normalize_answer(&p.answer.value)).or_insert(0) += 1;
        }
        let mut entries: Vec<AnswerEntry> = counts
            .into_iter()
            .map(|(answer, count)| AnswerEntry { answer, count })
            .collect();
        entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.answer.cmp(&b.answer)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_answer_space(pairs: &[QaPair]) -> AnswerSpace {
    AnswerSpace::build(pairs)
}

/// Writes one JSON object per line.
pub fn write_dataset<W: Write>(pairs: &[QaPair], mut sink: W) -> Result<(), DatasetError> {
    for p in pairs {
        serde_json::to_writer(&mut sink, p).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(source: R) -> Result<Vec<QaPair>, DatasetError> {
    let mut out = Vec::new();
    for (k, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: QaPair = serde_json::from_str(&line).map_err(|e| DatasetError::Format {
            line: k + 1,
            message: e.to_string(),
        })?;
        if p.answer.value.is_empty() {
            return Err(DatasetError::Format {
                line: k + 1,
                message: "empty answer".into(),
            });
        }
        out.push(p);
    }
    Ok(out)
}

/// Re-answers each pair's provenance and returns the qids whose stored answer differs.
pub fn verify_gold(
    pairs: &[QaPair],
    graphs: &HashMap<(String, String), SceneGraph>,
    registry: &[QuestionTemplate],
) -> Vec<String> {
    pairs
        .iter()
        .filter(|p| {
            let Some(g) = graphs.get(&(p.city.clone(), p.scene_id.clone())) else { return true };
            let Some(t) = find_template(registry, &p.provenance.template_id) else { return true };
            let params = OracleParams {
                near_radius: p.provenance.oracle_params.near_radius,
                tie_tolerance: p.provenance.oracle_params.tie_tolerance,
            };
            Oracle::new(g, params).answer(t, &p.provenance.binding).ok().as_ref() != Some(&p.answer)
        })
        .map(|p| p.qid.clone())
        .collect()
}

/// Distribution summary of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub by_category: BTreeMap<Category, usize>,
    pub by_hops: BTreeMap<Hops, usize>,
    pub category_fraction: BTreeMap<Category, f64>,
    pub hops_fraction: BTreeMap<Hops, f64>,
    /// Question length in words → number of questions.
    pub length_histogram: BTreeMap<usize, usize>,
    pub cities: BTreeMap<String, usize>,
    pub paraphrased: usize,
}

pub fn dataset_stats(pairs: &[QaPair]) -> DatasetStats {
    let mut s = DatasetStats {
        total: pairs.len(),
        ..Default::default()
    };
    for p in pairs {
        *s.by_category.entry(p.category).or_insert(0) += 1;
        *s.by_hops.entry(p.hops).or_insert(0) += 1;
        *s.length_histogram.entry(p.question.split_whitespace().count()).or_insert(0) += 1;
        *s.cities.entry(p.city.clone()).or_insert(0) += 1;
        s.paraphrased += p.paraphrased as usize;
    }
    let n = pairs.len().max(1) as f64;
    s.category_fraction = s.by_category.iter().map(|(&k, &v)| (k, v as f64 / n)).collect();
    s.hops_fraction = s.by_hops.iter().map(|(&k, &v)| (k, v as f64 / n)).collect();
    s
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scene::{Aabb, Instance, SemanticAttribute, SemanticTriple, Vec3};
    use crate::templates::{load_registry, AnswerKind, SlotKind, SlotValue};

    pub(crate) fn pair(qid: &str, answer: &str, category: Category) -> QaPair {
        let mut binding = Binding::default();
        binding.values.insert(SlotKind::InstanceLabel, SlotValue::Text(qid.to_string()));
        QaPair {
            qid: qid.to_string(),
            city: "Wuhu".into(),
            scene_id: "s".into(),
            category,
            hops: category.hops(),
            question: format!("question {qid}?"),
            answer: Answer {
                kind: AnswerKind::YesNo,
                value: answer.to_string(),
            },
            provenance: Provenance {
                template_id: "II-01".into(),
                binding,
                oracle_params: OracleParams::default().into(),
                proxy: None,
            },
            paraphrased: false,
        }
    }

    fn one_boat() -> SceneGraph {
        let c = Vec3::new(1.0, 2.0, 0.0);
        SceneGraph {
            city: "Qingdao".into(),
            scene_id: "b1".into(),
            instances: vec![Instance {
                id: 0,
                class_label: "boat".into(),
                category_label: "boat".into(),
                centroid: c,
                aabb: Aabb::point(c),
                point_count: 4,
            }],
            spatial_edges: vec![],
            semantic_triples: vec![
                SemanticTriple { subject: 0, attribute: SemanticAttribute::InstanceLabel, value: "boat".into() },
                SemanticTriple { subject: 0, attribute: SemanticAttribute::BuildingCategoryLabel, value: "boat".into() },
                SemanticTriple { subject: 0, attribute: SemanticAttribute::Location, value: "northeast area".into() },
            ],
        }
    }

    #[test]
    fn fnv_reference_vectors() {
        let h = |s: &str| {
            let mut f = Fnv1a::new();
            f.write(s.as_bytes());
            f.finish()
        };
        assert_eq!(h(""), 0xcbf29ce484222325);
        assert_eq!(h("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(h("foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_graph_generates_nothing() {
        let g = generate_pairs(&SceneGraph::default(), &load_registry(), &GenerationConfig::default());
        assert!(g.pairs.is_empty());
    }

    #[test]
    fn single_boat_count_question() {
        let g = generate_pairs(&one_boat(), &load_registry(), &GenerationConfig::default());
        assert!(g
            .pairs
            .iter()
            .any(|p| p.question == "How many boat are in this scene?" && p.answer.value == "1"));
        let mut buf = Vec::new();
        write_dataset(&g.pairs, &mut buf).unwrap();
        let again = generate_pairs(&one_boat(), &load_registry(), &GenerationConfig::default());
        let mut buf2 = Vec::new();
        write_dataset(&again.pairs, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn dedup_examples() {
        let a = pair("q1", "yes", Category::Relationship);
        let mut b = a.clone();
        b.qid = "other".into();
        let c = pair("q2", "no", Category::Relationship);
        let out = dedup_pairs(vec![a.clone(), b, c.clone()]);
        assert_eq!(out, vec![a.clone(), c.clone()]);
        assert_eq!(dedup_pairs(vec![a.clone(), c.clone()]).len(), 2);
    }

    #[test]
    fn answer_space_examples() {
        let ps = vec![
            pair("a", "yes", Category::Relationship),
            pair("b", "no", Category::Relationship),
            pair("c", "Yes", Category::Relationship),
        ];
        let s = build_answer_space(&ps);
        assert_eq!(
            s.entries,
            vec![
                AnswerEntry { answer: "yes".into(), count: 2 },
                AnswerEntry { answer: "no".into(), count: 1 }
            ]
        );
        assert!(build_answer_space(&[]).is_empty());
    }

    #[test]
    fn dataset_file_round_trip_and_errors() {
        let mut buf = Vec::new();
        write_dataset(&[], &mut buf).unwrap();
        assert!(read_dataset(buf.as_slice()).unwrap().is_empty());
        let ps: Vec<_> = (0..1000).map(|i| pair(&format!("q{i}"), &format!("a{}", i % 7), Category::ALL[i % 5])).collect();
        let mut buf = Vec::new();
        write_dataset(&ps, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ps);
        let mut buf2 = Vec::new();
        write_dataset(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        let bad = format!("{}\n{{\"qid\":1}}\n", String::from_utf8(buf[..buf.iter().position(|&b| b == b'\n').unwrap()].to_vec()).unwrap());
        assert!(read_dataset(bad.as_bytes()).unwrap_err().to_string().starts_with("line 2"));
    }

    #[test]
    fn stats_summarize_mix() {
        let ps = vec![
            pair("a", "yes", Category::Relationship),
            pair("b", "no", Category::SpatialComparison),
            pair("c", "no", Category::UsageComparison),
            pair("d", "no", Category::UsageInquiry),
        ];
        let s = dataset_stats(&ps);
        assert_eq!(s.total, 4);
        assert_eq!(s.hops_fraction[&Hops::Single], 0.5);
        assert_eq!(s.by_category[&Category::Relationship], 1);
        assert_eq!(s.length_histogram[&2], 4);
    }

    proptest::proptest! {
        #[test]
        fn dedup_size_equals_unique_keys(keys in proptest::collection::vec((0u8..6, 0u8..3), 0..60)) {
            let ps: Vec<QaPair> = keys
                .iter()
                .map(|(q, a)| {
                    let mut p = pair(&q.to_string(), &a.to_string(), Category::Relationship);
                    p.question = format!("q{q}?");
                    p
                })
                .collect();
            let unique: HashSet<_> = keys.iter().collect();
            proptest::prop_assert_eq!(dedup_pairs(ps.clone()).len(), unique.len());
            let space = build_answer_space(&ps);
            proptest::prop_assert_eq!(space.entries.iter().map(|e| e.count).sum::<usize>(), ps.len());
        }
    }
}
