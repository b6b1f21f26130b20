//! Question template registry, slot binding and instantiation.
//!
//! The built-in registry holds 31 distinct templates in five categories.
//! Ids follow the printed row order of the source table; the relationship
//! row that repeats verbatim (`RQ-05`) is folded into `RQ-01`, so that id
//! is intentionally absent.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Read;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{GraphIndex, InstanceId, SceneGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("unbound slot: {0}")]
    UnboundSlot(SlotKind),
    #[error("slot {0} expects an instance reference")]
    ExpectedInstance(SlotKind),
    #[error("template {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("template file: {0}")]
    File(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    InstanceLabel,
    #[serde(rename = "instance_label_1")]
    InstanceLabel1,
    #[serde(rename = "instance_label_2")]
    InstanceLabel2,
    Usage,
    Location,
    TypeOfInstance,
}

impl SlotKind {
    pub const ALL: [SlotKind; 6] = [
        SlotKind::InstanceLabel,
        SlotKind::InstanceLabel1,
        SlotKind::InstanceLabel2,
        SlotKind::Usage,
        SlotKind::Location,
        SlotKind::TypeOfInstance,
    ];

    /// Bracketed token as it appears in patterns.
    pub fn token(self) -> &'static str {
        match self {
            SlotKind::InstanceLabel => "[instance label]",
            SlotKind::InstanceLabel1 => "[instance label 1]",
            SlotKind::InstanceLabel2 => "[instance label 2]",
            SlotKind::Usage => "[usage]",
            SlotKind::Location => "[location]",
            SlotKind::TypeOfInstance => "[type of instance]",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::InstanceLabel => "instance_label",
            SlotKind::InstanceLabel1 => "instance_label_1",
            SlotKind::InstanceLabel2 => "instance_label_2",
            SlotKind::Usage => "usage",
            SlotKind::Location => "location",
            SlotKind::TypeOfInstance => "type_of_instance",
        }
    }

    pub fn from_name(s: &str) -> Option<SlotKind> {
        SlotKind::ALL.into_iter().find(|k| k.name() == s)
    }

    fn from_token(tok: &str) -> Option<SlotKind> {
        SlotKind::ALL.into_iter().find(|k| k.token() == tok)
    }
}

impl fmt::Display for SlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // "instance_label" reads as "instance label" in errors
        f.write_str(match self {
            SlotKind::InstanceLabel => "instance label",
            SlotKind::InstanceLabel1 => "instance label 1",
            SlotKind::InstanceLabel2 => "instance label 2",
            SlotKind::Usage => "usage",
            SlotKind::Location => "location",
            SlotKind::TypeOfInstance => "type of instance",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    InstanceIdentification,
    UsageInquiry,
    Relationship,
    SpatialComparison,
    UsageComparison,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::InstanceIdentification,
        Category::UsageInquiry,
        Category::Relationship,
        Category::SpatialComparison,
        Category::UsageComparison,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::InstanceIdentification => "instance_identification",
            Category::UsageInquiry => "usage_inquiry",
            Category::Relationship => "relationship",
            Category::SpatialComparison => "spatial_comparison",
            Category::UsageComparison => "usage_comparison",
        }
    }

    pub fn hops(self) -> Hops {
        match self {
            Category::SpatialComparison | Category::UsageComparison => Hops::Multi,
            _ => Hops::Single,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hops {
    Single,
    Multi,
}

impl Hops {
    pub fn as_str(self) -> &'static str {
        match self {
            Hops::Single => "single",
            Hops::Multi => "multi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    YesNo,
    Count,
    UsageValue,
    LocationValue,
    DirectionValue,
    InstanceChoice,
    UsageDiff,
}

/// Which symbolic computation answers a template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Query {
    /// Any instance matching the label/usage/location filter?
    Exists,
    /// Number of instances matching the filter.
    Count,
    /// Usages of the referenced instance.
    UsageOf,
    /// Location of the referenced instance.
    LocationOf,
    /// Locations of the instances carrying a usage.
    LocationOfUsage,
    /// Does the referenced instance carry the usage?
    HasUsage,
    /// Which of two instances is closer to the reference instance?
    Nearest,
    /// Is instance 1 farther than instance 2 from the reference instance?
    Farther,
    /// Straight-line proxy for travel time; otherwise identical to `Nearest`.
    Quicker,
    /// Which of two instances lies in the location?
    InLocation,
    /// Sector of instance 1 as seen from instance 2.
    Direction,
    /// Which of two instances has more instances of a class nearby?
    Density,
    /// Which of two instances carries the usage?
    UsageSelection,
    /// Usage selection, breaking a both-carry tie by distance to a reference when one exists.
    UsageEfficiency,
    /// Usages present on one side only.
    UsageDifference,
}

impl Query {
    pub fn answer_kind(self) -> AnswerKind {
        use Query::*;
        match self {
            Exists | HasUsage | Farther => AnswerKind::YesNo,
            Count => AnswerKind::Count,
            UsageOf => AnswerKind::UsageValue,
            LocationOf | LocationOfUsage => AnswerKind::LocationValue,
            Direction => AnswerKind::DirectionValue,
            Nearest | Quicker | InLocation | Density | UsageSelection | UsageEfficiency => {
                AnswerKind::InstanceChoice
            }
            UsageDifference => AnswerKind::UsageDiff,
        }
    }

    /// Whether `[instance label]` names one specific instance (otherwise it names a kind).
    pub fn label_is_reference(self) -> bool {
        !matches!(self, Query::Exists | Query::Count)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: String,
    pub category: Category,
    pub hops: Hops,
    pub pattern: String,
    pub slots: Vec<SlotKind>,
    pub answer_kind: AnswerKind,
    pub query: Query,
}

impl QuestionTemplate {
    /// Checks slot/pattern agreement and the category → hop rule.
    pub fn validate(&self) -> Result<(), TemplateError> {
        let invalid = |m: String| TemplateError::Invalid {
            id: self.id.clone(),
            message: m,
        };
        let found = pattern_slots(&self.pattern).map_err(invalid)?;
        if found != self.slots {
            return Err(invalid(format!("pattern slots {found:?} differ from {:?}", self.slots)));
        }
        if self.category.hops() != self.hops {
            return Err(invalid(format!("category {:?} requires {:?} hops", self.category, self.category.hops())));
        }
        if self.query.answer_kind() != self.answer_kind {
            return Err(invalid(format!("query {:?} answers {:?}", self.query, self.query.answer_kind())));
        }
        let need: &[SlotKind] = match self.query {
            Query::Exists | Query::Count => &[],
            Query::UsageOf | Query::LocationOf => &[SlotKind::InstanceLabel],
            Query::LocationOfUsage => &[SlotKind::Usage],
            Query::HasUsage => &[SlotKind::InstanceLabel, SlotKind::Usage],
            Query::Nearest | Query::Farther | Query::Quicker => {
                &[SlotKind::InstanceLabel, SlotKind::InstanceLabel1, SlotKind::InstanceLabel2]
            }
            Query::InLocation => &[SlotKind::Location, SlotKind::InstanceLabel1, SlotKind::InstanceLabel2],
            Query::Direction | Query::UsageDifference => &[SlotKind::InstanceLabel1, SlotKind::InstanceLabel2],
            Query::Density => &[SlotKind::TypeOfInstance, SlotKind::InstanceLabel1, SlotKind::InstanceLabel2],
            Query::UsageSelection | Query::UsageEfficiency => {
                &[SlotKind::Usage, SlotKind::InstanceLabel1, SlotKind::InstanceLabel2]
            }
        };
        if let Some(m) = need.iter().find(|k| !self.slots.contains(k)) {
            return Err(invalid(format!("query {:?} needs slot {m}", self.query)));
        }
        if matches!(self.query, Query::Exists | Query::Count)
            && !self.slots.iter().any(|s| matches!(s, SlotKind::InstanceLabel | SlotKind::Usage | SlotKind::Location))
        {
            return Err(invalid("filter queries need at least one filter slot".into()));
        }
        Ok(())
    }
}

pub fn hops_of(t: &QuestionTemplate) -> Hops {
    t.hops
}

/// Extracts bracketed slot tokens from a pattern in order of appearance.
pub fn pattern_slots(pattern: &str) -> Result<Vec<SlotKind>, String> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(start) = rest.find('[') {
        let end = rest[start..]
            .find(']')
            .ok_or_else(|| format!("unclosed bracket in {pattern:?}"))?;
        let tok = &rest[start..start + end + 1];
        out.push(SlotKind::from_token(tok).ok_or_else(|| format!("unknown slot {tok:?}"))?);
        rest = &rest[start + end + 1..];
    }
    if rest.contains(']') {
        return Err(format!("stray bracket in {pattern:?}"));
    }
    Ok(out)
}

fn tpl(id: &str, category: Category, query: Query, pattern: &str) -> QuestionTemplate {
    QuestionTemplate {
        id: id.to_string(),
        category,
        hops: category.hops(),
        pattern: pattern.to_string(),
        slots: pattern_slots(pattern).expect("built-in pattern"),
        answer_kind: query.answer_kind(),
        query,
    }
}

/// The built-in template registry, in id order.
pub fn load_registry() -> Vec<QuestionTemplate> {
    use Category::*;
    use Query::*;
    vec![
        tpl("II-01", InstanceIdentification, Exists, "Is there any [instance label]?"),
        tpl("II-02", InstanceIdentification, Count, "How many [instance label] are in this scene?"),
        tpl("II-03", InstanceIdentification, Count, "What is the number of [instance label]?"),
        tpl("II-04", InstanceIdentification, Exists, "Do [instance label] exist in this area?"),
        tpl("UI-01", UsageInquiry, UsageOf, "What is usage of [instance label]?"),
        tpl("UI-02", UsageInquiry, Exists, "Is there any [instance label] which can [usage]?"),
        tpl("UI-03", UsageInquiry, Count, "How many [instance label] which can [usage] are in this area?"),
        tpl("UI-04", UsageInquiry, Count, "What is the number of [usage]?"),
        tpl("UI-05", UsageInquiry, Exists, "Do [usage] exist in this area?"),
        tpl("UI-06", UsageInquiry, HasUsage, "I need [usage], should I choose to go [instance label] ?"),
        tpl("RQ-01", Relationship, Exists, "Is there any [instance label] in the [location]?"),
        tpl("RQ-02", Relationship, LocationOf, "Where is the location of [instance label]?"),
        tpl("RQ-03", Relationship, LocationOfUsage, "What is the location of [usage]?"),
        tpl("RQ-04", Relationship, Exists, "Is there any [usage] in the [location]?"),
        tpl("RQ-06", Relationship, Exists, "Do [usage] exist in the [location]?"),
        tpl("RQ-07", Relationship, Exists, "Do [instance label] exist in the [location]?"),
        tpl("RQ-08", Relationship, Count, "How many [usage] in the [location]?"),
        tpl("RQ-09", Relationship, Count, "What's the number of [usage] in the [location]?"),
        tpl("RQ-10", Relationship, Count, "What's the number of [instance label] in the [location]?"),
        tpl("SC-01", SpatialComparison, Nearest, "Which is closer to [instance label], [instance label 1] or [instance label 2]?"),
        tpl("SC-02", SpatialComparison, InLocation, "Which is in the [location], [instance label 1] or [instance label 2]?"),
        tpl("SC-03", SpatialComparison, Farther, "Is [instance label 1] farther than [instance label 2] from [instance label]?"),
        tpl("SC-04", SpatialComparison, Nearest, "Between [instance label 1] and [instance label 2], which is nearest to [instance label]?"),
        tpl("SC-05", SpatialComparison, Direction, "In which direction is [instance label 1] relative to [instance label 2]?"),
        tpl("SC-06", SpatialComparison, Density, "Are there more [type of instance] near [instance label 1] or [instance label 2]?"),
        tpl("SC-07", SpatialComparison, Quicker, "I am at [instance label], is it quicker to reach [instance label 1] or [instance label 2]?"),
        tpl("UC-01", UsageComparison, UsageDifference, "How is [instance label 1] different from [instance label 2] in terms of usage?"),
        tpl("UC-02", UsageComparison, UsageEfficiency, "Which is more efficient for [usage], [instance label 1] or [instance label 2] ?"),
        tpl("UC-03", UsageComparison, UsageSelection, "I want [usage], which I should go, [instance label 1] or [instance label 2] ?"),
        tpl("UC-04", UsageComparison, UsageSelection, "I need [usage], which I should choose to go, [instance label 1] or [instance label 2] ?"),
        tpl("UC-05", UsageComparison, UsageSelection, "I need [usage], should I choose to go [instance label 1] or [instance label 2] ?"),
    ]
}

/// Number of template rows in the source table, counting the repeated row twice.
pub const PRINTED_TEMPLATE_ROWS: usize = 32;
/// Template count claimed in the source text.
pub const CLAIMED_TEMPLATE_COUNT: usize = 33;

/// Loads user templates and merges them behind the built-ins.
///
/// User entries whose id collides with a built-in are rejected: built-ins are canonical.
pub fn merge_user_templates<R: Read>(
    registry: &mut Vec<QuestionTemplate>,
    source: R,
) -> Result<usize, TemplateError> {
    let user: Vec<QuestionTemplate> =
        serde_json::from_reader(source).map_err(|e| TemplateError::File(e.to_string()))?;
    let mut ids: HashSet<String> = registry.iter().map(|t| t.id.clone()).collect();
    for t in &user {
        t.validate()?;
        if !ids.insert(t.id.clone()) {
            return Err(TemplateError::Invalid {
                id: t.id.clone(),
                message: "duplicate template id".into(),
            });
        }
    }
    let n = user.len();
    registry.extend(user);
    Ok(n)
}

pub fn find_template<'a>(registry: &'a [QuestionTemplate], id: &str) -> Option<&'a QuestionTemplate> {
    registry.iter().find(|t| t.id == id)
}

/// A reference to one instance by label, optionally qualified by location.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceRef {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    /// Instance the reference resolved to when it was bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<InstanceId>,
}

impl InstanceRef {
    pub fn surface(&self) -> String {
        match &self.location {
            Some(l) => format!("the {} in the {}", self.label, l),
            None => format!("the {}", self.label),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotValue {
    Text(String),
    Instance(InstanceRef),
}

impl SlotValue {
    pub fn surface(&self) -> String {
        match self {
            SlotValue::Text(s) => s.clone(),
            SlotValue::Instance(r) => r.surface(),
        }
    }

    pub fn as_text(&self) -> &str {
        match self {
            SlotValue::Text(s) => s,
            SlotValue::Instance(r) => &r.label,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Binding {
    pub values: BTreeMap<SlotKind, SlotValue>,
}

impl Binding {
    pub fn get(&self, k: SlotKind) -> Result<&SlotValue, TemplateError> {
        self.values.get(&k).ok_or(TemplateError::UnboundSlot(k))
    }

    pub fn text(&self, k: SlotKind) -> Result<&str, TemplateError> {
        Ok(self.get(k)?.as_text())
    }

    pub fn instance(&self, k: SlotKind) -> Result<&InstanceRef, TemplateError> {
        match self.get(k)? {
            SlotValue::Instance(r) => Ok(r),
            SlotValue::Text(_) => Err(TemplateError::ExpectedInstance(k)),
        }
    }

    /// Instance ids recorded at binding time, in slot order.
    pub fn resolved_ids(&self) -> Vec<InstanceId> {
        self.values
            .values()
            .filter_map(|v| match v {
                SlotValue::Instance(r) => r.id,
                SlotValue::Text(_) => None,
            })
            .collect()
    }

    /// Canonical JSON encoding used for content hashing.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("binding serializes")
    }
}

/// Fills every slot of `t` from `b`; whitespace is collapsed to single spaces.
pub fn instantiate(t: &QuestionTemplate, b: &Binding) -> Result<String, TemplateError> {
    let mut out = t.pattern.clone();
    for &k in &t.slots {
        let v = b.get(k)?;
        out = out.replacen(k.token(), &v.surface(), 1);
    }
    let mut q = out.split_whitespace().collect::<Vec<_>>().join(" ");
    if !q.ends_with('?') {
        q.push('?');
    }
    Ok(q)
}

#[derive(Clone, Debug)]
pub struct BindingOptions {
    /// Chance that a bound label is swapped for one of its synonyms.
    pub synonym_probability: f64,
    /// Above this many slot combinations, sample by rejection instead of enumerating.
    pub enumeration_cap: u64,
}

impl Default for BindingOptions {
    fn default() -> Self {
        Self {
            synonym_probability: 0.3,
            enumeration_cap: 200_000,
        }
    }
}

/// Canonical reference for an instance: its category label, qualified by
/// location when the bare label is ambiguous. `None` if still ambiguous.
pub fn reference_for(index: &GraphIndex<'_>, id: InstanceId) -> Option<InstanceRef> {
    let f = index.facts(id)?;
    reference_with_label(index, id, &f.category_label)
}

fn reference_with_label(index: &GraphIndex<'_>, id: InstanceId, label: &str) -> Option<InstanceRef> {
    if index.matching(label, None) == [id] {
        return Some(InstanceRef {
            label: label.to_string(),
            location: None,
            id: Some(id),
        });
    }
    let loc = &index.facts(id)?.location;
    if index.matching(label, Some(loc)) == [id] {
        return Some(InstanceRef {
            label: label.to_string(),
            location: Some(loc.clone()),
            id: Some(id),
        });
    }
    None
}

#[derive(Clone, Debug)]
enum Candidate {
    Text(String),
    Instance(InstanceRef),
}

impl Candidate {
    fn id(&self) -> Option<InstanceId> {
        match self {
            Candidate::Instance(r) => r.id,
            Candidate::Text(_) => None,
        }
    }
}

fn candidates_for(t: &QuestionTemplate, slot: SlotKind, index: &GraphIndex<'_>) -> Vec<Candidate> {
    let referenceable = || -> Vec<Candidate> {
        index
            .instances()
            .filter_map(|i| reference_for(index, i.id))
            .map(Candidate::Instance)
            .collect()
    };
    match slot {
        SlotKind::InstanceLabel if !t.query.label_is_reference() => {
            index.kind_labels().into_iter().map(Candidate::Text).collect()
        }
        SlotKind::InstanceLabel if t.query == Query::UsageOf => referenceable()
            .into_iter()
            .filter(|c| c.id().and_then(|id| index.facts(id)).is_some_and(|f| !f.usages.is_empty()))
            .collect(),
        SlotKind::InstanceLabel | SlotKind::InstanceLabel1 | SlotKind::InstanceLabel2 => referenceable(),
        SlotKind::Usage => index.usages().into_iter().map(Candidate::Text).collect(),
        SlotKind::Location => index.locations().into_iter().map(Candidate::Text).collect(),
        SlotKind::TypeOfInstance => index.class_labels().into_iter().map(Candidate::Text).collect(),
    }
}

fn combination_is_answerable(t: &QuestionTemplate, combo: &[&Candidate], index: &GraphIndex<'_>) -> bool {
    let ids: Vec<InstanceId> = combo.iter().filter_map(|c| c.id()).collect();
    let distinct: BTreeSet<_> = ids.iter().collect();
    if distinct.len() != ids.len() {
        return false;
    }
    if t.query == Query::Direction {
        let pos = |k: SlotKind| t.slots.iter().position(|&s| s == k).and_then(|p| combo[p].id());
        let (Some(a), Some(b)) = (pos(SlotKind::InstanceLabel1), pos(SlotKind::InstanceLabel2)) else {
            return false;
        };
        return index.edge(b, a).is_some();
    }
    true
}

fn template_seed(seed: u64, id: &str) -> u64 {
    let mut h = crate::dataset::Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(id.as_bytes());
    h.finish()
}

/// Deterministic, seeded sample of up to `limit` answerable bindings.
pub fn enumerate_bindings(t: &QuestionTemplate, g: &SceneGraph, seed: u64, limit: usize) -> Vec<Binding> {
    enumerate_bindings_with(t, &GraphIndex::new(g), seed, limit, &BindingOptions::default())
}

pub fn enumerate_bindings_with(
    t: &QuestionTemplate,
    index: &GraphIndex<'_>,
    seed: u64,
    limit: usize,
    opts: &BindingOptions,
) -> Vec<Binding> {
    if limit == 0 || index.graph.instances.is_empty() {
        return Vec::new();
    }
    let cands: Vec<Vec<Candidate>> = t.slots.iter().map(|&s| candidates_for(t, s, index)).collect();
    if cands.iter().any(|c| c.is_empty()) {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(template_seed(seed, &t.id));
    let total: u64 = cands
        .iter()
        .try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64))
        .unwrap_or(u64::MAX);
    let decode = |mut idx: u64| -> Vec<&Candidate> {
        let mut out = vec![None; cands.len()];
        for (k, c) in cands.iter().enumerate().rev() {
            let n = c.len() as u64;
            out[k] = Some(&c[(idx % n) as usize]);
            idx /= n;
        }
        out.into_iter().map(Option::unwrap).collect()
    };

    let mut chosen: Vec<u64> = if total <= opts.enumeration_cap {
        let valid: Vec<u64> = (0..total)
            .filter(|&i| combination_is_answerable(t, &decode(i), index))
            .collect();
        let k = limit.min(valid.len());
        index::sample(&mut rng, valid.len(), k).into_iter().map(|i| valid[i]).collect()
    } else {
        let mut picked = BTreeSet::new();
        let mut attempts = 0usize;
        while picked.len() < limit && attempts < limit.saturating_mul(64) {
            attempts += 1;
            let i = rng.gen_range(0..total);
            if !picked.contains(&i) && combination_is_answerable(t, &decode(i), index) {
                picked.insert(i);
            }
        }
        picked.into_iter().collect()
    };
    chosen.sort_unstable();

    chosen
        .into_iter()
        .map(|i| {
            let combo = decode(i);
            let mut values = BTreeMap::new();
            for (&slot, cand) in t.slots.iter().zip(combo) {
                let v = match cand {
                    Candidate::Text(s) => {
                        let mut s = s.clone();
                        if slot == SlotKind::InstanceLabel && rng.gen_bool(opts.synonym_probability) {
                            let syn = index.synonyms_of_label(&s);
                            if !syn.is_empty() {
                                s = syn[rng.gen_range(0..syn.len())].clone();
                            }
                        }
                        SlotValue::Text(s)
                    }
                    Candidate::Instance(r) => {
                        let mut r = r.clone();
                        if rng.gen_bool(opts.synonym_probability) {
                            r = synonym_reference(index, &r, &mut rng).unwrap_or(r);
                        }
                        SlotValue::Instance(r)
                    }
                };
                values.insert(slot, v);
            }
            Binding { values }
        })
        .collect()
}

/// Re-labels a reference with one of the instance's synonyms if it still resolves uniquely.
fn synonym_reference(index: &GraphIndex<'_>, r: &InstanceRef, rng: &mut ChaCha8Rng) -> Option<InstanceRef> {
    let id = r.id?;
    let syn = &index.facts(id)?.synonyms;
    if syn.is_empty() {
        return None;
    }
    let pick = &syn[rng.gen_range(0..syn.len())];
    reference_with_label(index, id, pick)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Aabb, Instance, SemanticAttribute, SemanticTriple, Vec3};

    fn boat_graph(n: u32) -> SceneGraph {
        let mut g = SceneGraph {
            city: "Qingdao".into(),
            scene_id: "s0".into(),
            ..Default::default()
        };
        for id in 0..n {
            let c = Vec3::new(id as f64 * 10.0, 0.0, 0.0);
            g.instances.push(Instance {
                id,
                class_label: "boat".into(),
                category_label: "boat".into(),
                centroid: c,
                aabb: Aabb::point(c),
                point_count: 1,
            });
            for (attribute, value) in [
                (SemanticAttribute::InstanceLabel, "boat"),
                (SemanticAttribute::BuildingCategoryLabel, "boat"),
                (SemanticAttribute::Location, if id % 2 == 0 { "harbor" } else { "river" }),
            ] {
                g.semantic_triples.push(SemanticTriple {
                    subject: id,
                    attribute,
                    value: value.into(),
                });
            }
        }
        g
    }

    #[test]
    fn registry_shape() {
        let reg = load_registry();
        assert_eq!(reg.len(), 31);
        let ids: HashSet<_> = reg.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids.len(), reg.len());
        for t in &reg {
            t.validate().unwrap();
        }
        let count = |c: Category| reg.iter().filter(|t| t.category == c).count();
        assert_eq!(count(Category::InstanceIdentification), 4);
        assert_eq!(count(Category::UsageInquiry), 6);
        assert_eq!(count(Category::Relationship), 9);
        assert_eq!(count(Category::SpatialComparison), 7);
        assert_eq!(count(Category::UsageComparison), 5);
        assert_eq!(reg.len() + 1, PRINTED_TEMPLATE_ROWS);
    }

    #[test]
    fn registry_examples() {
        let reg = load_registry();
        let usage = reg.iter().find(|t| t.pattern == "What is usage of [instance label]?").unwrap();
        assert_eq!((usage.category, usage.hops), (Category::UsageInquiry, Hops::Single));
        let nearest = reg
            .iter()
            .find(|t| t.pattern == "Between [instance label 1] and [instance label 2], which is nearest to [instance label]?")
            .unwrap();
        assert_eq!(hops_of(nearest), Hops::Multi);
        for t in &reg {
            let multi = matches!(t.category, Category::SpatialComparison | Category::UsageComparison);
            assert_eq!(t.hops == Hops::Multi, multi, "{}", t.id);
        }
        assert_eq!(hops_of(find_template(&reg, "II-01").unwrap()), Hops::Single);
        assert_eq!(hops_of(find_template(&reg, "SC-01").unwrap()), Hops::Multi);
    }

    #[test]
    fn invalid_templates_are_rejected() {
        let mut t = load_registry().remove(0);
        t.slots.push(SlotKind::Usage);
        assert!(t.validate().is_err());
        let mut t = load_registry().remove(0);
        t.hops = Hops::Multi;
        assert!(t.validate().is_err());
        assert!(pattern_slots("How [is this").is_err());
        assert!(pattern_slots("What [colour]?").is_err());
    }

    #[test]
    fn instantiates_patterns() {
        let reg = load_registry();
        let t = find_template(&reg, "II-02").unwrap();
        let mut b = Binding::default();
        b.values.insert(SlotKind::InstanceLabel, SlotValue::Text("boat".into()));
        assert_eq!(instantiate(t, &b).unwrap(), "How many boat are in this scene?");

        let t = find_template(&reg, "UC-03").unwrap();
        let mut b = Binding::default();
        b.values.insert(SlotKind::Usage, SlotValue::Text("buying tickets".into()));
        for (k, l) in [(SlotKind::InstanceLabel1, "station"), (SlotKind::InstanceLabel2, "bank")] {
            b.values.insert(k, SlotValue::Instance(InstanceRef { label: l.into(), location: None, id: None }));
        }
        assert_eq!(
            instantiate(t, &b).unwrap(),
            "I want buying tickets, which I should go, the station or the bank ?"
        );

        let t = find_template(&reg, "RQ-01").unwrap();
        let mut b = Binding::default();
        b.values.insert(SlotKind::InstanceLabel, SlotValue::Text("boat".into()));
        let e = instantiate(t, &b).unwrap_err();
        assert_eq!(e.to_string(), "unbound slot: location");
    }

    #[test]
    fn enumeration_on_empty_graph() {
        let g = SceneGraph::default();
        for t in load_registry() {
            assert!(enumerate_bindings(&t, &g, 0, 20).is_empty());
        }
    }

    #[test]
    fn single_boat_binds_label() {
        let g = boat_graph(1);
        let reg = load_registry();
        let t = find_template(&reg, "II-02").unwrap();
        let b = enumerate_bindings(t, &g, 0, 20);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].text(SlotKind::InstanceLabel).unwrap(), "boat");
    }

    #[test]
    fn references_disambiguate_by_location() {
        let g = boat_graph(3);
        let idx = GraphIndex::new(&g);
        let r1 = reference_for(&idx, 1).unwrap();
        assert_eq!(r1.surface(), "the boat in the river");
        // two boats in the harbor: not referenceable
        assert!(reference_for(&idx, 0).is_none());
        assert!(reference_for(&idx, 2).is_none());
    }

    #[test]
    fn enumeration_is_deterministic_and_distinct() {
        let g = boat_graph(6);
        for t in load_registry() {
            let a = enumerate_bindings(&t, &g, 42, 5);
            let b = enumerate_bindings(&t, &g, 42, 5);
            assert_eq!(a, b);
            let set: HashSet<_> = a.iter().collect();
            assert_eq!(set.len(), a.len());
            for b in &a {
                let q = instantiate(&t, b).unwrap();
                for v in b.values.values() {
                    assert!(q.contains(&v.surface()));
                }
                assert!(!q.contains('[') && q.ends_with('?') && !q.contains("  "));
            }
        }
    }

    #[test]
    fn user_templates_merge_behind_builtins() {
        let mut reg = load_registry();
        let extra = r#"[{"id":"X-01","category":"instance_identification","hops":"single",
            "pattern":"Are there [instance label] here?","slots":["instance_label"],
            "answer_kind":"yes_no","query":"exists"}]"#;
        assert_eq!(merge_user_templates(&mut reg, extra.as_bytes()).unwrap(), 1);
        assert_eq!(reg.last().unwrap().id, "X-01");
        let dup = extra.replace("X-01", "II-01");
        assert!(merge_user_templates(&mut reg, dup.as_bytes()).is_err());
    }

    #[test]
    fn binding_json_shape() {
        let mut b = Binding::default();
        b.values.insert(SlotKind::Usage, SlotValue::Text("parking".into()));
        b.values.insert(
            SlotKind::InstanceLabel1,
            SlotValue::Instance(InstanceRef { label: "boat".into(), location: Some("river".into()), id: Some(3) }),
        );
        let s = b.canonical();
        assert_eq!(s, r#"{"instance_label_1":{"label":"boat","location":"river","id":3},"usage":"parking"}"#);
        let back: Binding = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert_eq!(b.resolved_ids(), vec![3]);
    }
}
