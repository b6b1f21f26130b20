//! Deterministic symbolic answerer over a scene graph.
//!
//! Every answer is a pure function of the graph, the template and its
//! binding. Distances are between centroids; directions come from the graph's
//! spatial edges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{euclidean_distance, GraphIndex, Instance, InstanceId, SceneGraph};
use crate::templates::{
    find_template, AnswerKind, Binding, InstanceRef, Query, QuestionTemplate, SlotKind, TemplateError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("reference {reference:?} matches no instance")]
    Unresolved { reference: String },
    #[error("reference {reference:?} is ambiguous ({candidates} candidates)")]
    Ambiguous { reference: String, candidates: usize },
    #[error("reference {reference:?} resolves to instance {found}, binding recorded {recorded}")]
    Mismatch {
        reference: String,
        found: InstanceId,
        recorded: InstanceId,
    },
    #[error("both slots refer to instance {0}")]
    SameInstance(InstanceId),
    #[error("instances {0} and {1} have coincident centroids in the xy-plane")]
    DegenerateGeometry(InstanceId, InstanceId),
    #[error("no spatial edge {0} -> {1} in the graph")]
    MissingEdge(InstanceId, InstanceId),
    #[error("no instance carries usage {0:?}")]
    UnknownUsage(String),
    #[error("filter must set at least one of label, usage, location")]
    EmptyFilter,
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Radius in meters for "near" in density questions.
    pub near_radius: f64,
    /// Distances closer than this (meters) compare as equal.
    pub tie_tolerance: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            near_radius: 100.0,
            tie_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Answer {
    pub kind: AnswerKind,
    pub value: String,
}

impl Answer {
    fn new(kind: AnswerKind, value: impl Into<String>) -> Self {
        Self {
            kind,
            value: value.into(),
        }
    }

    fn yes_no(b: bool) -> Self {
        Self::new(AnswerKind::YesNo, if b { "yes" } else { "no" })
    }
}

/// Conjunctive instance filter; unset fields match everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Filter {
    pub label: Option<String>,
    pub usage: Option<String>,
    pub location: Option<String>,
}

impl Filter {
    pub fn label(l: &str) -> Self {
        Self {
            label: Some(l.to_string()),
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    Nearest,
    FartherBool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeQuery {
    Usage,
    Location,
}

pub struct Oracle<'g> {
    index: GraphIndex<'g>,
    params: OracleParams,
}

impl<'g> Oracle<'g> {
    pub fn new(graph: &'g SceneGraph, params: OracleParams) -> Self {
        Self {
            index: GraphIndex::new(graph),
            params,
        }
    }

    pub fn index(&self) -> &GraphIndex<'g> {
        &self.index
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    /// Resolves a reference to exactly one instance.
    pub fn resolve(&self, r: &InstanceRef) -> Result<&'g Instance, OracleError> {
        let ids = self.index.matching(&r.label, r.location.as_deref());
        let reference = r.surface();
        let id = match ids.as_slice() {
            [] => return Err(OracleError::Unresolved { reference }),
            [id] => *id,
            many => {
                return Err(OracleError::Ambiguous {
                    reference,
                    candidates: many.len(),
                })
            }
        };
        if let Some(recorded) = r.id {
            if recorded != id {
                return Err(OracleError::Mismatch {
                    reference,
                    found: id,
                    recorded,
                });
            }
        }
        Ok(self.index.instance(id).expect("indexed id"))
    }

    fn matches(&self, id: InstanceId, f: &Filter) -> bool {
        let Some(facts) = self.index.facts(id) else { return false };
        f.label.as_deref().map_or(true, |l| facts.answers_to(l))
            && f.usage.as_deref().map_or(true, |u| facts.has_usage(u))
            && f.location.as_deref().map_or(true, |l| facts.location == l)
    }

    fn count_matching(&self, f: &Filter) -> Result<usize, OracleError> {
        if f.label.is_none() && f.usage.is_none() && f.location.is_none() {
            return Err(OracleError::EmptyFilter);
        }
        Ok(self.index.instances().filter(|i| self.matches(i.id, f)).count())
    }

    pub fn answer_existence(&self, f: &Filter) -> Result<Answer, OracleError> {
        Ok(Answer::yes_no(self.count_matching(f)? > 0))
    }

    pub fn answer_count(&self, f: &Filter) -> Result<Answer, OracleError> {
        Ok(Answer::new(AnswerKind::Count, self.count_matching(f)?.to_string()))
    }

    pub fn answer_attribute(&self, r: &InstanceRef, attr: AttributeQuery) -> Result<Answer, OracleError> {
        let inst = self.resolve(r)?;
        let facts = self.index.facts(inst.id).expect("indexed id");
        Ok(match attr {
            AttributeQuery::Usage => Answer::new(AnswerKind::UsageValue, join_or_none(&facts.usages)),
            AttributeQuery::Location => Answer::new(AnswerKind::LocationValue, facts.location.clone()),
        })
    }

    /// Distinct locations (sorted) of the instances carrying `usage`.
    pub fn answer_usage_location(&self, usage: &str) -> Result<Answer, OracleError> {
        let mut locs: Vec<String> = self
            .index
            .instances()
            .filter_map(|i| self.index.facts(i.id))
            .filter(|f| f.has_usage(usage))
            .map(|f| f.location.clone())
            .collect();
        if locs.is_empty() {
            return Err(OracleError::UnknownUsage(usage.to_string()));
        }
        locs.sort();
        locs.dedup();
        Ok(Answer::new(AnswerKind::LocationValue, locs.join(", ")))
    }

    pub fn answer_has_usage(&self, r: &InstanceRef, usage: &str) -> Result<Answer, OracleError> {
        let inst = self.resolve(r)?;
        Ok(Answer::yes_no(self.index.facts(inst.id).expect("indexed id").has_usage(usage)))
    }

    /// Sector of `a` as seen from `b`, read off the edge `(b, r, a)`.
    pub fn answer_direction(&self, a: &InstanceRef, b: &InstanceRef) -> Result<Answer, OracleError> {
        let (ia, ib) = self.resolve_pair(a, b)?;
        if ia.centroid.x == ib.centroid.x && ia.centroid.y == ib.centroid.y {
            return Err(OracleError::DegenerateGeometry(ib.id, ia.id));
        }
        let r = self
            .index
            .edge(ib.id, ia.id)
            .ok_or(OracleError::MissingEdge(ib.id, ia.id))?;
        Ok(Answer::new(AnswerKind::DirectionValue, r.as_str()))
    }

    fn resolve_pair(&self, a: &InstanceRef, b: &InstanceRef) -> Result<(&'g Instance, &'g Instance), OracleError> {
        let ia = self.resolve(a)?;
        let ib = self.resolve(b)?;
        if ia.id == ib.id {
            return Err(OracleError::SameInstance(ia.id));
        }
        Ok((ia, ib))
    }

    fn distance(&self, p: &Instance, q: &Instance) -> f64 {
        // centroids are finite by graph validity
        euclidean_distance(p.centroid, q.centroid).unwrap_or(f64::INFINITY)
    }

    pub fn answer_distance_comparison(
        &self,
        reference: &InstanceRef,
        a: &InstanceRef,
        b: &InstanceRef,
        mode: DistanceMode,
    ) -> Result<Answer, OracleError> {
        let r = self.resolve(reference)?;
        let (ia, ib) = self.resolve_pair(a, b)?;
        if r.id == ia.id || r.id == ib.id {
            return Err(OracleError::SameInstance(r.id));
        }
        let (da, db) = (self.distance(r, ia), self.distance(r, ib));
        let tol = self.params.tie_tolerance;
        Ok(match mode {
            DistanceMode::Nearest => {
                let v = if (da - db).abs() <= tol {
                    "equal".to_string()
                } else if da < db {
                    a.surface()
                } else {
                    b.surface()
                };
                Answer::new(AnswerKind::InstanceChoice, v)
            }
            DistanceMode::FartherBool => Answer::yes_no(da > db + tol),
        })
    }

    /// Instances of `class_label` within `radius` of `center`, not counting `exclude`.
    fn count_near(&self, class_label: &str, center: &Instance, radius: f64, exclude: [InstanceId; 2]) -> usize {
        self.index
            .instances()
            .filter(|i| !exclude.contains(&i.id))
            .filter(|i| self.index.facts(i.id).is_some_and(|f| f.class_label == class_label))
            .filter(|i| self.distance(center, i) <= radius)
            .count()
    }

    pub fn answer_density_comparison(
        &self,
        class_label: &str,
        a: &InstanceRef,
        b: &InstanceRef,
        radius: f64,
    ) -> Result<Answer, OracleError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(OracleError::InvalidRadius(radius));
        }
        let (ia, ib) = self.resolve_pair(a, b)?;
        let ex = [ia.id, ib.id];
        let (na, nb) = (
            self.count_near(class_label, ia, radius, ex),
            self.count_near(class_label, ib, radius, ex),
        );
        let v = match na.cmp(&nb) {
            std::cmp::Ordering::Greater => a.surface(),
            std::cmp::Ordering::Less => b.surface(),
            std::cmp::Ordering::Equal => "equal".to_string(),
        };
        Ok(Answer::new(AnswerKind::InstanceChoice, v))
    }

    /// Which side carries `usage`. When both do and a `reference` instance is
    /// given, the side nearer to it wins (`both` on a distance tie).
    pub fn answer_usage_selection(
        &self,
        usage: &str,
        a: &InstanceRef,
        b: &InstanceRef,
        reference: Option<&InstanceRef>,
    ) -> Result<Answer, OracleError> {
        let (ia, ib) = self.resolve_pair(a, b)?;
        let has = |i: &Instance| self.index.facts(i.id).is_some_and(|f| f.has_usage(usage));
        let v = match (has(ia), has(ib)) {
            (true, false) => a.surface(),
            (false, true) => b.surface(),
            (false, false) => "neither".to_string(),
            (true, true) => match reference {
                None => "both".to_string(),
                Some(r) => {
                    let r = self.resolve(r)?;
                    let (da, db) = (self.distance(r, ia), self.distance(r, ib));
                    if (da - db).abs() <= self.params.tie_tolerance {
                        "both".to_string()
                    } else if da < db {
                        a.surface()
                    } else {
                        b.surface()
                    }
                }
            },
        };
        Ok(Answer::new(AnswerKind::InstanceChoice, v))
    }

    /// Which side lies in `location`: one side, `both` or `neither`.
    pub fn answer_location_selection(
        &self,
        location: &str,
        a: &InstanceRef,
        b: &InstanceRef,
    ) -> Result<Answer, OracleError> {
        let (ia, ib) = self.resolve_pair(a, b)?;
        let inside = |i: &Instance| self.index.facts(i.id).is_some_and(|f| f.location == location);
        let v = match (inside(ia), inside(ib)) {
            (true, false) => a.surface(),
            (false, true) => b.surface(),
            (true, true) => "both".to_string(),
            (false, false) => "neither".to_string(),
        };
        Ok(Answer::new(AnswerKind::InstanceChoice, v))
    }

    pub fn answer_usage_difference(&self, a: &InstanceRef, b: &InstanceRef) -> Result<Answer, OracleError> {
        let (ia, ib) = self.resolve_pair(a, b)?;
        let ua = &self.index.facts(ia.id).expect("indexed id").usages;
        let ub = &self.index.facts(ib.id).expect("indexed id").usages;
        let only = |x: &[String], y: &[String]| -> Vec<String> {
            let mut seen = std::collections::HashSet::new();
            x.iter()
                .filter(|u| !y.contains(u) && seen.insert(u.as_str()))
                .cloned()
                .collect()
        };
        Ok(Answer::new(
            AnswerKind::UsageDiff,
            format!(
                "{}: {}; {}: {}",
                a.surface(),
                join_or_none(&only(ua, ub)),
                b.surface(),
                join_or_none(&only(ub, ua))
            ),
        ))
    }

    /// Answers a template instance, dispatching on the template's query.
    pub fn answer(&self, t: &QuestionTemplate, b: &Binding) -> Result<Answer, OracleError> {
        let inst = |k: SlotKind| b.instance(k);
        let text = |k: SlotKind| b.text(k);
        let filter = || -> Result<Filter, OracleError> {
            let opt = |k: SlotKind| -> Result<Option<String>, OracleError> {
                if t.slots.contains(&k) {
                    Ok(Some(text(k)?.to_string()))
                } else {
                    Ok(None)
                }
            };
            Ok(Filter {
                label: opt(SlotKind::InstanceLabel)?,
                usage: opt(SlotKind::Usage)?,
                location: opt(SlotKind::Location)?,
            })
        };
        use SlotKind::*;
        let ans = match t.query {
            Query::Exists => self.answer_existence(&filter()?)?,
            Query::Count => self.answer_count(&filter()?)?,
            Query::UsageOf => self.answer_attribute(inst(InstanceLabel)?, AttributeQuery::Usage)?,
            Query::LocationOf => self.answer_attribute(inst(InstanceLabel)?, AttributeQuery::Location)?,
            Query::LocationOfUsage => self.answer_usage_location(text(Usage)?)?,
            Query::HasUsage => self.answer_has_usage(inst(InstanceLabel)?, text(Usage)?)?,
            Query::Nearest | Query::Quicker => self.answer_distance_comparison(
                inst(InstanceLabel)?,
                inst(InstanceLabel1)?,
                inst(InstanceLabel2)?,
                DistanceMode::Nearest,
            )?,
            Query::Farther => self.answer_distance_comparison(
                inst(InstanceLabel)?,
                inst(InstanceLabel1)?,
                inst(InstanceLabel2)?,
                DistanceMode::FartherBool,
            )?,
            Query::InLocation => {
                self.answer_location_selection(text(Location)?, inst(InstanceLabel1)?, inst(InstanceLabel2)?)?
            }
            Query::Direction => self.answer_direction(inst(InstanceLabel1)?, inst(InstanceLabel2)?)?,
            Query::Density => self.answer_density_comparison(
                text(TypeOfInstance)?,
                inst(InstanceLabel1)?,
                inst(InstanceLabel2)?,
                self.params.near_radius,
            )?,
            Query::UsageSelection => {
                self.answer_usage_selection(text(Usage)?, inst(InstanceLabel1)?, inst(InstanceLabel2)?, None)?
            }
            Query::UsageEfficiency => {
                let reference = if t.slots.contains(&InstanceLabel) {
                    Some(inst(InstanceLabel)?)
                } else {
                    None
                };
                self.answer_usage_selection(text(Usage)?, inst(InstanceLabel1)?, inst(InstanceLabel2)?, reference)?
            }
            Query::UsageDifference => self.answer_usage_difference(inst(InstanceLabel1)?, inst(InstanceLabel2)?)?,
        };
        debug_assert_eq!(ans.kind, t.answer_kind);
        Ok(ans)
    }
}

fn join_or_none(v: &[String]) -> String {
    if v.is_empty() {
        "none".to_string()
    } else {
        v.join(", ")
    }
}

/// Answers `template_id` from `registry` against `g`.
pub fn answer(
    g: &SceneGraph,
    registry: &[QuestionTemplate],
    template_id: &str,
    binding: &Binding,
    params: OracleParams,
) -> Result<Answer, OracleError> {
    let t = find_template(registry, template_id).ok_or_else(|| OracleError::UnknownTemplate(template_id.to_string()))?;
    Oracle::new(g, params).answer(t, binding)
}
