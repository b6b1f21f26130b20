//! Core domain types: instances, spatial edges, semantic triples and scene graphs.
//!
//! Coordinates are meters in a scene-local right-handed frame with z up.
//! Everything here is immutable once built and can be shared across threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("unknown direction relation {0:?}")]
    UnknownRelation(String),
}

/// A point or displacement in scene coordinates (meters).
///
/// Serialized as a three-element array `[x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self, SceneError> {
        let v = Self { x, y, z };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(SceneError::NonFinite("Vec3"))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn component_min(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn le_componentwise(&self, o: &Self) -> bool {
        self.x <= o.x && self.y <= o.y && self.z <= o.z
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, d: f64) -> Vec3 {
        Vec3::new(self.x / d, self.y / d, self.z / d)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

/// Straight-line distance between two points.
pub fn euclidean_distance(a: Vec3, b: Vec3) -> Result<f64, SceneError> {
    if !a.is_finite() || !b.is_finite() {
        return Err(SceneError::NonFinite("euclidean_distance"));
    }
    let d = a - b;
    Ok(d.x.hypot(d.y).hypot(d.z))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn point(p: Vec3) -> Self {
        Self { min: p, max: p }
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min.le_componentwise(&self.max)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.min.le_componentwise(p) && p.le_componentwise(&self.max)
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.component_min(o.min),
            max: self.max.component_max(o.max),
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min.x + self.max.x),
            0.5 * (self.min.y + self.max.y),
            0.5 * (self.min.z + self.max.z),
        )
    }
}

pub type InstanceId = u32;

/// One segmented city object, reduced to aggregate geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub class_label: String,
    pub category_label: String,
    pub centroid: Vec3,
    pub aabb: Aabb,
    pub point_count: u64,
}

/// The eight world-anchored direction sectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionRelation {
    Front,
    FrontRight,
    Right,
    BackRight,
    FrontLeft,
    Left,
    BackLeft,
    Back,
}

impl DirectionRelation {
    pub const ALL: [DirectionRelation; 8] = [
        DirectionRelation::Front,
        DirectionRelation::FrontRight,
        DirectionRelation::Right,
        DirectionRelation::BackRight,
        DirectionRelation::FrontLeft,
        DirectionRelation::Left,
        DirectionRelation::BackLeft,
        DirectionRelation::Back,
    ];

    /// Relation of the sector rotated by 180°.
    pub fn opposite(self) -> Self {
        use DirectionRelation::*;
        match self {
            Front => Back,
            Back => Front,
            Right => Left,
            Left => Right,
            FrontRight => BackLeft,
            BackLeft => FrontRight,
            FrontLeft => BackRight,
            BackRight => FrontLeft,
        }
    }

    pub fn as_str(self) -> &'static str {
        use DirectionRelation::*;
        match self {
            Front => "front",
            FrontRight => "front-right",
            Right => "right",
            BackRight => "back-right",
            FrontLeft => "front-left",
            Left => "left",
            BackLeft => "back-left",
            Back => "back",
        }
    }
}

impl fmt::Display for DirectionRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DirectionRelation {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DirectionRelation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| SceneError::UnknownRelation(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticAttribute {
    InstanceLabel,
    BuildingCategoryLabel,
    SynonymLabel,
    Location,
    UsageLabel,
}

impl SemanticAttribute {
    pub const ALL: [SemanticAttribute; 5] = [
        SemanticAttribute::InstanceLabel,
        SemanticAttribute::BuildingCategoryLabel,
        SemanticAttribute::SynonymLabel,
        SemanticAttribute::Location,
        SemanticAttribute::UsageLabel,
    ];
}

/// `(head, relation, tail)`: seen from `head`, `tail` lies toward `relation`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpatialEdge {
    pub head: InstanceId,
    pub relation: DirectionRelation,
    pub tail: InstanceId,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticTriple {
    pub subject: InstanceId,
    pub attribute: SemanticAttribute,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub city: String,
    pub scene_id: String,
    pub instances: Vec<Instance>,
    pub spatial_edges: Vec<SpatialEdge>,
    pub semantic_triples: Vec<SemanticTriple>,
}

impl SceneGraph {
    pub fn instance(&self, id: InstanceId) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Bounding box over all instance boxes, `None` for an empty scene.
    pub fn extent(&self) -> Option<Aabb> {
        let mut it = self.instances.iter();
        let first = it.next()?.aabb;
        Some(it.fold(first, |acc, i| acc.union(&i.aabb)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    NonFiniteGeometry,
    InvalidAabb,
    CentroidOutsideAabb,
    ZeroPointCount,
    DuplicateInstanceId,
    UnknownInstanceId,
    SelfEdge,
    DuplicateEdge,
    EmptyTripleValue,
    MissingInstanceLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub instance: Option<InstanceId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instance {
            Some(id) => write!(f, "{} (instance {id})", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, instance: Option<InstanceId>, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            instance,
            message: message.into(),
        });
    }
}

/// Checks every structural invariant of a scene graph and reports all violations.
pub fn validate_scene_graph(g: &SceneGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids = HashSet::new();
    for inst in &g.instances {
        if !ids.insert(inst.id) {
            report.push(ViolationKind::DuplicateInstanceId, Some(inst.id), "duplicate instance id");
        }
        if !inst.centroid.is_finite() || !inst.aabb.min.is_finite() || !inst.aabb.max.is_finite() {
            report.push(ViolationKind::NonFiniteGeometry, Some(inst.id), "non-finite geometry");
            continue;
        }
        if !inst.aabb.is_valid() {
            report.push(ViolationKind::InvalidAabb, Some(inst.id), "aabb min exceeds max");
        } else if !inst.aabb.contains(&inst.centroid) {
            report.push(ViolationKind::CentroidOutsideAabb, Some(inst.id), "centroid outside aabb");
        }
        if inst.point_count == 0 {
            report.push(ViolationKind::ZeroPointCount, Some(inst.id), "point count is zero");
        }
    }

    let mut pairs = HashSet::new();
    for e in &g.spatial_edges {
        for id in [e.head, e.tail] {
            if !ids.contains(&id) {
                report.push(ViolationKind::UnknownInstanceId, Some(id), "unknown instance id");
            }
        }
        if e.head == e.tail {
            report.push(ViolationKind::SelfEdge, Some(e.head), "edge from an instance to itself");
        }
        if !pairs.insert((e.head, e.tail)) {
            report.push(
                ViolationKind::DuplicateEdge,
                Some(e.head),
                format!("more than one edge {} -> {}", e.head, e.tail),
            );
        }
    }

    let mut labelled = HashSet::new();
    for t in &g.semantic_triples {
        if !ids.contains(&t.subject) {
            report.push(ViolationKind::UnknownInstanceId, Some(t.subject), "unknown instance id");
        }
        if t.value.is_empty() {
            report.push(ViolationKind::EmptyTripleValue, Some(t.subject), "empty triple value");
        }
        if t.attribute == SemanticAttribute::InstanceLabel {
            labelled.insert(t.subject);
        }
    }
    for inst in &g.instances {
        if !labelled.contains(&inst.id) {
            report.push(
                ViolationKind::MissingInstanceLabel,
                Some(inst.id),
                "instance has no instance_label triple",
            );
        }
    }
    report
}

/// Per-instance facts gathered from a graph's semantic triples.
#[derive(Clone, Debug, Default)]
pub struct InstanceFacts {
    pub class_label: String,
    pub category_label: String,
    pub synonyms: Vec<String>,
    pub usages: Vec<String>,
    pub location: String,
}

impl InstanceFacts {
    /// Label match rule shared by filters and references: class, category or synonym.
    pub fn answers_to(&self, label: &str) -> bool {
        self.class_label == label
            || self.category_label == label
            || self.synonyms.iter().any(|s| s == label)
    }

    pub fn has_usage(&self, usage: &str) -> bool {
        self.usages.iter().any(|u| u == usage)
    }
}

/// Read-only lookup structure over a [`SceneGraph`].
///
/// Instances are kept in id order; facts come from the semantic triples
/// (falling back to the instance's own labels when a triple is absent).
#[derive(Debug)]
pub struct GraphIndex<'g> {
    pub graph: &'g SceneGraph,
    order: Vec<usize>,
    facts: HashMap<InstanceId, InstanceFacts>,
    edges: HashMap<(InstanceId, InstanceId), DirectionRelation>,
}

impl<'g> GraphIndex<'g> {
    pub fn new(graph: &'g SceneGraph) -> Self {
        let mut order: Vec<usize> = (0..graph.instances.len()).collect();
        order.sort_by_key(|&i| graph.instances[i].id);

        let mut facts: HashMap<InstanceId, InstanceFacts> = graph
            .instances
            .iter()
            .map(|i| {
                (
                    i.id,
                    InstanceFacts {
                        class_label: i.class_label.clone(),
                        category_label: i.category_label.clone(),
                        ..Default::default()
                    },
                )
            })
            .collect();
        for t in &graph.semantic_triples {
            let Some(f) = facts.get_mut(&t.subject) else { continue };
            match t.attribute {
                SemanticAttribute::InstanceLabel => f.class_label = t.value.clone(),
                SemanticAttribute::BuildingCategoryLabel => f.category_label = t.value.clone(),
                SemanticAttribute::SynonymLabel => f.synonyms.push(t.value.clone()),
                SemanticAttribute::UsageLabel => f.usages.push(t.value.clone()),
                SemanticAttribute::Location => f.location = t.value.clone(),
            }
        }
        let edges = graph
            .spatial_edges
            .iter()
            .map(|e| ((e.head, e.tail), e.relation))
            .collect();
        Self {
            graph,
            order,
            facts,
            edges,
        }
    }

    /// Instances in ascending id order.
    pub fn instances(&self) -> impl Iterator<Item = &'g Instance> + '_ {
        self.order.iter().map(|&i| &self.graph.instances[i])
    }

    pub fn facts(&self, id: InstanceId) -> Option<&InstanceFacts> {
        self.facts.get(&id)
    }

    pub fn instance(&self, id: InstanceId) -> Option<&'g Instance> {
        self.graph.instance(id)
    }

    pub fn edge(&self, head: InstanceId, tail: InstanceId) -> Option<DirectionRelation> {
        self.edges.get(&(head, tail)).copied()
    }

    /// Sorted distinct class and category labels present.
    pub fn kind_labels(&self) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        for f in self.facts.values() {
            set.insert(f.class_label.clone());
            set.insert(f.category_label.clone());
        }
        set.into_iter().collect()
    }

    pub fn class_labels(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<_> =
            self.facts.values().map(|f| f.class_label.clone()).collect();
        set.into_iter().collect()
    }

    pub fn usages(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<_> =
            self.facts.values().flat_map(|f| f.usages.iter().cloned()).collect();
        set.into_iter().collect()
    }

    pub fn locations(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<_> = self
            .facts
            .values()
            .filter(|f| !f.location.is_empty())
            .map(|f| f.location.clone())
            .collect();
        set.into_iter().collect()
    }

    /// Synonyms of every instance that answers to `label`, sorted and deduplicated.
    pub fn synonyms_of_label(&self, label: &str) -> Vec<String> {
        let set: std::collections::BTreeSet<_> = self
            .facts
            .values()
            .filter(|f| f.class_label == label || f.category_label == label)
            .flat_map(|f| f.synonyms.iter().cloned())
            .filter(|s| s != label)
            .collect();
        set.into_iter().collect()
    }

    /// Ids (ascending) of instances answering to `label`, optionally restricted to a location.
    pub fn matching(&self, label: &str, location: Option<&str>) -> Vec<InstanceId> {
        self.instances()
            .filter(|i| {
                let f = &self.facts[&i.id];
                f.answers_to(label) && location.map_or(true, |l| f.location == l)
            })
            .map(|i| i.id)
            .collect()
    }

    /// Count of instances per class label.
    pub fn class_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for f in self.facts.values() {
            *h.entry(f.class_label.clone()).or_insert(0) += 1;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: u32, c: Vec3) -> Instance {
        Instance {
            id,
            class_label: "boat".into(),
            category_label: "boat".into(),
            centroid: c,
            aabb: Aabb::point(c),
            point_count: 1,
        }
    }

    #[test]
    fn distance_basic_cases() {
        let o = Vec3::new(0.0, 0.0, 0.0);
        assert_eq!(euclidean_distance(o, o).unwrap(), 0.0);
        assert_eq!(euclidean_distance(o, Vec3::new(3.0, 4.0, 0.0)).unwrap(), 5.0);
        assert!(euclidean_distance(o, Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(euclidean_distance(Vec3::new(f64::INFINITY, 0.0, 0.0), o).is_err());
    }

    #[test]
    fn distance_matches_sqrt_of_squares() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = Vec3::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
            let b = Vec3::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
            let naive = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            let d = euclidean_distance(a, b).unwrap();
            assert!((d - naive).abs() <= 1e-12 * naive.max(1.0));
        }
    }

    #[test]
    fn opposite_is_involution_without_fixed_points() {
        for r in DirectionRelation::ALL {
            assert_eq!(r.opposite().opposite(), r);
            assert_ne!(r.opposite(), r);
        }
    }

    #[test]
    fn relation_strings_round_trip() {
        for r in DirectionRelation::ALL {
            assert_eq!(r.as_str().parse::<DirectionRelation>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.as_str()));
        }
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(validate_scene_graph(&SceneGraph::default()).is_ok());
    }

    #[test]
    fn dangling_edge_reports_unknown_id() {
        let g = SceneGraph {
            instances: vec![inst(0, Vec3::default())],
            spatial_edges: vec![SpatialEdge {
                head: 0,
                relation: DirectionRelation::Front,
                tail: 9,
            }],
            semantic_triples: vec![SemanticTriple {
                subject: 0,
                attribute: SemanticAttribute::InstanceLabel,
                value: "boat".into(),
            }],
            ..Default::default()
        };
        let r = validate_scene_graph(&g);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ViolationKind::UnknownInstanceId);
        assert_eq!(r.violations[0].instance, Some(9));
        assert!(r.violations[0].to_string().contains("unknown instance id"));
    }

    #[test]
    fn reports_every_violation() {
        let mut bad = inst(1, Vec3::new(5.0, 0.0, 0.0));
        bad.aabb = Aabb::point(Vec3::default());
        bad.point_count = 0;
        let g = SceneGraph {
            instances: vec![bad, inst(1, Vec3::default())],
            spatial_edges: vec![
                SpatialEdge { head: 1, relation: DirectionRelation::Back, tail: 1 },
                SpatialEdge { head: 1, relation: DirectionRelation::Back, tail: 1 },
            ],
            semantic_triples: vec![SemanticTriple {
                subject: 1,
                attribute: SemanticAttribute::UsageLabel,
                value: String::new(),
            }],
            ..Default::default()
        };
        let kinds: Vec<_> = validate_scene_graph(&g).violations.into_iter().map(|v| v.kind).collect();
        for k in [
            ViolationKind::DuplicateInstanceId,
            ViolationKind::CentroidOutsideAabb,
            ViolationKind::ZeroPointCount,
            ViolationKind::SelfEdge,
            ViolationKind::DuplicateEdge,
            ViolationKind::EmptyTripleValue,
            ViolationKind::MissingInstanceLabel,
        ] {
            assert!(kinds.contains(&k), "missing {k:?} in {kinds:?}");
        }
    }

    #[test]
    fn vec3_serializes_as_array() {
        let v = Vec3::new(1.5, -2.0, 10.0);
        assert_eq!(serde_json::to_string(&v).unwrap(), "[1.5,-2.0,10.0]");
        let back: Vec3 = serde_json::from_str("[1.5,-2.0,10.0]").unwrap();
        assert_eq!(back, v);
    }

    proptest::proptest! {
        #[test]
        fn triangle_inequality(
            a in proptest::array::uniform3(-1e4f64..1e4),
            b in proptest::array::uniform3(-1e4f64..1e4),
            c in proptest::array::uniform3(-1e4f64..1e4),
        ) {
            let (a, b, c) = (Vec3::from(a), Vec3::from(b), Vec3::from(c));
            let ab = euclidean_distance(a, b).unwrap();
            let bc = euclidean_distance(b, c).unwrap();
            let ac = euclidean_distance(a, c).unwrap();
            proptest::prop_assert!(ac <= ab + bc + 1e-9);
            proptest::prop_assert_eq!(ab, euclidean_distance(b, a).unwrap());
        }
    }
}
