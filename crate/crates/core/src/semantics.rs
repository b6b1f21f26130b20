//! Spatial and semantic triple extraction.
//!
//! Directions are world-anchored. Bearings are measured counterclockwise from
//! the scene +x axis using the full-plane arctangent; with the default frame,
//! `front` is the +y axis (bearing 90°) and each relation owns a half-open
//! 45° sector `[lo, hi)`.

use std::collections::BTreeMap;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::SceneManifest;
use crate::scene::{
    euclidean_distance, DirectionRelation, Instance, InstanceId, SceneGraph, SemanticAttribute,
    SemanticTriple, SpatialEdge,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticsError {
    #[error("instances {0} and {1} have coincident centroids in the xy-plane")]
    CoincidentCentroids(InstanceId, InstanceId),
    #[error("bearing {0} is outside [0, 360)")]
    BearingOutOfRange(f64),
    #[error("no lexicon entry for label(s): {}", .0.join(", "))]
    UnknownLabels(Vec<String>),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error("invalid region map: {0}")]
    RegionMap(String),
    #[error("invalid edge policy: {0}")]
    EdgePolicy(String),
    #[error("scene graph failed validation: {0}")]
    Validation(String),
}

/// Orientation of the relation sectors. `front_bearing_deg` is the bearing
/// (counterclockwise from +x) that counts as straight ahead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub front_bearing_deg: f64,
}

impl Default for Frame {
    fn default() -> Self {
        Self {
            front_bearing_deg: 90.0,
        }
    }
}

fn wrap_deg(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

impl Frame {
    /// Maps a world bearing into the canonical frame where front is 90°.
    pub fn canonical(&self, bearing: f64) -> f64 {
        if self.front_bearing_deg == 90.0 {
            bearing
        } else {
            wrap_deg(bearing - self.front_bearing_deg + 90.0)
        }
    }
}

/// Bearing of `to` seen from `from`, in degrees `[0, 360)`, counterclockwise from +x.
pub fn bearing_deg(from: &Instance, to: &Instance) -> Result<f64, SemanticsError> {
    let dx = to.centroid.x - from.centroid.x;
    let dy = to.centroid.y - from.centroid.y;
    if dx == 0.0 && dy == 0.0 {
        return Err(SemanticsError::CoincidentCentroids(from.id, to.id));
    }
    Ok(wrap_deg(dy.atan2(dx).to_degrees()))
}

/// Lower bounds of the half-open sectors, counterclockwise from `right`.
const SECTORS: [(f64, DirectionRelation); 8] = [
    (22.5, DirectionRelation::FrontRight),
    (67.5, DirectionRelation::Front),
    (112.5, DirectionRelation::FrontLeft),
    (157.5, DirectionRelation::Left),
    (202.5, DirectionRelation::BackLeft),
    (247.5, DirectionRelation::Back),
    (292.5, DirectionRelation::BackRight),
    (337.5, DirectionRelation::Right),
];

pub fn bin_direction(bearing: f64) -> Result<DirectionRelation, SemanticsError> {
    if !(0.0..360.0).contains(&bearing) {
        return Err(SemanticsError::BearingOutOfRange(bearing));
    }
    Ok(SECTORS
        .iter()
        .rev()
        .find(|(lo, _)| bearing >= *lo)
        .map_or(DirectionRelation::Right, |&(_, r)| r))
}

/// 180° sector shift.
pub fn inverse_relation(r: DirectionRelation) -> DirectionRelation {
    r.opposite()
}

/// Edge `(i, r, j)`: from `i`, `j` lies toward `r`.
pub fn spatial_relation(i: &Instance, j: &Instance) -> Result<SpatialEdge, SemanticsError> {
    spatial_relation_in(&Frame::default(), i, j)
}

pub fn spatial_relation_in(
    frame: &Frame,
    i: &Instance,
    j: &Instance,
) -> Result<SpatialEdge, SemanticsError> {
    let b = frame.canonical(bearing_deg(i, j)?);
    Ok(SpatialEdge {
        head: i.id,
        relation: bin_direction(b)?,
        tail: j.id,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EdgePolicy {
    AllPairs,
    KNearest { k: usize },
}

impl Default for EdgePolicy {
    fn default() -> Self {
        EdgePolicy::AllPairs
    }
}

impl EdgePolicy {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        match self {
            EdgePolicy::KNearest { k: 0 } => Err(SemanticsError::EdgePolicy("k must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeSet {
    pub edges: Vec<SpatialEdge>,
    /// Ordered pairs left without an edge because their centroids coincide in xy.
    pub skipped: Vec<(InstanceId, InstanceId)>,
}

/// Builds directional edges between instances under `policy`, sorted by (head, tail).
pub fn build_spatial_edges(
    instances: &[Instance],
    policy: EdgePolicy,
    frame: &Frame,
) -> Result<EdgeSet, SemanticsError> {
    policy.validate()?;
    let per_head: Vec<(Vec<SpatialEdge>, Vec<(InstanceId, InstanceId)>)> = instances
        .par_iter()
        .map(|i| {
            let mut edges = Vec::new();
            let mut skipped = Vec::new();
            let mut targets: Vec<&Instance> = Vec::new();
            for j in instances.iter().filter(|j| j.id != i.id) {
                if i.centroid.x == j.centroid.x && i.centroid.y == j.centroid.y {
                    skipped.push((i.id, j.id));
                } else {
                    targets.push(j);
                }
            }
            if let EdgePolicy::KNearest { k } = policy {
                targets.sort_by(|a, b| {
                    let da = euclidean_distance(i.centroid, a.centroid).unwrap_or(f64::INFINITY);
                    let db = euclidean_distance(i.centroid, b.centroid).unwrap_or(f64::INFINITY);
                    da.total_cmp(&db).then(a.id.cmp(&b.id))
                });
                targets.truncate(k);
            }
            for j in targets {
                // coincident pairs were filtered above
                if let Ok(e) = spatial_relation_in(frame, i, j) {
                    edges.push(e);
                }
            }
            (edges, skipped)
        })
        .collect();
    let mut out = EdgeSet::default();
    for (e, s) in per_head {
        out.edges.extend(e);
        out.skipped.extend(s);
    }
    out.edges.sort_by_key(|e| (e.head, e.tail));
    out.skipped.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    #[serde(alias = "category_label")]
    pub category: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub usages: Vec<String>,
}

/// Offline label knowledge: category, synonyms and usages per class or category label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    pub entries: BTreeMap<String, LexiconEntry>,
}

impl Lexicon {
    pub fn from_reader<R: Read>(r: R) -> Result<Self, SemanticsError> {
        let lex: Lexicon = serde_json::from_reader(r).map_err(|e| SemanticsError::Lexicon(e.to_string()))?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        for (label, e) in &self.entries {
            if label.is_empty() || e.category.is_empty() {
                return Err(SemanticsError::Lexicon(format!("empty label or category for {label:?}")));
            }
            if e.synonyms.iter().chain(&e.usages).any(|s| s.is_empty()) {
                return Err(SemanticsError::Lexicon(format!("empty synonym or usage for {label:?}")));
            }
        }
        Ok(())
    }

    /// Entry for an instance: its category label first, then its class label.
    pub fn entry_for(&self, inst: &Instance) -> Option<&LexiconEntry> {
        self.entries
            .get(&inst.category_label)
            .or_else(|| self.entries.get(&inst.class_label))
    }

    /// Category assigned to a class at ingestion time.
    pub fn category_of_class(&self, class_label: &str) -> Option<String> {
        self.entries.get(class_label).map(|e| e.category.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x[0] <= x && x <= self.x[1] && self.y[0] <= y && y <= self.y[1]
    }
}

/// Named axis-aligned rectangles; the first containing region wins.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionMap {
    pub regions: Vec<Region>,
}

impl RegionMap {
    pub fn from_reader<R: Read>(r: R) -> Result<Self, SemanticsError> {
        let rm: RegionMap = serde_json::from_reader(r).map_err(|e| SemanticsError::RegionMap(e.to_string()))?;
        rm.validate()?;
        Ok(rm)
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        let mut names = std::collections::HashSet::new();
        for r in &self.regions {
            if r.name.is_empty() || !names.insert(r.name.as_str()) {
                return Err(SemanticsError::RegionMap(format!("empty or duplicate name {:?}", r.name)));
            }
            let ok = |a: [f64; 2]| a[0].is_finite() && a[1].is_finite() && a[0] < a[1];
            if !ok(r.x) || !ok(r.y) {
                return Err(SemanticsError::RegionMap(format!("degenerate range in {:?}", r.name)));
            }
        }
        Ok(())
    }
}

/// Location name for an instance: the first region containing its centroid,
/// else a quadrant relative to `scene_center` (north is +y, ties go north/east).
pub fn assign_location(i: &Instance, rm: &RegionMap, scene_center: (f64, f64)) -> String {
    let (x, y) = (i.centroid.x, i.centroid.y);
    if let Some(r) = rm.regions.iter().find(|r| r.contains(x, y)) {
        return r.name.clone();
    }
    let ns = if y >= scene_center.1 { "north" } else { "south" };
    let ew = if x < scene_center.0 { "west" } else { "east" };
    format!("{ns}{ew} area")
}

fn scene_center(instances: &[Instance]) -> (f64, f64) {
    let mut it = instances.iter();
    let Some(first) = it.next() else { return (0.0, 0.0) };
    let b = it.fold(first.aabb, |acc, i| acc.union(&i.aabb));
    let c = b.center();
    (c.x, c.y)
}

/// Semantic triples for every instance, grouped by instance in input order.
pub fn attach_semantics(
    instances: &[Instance],
    lexicon: &Lexicon,
    region_map: &RegionMap,
) -> Result<Vec<SemanticTriple>, SemanticsError> {
    let mut unknown: Vec<String> = instances
        .iter()
        .filter(|i| lexicon.entry_for(i).is_none())
        .map(|i| i.class_label.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(SemanticsError::UnknownLabels(unknown));
    }
    let center = scene_center(instances);
    let mut out = Vec::new();
    for inst in instances {
        let entry = lexicon.entry_for(inst).expect("checked above");
        let triple = |attribute, value: &str| SemanticTriple {
            subject: inst.id,
            attribute,
            value: value.to_string(),
        };
        out.push(triple(SemanticAttribute::InstanceLabel, &inst.class_label));
        out.push(triple(SemanticAttribute::BuildingCategoryLabel, &inst.category_label));
        out.push(triple(
            SemanticAttribute::Location,
            &assign_location(inst, region_map, center),
        ));
        for s in &entry.synonyms {
            out.push(triple(SemanticAttribute::SynonymLabel, s));
        }
        for u in &entry.usages {
            out.push(triple(SemanticAttribute::UsageLabel, u));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct GraphOptions {
    pub policy: EdgePolicy,
    pub frame: Frame,
}

#[derive(Clone, Debug)]
pub struct BuiltGraph {
    pub graph: SceneGraph,
    pub skipped_pairs: Vec<(InstanceId, InstanceId)>,
}

pub fn build_scene_graph(
    manifest: &SceneManifest,
    lexicon: &Lexicon,
    region_map: &RegionMap,
    options: &GraphOptions,
) -> Result<BuiltGraph, SemanticsError> {
    let mut instances = manifest.instances.clone();
    instances.sort_by_key(|i| i.id);
    let edges = build_spatial_edges(&instances, options.policy, &options.frame)?;
    let semantic_triples = attach_semantics(&instances, lexicon, region_map)?;
    let graph = SceneGraph {
        city: manifest.city.clone(),
        scene_id: manifest.scene_id.clone(),
        instances,
        spatial_edges: edges.edges,
        semantic_triples,
    };
    let report = crate::scene::validate_scene_graph(&graph);
    if let Some(v) = report.violations.first() {
        return Err(SemanticsError::Validation(v.to_string()));
    }
    Ok(BuiltGraph {
        graph,
        skipped_pairs: edges.skipped,
    })
}
