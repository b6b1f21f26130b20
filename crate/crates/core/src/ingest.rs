//! Single-pass ingestion of instance-labelled point clouds.
//!
//! Two wire formats are accepted:
//!
//! * **XYZCI** text: one point per line, `x y z class_id instance_id`,
//!   whitespace separated. Blank lines and lines starting with `#` are skipped.
//! * **C3PC** binary: the 8-byte magic `C3PC\0\0\0\x01` followed by packed
//!   little-endian records of three `f64` and two `u32` (32 bytes each).
//!
//! Accumulation keeps one [`RunningStats`] per instance, so memory grows with
//! the number of instances and not with the number of points.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Aabb, Instance, InstanceId, Vec3};

pub const C3PC_MAGIC: [u8; 8] = *b"C3PC\0\0\0\x01";
pub const C3PC_RECORD_LEN: usize = 32;

/// Bytes read per chunk by the parallel readers.
const CHUNK_BYTES: usize = 4 << 20;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("record {record}: {message}")]
    Binary { record: u64, message: String },
    #[error("instance {instance} observed with class ids {first} and {second}")]
    InconsistentClass {
        instance: InstanceId,
        first: u32,
        second: u32,
    },
    #[error("no class_map entry for class id(s) {0:?}")]
    MissingClass(Vec<u32>),
    #[error("manifest field `{field}`: {message}")]
    Format { field: String, message: String },
    #[error("unrecognized point file format")]
    UnknownFormat,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointRecord {
    pub position: Vec3,
    pub class_id: u32,
    pub instance_id: InstanceId,
}

fn field_err(line: u64, field: usize, name: &str, token: &str) -> IngestError {
    IngestError::Parse {
        line,
        message: format!("field {field} ({name}): cannot parse {token:?}"),
    }
}

/// Parses one XYZCI data line. `line_no` is 1-based and only used for errors.
pub fn parse_point_record(line: &str, line_no: u64) -> Result<PointRecord, IngestError> {
    let mut fields = line.split_ascii_whitespace();
    let mut next = |idx: usize| {
        fields.next().ok_or_else(|| IngestError::Parse {
            line: line_no,
            message: format!("expected 5 fields, found {}", idx - 1),
        })
    };
    let xs = next(1)?;
    let ys = next(2)?;
    let zs = next(3)?;
    let cs = next(4)?;
    let is = next(5)?;
    if let Some(extra) = fields.next() {
        return Err(IngestError::Parse {
            line: line_no,
            message: format!("expected 5 fields, found extra {extra:?}"),
        });
    }
    let coord = |idx: usize, name: &str, tok: &str| -> Result<f64, IngestError> {
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(field_err(line_no, idx, name, tok)),
        }
    };
    let id = |idx: usize, name: &str, tok: &str| -> Result<u32, IngestError> {
        if tok.starts_with('-') {
            return Err(IngestError::Parse {
                line: line_no,
                message: format!("field {idx} ({name}): negative id {tok:?}"),
            });
        }
        tok.parse::<u32>().map_err(|_| field_err(line_no, idx, name, tok))
    };
    Ok(PointRecord {
        position: Vec3::new(coord(1, "x", xs)?, coord(2, "y", ys)?, coord(3, "z", zs)?),
        class_id: id(4, "class_id", cs)?,
        instance_id: id(5, "instance_id", is)?,
    })
}

fn is_data_line(line: &str) -> bool {
    let t = line.trim_start();
    !t.is_empty() && !t.starts_with('#')
}

/// Iterator over the records of an XYZCI stream.
pub struct XyzciReader<R> {
    inner: R,
    buf: String,
    line: u64,
}

impl<R: BufRead> XyzciReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: String::new(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for XyzciReader<R> {
    type Item = Result<PointRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line += 1;
                    if is_data_line(&self.buf) {
                        return Some(parse_point_record(&self.buf, self.line));
                    }
                }
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

fn decode_c3pc(rec: &[u8], index: u64) -> Result<PointRecord, IngestError> {
    let f = |o: usize| f64::from_le_bytes(rec[o..o + 8].try_into().unwrap());
    let u = |o: usize| u32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
    let position = Vec3::new(f(0), f(8), f(16));
    if !position.is_finite() {
        return Err(IngestError::Binary {
            record: index,
            message: "non-finite coordinate".into(),
        });
    }
    Ok(PointRecord {
        position,
        class_id: u(24),
        instance_id: u(28),
    })
}

pub fn encode_c3pc(p: &PointRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&p.position.x.to_le_bytes());
    out.extend_from_slice(&p.position.y.to_le_bytes());
    out.extend_from_slice(&p.position.z.to_le_bytes());
    out.extend_from_slice(&p.class_id.to_le_bytes());
    out.extend_from_slice(&p.instance_id.to_le_bytes());
}

fn read_magic<R: Read>(r: &mut R) -> Result<(), IngestError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| IngestError::Binary {
        record: 0,
        message: "truncated header".into(),
    })?;
    if magic != C3PC_MAGIC {
        return Err(IngestError::Binary {
            record: 0,
            message: format!("bad magic {magic:02x?}"),
        });
    }
    Ok(())
}

/// Fills `buf` as far as possible; returns the number of bytes read.
fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// Iterator over the records of a C3PC stream (header included).
pub struct C3pcReader<R> {
    inner: R,
    record: u64,
    header_checked: bool,
}

impl<R: Read> C3pcReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            record: 0,
            header_checked: false,
        }
    }
}

impl<R: Read> Iterator for C3pcReader<R> {
    type Item = Result<PointRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if !self.header_checked {
            self.header_checked = true;
            if let Err(e) = read_magic(&mut self.inner) {
                return Some(Err(e));
            }
        }
        let mut rec = [0u8; C3PC_RECORD_LEN];
        match fill(&mut self.inner, &mut rec) {
            Ok(0) => None,
            Ok(C3PC_RECORD_LEN) => {
                let out = decode_c3pc(&rec, self.record);
                self.record += 1;
                Some(out)
            }
            Ok(n) => Some(Err(IngestError::Binary {
                record: self.record,
                message: format!("truncated record ({n} of {C3PC_RECORD_LEN} bytes)"),
            })),
            Err(e) => Some(Err(e.into())),
        }
    }
}

/// Streaming count / sum / min / max accumulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub sum: Vec3,
    pub min: Vec3,
    pub max: Vec3,
}

impl RunningStats {
    pub fn new(p: Vec3) -> Self {
        Self {
            count: 1,
            sum: p,
            min: p,
            max: p,
        }
    }

    pub fn push(&mut self, p: Vec3) {
        self.count += 1;
        self.sum = self.sum + p;
        self.min = self.min.component_min(p);
        self.max = self.max.component_max(p);
    }

    pub fn merge(&mut self, o: &RunningStats) {
        self.count += o.count;
        self.sum = self.sum + o.sum;
        self.min = self.min.component_min(o.min);
        self.max = self.max.component_max(o.max);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceStats {
    pub class_id: u32,
    pub stats: RunningStats,
}

/// Instance id → accumulated statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneStats {
    pub instances: HashMap<InstanceId, InstanceStats>,
}

impl SceneStats {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn push(&mut self, rec: &PointRecord) -> Result<(), IngestError> {
        match self.instances.get_mut(&rec.instance_id) {
            Some(s) => {
                if s.class_id != rec.class_id {
                    return Err(IngestError::InconsistentClass {
                        instance: rec.instance_id,
                        first: s.class_id,
                        second: rec.class_id,
                    });
                }
                s.stats.push(rec.position);
            }
            None => {
                self.instances.insert(
                    rec.instance_id,
                    InstanceStats {
                        class_id: rec.class_id,
                        stats: RunningStats::new(rec.position),
                    },
                );
            }
        }
        Ok(())
    }

    /// Associative merge of statistics gathered over disjoint point sets.
    pub fn merge(&mut self, other: SceneStats) -> Result<(), IngestError> {
        for (id, o) in other.instances {
            match self.instances.get_mut(&id) {
                Some(s) => {
                    if s.class_id != o.class_id {
                        return Err(IngestError::InconsistentClass {
                            instance: id,
                            first: s.class_id,
                            second: o.class_id,
                        });
                    }
                    s.stats.merge(&o.stats);
                }
                None => {
                    self.instances.insert(id, o);
                }
            }
        }
        Ok(())
    }
}

/// Accumulates per-instance statistics from a record source in one pass.
pub fn stream_scene_stats<I>(source: I) -> Result<SceneStats, IngestError>
where
    I: IntoIterator<Item = Result<PointRecord, IngestError>>,
{
    let mut stats = SceneStats::default();
    for rec in source {
        stats.push(&rec?)?;
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointFormat {
    Xyzci,
    C3pc,
}

/// Guesses the format from the first bytes of a stream.
pub fn detect_format(prefix: &[u8]) -> PointFormat {
    if prefix.starts_with(&C3PC_MAGIC[..4]) {
        PointFormat::C3pc
    } else {
        PointFormat::Xyzci
    }
}

fn stats_of_text_chunk(chunk: &[u8], first_line: u64) -> Result<SceneStats, IngestError> {
    let mut stats = SceneStats::default();
    for (k, raw) in chunk.split(|&b| b == b'\n').enumerate() {
        let line_no = first_line + k as u64;
        let line = std::str::from_utf8(raw).map_err(|_| IngestError::Parse {
            line: line_no,
            message: "invalid UTF-8".into(),
        })?;
        if is_data_line(line) {
            stats.push(&parse_point_record(line, line_no)?)?;
        }
    }
    Ok(stats)
}

fn stats_of_binary_chunk(chunk: &[u8], first_record: u64) -> Result<SceneStats, IngestError> {
    let mut stats = SceneStats::default();
    for (k, rec) in chunk.chunks_exact(C3PC_RECORD_LEN).enumerate() {
        stats.push(&decode_c3pc(rec, first_record + k as u64)?)?;
    }
    Ok(stats)
}

/// One pass over `reader` using up to `jobs` chunks in flight at a time.
///
/// The source is cut into chunks on record boundaries (newlines for XYZCI,
/// 32-byte records for C3PC); each batch of chunks is accumulated in parallel
/// and merged in order. Peak buffer memory is about `jobs * 4 MiB`.
pub fn ingest_reader<R: Read>(
    mut reader: R,
    format: Option<PointFormat>,
    jobs: usize,
) -> Result<SceneStats, IngestError> {
    let jobs = jobs.max(1);
    let mut head = [0u8; 8];
    let got = fill(&mut reader, &mut head)?;
    let format = format.unwrap_or_else(|| detect_format(&head[..got]));
    let mut carry: Vec<u8> = Vec::new();
    match format {
        PointFormat::C3pc => {
            read_magic(&mut &head[..got])?;
        }
        PointFormat::Xyzci => carry.extend_from_slice(&head[..got]),
    }

    let mut total = SceneStats::default();
    // Line number (XYZCI) or record index (C3PC) of the first unit in the next chunk.
    let mut cursor: u64 = match format {
        PointFormat::Xyzci => 1,
        PointFormat::C3pc => 0,
    };
    let mut eof = false;
    while !eof {
        let mut batch: Vec<(Vec<u8>, u64)> = Vec::with_capacity(jobs);
        while batch.len() < jobs && !eof {
            let mut buf = std::mem::take(&mut carry);
            let start = buf.len();
            buf.resize(start + CHUNK_BYTES, 0);
            let n = fill(&mut reader, &mut buf[start..])?;
            buf.truncate(start + n);
            if n == 0 {
                eof = true;
            }
            let cut = match format {
                PointFormat::Xyzci if eof => buf.len(),
                PointFormat::Xyzci => match buf.iter().rposition(|&b| b == b'\n') {
                    Some(p) => p + 1,
                    None => 0,
                },
                PointFormat::C3pc => buf.len() - buf.len() % C3PC_RECORD_LEN,
            };
            carry = buf.split_off(cut);
            if buf.is_empty() {
                continue;
            }
            let units = match format {
                PointFormat::Xyzci => buf.iter().filter(|&&b| b == b'\n').count() as u64,
                PointFormat::C3pc => (buf.len() / C3PC_RECORD_LEN) as u64,
            };
            batch.push((buf, cursor));
            cursor += units;
        }
        let parts: Vec<Result<SceneStats, IngestError>> = batch
            .par_iter()
            .map(|(chunk, first)| match format {
                PointFormat::Xyzci => stats_of_text_chunk(chunk, *first),
                PointFormat::C3pc => stats_of_binary_chunk(chunk, *first),
            })
            .collect();
        for part in parts {
            total.merge(part?)?;
        }
    }
    if format == PointFormat::C3pc && !carry.is_empty() {
        return Err(IngestError::Binary {
            record: cursor,
            message: format!("truncated record ({} of {C3PC_RECORD_LEN} bytes)", carry.len()),
        });
    }
    Ok(total)
}

/// Turns accumulated statistics into instances ordered by id.
///
/// `class_map` maps class ids to class labels; `category_of` supplies the
/// category label for a given instance (falling back to the class label when
/// it returns `None`).
pub fn finalize_instances<F>(
    stats: &SceneStats,
    class_map: &BTreeMap<u32, String>,
    mut category_of: F,
) -> Result<Vec<Instance>, IngestError>
where
    F: FnMut(InstanceId, &str) -> Option<String>,
{
    let mut missing: Vec<u32> = stats
        .instances
        .values()
        .map(|s| s.class_id)
        .filter(|c| !class_map.contains_key(c))
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(IngestError::MissingClass(missing));
    }
    let mut ids: Vec<InstanceId> = stats.instances.keys().copied().collect();
    ids.sort_unstable();
    Ok(ids
        .into_iter()
        .map(|id| {
            let s = &stats.instances[&id];
            let class_label = class_map[&s.class_id].clone();
            let category_label =
                category_of(id, &class_label).unwrap_or_else(|| class_label.clone());
            let mut centroid = s.stats.sum / s.stats.count as f64;
            // Rounding in the mean can leave a degenerate axis a hair outside the box.
            centroid = centroid.component_max(s.stats.min).component_min(s.stats.max);
            Instance {
                id,
                class_label,
                category_label,
                centroid,
                aabb: Aabb {
                    min: s.stats.min,
                    max: s.stats.max,
                },
                point_count: s.stats.count,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub city: String,
    pub scene_id: String,
    pub class_map: BTreeMap<u32, String>,
    pub instances: Vec<Instance>,
}

impl SceneManifest {
    /// Checks the manifest invariants, naming the first offending field.
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |field: String, message: &str| IngestError::Format {
            field,
            message: message.to_string(),
        };
        let mut seen = std::collections::HashSet::new();
        for (k, inst) in self.instances.iter().enumerate() {
            let f = |name: &str| format!("instances[{k}].{name}");
            if !seen.insert(inst.id) {
                return Err(bad(f("id"), "duplicate instance id"));
            }
            if !self.class_map.values().any(|c| c == &inst.class_label) {
                return Err(bad(f("class_label"), "label not present in class_map"));
            }
            if inst.point_count == 0 {
                return Err(bad(f("point_count"), "must be at least 1"));
            }
            if !inst.aabb.is_valid() {
                return Err(bad(f("aabb"), "min must not exceed max"));
            }
            if !inst.aabb.contains(&inst.centroid) {
                return Err(bad(f("centroid"), "outside aabb"));
            }
        }
        Ok(())
    }
}

pub fn write_manifest<W: Write>(m: &SceneManifest, sink: W) -> Result<(), IngestError> {
    let mut sink = sink;
    serde_json::to_writer_pretty(&mut sink, m).map_err(io::Error::from)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest<R: Read>(source: R) -> Result<SceneManifest, IngestError> {
    let m: SceneManifest = serde_json::from_reader(source).map_err(|e| IngestError::Format {
        field: manifest_error_field(&e.to_string()),
        message: e.to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

/// Pulls the backticked field name out of a serde error message when present.
fn manifest_error_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("document").to_string()
}

/// Writes points as XYZCI text.
pub fn write_xyzci<W: Write>(points: &[PointRecord], mut sink: W) -> io::Result<()> {
    for p in points {
        writeln!(
            sink,
            "{} {} {} {} {}",
            p.position.x, p.position.y, p.position.z, p.class_id, p.instance_id
        )?;
    }
    Ok(())
}

/// Writes points as C3PC binary, header included.
pub fn write_c3pc<W: Write>(points: &[PointRecord], mut sink: W) -> io::Result<()> {
    sink.write_all(&C3PC_MAGIC)?;
    let mut buf = Vec::with_capacity(C3PC_RECORD_LEN);
    for p in points {
        buf.clear();
        encode_c3pc(p, &mut buf);
        sink.write_all(&buf)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rec(x: f64, y: f64, z: f64, c: u32, i: u32) -> PointRecord {
        PointRecord {
            position: Vec3::new(x, y, z),
            class_id: c,
            instance_id: i,
        }
    }

    fn random_points(n: usize, instances: u32, seed: u64) -> Vec<PointRecord> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let i = rng.gen_range(0..instances);
                rec(
                    rng.gen_range(-500.0..500.0),
                    rng.gen_range(-500.0..500.0),
                    rng.gen_range(0.0..80.0),
                    i % 3,
                    i,
                )
            })
            .collect()
    }

    /// Groups all points in memory, then reduces each group.
    fn naive_grouping(points: &[PointRecord]) -> BTreeMap<u32, (u32, u64, Vec3, Vec3, Vec3)> {
        let mut groups: BTreeMap<u32, Vec<&PointRecord>> = BTreeMap::new();
        for p in points {
            groups.entry(p.instance_id).or_default().push(p);
        }
        groups
            .into_iter()
            .map(|(id, ps)| {
                let mut sum = Vec3::default();
                let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
                let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for p in &ps {
                    sum = sum + p.position;
                    lo = lo.component_min(p.position);
                    hi = hi.component_max(p.position);
                }
                (id, (ps[0].class_id, ps.len() as u64, sum, lo, hi))
            })
            .collect()
    }

    fn as_sorted(s: &SceneStats) -> BTreeMap<u32, (u32, u64, Vec3, Vec3, Vec3)> {
        s.instances
            .iter()
            .map(|(&id, v)| (id, (v.class_id, v.stats.count, v.stats.sum, v.stats.min, v.stats.max)))
            .collect()
    }

    #[test]
    fn parses_records() {
        let r = parse_point_record("1.5 -2.0 10.0 3 42", 1).unwrap();
        assert_eq!(r, rec(1.5, -2.0, 10.0, 3, 42));
        assert_eq!(parse_point_record("0 0 0 0 0", 1).unwrap(), rec(0.0, 0.0, 0.0, 0, 0));
        assert_eq!(parse_point_record("  1\t2  3 4 5\r\n", 1).unwrap(), rec(1.0, 2.0, 3.0, 4, 5));
    }

    #[test]
    fn parse_errors_name_field_and_line() {
        let e = parse_point_record("1.0 2.0 3.0 x 5", 7).unwrap_err().to_string();
        assert!(e.contains("line 7") && e.contains("field 4"), "{e}");
        let e = parse_point_record("1 2 3 4", 2).unwrap_err().to_string();
        assert!(e.contains("expected 5 fields"), "{e}");
        let e = parse_point_record("1 2 3 4 5 6", 2).unwrap_err().to_string();
        assert!(e.contains("extra"), "{e}");
        let e = parse_point_record("1 2 3 -4 5", 3).unwrap_err().to_string();
        assert!(e.contains("negative"), "{e}");
        assert!(parse_point_record("nan 2 3 4 5", 3).is_err());
        assert!(parse_point_record("1 2 3 4 99999999999", 3).is_err());
    }

    #[test]
    fn text_reader_skips_comments_and_counts_lines() {
        let src = "# header\n\n1 2 3 0 0\n  # indented comment\n1 2 3 0 x\n";
        let out: Vec<_> = XyzciReader::new(src.as_bytes()).collect();
        assert_eq!(out.len(), 2);
        assert!(out[0].is_ok());
        assert!(out[1].as_ref().unwrap_err().to_string().contains("line 5"));
    }

    #[test]
    fn two_point_instance() {
        let pts = vec![Ok(rec(0.0, 0.0, 0.0, 1, 7)), Ok(rec(2.0, 2.0, 2.0, 1, 7))];
        let s = stream_scene_stats(pts).unwrap();
        let st = s.instances[&7].stats;
        assert_eq!(st.count, 2);
        assert_eq!(st.sum, Vec3::new(2.0, 2.0, 2.0));
        assert_eq!(st.min, Vec3::new(0.0, 0.0, 0.0));
        assert_eq!(st.max, Vec3::new(2.0, 2.0, 2.0));
    }

    #[test]
    fn empty_source() {
        assert!(stream_scene_stats(std::iter::empty()).unwrap().is_empty());
    }

    #[test]
    fn class_conflict_is_reported() {
        let pts = vec![Ok(rec(0.0, 0.0, 0.0, 1, 7)), Ok(rec(2.0, 2.0, 2.0, 2, 7))];
        assert!(matches!(
            stream_scene_stats(pts),
            Err(IngestError::InconsistentClass { instance: 7, first: 1, second: 2 })
        ));
    }

    #[test]
    fn streaming_matches_naive_grouping() {
        let pts = random_points(10_000, 5, 1);
        let s = stream_scene_stats(pts.iter().copied().map(Ok)).unwrap();
        assert_eq!(as_sorted(&s), naive_grouping(&pts));
    }

    #[test]
    fn finalize_centroids_and_order() {
        let pts = vec![
            Ok(rec(0.0, 0.0, 0.0, 1, 9)),
            Ok(rec(2.0, 2.0, 2.0, 1, 9)),
            Ok(rec(5.0, -1.0, 3.0, 0, 2)),
        ];
        let s = stream_scene_stats(pts).unwrap();
        let cm = BTreeMap::from([(0, "vehicle".to_string()), (1, "building".to_string())]);
        let inst = finalize_instances(&s, &cm, |_, _| None).unwrap();
        assert_eq!(inst.iter().map(|i| i.id).collect::<Vec<_>>(), vec![2, 9]);
        assert_eq!(inst[1].centroid, Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(inst[0].centroid, Vec3::new(5.0, -1.0, 3.0));
        assert_eq!(inst[0].aabb.min, inst[0].aabb.max);
        assert_eq!(inst[0].category_label, "vehicle");
        let err = finalize_instances(&s, &BTreeMap::new(), |_, _| None).unwrap_err();
        assert!(matches!(err, IngestError::MissingClass(ref c) if c == &vec![0, 1]));
    }

    #[test]
    fn finalize_matches_recomputation() {
        let pts = random_points(5_000, 17, 3);
        let s = stream_scene_stats(pts.iter().copied().map(Ok)).unwrap();
        let cm = (0..3).map(|c| (c, format!("class{c}"))).collect();
        let inst = finalize_instances(&s, &cm, |_, _| None).unwrap();
        for i in inst {
            let mine: Vec<_> = pts.iter().filter(|p| p.instance_id == i.id).collect();
            let n = mine.len() as f64;
            let cx = mine.iter().map(|p| p.position.x).sum::<f64>() / n;
            let cy = mine.iter().map(|p| p.position.y).sum::<f64>() / n;
            let cz = mine.iter().map(|p| p.position.z).sum::<f64>() / n;
            assert!((i.centroid.x - cx).abs() <= 1e-9 * cx.abs().max(1.0));
            assert!((i.centroid.y - cy).abs() <= 1e-9 * cy.abs().max(1.0));
            assert!((i.centroid.z - cz).abs() <= 1e-9 * cz.abs().max(1.0));
        }
    }

    #[test]
    fn chunked_readers_agree_with_sequential() {
        let pts = random_points(300_000, 40, 5);
        let mut text = b"# generated\n".to_vec();
        write_xyzci(&pts, &mut text).unwrap();
        let mut bin = Vec::new();
        write_c3pc(&pts, &mut bin).unwrap();

        let seq = stream_scene_stats(XyzciReader::new(text.as_slice())).unwrap();
        let seq_bin = stream_scene_stats(C3pcReader::new(bin.as_slice())).unwrap();
        assert_eq!(as_sorted(&seq), naive_grouping(&pts));
        assert_eq!(as_sorted(&seq_bin), naive_grouping(&pts));
        for jobs in [1, 3, 8] {
            let t = ingest_reader(text.as_slice(), None, jobs).unwrap();
            let b = ingest_reader(bin.as_slice(), None, jobs).unwrap();
            // counts/min/max are exact; sums may differ only by summation order
            for (id, (c, n, sum, lo, hi)) in naive_grouping(&pts) {
                for s in [&t, &b] {
                    let v = s.instances[&id];
                    assert_eq!((v.class_id, v.stats.count, v.stats.min, v.stats.max), (c, n, lo, hi));
                    assert!((v.stats.sum.x - sum.x).abs() <= 1e-9 * sum.x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn chunked_reader_reports_global_line_numbers() {
        let mut text = String::new();
        for _ in 0..200_000 {
            text.push_str("1.25 2.5 3.75 0 1\n");
        }
        text.push_str("1 2 3 bad 1\n");
        let err = ingest_reader(text.as_bytes(), Some(PointFormat::Xyzci), 4).unwrap_err();
        assert!(err.to_string().contains("line 200001"), "{err}");
    }

    #[test]
    fn binary_errors() {
        let mut bin = Vec::new();
        write_c3pc(&[rec(1.0, 2.0, 3.0, 0, 0)], &mut bin).unwrap();
        bin.extend_from_slice(&[0u8; 5]);
        assert!(ingest_reader(bin.as_slice(), None, 2).unwrap_err().to_string().contains("truncated"));
        assert!(C3pcReader::new(bin.as_slice()).any(|r| r.is_err()));
        let mut bad = b"C3PC\0\0\0\x02".to_vec();
        bad.extend_from_slice(&[0u8; 32]);
        assert!(ingest_reader(bad.as_slice(), Some(PointFormat::C3pc), 1).is_err());
    }

    #[test]
    fn c3pc_layout_is_little_endian() {
        let mut bin = Vec::new();
        write_c3pc(&[rec(1.0, -2.0, 0.5, 3, 0x0102_0304)], &mut bin).unwrap();
        assert_eq!(&bin[..8], b"C3PC\0\0\0\x01");
        assert_eq!(bin.len(), 8 + 32);
        assert_eq!(&bin[8..16], &1.0f64.to_le_bytes());
        assert_eq!(&bin[32..36], &[3, 0, 0, 0]);
        assert_eq!(&bin[36..40], &[4, 3, 2, 1]);
    }

    fn sample_manifest(n: u32, seed: u64) -> SceneManifest {
        let mut pts = random_points(n as usize * 4, n, seed);
        for (k, p) in pts.iter_mut().enumerate() {
            p.instance_id = k as u32 % n;
            p.class_id = p.instance_id % 3;
        }
        let s = stream_scene_stats(pts.iter().copied().map(Ok)).unwrap();
        let class_map: BTreeMap<u32, String> = (0..3).map(|c| (c, format!("class {c}"))).collect();
        SceneManifest {
            city: "Qingdao".into(),
            scene_id: format!("scene-{seed}"),
            instances: finalize_instances(&s, &class_map, |id, c| {
                (id % 2 == 0).then(|| format!("{c} special"))
            })
            .unwrap(),
            class_map,
        }
    }

    #[test]
    fn manifest_round_trips() {
        for m in [SceneManifest::default(), sample_manifest(20, 1)] {
            let mut buf = Vec::new();
            write_manifest(&m, &mut buf).unwrap();
            assert_eq!(read_manifest(buf.as_slice()).unwrap(), m);
        }
        let m = sample_manifest(3, 2);
        let mut buf = Vec::new();
        write_manifest(&m, &mut buf).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap().city, "Qingdao");
    }

    #[test]
    fn large_manifest_writes_byte_stably() {
        let m = sample_manifest(1000, 9);
        assert_eq!(m.instances.len(), 1000);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_manifest(&m, &mut a).unwrap();
        write_manifest(&read_manifest(a.as_slice()).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_schema_errors_name_field() {
        let e = read_manifest(r#"{"city":"x","scene_id":"s","class_map":{}}"#.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("`instances`"), "{e}");
        let doc = r#"{"city":"x","scene_id":"s","class_map":{"0":"boat"},"instances":[
            {"id":1,"class_label":"car","category_label":"car","centroid":[0,0,0],
             "aabb":{"min":[0,0,0],"max":[0,0,0]},"point_count":1}]}"#;
        let e = read_manifest(doc.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("instances[0].class_label"), "{e}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn split_merge_equals_sequential(n in 0usize..3000, k in 1usize..9, seed in 0u64..1000) {
            // integer-valued coordinates keep every partial sum exact
            let pts: Vec<_> = random_points(n, 7, seed)
                .into_iter()
                .map(|mut p| {
                    p.position = Vec3::new(p.position.x.round(), p.position.y.round(), p.position.z.round());
                    p
                })
                .collect();
            let whole = stream_scene_stats(pts.iter().copied().map(Ok)).unwrap();
            let size = n / k + 1;
            let mut merged = SceneStats::default();
            for chunk in pts.chunks(size).rev() {
                merged.merge(stream_scene_stats(chunk.iter().copied().map(Ok)).unwrap()).unwrap();
            }
            proptest::prop_assert_eq!(as_sorted(&merged), as_sorted(&whole));
            proptest::prop_assert_eq!(as_sorted(&whole), naive_grouping(&pts));
        }
    }
}
