//! Scan, label, trajectory and label-map files.
//!
//! Binary layouts follow the SemanticKITTI conventions: `*.bin` holds
//! little-endian `f32` quadruples `(x, y, z, intensity)` and `*.label` holds one
//! little-endian `u32` per point whose low 16 bits are the class id.
//! Trajectories are KITTI odometry text files, one row-major 3×4 `[R|t]` per line.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{orthonormality_error, Mat3, Pose, Vec3};

pub const DEFAULT_MAX_RANGE: f64 = 120.0;
const POINT_RECORD_BYTES: usize = 16;
const LABEL_RECORD_BYTES: usize = 4;
/// Rotation blocks further than this from SO(3) are reported when read.
const ROTATION_WARN_TOL: f64 = 1e-3;
const ROTATION_FIX_TOL: f64 = 1e-9;

pub type ClassId = u16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: Vec3,
    pub label: ClassId,
}

impl LabeledPoint {
    pub fn new(position: Vec3, label: ClassId) -> Self {
        Self { position, label }
    }
}

/// One LiDAR sweep in its own sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub index: usize,
    pub points: Vec<LabeledPoint>,
    /// File record numbers that were dropped on read (non-finite or out of
    /// range). Kept so that label files can still be paired positionally.
    pub dropped_records: Vec<usize>,
}

impl Scan {
    pub fn new(index: usize, points: Vec<LabeledPoint>) -> Self {
        Self {
            index,
            points,
            dropped_records: Vec::new(),
        }
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    /// Number of records in the file the scan came from.
    pub fn record_count(&self) -> usize {
        self.points.len() + self.dropped_records.len()
    }
}

/// Indices of the points of one scan carrying a single class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLayer {
    pub label: ClassId,
    pub point_refs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEntry {
    pub id: ClassId,
    pub name: String,
    pub stable: bool,
}

/// Class names, ids and stability flags, plus the initial label set used by
/// adaptive selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    entries: Vec<LabelEntry>,
    initial: Vec<ClassId>,
}

/// SemanticKITTI classes. Dynamic and unlabeled classes are excluded.
const SEMANTIC_KITTI: &[(ClassId, &str, bool)] = &[
    (0, "unlabeled", false),
    (1, "outlier", false),
    (10, "car", true),
    (11, "bicycle", true),
    (13, "bus", true),
    (15, "motorcycle", true),
    (16, "on-rails", true),
    (18, "truck", true),
    (20, "other-vehicle", true),
    (30, "person", false),
    (31, "bicyclist", false),
    (32, "motorcyclist", false),
    (40, "road", true),
    (44, "parking", true),
    (48, "sidewalk", true),
    (49, "other-ground", true),
    (50, "building", true),
    (51, "fence", true),
    (52, "other-structure", true),
    (60, "lane-marking", true),
    (70, "vegetation", true),
    (71, "trunk", true),
    (72, "terrain", true),
    (80, "pole", true),
    (81, "traffic-sign", true),
    (99, "other-object", true),
    (252, "moving-car", false),
    (253, "moving-bicyclist", false),
    (254, "moving-person", false),
    (255, "moving-motorcyclist", false),
    (256, "moving-on-rails", false),
    (257, "moving-bus", false),
    (258, "moving-truck", false),
    (259, "moving-other-vehicle", false),
];

pub const DEFAULT_INITIAL_LABELS: &[&str] = &["car", "road", "pole", "lane-marking", "trunk"];

impl LabelMap {
    pub fn new(entries: Vec<LabelEntry>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for e in &entries {
            if !ids.insert(e.id) {
                return Err(Error::Config(format!("duplicate class id {}", e.id)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name {:?}", e.name)));
            }
        }
        Ok(Self {
            entries,
            initial: Vec::new(),
        })
    }

    /// The SemanticKITTI label set with the default initial labels.
    pub fn semantic_kitti() -> Self {
        let entries = SEMANTIC_KITTI
            .iter()
            .map(|&(id, name, stable)| LabelEntry {
                id,
                name: name.to_string(),
                stable,
            })
            .collect();
        Self::new(entries)
            .and_then(|m| m.with_initial(DEFAULT_INITIAL_LABELS))
            .expect("built-in label map is consistent")
    }

    /// Parses `id name stable|excluded` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let [id, name, flag] = tokens[..] else {
                return Err(Error::Config(format!(
                    "label map line {}: expected `id name stable|excluded`, got {} tokens",
                    lineno + 1,
                    tokens.len()
                )));
            };
            let id: ClassId = id.parse().map_err(|_| {
                Error::Config(format!("label map line {}: bad class id {id:?}", lineno + 1))
            })?;
            let stable = match flag {
                "stable" => true,
                "excluded" => false,
                other => {
                    return Err(Error::Config(format!(
                        "label map line {}: unknown flag {other:?}",
                        lineno + 1
                    )))
                }
            };
            entries.push(LabelEntry {
                id,
                name: name.to_string(),
                stable,
            });
        }
        Self::new(entries)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# id name stable|excluded\n");
        for e in &self.entries {
            let flag = if e.stable { "stable" } else { "excluded" };
            out.push_str(&format!("{} {} {}\n", e.id, e.name, flag));
        }
        out
    }

    /// Sets the initial label set by name. Every name must exist in the map.
    pub fn with_initial<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        let mut initial = Vec::with_capacity(names.len());
        for n in names {
            let id = self.id_of(n.as_ref()).ok_or_else(|| {
                Error::Config(format!("initial label {:?} not in label map", n.as_ref()))
            })?;
            if !initial.contains(&id) {
                initial.push(id);
            }
        }
        self.initial = initial;
        Ok(self)
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn initial(&self) -> &[ClassId] {
        &self.initial
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }

    pub fn name_of(&self, id: ClassId) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.name.as_str())
    }

    /// True when the class is known and not excluded.
    pub fn is_usable(&self, id: ClassId) -> bool {
        self.entries.iter().any(|e| e.id == id && e.stable)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a scan with the default 120 m range limit.
pub fn read_scan(path: &Path) -> Result<Scan> {
    read_scan_with_range(path, DEFAULT_MAX_RANGE)
}

/// Reads a `*.bin` scan. Records with non-finite coordinates or beyond
/// `max_range` are skipped and listed in [`Scan::dropped_records`].
pub fn read_scan_with_range(path: &Path, max_range: f64) -> Result<Scan> {
    let bytes = read_bytes(path)?;
    let scan = parse_scan(&bytes, max_range).map_err(|m| Error::format(path, m))?;
    if !scan.dropped_records.is_empty() {
        warn!(
            "{}: skipped {} invalid or out-of-range records",
            path.display(),
            scan.dropped_records.len()
        );
    }
    Ok(scan)
}

pub fn parse_scan(bytes: &[u8], max_range: f64) -> std::result::Result<Scan, String> {
    if !bytes.len().is_multiple_of(POINT_RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % POINT_RECORD_BYTES;
        return Err(format!(
            "truncated point record at byte offset {offset} (file length {})",
            bytes.len()
        ));
    }
    let mut scan = Scan::default();
    for (record, chunk) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |i: usize| {
            f32::from_le_bytes([chunk[4 * i], chunk[4 * i + 1], chunk[4 * i + 2], chunk[4 * i + 3]])
        };
        let p = Vec3::new(f(0) as f64, f(1) as f64, f(2) as f64);
        if p.iter().all(|v| v.is_finite()) && p.norm() <= max_range {
            scan.points.push(LabeledPoint::new(p, 0));
        } else {
            scan.dropped_records.push(record);
        }
    }
    Ok(scan)
}

pub fn write_scan(path: &Path, scan: &Scan) -> Result<()> {
    let mut bytes = Vec::with_capacity(scan.points.len() * POINT_RECORD_BYTES);
    for p in &scan.points {
        for v in [p.position.x as f32, p.position.y as f32, p.position.z as f32, 0.0f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Attaches labels from a `*.label` file to a scan read from the paired `*.bin`.
pub fn read_labels(path: &Path, scan: Scan) -> Result<Scan> {
    let bytes = read_bytes(path)?;
    attach_labels(&bytes, scan).map_err(|m| Error::format(path, m))
}

pub fn attach_labels(bytes: &[u8], mut scan: Scan) -> std::result::Result<Scan, String> {
    let expected = scan.record_count();
    if bytes.len() != expected * LABEL_RECORD_BYTES {
        return Err(format!(
            "label count mismatch: file holds {} bytes ({} labels), scan has {} records",
            bytes.len(),
            bytes.len() as f64 / LABEL_RECORD_BYTES as f64,
            expected
        ));
    }
    let mut dropped = scan.dropped_records.iter().peekable();
    let mut points = scan.points.iter_mut();
    for (record, chunk) in bytes.chunks_exact(LABEL_RECORD_BYTES).enumerate() {
        if dropped.peek() == Some(&&record) {
            dropped.next();
            continue;
        }
        let raw = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if let Some(p) = points.next() {
            p.label = class_of(raw);
        }
    }
    Ok(scan)
}

/// Class id of a raw SemanticKITTI label (instance id in the upper half discarded).
pub fn class_of(raw: u32) -> ClassId {
    (raw & 0xFFFF) as ClassId
}

pub fn write_labels(path: &Path, scan: &Scan) -> Result<()> {
    let bytes: Vec<u8> = scan
        .points
        .iter()
        .flat_map(|p| (p.label as u32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text).map_err(|m| Error::format(path, m))
}

pub fn parse_poses(text: &str) -> std::result::Result<Vec<Pose>, String> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if values.len() != 12 {
            return Err(format!(
                "line {}: expected 12 values, found {}",
                lineno + 1,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format!("line {}: non-finite value", lineno + 1));
        }
        let r = Mat3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let t = Vec3::new(values[3], values[7], values[11]);
        let deviation = orthonormality_error(&r);
        if deviation > ROTATION_WARN_TOL {
            warn!(
                "line {}: rotation deviates from SO(3) by {deviation:.3e}; re-orthonormalized",
                lineno + 1
            );
        }
        let pose = if deviation > ROTATION_FIX_TOL {
            Pose::from_parts_orthonormalized(r, t)
        } else {
            Pose::new(r, t).map_err(|e| format!("line {}: {e}", lineno + 1))?
        };
        poses.push(pose);
    }
    Ok(poses)
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::with_capacity(poses.len() * 12 * 24);
    for p in poses {
        let row = p.to_row_major_3x4();
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(format_poses(poses).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Partitions the usable points of a scan by class, ordered by class id.
/// Points of excluded or unknown classes land in no layer.
pub fn split_layers(scan: &Scan, map: &LabelMap) -> Vec<SemanticLayer> {
    let mut layers: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, p) in scan.points.iter().enumerate() {
        if map.is_usable(p.label) {
            layers.entry(p.label).or_default().push(i);
        }
    }
    layers
        .into_iter()
        .map(|(label, point_refs)| SemanticLayer { label, point_refs })
        .collect()
}
