//! Sliding-window refinement over a keyframed trajectory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde_json::{json, Value};

use crate::cloud_io::{read_labels, read_scan_with_range, ClassId, LabelMap, Scan, DEFAULT_MAX_RANGE};
use crate::degeneracy::{adaptive_select, SelectionAttempt, SelectionConfig};
use crate::em_solver::{ecm_iterate, EcmConfig, IterationRecord};
use crate::error::{Error, Result};
use crate::eval::{ate_rmse, Alignment};
use crate::geometry::Pose;
use crate::gmm_map::{init_from_voxels, VoxelSizes};

#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    pub window_size: usize,
    /// Keyframe translation gate in meters.
    pub kf_trans: f64,
    /// Keyframe rotation gate in radians.
    pub kf_rot: f64,
    pub stride: usize,
    pub ecm: EcmConfig,
    pub kappa_thd: f64,
    pub n_c: usize,
    pub voxel_ground: f64,
    pub voxel_other: f64,
    pub rng_seed: u64,
    pub max_range: f64,
    /// Overrides the label map's initial class set when present.
    pub initial_labels: Option<Vec<String>>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            kf_trans: 0.5,
            kf_rot: 5f64.to_radians(),
            stride: 10,
            ecm: EcmConfig::default(),
            kappa_thd: 100.0,
            n_c: 6,
            voxel_ground: 6.0,
            voxel_other: 3.0,
            rng_seed: 0,
            max_range: DEFAULT_MAX_RANGE,
            initial_labels: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {value:?} for {key}")))
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be at least 2".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if !(self.kf_trans > 0.0) || !(self.kf_rot > 0.0) {
            return Err(Error::Config("keyframe gates must be positive".into()));
        }
        if !(self.kappa_thd > 1.0) {
            return Err(Error::Config("kappa_thd must exceed 1".into()));
        }
        if !(self.voxel_ground > 0.0) || !(self.voxel_other > 0.0) {
            return Err(Error::Config("voxel sizes must be positive".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        self.ecm.validate()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// every key is optional. Setting `window_size` without `stride` keeps
    /// the windows non-overlapping.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut stride_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "window_size" => cfg.window_size = parse_value(key, value, line)?,
                "stride" => {
                    cfg.stride = parse_value(key, value, line)?;
                    stride_set = true;
                }
                "kf_trans" => cfg.kf_trans = parse_value(key, value, line)?,
                "kf_rot_deg" => cfg.kf_rot = parse_value::<f64>(key, value, line)?.to_radians(),
                "kappa_thd" => cfg.kappa_thd = parse_value(key, value, line)?,
                "n_c" => cfg.n_c = parse_value(key, value, line)?,
                "voxel_ground" => cfg.voxel_ground = parse_value(key, value, line)?,
                "voxel_other" => cfg.voxel_other = parse_value(key, value, line)?,
                "rng_seed" => cfg.rng_seed = parse_value(key, value, line)?,
                "max_range" => cfg.max_range = parse_value(key, value, line)?,
                "initial_labels" => {
                    cfg.initial_labels = Some(
                        value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect(),
                    )
                }
                "max_ecm_iters" => cfg.ecm.max_ecm_iters = parse_value(key, value, line)?,
                "pose_tol" => cfg.ecm.pose_tol = parse_value(key, value, line)?,
                "gate_radius_sigma" => cfg.ecm.gate_radius_sigma = parse_value(key, value, line)?,
                "inner_gn_iters" => cfg.ecm.inner_gn_iters = parse_value(key, value, line)?,
                "eps_reg" => cfg.ecm.gmm.eps_reg = parse_value(key, value, line)?,
                "min_points_per_voxel" => {
                    cfg.ecm.gmm.min_points_per_voxel = parse_value(key, value, line)?
                }
                "mass_floor" => cfg.ecm.gmm.mass_floor = parse_value(key, value, line)?,
                other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
            }
        }
        if !stride_set {
            cfg.stride = cfg.window_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn voxel_sizes(&self, map: &LabelMap) -> VoxelSizes {
        VoxelSizes::with_ground(map, self.voxel_ground, self.voxel_other)
    }

    fn label_map(&self, map: &LabelMap) -> Result<LabelMap> {
        match &self.initial_labels {
            Some(names) => map.clone().with_initial(names),
            None => Ok(map.clone()),
        }
    }
}

/// Greedy keyframe choice: index 0, then every pose that moved at least one
/// gate away from the last keyframe.
pub fn select_keyframes(poses: &[Pose], cfg: &WindowConfig) -> Vec<usize> {
    let mut out = Vec::new();
    let Some(first) = poses.first() else { return out };
    out.push(0);
    let mut last = *first;
    for (k, p) in poses.iter().enumerate().skip(1) {
        let rel = last.inverse().compose(p);
        let trans = rel.translation().norm();
        let rot = crate::geometry::so3_log(rel.rotation()).norm();
        if trans >= cfg.kf_trans || rot >= cfg.kf_rot {
            out.push(k);
            last = *p;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Refined,
    DegenerateUnchanged { cause: String },
}

impl Verdict {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Self::DegenerateUnchanged { .. })
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Refined => f.write_str("refined"),
            Self::DegenerateUnchanged { .. } => f.write_str("degenerate-unchanged"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WindowResult {
    pub poses: Vec<Pose>,
    pub verdict: Verdict,
    pub active_labels: Vec<ClassId>,
    /// κ at the priors for the final selected class set.
    pub kappa: f64,
    pub selection_trace: Vec<SelectionAttempt>,
    pub ecm_trace: Vec<IterationRecord>,
    pub converged: bool,
}

impl WindowResult {
    fn unchanged(priors: &[Pose], cause: String) -> Self {
        warn!("window left unchanged: {cause}");
        Self {
            poses: priors.to_vec(),
            verdict: Verdict::DegenerateUnchanged { cause },
            active_labels: Vec::new(),
            kappa: f64::INFINITY,
            selection_trace: Vec::new(),
            ecm_trace: Vec::new(),
            converged: false,
        }
    }
}

/// One window: map initialization at the priors, adaptive class selection,
/// then ECM on the selected classes. Degenerate or numerically failed
/// windows return the priors untouched.
pub fn run_window(
    scans: &[Scan],
    priors: &[Pose],
    map: &LabelMap,
    cfg: &WindowConfig,
) -> Result<WindowResult> {
    if scans.len() != priors.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} prior poses",
            scans.len(),
            priors.len()
        )));
    }
    if scans.len() < 2 {
        return Err(Error::InvalidInput("a window needs at least 2 scans".into()));
    }
    cfg.validate()?;
    let map = cfg.label_map(map)?;
    let model = match init_from_voxels(scans, priors, &map, &cfg.voxel_sizes(&map), &cfg.ecm.gmm) {
        Ok(m) => m,
        Err(Error::Initialization(msg)) => return Ok(WindowResult::unchanged(priors, msg)),
        Err(e) => return Err(e),
    };
    let sel_cfg = SelectionConfig {
        kappa_thd: cfg.kappa_thd,
        n_c: cfg.n_c,
        rng_seed: cfg.rng_seed,
    };
    let selection = adaptive_select(scans, priors, &model, &map, &cfg.ecm, &sel_cfg)?;
    if selection.is_degenerate() {
        let mut out = WindowResult::unchanged(
            priors,
            format!("condition number {:e} at or above threshold", selection.state.kappa),
        );
        out.active_labels = selection.state.active;
        out.kappa = selection.state.kappa;
        out.selection_trace = selection.trace;
        return Ok(out);
    }
    let active = selection.state.active.clone();
    let ecm = match ecm_iterate(scans, priors, &model, &cfg.ecm, &active) {
        Ok(o) => o,
        Err(e @ (Error::DegenerateSolve { .. } | Error::EmptySystem | Error::InvalidInput(_))) => {
            let mut out = WindowResult::unchanged(priors, format!("numerical failure: {e}"));
            out.active_labels = active;
            out.kappa = selection.state.kappa;
            out.selection_trace = selection.trace;
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    if ecm.poses.iter().any(|p| {
        !p.translation().iter().all(|v| v.is_finite()) || !p.rotation().iter().all(|v| v.is_finite())
    }) {
        let mut out = WindowResult::unchanged(priors, "non-finite pose estimate".into());
        out.selection_trace = selection.trace;
        return Ok(out);
    }
    Ok(WindowResult {
        poses: ecm.poses,
        verdict: Verdict::Refined,
        active_labels: active,
        kappa: selection.state.kappa,
        selection_trace: selection.trace,
        ecm_trace: ecm.trace,
        converged: ecm.converged,
    })
}

/// Keyframe-index ranges of each window; a trailing window with fewer than
/// two frames is dropped.
pub fn window_ranges(n_keyframes: usize, window_size: usize, stride: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_keyframes {
        let end = (start + window_size).min(n_keyframes);
        if end - start >= 2 {
            out.push(start..end);
        }
        if end == n_keyframes {
            break;
        }
        start += stride;
    }
    out
}

#[derive(Debug, Clone)]
pub struct WindowSummary {
    pub index: usize,
    /// Trajectory indices of the window's keyframes.
    pub frames: Vec<usize>,
    pub result: WindowResult,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub poses: Vec<Pose>,
    pub keyframes: Vec<usize>,
    pub windows: Vec<WindowSummary>,
}

impl SequenceOutput {
    pub fn n_degenerate(&self) -> usize {
        self.windows
            .iter()
            .filter(|w| w.result.verdict.is_degenerate())
            .count()
    }

    /// Versioned JSON report. `truth` adds the rigid-aligned ATE of the output
    /// trajectory; wall-clock fields appear only with `timing`, so reports of
    /// identical runs are byte-identical by default.
    pub fn report(&self, truth: Option<&[Pose]>, timing: bool) -> Result<Value> {
        let ate = match truth {
            Some(t) => Some(ate_rmse(&self.poses, t, Alignment::Rigid)?.rmse),
            None => None,
        };
        let per_window: Vec<Value> = self
            .windows
            .iter()
            .map(|w| {
                let r = &w.result;
                let mut v = json!({
                    "index": w.index,
                    "first_frame": w.frames.first(),
                    "last_frame": w.frames.last(),
                    "n_keyframes": w.frames.len(),
                    "verdict": r.verdict.to_string(),
                    "active_labels": r.active_labels,
                    "kappa": if r.kappa.is_finite() { json!(r.kappa) } else { Value::Null },
                    "selection_attempts": r.selection_trace.len(),
                    "ecm_iterations": r.ecm_trace.len(),
                    "converged": r.converged,
                    "final_objective": r.ecm_trace.last().map(|t| t.objective),
                });
                if let Verdict::DegenerateUnchanged { cause } = &r.verdict {
                    v["cause"] = json!(cause);
                }
                if timing {
                    v["elapsed_s"] = json!(w.elapsed_s);
                }
                v
            })
            .collect();
        Ok(json!({
            "schema": 1,
            "ate_rmse": ate,
            "n_frames": self.poses.len(),
            "n_keyframes": self.keyframes.len(),
            "n_windows": self.windows.len(),
            "n_degenerate": self.n_degenerate(),
            "per_window": per_window,
        }))
    }
}

/// Refines an in-memory sequence. Windows run in order; each uses the
/// current trajectory as priors, so overlapping strides see earlier output.
/// Non-keyframes follow their nearest preceding keyframe with the prior
/// relative transform kept.
pub fn refine_sequence(
    scans: &[Scan],
    priors: &[Pose],
    map: &LabelMap,
    cfg: &WindowConfig,
) -> Result<SequenceOutput> {
    if scans.len() != priors.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} prior poses",
            scans.len(),
            priors.len()
        )));
    }
    cfg.validate()?;
    let keyframes = select_keyframes(priors, cfg);
    let mut current = priors.to_vec();
    let mut windows = Vec::new();
    for (index, range) in window_ranges(keyframes.len(), cfg.window_size, cfg.stride)
        .into_iter()
        .enumerate()
    {
        let frames: Vec<usize> = keyframes[range].to_vec();
        let w_scans: Vec<Scan> = frames.iter().map(|&k| scans[k].clone()).collect();
        let w_priors: Vec<Pose> = frames.iter().map(|&k| current[k]).collect();
        let mut w_cfg = cfg.clone();
        w_cfg.rng_seed = cfg.rng_seed.wrapping_add(index as u64);
        let start = Instant::now();
        let result = run_window(&w_scans, &w_priors, map, &w_cfg)?;
        let elapsed_s = start.elapsed().as_secs_f64();
        info!(
            "window {index} (frames {}..={}): {}",
            frames[0],
            frames[frames.len() - 1],
            result.verdict
        );
        for (&k, p) in frames.iter().zip(&result.poses) {
            current[k] = *p;
        }
        windows.push(WindowSummary {
            index,
            frames,
            result,
            elapsed_s,
        });
    }
    let mut anchor = 0;
    let mut kf_iter = keyframes.iter().peekable();
    for m in 0..current.len() {
        if kf_iter.peek() == Some(&&m) {
            anchor = m;
            kf_iter.next();
            continue;
        }
        // An untouched anchor leaves its followers bit-identical to the priors.
        if current[anchor] == priors[anchor] {
            continue;
        }
        let rel = priors[anchor].inverse().compose(&priors[m]);
        current[m] = current[anchor].compose(&rel);
    }
    Ok(SequenceOutput {
        poses: current,
        keyframes,
        windows,
    })
}

/// Loads every scan/label pair and the priors, then refines. Any unreadable
/// file fails before the first window runs.
pub fn run_sequence(
    scan_paths: &[PathBuf],
    label_paths: &[PathBuf],
    priors_path: &Path,
    map: &LabelMap,
    cfg: &WindowConfig,
) -> Result<SequenceOutput> {
    if scan_paths.len() != label_paths.len() {
        return Err(Error::InvalidInput(format!(
            "{} scan files but {} label files",
            scan_paths.len(),
            label_paths.len()
        )));
    }
    let priors = crate::cloud_io::read_poses(priors_path)?;
    if priors.len() != scan_paths.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} poses in {}",
            scan_paths.len(),
            priors.len(),
            priors_path.display()
        )));
    }
    let mut scans = Vec::with_capacity(scan_paths.len());
    for (k, (sp, lp)) in scan_paths.iter().zip(label_paths).enumerate() {
        let mut scan = read_scan_with_range(sp, cfg.max_range)?;
        scan.index = k;
        scans.push(read_labels(lp, scan)?);
    }
    refine_sequence(&scans, &priors, map, cfg)
}
