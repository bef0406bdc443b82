//! Expectation–conditional-maximization over a window of scans.
//!
//! One iteration is: soft association of every point with the same-class
//! landmarks near it ([`e_step`]), collapse of each scan's points into one
//! virtual measurement per landmark ([`reduce_virtual`]), a weighted
//! Gauss–Newton pose step against the fixed landmarks ([`m_step_poses`]), and a
//! landmark re-fit at the new poses ([`crate::gmm_map::update_landmarks`]).
//! The first pose of the window is the gauge anchor and is never moved.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3x6, SymmetricEigen};

use crate::cloud_io::{ClassId, Scan};
use crate::error::{Error, Result};
use crate::geometry::{mahalanobis_sq_unchecked, skew, Mat3, Pose, Twist, Vec3};
use crate::gmm_map::{cell_of, update_landmarks, GmmParams, SemanticGmm};

/// Ratio `λ_min / λ_max` of the normal matrix below which the pose step is
/// declared rank deficient.
const RANK_TOL: f64 = 1e-12;
/// Virtual measurements lighter than this are dropped.
const BETA_MIN: f64 = 1e-9;
const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EcmConfig {
    pub max_ecm_iters: usize,
    /// Convergence threshold on the largest per-pose update (twist norm).
    pub pose_tol: f64,
    /// Association gate, in Mahalanobis standard deviations.
    pub gate_radius_sigma: f64,
    pub inner_gn_iters: usize,
    pub gmm: GmmParams,
}

impl Default for EcmConfig {
    fn default() -> Self {
        Self {
            max_ecm_iters: 30,
            pose_tol: 1e-5,
            gate_radius_sigma: 3.0,
            inner_gn_iters: 10,
            gmm: GmmParams::default(),
        }
    }
}

impl EcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ecm_iters == 0
            || self.inner_gn_iters == 0
            || self.pose_tol.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || self.gate_radius_sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return Err(Error::Config(
                "ECM iteration counts, pose_tol and gate_radius_sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sparse posterior association weights, one candidate list per point.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityTable {
    scans: Vec<ScanResponsibilities>,
    gate_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct ScanResponsibilities {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl ScanResponsibilities {
    fn push_point(&mut self, cands: &[(u32, f64)]) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.entries.extend_from_slice(cands);
        self.offsets.push(self.entries.len());
    }
}

impl ResponsibilityTable {
    /// `rows[k][i]` lists `(landmark, α)` for point `i` of scan `k`.
    pub fn from_candidates(rows: Vec<Vec<Vec<(u32, f64)>>>, gate_radius: f64) -> Self {
        let scans = rows
            .into_iter()
            .map(|points| {
                let mut s = ScanResponsibilities {
                    offsets: vec![0],
                    entries: Vec::new(),
                };
                for c in points {
                    s.push_point(&c);
                }
                s
            })
            .collect();
        Self { scans, gate_radius }
    }

    pub fn scan_count(&self) -> usize {
        self.scans.len()
    }

    pub fn point_count(&self, k: usize) -> usize {
        self.scans[k].offsets.len().saturating_sub(1)
    }

    pub fn candidates(&self, k: usize, i: usize) -> &[(u32, f64)] {
        let s = &self.scans[k];
        &s.entries[s.offsets[i]..s.offsets[i + 1]]
    }

    pub fn gate_radius(&self) -> f64 {
        self.gate_radius
    }

    /// Points of scan `k` with at least one candidate.
    pub fn gated_points(&self, k: usize) -> usize {
        let s = &self.scans[k];
        s.offsets.windows(2).filter(|w| w[1] > w[0]).count()
    }
}

/// Dense grid of component gate spheres for one class.
struct LayerGrid {
    size: f64,
    origin: [i64; 3],
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl LayerGrid {
    fn slot(&self, cell: [i64; 3]) -> Option<usize> {
        let mut idx = 0;
        for a in 0..3 {
            let d = cell[a] - self.origin[a];
            if d < 0 || d as usize >= self.dims[a] {
                return None;
            }
            idx = idx * self.dims[a] + d as usize;
        }
        Some(idx)
    }
}

/// Per-class spatial index of component gate spheres.
struct GateIndex {
    layers: BTreeMap<ClassId, LayerGrid>,
    /// `ln π_j − ½ ln|Σ_j|` per component.
    log_coeff: Vec<f64>,
}

impl GateIndex {
    fn build(model: &SemanticGmm, n_sigma: f64) -> Self {
        let mut layers = BTreeMap::new();
        for label in model.labels() {
            let size = model.voxel_sizes().size_of(label);
            let spans: Vec<(u32, [i64; 3], [i64; 3])> = model
                .layer_range(label)
                .expect("layer exists")
                .map(|j| {
                    let c = model.component(j);
                    let r = c.bounding_radius(n_sigma) * (1.0 + 1e-9) + 1e-12;
                    let lo = cell_of(&(c.mean() - Vec3::repeat(r)), size);
                    let hi = cell_of(&(c.mean() + Vec3::repeat(r)), size);
                    (j as u32, lo, hi)
                })
                .collect();
            let mut origin = [i64::MAX; 3];
            let mut top = [i64::MIN; 3];
            for (_, lo, hi) in &spans {
                for a in 0..3 {
                    origin[a] = origin[a].min(lo[a]);
                    top[a] = top[a].max(hi[a]);
                }
            }
            let dims = [0, 1, 2].map(|a| (top[a] - origin[a] + 1) as usize);
            let mut grid = LayerGrid {
                size,
                origin,
                dims,
                cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
            };
            for (j, lo, hi) in spans {
                for x in lo[0]..=hi[0] {
                    for y in lo[1]..=hi[1] {
                        for z in lo[2]..=hi[2] {
                            let slot = grid.slot([x, y, z]).expect("inside bounds");
                            grid.cells[slot].push(j);
                        }
                    }
                }
            }
            layers.insert(label, grid);
        }
        let log_coeff = model
            .components()
            .iter()
            .map(|c| c.weight().ln() - 0.5 * c.log_det())
            .collect();
        Self { layers, log_coeff }
    }

    fn lookup(&self, label: ClassId, x: &Vec3) -> &[u32] {
        let Some(grid) = self.layers.get(&label) else {
            return &[];
        };
        match grid.slot(cell_of(x, grid.size)) {
            Some(slot) => &grid.cells[slot],
            None => &[],
        }
    }
}

/// Posterior association weights of a single global-frame point among the
/// same-class components within the gate.
fn associate(
    model: &SemanticGmm,
    index: &GateIndex,
    label: ClassId,
    x: &Vec3,
    gate_sq: f64,
    out: &mut Vec<(u32, f64)>,
) {
    out.clear();
    for &j in index.lookup(label, x) {
        let c = model.component(j as usize);
        let m = mahalanobis_sq_unchecked(x, c.mean(), c.information());
        if m <= gate_sq {
            // log of π·|Σ|^{-1/2}·exp(−m/2); the (2π)^{-3/2} factor cancels.
            out.push((j, index.log_coeff[j as usize] - 0.5 * m));
        }
    }
    if out.is_empty() {
        return;
    }
    let peak = out.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for e in out.iter_mut() {
        e.1 = (e.1 - peak).exp();
        total += e.1;
    }
    for e in out.iter_mut() {
        e.1 /= total;
    }
}

/// Expectation step: responsibilities at the given poses. Points whose class
/// has no layer in `model`, or with no component inside the gate, get an
/// empty candidate list.
pub fn e_step(
    scans: &[Scan],
    poses: &[Pose],
    model: &SemanticGmm,
    cfg: &EcmConfig,
) -> ResponsibilityTable {
    let index = GateIndex::build(model, cfg.gate_radius_sigma);
    let gate_sq = cfg.gate_radius_sigma * cfg.gate_radius_sigma;
    let mut buf = Vec::new();
    let scans = scans
        .iter()
        .zip(poses)
        .map(|(scan, pose)| {
            let mut s = ScanResponsibilities {
                offsets: Vec::with_capacity(scan.points.len() + 1),
                entries: Vec::new(),
            };
            s.offsets.push(0);
            for p in &scan.points {
                if model.has_layer(p.label) {
                    associate(model, &index, p.label, &pose.apply(&p.position), gate_sq, &mut buf);
                } else {
                    buf.clear();
                }
                s.push_point(&buf);
            }
            s
        })
        .collect();
    ResponsibilityTable {
        scans,
        gate_radius: cfg.gate_radius_sigma,
    }
}

/// Responsibility-weighted centroid of one scan's points for one landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualMeasurement {
    pub scan: usize,
    pub landmark: usize,
    /// Centroid in the scan's own frame.
    pub w: Vec3,
    /// Total responsibility mass.
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VirtualMeasurementSet {
    /// Sorted by `(scan, landmark)`.
    pub items: Vec<VirtualMeasurement>,
}

impl VirtualMeasurementSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn mass_of_scan(&self, k: usize) -> f64 {
        self.items.iter().filter(|v| v.scan == k).map(|v| v.beta).sum()
    }
}

pub fn reduce_virtual(table: &ResponsibilityTable, scans: &[Scan]) -> VirtualMeasurementSet {
    let mut items = Vec::new();
    for (k, scan) in scans.iter().enumerate().take(table.scan_count()) {
        let rows = &table.scans[k];
        let n_landmarks = rows.entries.iter().map(|e| e.0 as usize + 1).max().unwrap_or(0);
        let mut acc = vec![(Vec3::zeros(), 0.0); n_landmarks];
        for (i, p) in scan.points.iter().enumerate() {
            for &(j, a) in table.candidates(k, i) {
                let e = &mut acc[j as usize];
                e.0 += a * p.position;
                e.1 += a;
            }
        }
        items.extend(
            acc.into_iter()
                .enumerate()
                .filter(|(_, (_, b))| *b >= BETA_MIN)
                .map(|(j, (sum, beta))| VirtualMeasurement {
                    scan: k,
                    landmark: j,
                    w: sum / beta,
                    beta,
                }),
        );
    }
    VirtualMeasurementSet { items }
}

/// `Σ α (‖T z − μ‖²_Σ + log|Σ|)` over every associated point.
pub fn objective(
    scans: &[Scan],
    poses: &[Pose],
    model: &SemanticGmm,
    table: &ResponsibilityTable,
) -> f64 {
    let mut total = 0.0;
    for (k, (scan, pose)) in scans.iter().zip(poses).enumerate() {
        for (i, p) in scan.points.iter().enumerate() {
            let cands = table.candidates(k, i);
            if cands.is_empty() {
                continue;
            }
            let x = pose.apply(&p.position);
            for &(j, a) in cands {
                let c = model.component(j as usize);
                total += a * (mahalanobis_sq_unchecked(&x, c.mean(), c.information()) + c.log_det());
            }
        }
    }
    total
}

/// `Σ β ‖T w − μ‖²_Σ` over the virtual measurements.
pub fn reduced_objective(vms: &VirtualMeasurementSet, poses: &[Pose], model: &SemanticGmm) -> f64 {
    vms.items
        .iter()
        .map(|v| {
            let c = model.component(v.landmark);
            v.beta * mahalanobis_sq_unchecked(&poses[v.scan].apply(&v.w), c.mean(), c.information())
        })
        .sum()
}

/// Symmetric square root of an SPD information matrix, `Σ^{-1/2}`.
pub(crate) fn whitener(information: &Mat3) -> Mat3 {
    let eig = SymmetricEigen::new(*information);
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * Mat3::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Whitened residual `√β·Σ^{-1/2}(R w + p − μ)` and its 3×6 Jacobian with
/// respect to `(δr, δp)` under [`Pose::retract`].
pub(crate) fn whitened_block(
    pose: &Pose,
    w: &Vec3,
    mean: &Vec3,
    sqrt_info: &Mat3,
    beta: f64,
) -> (Vec3, Matrix3x6<f64>) {
    let s = sqrt_info * beta.sqrt();
    let rw = pose.rotation() * w;
    let r = s * (rw + pose.translation() - mean);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(s * -skew(&rw)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&s);
    (r, j)
}

/// Column offset of each free pose, `None` for fixed poses.
pub(crate) fn free_columns(free_mask: &[bool]) -> (Vec<Option<usize>>, usize) {
    let mut n = 0;
    let cols = free_mask
        .iter()
        .map(|&f| {
            if f {
                n += 1;
                Some((n - 1) * 6)
            } else {
                None
            }
        })
        .collect();
    (cols, n * 6)
}

fn gauge_mask(n: usize) -> Vec<bool> {
    (0..n).map(|k| k != 0).collect()
}

/// Conditional pose step: Gauss–Newton on the virtual-measurement objective
/// with the landmarks held fixed. Pose 0 stays at its prior.
pub fn m_step_poses(
    vms: &VirtualMeasurementSet,
    model: &SemanticGmm,
    priors: &[Pose],
    cfg: &EcmConfig,
) -> Result<Vec<Pose>> {
    let free = gauge_mask(priors.len());
    let (cols, n_cols) = free_columns(&free);
    if n_cols == 0 {
        return Ok(priors.to_vec());
    }
    let whiteners: HashMap<usize, Mat3> = vms
        .items
        .iter()
        .map(|v| v.landmark)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|j| (j, whitener(model.component(j).information())))
        .collect();

    let mut poses = priors.to_vec();
    let mut cost = reduced_objective(vms, &poses, model);
    for _ in 0..cfg.inner_gn_iters {
        let mut normal = DMatrix::<f64>::zeros(n_cols, n_cols);
        let mut rhs = DVector::<f64>::zeros(n_cols);
        for v in &vms.items {
            let Some(c0) = cols[v.scan] else { continue };
            let comp = model.component(v.landmark);
            let (r, j) = whitened_block(&poses[v.scan], &v.w, comp.mean(), &whiteners[&v.landmark], v.beta);
            let jtj = j.transpose() * j;
            let jtr = j.transpose() * r;
            let mut blk = normal.view_mut((c0, c0), (6, 6));
            blk += jtj;
            let mut seg = rhs.rows_mut(c0, 6);
            seg -= jtr;
        }
        let eig = SymmetricEigen::new(normal);
        let l_max = eig.eigenvalues.max();
        let l_min = eig.eigenvalues.min();
        if !(l_max > 0.0) || l_min <= RANK_TOL * l_max {
            return Err(Error::DegenerateSolve {
                ratio: if l_max > 0.0 { l_min / l_max } else { 0.0 },
            });
        }
        let inv = eig.eigenvalues.map(|l| 1.0 / l);
        let step = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose() * rhs;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<Pose> = poses
                .iter()
                .zip(&cols)
                .map(|(p, c)| match c {
                    Some(c0) => p.retract(&Twist::from_vector(&(step.fixed_rows::<6>(*c0) * scale))),
                    None => *p,
                })
                .collect();
            let trial_cost = reduced_objective(vms, &trial, model);
            if trial_cost <= cost {
                accepted = Some((trial, trial_cost));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, trial_cost)) = accepted else { break };
        let moved = step.amax() * scale;
        poses = trial;
        cost = trial_cost;
        if moved < cfg.pose_tol {
            break;
        }
    }
    Ok(poses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Weighted objective after both conditional steps of this iteration.
    pub objective: f64,
    /// Largest pose update of the iteration (twist norm).
    pub max_twist: f64,
    /// Associated points per class.
    pub layer_points: BTreeMap<ClassId, usize>,
}

#[derive(Debug, Clone)]
pub struct EcmOutcome {
    pub poses: Vec<Pose>,
    pub model: SemanticGmm,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

fn layer_point_counts(scans: &[Scan], table: &ResponsibilityTable) -> BTreeMap<ClassId, usize> {
    let mut counts = BTreeMap::new();
    for (k, scan) in scans.iter().enumerate() {
        for (i, p) in scan.points.iter().enumerate() {
            if !table.candidates(k, i).is_empty() {
                *counts.entry(p.label).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Runs ECM on the selected classes starting from the prior poses.
pub fn ecm_iterate(
    scans: &[Scan],
    priors: &[Pose],
    model: &SemanticGmm,
    cfg: &EcmConfig,
    selected_labels: &[ClassId],
) -> Result<EcmOutcome> {
    cfg.validate()?;
    if selected_labels.is_empty() {
        return Err(Error::InvalidInput("no semantic labels selected".into()));
    }
    if scans.len() != priors.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} poses",
            scans.len(),
            priors.len()
        )));
    }
    let mut model = model.restricted_to(selected_labels);
    if model.is_empty() {
        return Err(Error::InvalidInput(
            "selected labels have no landmarks in the model".into(),
        ));
    }
    let mut poses = priors.to_vec();
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=cfg.max_ecm_iters {
        let table = e_step(scans, &poses, &model, cfg);
        let vms = reduce_virtual(&table, scans);
        let new_poses = m_step_poses(&vms, &model, &poses, cfg)?;
        let new_model = update_landmarks(&model, scans, &new_poses, &table, &cfg.gmm)?;
        let max_twist = poses
            .iter()
            .zip(&new_poses)
            .map(|(a, b)| a.local(b).norm())
            .fold(0.0, f64::max);
        trace.push(IterationRecord {
            iter,
            objective: objective(scans, &new_poses, &new_model, &table),
            max_twist,
            layer_points: layer_point_counts(scans, &table),
        });
        poses = new_poses;
        model = new_model;
        if max_twist < cfg.pose_tol {
            converged = true;
            break;
        }
    }
    Ok(EcmOutcome {
        poses,
        model,
        trace,
        converged,
    })
}

pub fn trace_csv(trace: &[IterationRecord]) -> String {
    let mut out = String::from("iter,objective,max_twist_norm,layer_points\n");
    for r in trace {
        let layers: Vec<String> = r
            .layer_points
            .iter()
            .map(|(l, n)| format!("{l}:{n}"))
            .collect();
        let _ = writeln!(
            out,
            "{},{:e},{:e},{}",
            r.iter,
            r.objective,
            r.max_twist,
            layers.join(";")
        );
    }
    out
}
