//! Per-class Gaussian mixture landmark model.
//!
//! Each semantic layer is voxelized on its own grid and every sufficiently
//! populated voxel becomes one Gaussian. Components are stored flat, sorted by
//! `(label, voxel)`, so a component's position in [`SemanticGmm::components`]
//! is its global landmark id.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use log::warn;
use nalgebra::SymmetricEigen;
use serde::Serialize;

use crate::cloud_io::{ClassId, LabelMap, Scan};
use crate::em_solver::ResponsibilityTable;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Vec3};

pub const GROUND_CLASS_NAMES: &[&str] = &["ground", "road", "parking", "sidewalk", "other-ground"];

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    /// Eigenvalue floor of every covariance (m²).
    pub eps_reg: f64,
    pub min_points_per_voxel: usize,
    /// Components whose responsibility mass falls below this keep their values.
    pub mass_floor: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            eps_reg: 1e-4,
            min_points_per_voxel: 6,
            mass_floor: 1e-6,
        }
    }
}

/// Voxel edge length per class.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSizes {
    pub default_size: f64,
    pub per_class: BTreeMap<ClassId, f64>,
}

impl VoxelSizes {
    pub fn uniform(size: f64) -> Self {
        Self {
            default_size: size,
            per_class: BTreeMap::new(),
        }
    }

    /// `other` for every class, `ground` for the ground classes present in `map`.
    pub fn with_ground(map: &LabelMap, ground: f64, other: f64) -> Self {
        let per_class = GROUND_CLASS_NAMES
            .iter()
            .filter_map(|n| map.id_of(n))
            .map(|id| (id, ground))
            .collect();
        Self {
            default_size: other,
            per_class,
        }
    }

    pub fn size_of(&self, label: ClassId) -> f64 {
        self.per_class
            .get(&label)
            .copied()
            .unwrap_or(self.default_size)
    }
}

impl Default for VoxelSizes {
    fn default() -> Self {
        Self::with_ground(&LabelMap::semantic_kitti(), 6.0, 3.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGaussian {
    mean: Vec3,
    covariance: Mat3,
    information: Mat3,
    log_det: f64,
    weight: f64,
    label: ClassId,
    support_count: usize,
}

impl SemanticGaussian {
    /// `covariance` must already be SPD (see [`regularize_covariance`]).
    pub fn new(mean: Vec3, covariance: Mat3, label: ClassId, support_count: usize) -> Self {
        let chol = covariance
            .cholesky()
            .expect("component covariance must be positive definite");
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let information = chol.inverse();
        let information = (information + information.transpose()) * 0.5;
        Self {
            mean,
            covariance,
            information,
            log_det,
            weight: 0.0,
            label,
            support_count,
        }
    }

    pub fn mean(&self) -> &Vec3 {
        &self.mean
    }

    pub fn covariance(&self) -> &Mat3 {
        &self.covariance
    }

    /// Σ⁻¹.
    pub fn information(&self) -> &Mat3 {
        &self.information
    }

    /// log |Σ|.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn label(&self) -> ClassId {
        self.label
    }

    pub fn support_count(&self) -> usize {
        self.support_count
    }

    /// π·N(x | μ, Σ).
    pub fn weighted_density(&self, x: &Vec3) -> f64 {
        let d = x - self.mean;
        let m = d.dot(&(self.information * d));
        let norm = (2.0 * std::f64::consts::PI).powf(-1.5) * (-0.5 * self.log_det).exp();
        self.weight * norm * (-0.5 * m).exp()
    }

    /// Radius of the sphere containing the `n_sigma` Mahalanobis ellipsoid.
    pub fn bounding_radius(&self, n_sigma: f64) -> f64 {
        let lambda_max = SymmetricEigen::new(self.covariance)
            .eigenvalues
            .max()
            .max(0.0);
        n_sigma * lambda_max.sqrt()
    }
}

/// The landmark set: components grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGmm {
    components: Vec<SemanticGaussian>,
    layers: BTreeMap<ClassId, Range<usize>>,
    voxel_sizes: VoxelSizes,
}

impl SemanticGmm {
    /// Builds a model from components in any order; they are sorted by label
    /// (stable, so order within a class is preserved). Weights are left as given.
    pub fn from_components(mut components: Vec<SemanticGaussian>, voxel_sizes: VoxelSizes) -> Self {
        components.sort_by_key(|c| c.label);
        let mut layers: BTreeMap<ClassId, Range<usize>> = BTreeMap::new();
        for (j, c) in components.iter().enumerate() {
            layers
                .entry(c.label)
                .and_modify(|r| r.end = j + 1)
                .or_insert(j..j + 1);
        }
        Self {
            components,
            layers,
            voxel_sizes,
        }
    }

    pub fn components(&self) -> &[SemanticGaussian] {
        &self.components
    }

    pub fn component(&self, j: usize) -> &SemanticGaussian {
        &self.components[j]
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.layers.keys().copied()
    }

    pub fn has_layer(&self, label: ClassId) -> bool {
        self.layers.contains_key(&label)
    }

    /// Global ids of the components of one class.
    pub fn layer_range(&self, label: ClassId) -> Option<Range<usize>> {
        self.layers.get(&label).cloned()
    }

    pub fn voxel_sizes(&self) -> &VoxelSizes {
        &self.voxel_sizes
    }

    /// Keeps only the given classes and resets the mixing weights.
    pub fn restricted_to(&self, labels: &[ClassId]) -> SemanticGmm {
        let kept = self
            .components
            .iter()
            .filter(|c| labels.contains(&c.label))
            .cloned()
            .collect();
        set_mixing(SemanticGmm::from_components(kept, self.voxel_sizes.clone()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Component {
            mean: [f64; 3],
            covariance: [f64; 9],
            weight: f64,
            support: usize,
        }
        #[derive(Serialize)]
        struct Layer {
            label: ClassId,
            components: Vec<Component>,
        }
        #[derive(Serialize)]
        struct Doc {
            layers: Vec<Layer>,
        }
        let layers = self
            .layers
            .iter()
            .map(|(&label, range)| Layer {
                label,
                components: self.components[range.clone()]
                    .iter()
                    .map(|c| {
                        let s = &c.covariance;
                        Component {
                            mean: [c.mean.x, c.mean.y, c.mean.z],
                            covariance: [
                                s[(0, 0)],
                                s[(0, 1)],
                                s[(0, 2)],
                                s[(1, 0)],
                                s[(1, 1)],
                                s[(1, 2)],
                                s[(2, 0)],
                                s[(2, 1)],
                                s[(2, 2)],
                            ],
                            weight: c.weight,
                            support: c.support_count,
                        }
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_value(Doc { layers }).expect("gmm serializes")
    }

    /// ASCII PLY of component means, colored by class.
    pub fn to_ply(&self) -> String {
        let mut out = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nproperty ushort label\nend_header\n",
            self.components.len()
        );
        for c in &self.components {
            let [r, g, b] = label_color(c.label);
            out.push_str(&format!(
                "{} {} {} {r} {g} {b} {}\n",
                c.mean.x as f32, c.mean.y as f32, c.mean.z as f32, c.label
            ));
        }
        out
    }
}

/// Writes `<stem>.json` and `<stem>.ply`.
pub fn dump_gmm(model: &SemanticGmm, json_path: &Path, ply_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&model.to_json()).expect("json");
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    let mut f = std::fs::File::create(ply_path).map_err(|e| Error::io(ply_path, e))?;
    f.write_all(model.to_ply().as_bytes())
        .map_err(|e| Error::io(ply_path, e))
}

fn label_color(label: ClassId) -> [u8; 3] {
    // Knuth multiplicative hash spreads neighboring ids across the palette.
    let h = (label as u32).wrapping_mul(2_654_435_761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

/// Eigenvalues clamped to `[eps, cap]`.
pub fn regularize_covariance(s: &Mat3, eps: f64, cap: f64) -> Result<Mat3> {
    let scale = s.amax().max(1.0);
    if (s - s.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidInput("covariance is not symmetric".into()));
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("covariance has non-finite entries".into()));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.clamp(eps, cap.max(eps)));
    let out = eig.eigenvectors * Mat3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok((out + out.transpose()) * 0.5)
}

/// Integer cell of a point: `floor(p / size)` per axis.
pub fn cell_of(p: &Vec3, size: f64) -> [i64; 3] {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

/// Global-frame points binned by `(class, cell)`.
#[derive(Debug, Clone, Default)]
pub struct VoxelGrid {
    pub cells: BTreeMap<(ClassId, [i64; 3]), Vec<Vec3>>,
}

impl VoxelGrid {
    pub fn build(scans: &[Scan], priors: &[Pose], map: &LabelMap, sizes: &VoxelSizes) -> Self {
        let mut cells: BTreeMap<(ClassId, [i64; 3]), Vec<Vec3>> = BTreeMap::new();
        for (scan, pose) in scans.iter().zip(priors) {
            for p in scan.points.iter().filter(|p| map.is_usable(p.label)) {
                let x = pose.apply(&p.position);
                cells
                    .entry((p.label, cell_of(&x, sizes.size_of(p.label))))
                    .or_default()
                    .push(x);
            }
        }
        Self { cells }
    }
}

/// Sample mean and unbiased covariance.
fn sample_moments(points: &[Vec3]) -> (Vec3, Mat3) {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - mean;
        scatter += d * d.transpose();
    }
    (mean, scatter / (n - 1.0).max(1.0))
}

/// Voxelizes the prior-aligned cloud of every usable class and fits one
/// Gaussian per populated voxel.
pub fn init_from_voxels(
    scans: &[Scan],
    priors: &[Pose],
    map: &LabelMap,
    sizes: &VoxelSizes,
    params: &GmmParams,
) -> Result<SemanticGmm> {
    if scans.len() != priors.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} prior poses",
            scans.len(),
            priors.len()
        )));
    }
    let grid = VoxelGrid::build(scans, priors, map, sizes);
    let mut seen_labels: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut components = Vec::new();
    for ((label, _), pts) in &grid.cells {
        let count = seen_labels.entry(*label).or_default();
        if pts.len() < params.min_points_per_voxel.max(2) {
            continue;
        }
        let (mean, cov) = sample_moments(pts);
        let cap = sizes.size_of(*label).powi(2);
        let cov = regularize_covariance(&cov, params.eps_reg, cap)?;
        components.push(SemanticGaussian::new(mean, cov, *label, pts.len()));
        *count += 1;
    }
    for (label, n) in &seen_labels {
        if *n == 0 {
            warn!("class {label} produced no components and is dropped");
        }
    }
    if components.is_empty() {
        return Err(Error::Initialization(
            "no voxel reached the minimum point count".into(),
        ));
    }
    Ok(set_mixing(SemanticGmm::from_components(
        components,
        sizes.clone(),
    )))
}

/// Fixes every weight to `1 / (N_s · J_s)`.
pub fn set_mixing(mut model: SemanticGmm) -> SemanticGmm {
    let n_layers = model.layers.len() as f64;
    for range in model.layers.values() {
        let w = 1.0 / (n_layers * range.len() as f64);
        for c in &mut model.components[range.clone()] {
            c.weight = w;
        }
    }
    model
}

/// Conditional landmark step: responsibility-weighted mean and covariance of
/// the points transformed by the fresh pose estimates. Weights are untouched.
pub fn update_landmarks(
    model: &SemanticGmm,
    scans: &[Scan],
    poses: &[Pose],
    table: &ResponsibilityTable,
    params: &GmmParams,
) -> Result<SemanticGmm> {
    let n = model.components.len();
    let mut mass = vec![0.0; n];
    let mut first = vec![Vec3::zeros(); n];
    for (k, (scan, pose)) in scans.iter().zip(poses).enumerate() {
        for (i, p) in scan.points.iter().enumerate() {
            let cands = table.candidates(k, i);
            if cands.is_empty() {
                continue;
            }
            let x = pose.apply(&p.position);
            for &(j, a) in cands {
                mass[j as usize] += a;
                first[j as usize] += a * x;
            }
        }
    }
    let means: Vec<Vec3> = (0..n)
        .map(|j| {
            if mass[j] >= params.mass_floor {
                first[j] / mass[j]
            } else {
                model.components[j].mean
            }
        })
        .collect();
    let mut scatter = vec![Mat3::zeros(); n];
    for (k, (scan, pose)) in scans.iter().zip(poses).enumerate() {
        for (i, p) in scan.points.iter().enumerate() {
            let cands = table.candidates(k, i);
            if cands.is_empty() {
                continue;
            }
            let x = pose.apply(&p.position);
            for &(j, a) in cands {
                let d = x - means[j as usize];
                scatter[j as usize] += a * (d * d.transpose());
            }
        }
    }
    let mut components = Vec::with_capacity(n);
    for (j, old) in model.components.iter().enumerate() {
        if mass[j] < params.mass_floor {
            components.push(old.clone());
            continue;
        }
        let cap = model.voxel_sizes.size_of(old.label).powi(2);
        let cov = regularize_covariance(&(scatter[j] / mass[j]), params.eps_reg, cap)?;
        let mut c = SemanticGaussian::new(means[j], cov, old.label, old.support_count);
        c.weight = old.weight;
        components.push(c);
    }
    Ok(SemanticGmm {
        components,
        layers: model.layers.clone(),
        voxel_sizes: model.voxel_sizes.clone(),
    })
}
