//! Conditioning of the linearized pose problem and adaptive choice of the
//! semantic classes that enter it.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud_io::{ClassId, LabelMap, Scan};
use crate::em_solver::{
    e_step, free_columns, reduce_virtual, whitened_block, whitener, EcmConfig,
    VirtualMeasurementSet,
};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::gmm_map::SemanticGmm;

/// Relative singular-value cutoff below which κ is reported as infinite.
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowBlock {
    pub scan: usize,
    pub landmark: usize,
    pub label: ClassId,
}

/// Whitened linearization `H·δ ≈ b` of the reduced pose problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// One entry per 3-row block of `h`.
    pub rows: Vec<RowBlock>,
}

/// Stacks the whitened 3×6 blocks of every virtual measurement whose
/// landmark class is in `labels` and whose scan is free.
pub fn build_jacobian(
    vms: &VirtualMeasurementSet,
    model: &SemanticGmm,
    priors: &[Pose],
    free_mask: &[bool],
    labels: &[ClassId],
) -> Result<LinearSystem> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no labels for the linear system".into()));
    }
    let (cols, n_cols) = free_columns(free_mask);
    if n_cols == 0 {
        return Err(Error::InvalidInput("no free poses".into()));
    }
    let kept: Vec<_> = vms
        .items
        .iter()
        .filter(|v| {
            cols.get(v.scan).copied().flatten().is_some()
                && labels.contains(&model.component(v.landmark).label())
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySystem);
    }
    let mut h = DMatrix::zeros(3 * kept.len(), n_cols);
    let mut b = DVector::zeros(3 * kept.len());
    let mut rows = Vec::with_capacity(kept.len());
    for (n, v) in kept.iter().enumerate() {
        let comp = model.component(v.landmark);
        let sqrt_info = whitener(comp.information());
        let (r, j) = whitened_block(&priors[v.scan], &v.w, comp.mean(), &sqrt_info, v.beta);
        let c0 = cols[v.scan].expect("free");
        h.view_mut((3 * n, c0), (3, 6)).copy_from(&j);
        b.rows_mut(3 * n, 3).copy_from(&(-r));
        rows.push(RowBlock {
            scan: v.scan,
            landmark: v.landmark,
            label: comp.label(),
        });
    }
    Ok(LinearSystem { h, b, rows })
}

/// `σ_max / σ_min` of `h`; infinite when `σ_min < 1e-12·σ_max` or when `h`
/// has fewer rows than columns.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 0 || h.ncols() == 0 {
        return f64::INFINITY;
    }
    if h.nrows() < h.ncols() {
        return f64::INFINITY;
    }
    let sv = h.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min < SINGULAR_TOL * max {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub kappa_thd: f64,
    /// Maximum number of extra classes tried.
    pub n_c: usize,
    pub rng_seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            kappa_thd: 100.0,
            n_c: 6,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub active: Vec<ClassId>,
    pub remaining: Vec<ClassId>,
    pub kappa: f64,
    pub attempts: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionAttempt {
    pub attempt: usize,
    pub candidate: ClassId,
    pub kappa_before: f64,
    pub kappa_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionVerdict {
    WellConditioned,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub state: SelectionState,
    pub verdict: SelectionVerdict,
    pub trace: Vec<SelectionAttempt>,
}

impl SelectionOutcome {
    pub fn is_degenerate(&self) -> bool {
        self.verdict == SelectionVerdict::Degenerate
    }
}

/// κ of the system built on `labels`; empty systems count as infinitely
/// ill-conditioned.
pub fn kappa_for(
    vms: &VirtualMeasurementSet,
    model: &SemanticGmm,
    priors: &[Pose],
    labels: &[ClassId],
) -> Result<f64> {
    if labels.is_empty() {
        return Ok(f64::INFINITY);
    }
    let free: Vec<bool> = (0..priors.len()).map(|k| k != 0).collect();
    match build_jacobian(vms, model, priors, &free, labels) {
        Ok(sys) => Ok(condition_number(&sys.h)),
        Err(Error::EmptySystem) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Adaptive class selection at the prior poses.
///
/// Starts from the map's initial classes that have landmarks in `model`. While
/// κ ≥ `kappa_thd`, up to `n_c` untried classes are drawn at random (without
/// replacement) from the rest; a class is kept only if it lowers κ.
pub fn adaptive_select(
    scans: &[Scan],
    priors: &[Pose],
    model: &SemanticGmm,
    map: &LabelMap,
    ecm: &EcmConfig,
    cfg: &SelectionConfig,
) -> Result<SelectionOutcome> {
    let available: Vec<ClassId> = model.labels().filter(|&l| map.is_usable(l)).collect();
    let mut active: Vec<ClassId> = map
        .initial()
        .iter()
        .copied()
        .filter(|l| available.contains(l))
        .collect();
    active.sort_unstable();
    let mut untried: Vec<ClassId> = available
        .iter()
        .copied()
        .filter(|l| !active.contains(l))
        .collect();

    // Associations within one class do not depend on the other classes, so a
    // single E-step over every available class serves all candidate sets.
    let scoped = model.restricted_to(&available);
    let table = e_step(scans, priors, &scoped, ecm);
    let vms = reduce_virtual(&table, scans);

    let mut kappa = kappa_for(&vms, &scoped, priors, &active)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut trace = Vec::new();
    let mut attempts = 0;
    while kappa >= cfg.kappa_thd && attempts < cfg.n_c && !untried.is_empty() {
        attempts += 1;
        let &candidate = untried.choose(&mut rng).expect("nonempty");
        untried.retain(|&l| l != candidate);
        let mut trial = active.clone();
        trial.push(candidate);
        trial.sort_unstable();
        let kappa_after = kappa_for(&vms, &scoped, priors, &trial)?;
        let accepted = kappa_after < kappa;
        trace.push(SelectionAttempt {
            attempt: attempts,
            candidate,
            kappa_before: kappa,
            kappa_after,
            accepted,
        });
        if accepted {
            active = trial;
            kappa = kappa_after;
        }
    }
    let verdict = if kappa < cfg.kappa_thd {
        SelectionVerdict::WellConditioned
    } else {
        SelectionVerdict::Degenerate
    };
    let remaining = available
        .iter()
        .copied()
        .filter(|l| !active.contains(l))
        .collect();
    Ok(SelectionOutcome {
        state: SelectionState {
            active,
            remaining,
            kappa,
            attempts,
            rng_seed: cfg.rng_seed,
        },
        verdict,
        trace,
    })
}

pub fn selection_csv(trace: &[SelectionAttempt]) -> String {
    let mut out = String::from("attempt,candidate_label,kappa_before,kappa_after,accepted\n");
    for a in trace {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{}",
            a.attempt, a.candidate, a.kappa_before, a.kappa_after, a.accepted
        );
    }
    out
}
