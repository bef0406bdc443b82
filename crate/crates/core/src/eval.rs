//! Absolute trajectory error.

use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Rigid,
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rigid" => Ok(Self::Rigid),
            other => Err(Error::InvalidInput(format!(
                "unknown alignment {other:?} (expected none or rigid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteReport {
    pub rmse: f64,
    pub errors: Vec<f64>,
    pub alignment: Alignment,
}

/// Rigid transform `(R, t)` minimizing `Σ‖R·a_k + t − b_k‖²` (Kabsch).
pub fn align_rigid(source: &[Vec3], target: &[Vec3]) -> (Mat3, Vec3) {
    let n = source.len() as f64;
    let ca = source.iter().sum::<Vec3>() / n;
    let cb = target.iter().sum::<Vec3>() / n;
    let mut cross = Mat3::zeros();
    for (a, b) in source.iter().zip(target) {
        cross += (b - cb) * (a - ca).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    (r, cb - r * ca)
}

pub fn ate_rmse(estimate: &[Pose], truth: &[Pose], align: Alignment) -> Result<AteReport> {
    if estimate.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} vs {}",
            estimate.len(),
            truth.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::InvalidInput("empty trajectories".into()));
    }
    let est: Vec<Vec3> = estimate.iter().map(|p| *p.translation()).collect();
    let gt: Vec<Vec3> = truth.iter().map(|p| *p.translation()).collect();
    let est = match align {
        Alignment::None => est,
        Alignment::Rigid => {
            if est.len() < 3 {
                return Err(Error::InvalidInput(
                    "rigid alignment needs at least 3 poses".into(),
                ));
            }
            let (r, t) = align_rigid(&est, &gt);
            est.iter().map(|p| r * p + t).collect()
        }
    };
    let errors: Vec<f64> = est.iter().zip(&gt).map(|(a, b)| (a - b).norm()).collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(AteReport {
        rmse,
        errors,
        alignment: align,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_map, Twist};
    use crate::synth::benchmark_trajectory;
    use proptest::prelude::*;

    #[test]
    fn identical_and_offset() {
        let t = benchmark_trajectory(12);
        assert_eq!(ate_rmse(&t, &t, Alignment::None).unwrap().rmse, 0.0);
        let shifted: Vec<Pose> = t
            .iter()
            .map(|p| Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)).compose(p))
            .collect();
        let none = ate_rmse(&shifted, &t, Alignment::None).unwrap();
        assert!((none.rmse - 1.0).abs() < 1e-12);
        assert!(ate_rmse(&shifted, &t, Alignment::Rigid).unwrap().rmse < 1e-9);
    }

    #[test]
    fn errors_and_shape_checks() {
        let t = benchmark_trajectory(3);
        assert!(ate_rmse(&t[..2], &t, Alignment::None).is_err());
        assert!(ate_rmse(&t[..2], &t[..2], Alignment::Rigid).is_err());
        assert!(ate_rmse(&t[..2], &t[..2], Alignment::None).is_ok());
        assert_eq!("rigid".parse::<Alignment>().unwrap(), Alignment::Rigid);
        assert!("sim3".parse::<Alignment>().is_err());
    }

    #[test]
    fn rigidly_moved_trajectory_aligns_to_zero() {
        let t = benchmark_trajectory(20);
        let g = exp_map(&Twist::new(Vec3::new(0.3, -0.2, 1.1), Vec3::new(4.0, -7.0, 2.0)));
        let moved: Vec<Pose> = t.iter().map(|p| g.compose(p)).collect();
        assert!(ate_rmse(&moved, &t, Alignment::Rigid).unwrap().rmse < 1e-9);
    }

    proptest! {
        #[test]
        fn ate_properties(offsets in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 3..20)) {
            let truth = benchmark_trajectory(offsets.len());
            let est: Vec<Pose> = truth.iter().zip(&offsets)
                .map(|(p, o)| Pose::from_translation(Vec3::from(*o)).compose(p))
                .collect();
            prop_assert!(ate_rmse(&est, &est, Alignment::Rigid).unwrap().rmse < 1e-9);
            prop_assert_eq!(ate_rmse(&est, &est, Alignment::None).unwrap().rmse, 0.0);
            let a = ate_rmse(&est, &truth, Alignment::None).unwrap();
            let b = ate_rmse(&truth, &est, Alignment::None).unwrap();
            prop_assert_eq!(a.rmse, b.rmse);
            let r = ate_rmse(&est, &truth, Alignment::Rigid).unwrap();
            prop_assert!(r.rmse <= a.rmse + 1e-12);
            let mean_sq = r.errors.iter().map(|e| e * e).sum::<f64>() / r.errors.len() as f64;
            prop_assert!((r.rmse - mean_sq.sqrt()).abs() <= 1e-12);
        }
    }
}
