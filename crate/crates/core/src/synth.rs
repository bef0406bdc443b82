//! Synthetic labeled worlds and a simple scan simulator.
//!
//! Surface points are drawn uniformly by area (planes) or by height (poles)
//! from a scene-level seed, so every scan of a scene observes the same world
//! samples; the scanner adds its own isotropic range noise.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::cloud_io::{ClassId, LabelMap, LabeledPoint, Scan};
use crate::error::{Error, Result};
use crate::geometry::{exp_map, so3_exp, Pose, Twist, Vec3};

pub const ROAD: ClassId = 40;
pub const BUILDING: ClassId = 50;
pub const TRUNK: ClassId = 71;
pub const POLE: ClassId = 80;

#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceKind {
    /// Rectangle centered on `center`; `extent` is its size along the two
    /// in-plane axes returned by [`plane_basis`].
    Plane {
        center: Vec3,
        normal: Vec3,
        extent: [f64; 2],
    },
    /// Lateral surface of a cylinder.
    Pole {
        base: Vec3,
        axis: Vec3,
        radius: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub kind: SurfaceKind,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub surfaces: Vec<Surface>,
    /// Points per m² on planes.
    pub area_density: f64,
    /// Points per meter of height on poles.
    pub line_density: f64,
    /// Default scanner noise for this scene (m).
    pub noise_sigma: f64,
    pub sample_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self, map: &LabelMap) -> Result<()> {
        for s in &self.surfaces {
            let ok = match &s.kind {
                SurfaceKind::Plane { normal, extent, .. } => {
                    normal.norm() > 0.0 && extent.iter().all(|e| *e > 0.0)
                }
                SurfaceKind::Pole {
                    axis,
                    radius,
                    height,
                    ..
                } => axis.norm() > 0.0 && *radius > 0.0 && *height > 0.0,
            };
            if !ok {
                return Err(Error::InvalidInput(format!("degenerate surface {s:?}")));
            }
            if map.name_of(s.label).is_none() {
                return Err(Error::InvalidInput(format!(
                    "surface label {} missing from label map",
                    s.label
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<ClassId> {
        let mut l: Vec<_> = self.surfaces.iter().map(|s| s.label).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// World-frame samples of every surface; deterministic in `sample_seed`.
    pub fn sample_world(&self) -> Vec<LabeledPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
        let mut out = Vec::new();
        for s in &self.surfaces {
            match &s.kind {
                SurfaceKind::Plane {
                    center,
                    normal,
                    extent,
                } => {
                    let (u, v) = plane_basis(normal);
                    let n = poisson(&mut rng, self.area_density * extent[0] * extent[1]);
                    for _ in 0..n {
                        let a = rng.random_range(-0.5..0.5) * extent[0];
                        let b = rng.random_range(-0.5..0.5) * extent[1];
                        out.push(LabeledPoint::new(center + a * u + b * v, s.label));
                    }
                }
                SurfaceKind::Pole {
                    base,
                    axis,
                    radius,
                    height,
                } => {
                    let a = axis.normalize();
                    let (u, v) = plane_basis(&a);
                    let n = poisson(&mut rng, self.line_density * height);
                    for _ in 0..n {
                        let t = rng.random_range(0.0..*height);
                        let phi = rng.random_range(0.0..std::f64::consts::TAU);
                        let p = base + t * a + *radius * (phi.cos() * u + phi.sin() * v);
                        out.push(LabeledPoint::new(p, s.label));
                    }
                }
            }
        }
        out
    }

    /// Distance from `p` to the surface, extended without bounds.
    pub fn distance_to_surface(surface: &Surface, p: &Vec3) -> f64 {
        match &surface.kind {
            SurfaceKind::Plane { center, normal, .. } => (p - center).dot(&normal.normalize()).abs(),
            SurfaceKind::Pole {
                base, axis, radius, ..
            } => {
                let a = axis.normalize();
                let d = p - base;
                ((d - a * d.dot(&a)).norm() - radius).abs()
            }
        }
    }
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// Two unit vectors spanning the plane orthogonal to `normal`.
pub fn plane_basis(normal: &Vec3) -> (Vec3, Vec3) {
    let n = normal.normalize();
    let helper = if n.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    (u, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScanner {
    pub max_range: f64,
    /// Per-axis Gaussian noise (m).
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl SimulatedScanner {
    pub fn new(max_range: f64, noise_sigma: f64, rng_seed: u64) -> Self {
        Self {
            max_range,
            noise_sigma,
            rng_seed,
        }
    }
}

/// Samples within `max_range` of the sensor, expressed in the sensor frame,
/// with isotropic noise.
pub fn render_scan(scene: &SceneSpec, pose: &Pose, scanner: &SimulatedScanner) -> Scan {
    render_from_samples(&scene.sample_world(), pose, scanner)
}

pub fn render_from_samples(world: &[LabeledPoint], pose: &Pose, scanner: &SimulatedScanner) -> Scan {
    let mut rng = ChaCha8Rng::seed_from_u64(scanner.rng_seed);
    let noise = Normal::new(0.0, scanner.noise_sigma.max(0.0)).expect("finite sigma");
    let to_sensor = pose.inverse();
    let points = world
        .iter()
        .filter(|p| (p.position - pose.translation()).norm() <= scanner.max_range)
        .map(|p| {
            let mut z = to_sensor.apply(&p.position);
            if scanner.noise_sigma > 0.0 {
                z += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
            LabeledPoint::new(z, p.label)
        })
        .collect();
    Scan::new(0, points)
}

/// Renders one scan per pose; scan `k` uses noise seed `seed + k`.
pub fn render_sequence(
    scene: &SceneSpec,
    poses: &[Pose],
    max_range: f64,
    noise_sigma: f64,
    seed: u64,
) -> Vec<Scan> {
    let world = scene.sample_world();
    poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let scanner = SimulatedScanner::new(max_range, noise_sigma, seed.wrapping_add(k as u64));
            let mut scan = render_from_samples(&world, pose, &scanner);
            scan.index = k;
            scan
        })
        .collect()
}

/// Right-multiplies every pose but the first by `exp` of a zero-mean
/// Gaussian twist.
pub fn perturb_trajectory(poses: &[Pose], sigma_t: f64, sigma_r: f64, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = Normal::new(0.0, sigma_t.max(0.0)).expect("sigma_t");
    let nr = Normal::new(0.0, sigma_r.max(0.0)).expect("sigma_r");
    poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if k == 0 {
                return *p;
            }
            let rot = Vec3::new(nr.sample(&mut rng), nr.sample(&mut rng), nr.sample(&mut rng));
            let trans = Vec3::new(nt.sample(&mut rng), nt.sample(&mut rng), nt.sample(&mut rng));
            p.compose(&exp_map(&Twist::new(rot, trans)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkScene {
    /// Ground and two parallel walls, plus a row of poles; the planes alone
    /// leave motion along the corridor weakly constrained.
    CorridorDegenerate,
    /// Ground, two orthogonal walls, poles and trunks.
    UrbanBlock,
    /// A single ground plane.
    GroundOnly,
}

impl FromStr for BenchmarkScene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corridor-degenerate" => Ok(Self::CorridorDegenerate),
            "urban-block" => Ok(Self::UrbanBlock),
            "ground-only" => Ok(Self::GroundOnly),
            other => Err(Error::InvalidInput(format!(
                "unknown scene {other:?} (expected corridor-degenerate, urban-block or ground-only)"
            ))),
        }
    }
}

impl BenchmarkScene {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CorridorDegenerate => "corridor-degenerate",
            Self::UrbanBlock => "urban-block",
            Self::GroundOnly => "ground-only",
        }
    }
}

pub const BENCHMARK_NOISE: f64 = 0.02;
pub const BENCHMARK_RANGE: f64 = 30.0;
pub const SENSOR_HEIGHT: f64 = 1.8;

fn plane(center: [f64; 3], normal: [f64; 3], extent: [f64; 2], label: ClassId) -> Surface {
    Surface {
        kind: SurfaceKind::Plane {
            center: Vec3::from(center),
            normal: Vec3::from(normal),
            extent,
        },
        label,
    }
}

fn pole(x: f64, y: f64, radius: f64, height: f64, label: ClassId) -> Surface {
    Surface {
        kind: SurfaceKind::Pole {
            base: Vec3::new(x, y, 0.0),
            axis: Vec3::z(),
            radius,
            height,
        },
        label,
    }
}

/// Ground-truth sensor trajectory: roughly 1 m steps along +x with a gentle
/// lateral weave and yaw oscillation.
pub fn benchmark_trajectory(frames: usize) -> Vec<Pose> {
    (0..frames)
        .map(|k| {
            let s = k as f64;
            let yaw = 0.04 * (0.7 * s).sin();
            let t = Vec3::new(1.0 * s, 0.3 * (0.5 * s).sin(), SENSOR_HEIGHT);
            Pose::new(so3_exp(&Vec3::new(0.0, 0.0, yaw)), t).expect("valid pose")
        })
        .collect()
}

/// Deterministic benchmark scene and a `frames`-long ground-truth trajectory.
pub fn make_benchmark_scene(kind: BenchmarkScene, frames: usize) -> (SceneSpec, Vec<Pose>) {
    let mut surfaces = vec![plane([5.0, 0.0, 0.0], [0.0, 0.0, 1.0], [60.0, 40.0], ROAD)];
    match kind {
        BenchmarkScene::GroundOnly => {}
        BenchmarkScene::UrbanBlock => {
            surfaces.push(plane([5.0, 9.0, 4.0], [0.0, -1.0, 0.0], [40.0, 8.0], BUILDING));
            surfaces.push(plane([22.0, -2.0, 4.0], [-1.0, 0.0, 0.0], [22.0, 8.0], BUILDING));
            for (x, y) in [(-6.0, -5.0), (0.0, -6.0), (6.0, -5.0), (12.0, -6.0), (18.0, -5.0), (3.0, 6.0)] {
                surfaces.push(pole(x, y, 0.12, 6.0, POLE));
            }
            for (x, y) in [(-2.0, 6.0), (9.0, 6.5)] {
                surfaces.push(pole(x, y, 0.25, 3.0, TRUNK));
            }
        }
        BenchmarkScene::CorridorDegenerate => {
            surfaces.push(plane([5.0, 4.0, 1.0], [0.0, -1.0, 0.0], [40.0, 2.0], BUILDING));
            surfaces.push(plane([5.0, -4.0, 1.0], [0.0, 1.0, 0.0], [40.0, 2.0], BUILDING));
            // Both sides, one pole per 3 m voxel column.
            for x in [-4.5, -1.5, 1.5, 4.5, 7.5, 10.5, 13.5, 16.5] {
                for y in [-2.5, 2.5] {
                    surfaces.push(pole(x, y, 0.12, 5.0, POLE));
                }
            }
        }
    }
    let scene = SceneSpec {
        surfaces,
        area_density: 4.0,
        line_density: 60.0,
        noise_sigma: BENCHMARK_NOISE,
        sample_seed: 0x5eed,
    };
    (scene, benchmark_trajectory(frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::log_map;

    fn lone_plane(density: f64) -> SceneSpec {
        SceneSpec {
            surfaces: vec![plane([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [10.0, 10.0], ROAD)],
            area_density: density,
            line_density: 0.0,
            noise_sigma: 0.0,
            sample_seed: 1,
        }
    }

    #[test]
    fn noiseless_plane_at_identity() {
        let scan = render_scan(&lone_plane(10.0), &Pose::identity(), &SimulatedScanner::new(100.0, 0.0, 0));
        assert!(!scan.points.is_empty());
        assert!(scan.points.iter().all(|p| p.position.z == 0.0 && p.label == ROAD));
    }

    #[test]
    fn render_round_trip_through_pose() {
        let scene = lone_plane(10.0);
        let pose = exp_map(&Twist::new(Vec3::new(0.1, -0.2, 0.5), Vec3::new(1.0, 2.0, 1.5)));
        let scanner = SimulatedScanner::new(100.0, 0.0, 3);
        let a = render_scan(&scene, &Pose::identity(), &scanner);
        let b = render_scan(&scene, &pose, &scanner);
        assert_eq!(a.point_count(), b.point_count());
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((pose.apply(&q.position) - p.position).norm() < 1e-9);
        }
    }

    #[test]
    fn density_counts() {
        let n = lone_plane(10.0).sample_world().len() as f64;
        assert!((n - 1000.0).abs() <= 100.0, "{n}");
    }

    #[test]
    fn out_of_range_scene_is_empty() {
        let far = Pose::from_translation(Vec3::new(500.0, 0.0, 0.0));
        let scan = render_scan(&lone_plane(10.0), &far, &SimulatedScanner::new(30.0, 0.02, 0));
        assert_eq!(scan.point_count(), 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let (scene, poses) = make_benchmark_scene(BenchmarkScene::UrbanBlock, 3);
        let a = render_sequence(&scene, &poses, 30.0, 0.02, 9);
        let b = render_sequence(&scene, &poses, 30.0, 0.02, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_scans_lie_on_their_surfaces() {
        let (scene, poses) = make_benchmark_scene(BenchmarkScene::UrbanBlock, 4);
        let scans = render_sequence(&scene, &poses, BENCHMARK_RANGE, 0.0, 0);
        for (scan, pose) in scans.iter().zip(&poses) {
            for p in &scan.points {
                let x = pose.apply(&p.position);
                let d = scene
                    .surfaces
                    .iter()
                    .filter(|s| s.label == p.label)
                    .map(|s| SceneSpec::distance_to_surface(s, &x))
                    .fold(f64::INFINITY, f64::min);
                assert!(d < 1e-9, "{d}");
            }
        }
    }

    #[test]
    fn perturbation_rules() {
        let poses = benchmark_trajectory(5);
        assert_eq!(perturb_trajectory(&poses, 0.0, 0.0, 1), poses);
        let p = perturb_trajectory(&poses, 0.3, 0.05, 1);
        assert_eq!(p[0], poses[0]);
        assert_ne!(p[1], poses[1]);
    }

    #[test]
    fn perturbation_statistics() {
        let base = vec![Pose::identity(); 1001];
        let (st, sr) = (0.3, 0.035);
        let p = perturb_trajectory(&base, st, sr, 42);
        let mut sq_t = 0.0;
        let mut sq_r = 0.0;
        for q in &p[1..] {
            let xi = log_map(q);
            sq_t += xi.trans.norm_squared();
            sq_r += xi.rot.norm_squared();
        }
        let n = 3.0 * 1000.0;
        let (et, er) = ((sq_t / n).sqrt(), (sq_r / n).sqrt());
        assert!((et / st - 1.0).abs() < 0.05, "{et}");
        assert!((er / sr - 1.0).abs() < 0.05, "{er}");
    }

    #[test]
    fn scene_names() {
        for k in [BenchmarkScene::CorridorDegenerate, BenchmarkScene::UrbanBlock, BenchmarkScene::GroundOnly] {
            assert_eq!(k.name().parse::<BenchmarkScene>().unwrap(), k);
            let (scene, traj) = make_benchmark_scene(k, 10);
            scene.validate(&LabelMap::semantic_kitti()).unwrap();
            assert_eq!(traj.len(), 10);
        }
        assert!("forest".parse::<BenchmarkScene>().is_err());
    }
}
