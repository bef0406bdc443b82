//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::cloud_io::{read_poses, write_labels, write_poses, write_scan, LabelMap};
use crate::degeneracy::selection_csv;
use crate::em_solver::trace_csv;
use crate::error::{Error, Result};
use crate::eval::{ate_rmse, Alignment};
use crate::gmm_map::{dump_gmm, init_from_voxels, VoxelSizes};
use crate::synth::{make_benchmark_scene, perturb_trajectory, render_sequence, BenchmarkScene, BENCHMARK_RANGE};
use crate::window_ba::{run_sequence, WindowConfig};

#[derive(Debug, Parser)]
#[command(name = "semba", version, about = "Semantic GMM bundle adjustment for LiDAR scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct DatasetArgs {
    /// Directory of `.bin` scans, read in file-name order.
    #[arg(long)]
    scans: PathBuf,
    /// Directory of `.label` files matching the scans.
    #[arg(long)]
    labels: PathBuf,
    /// Label map file; the SemanticKITTI table is used when omitted.
    #[arg(long)]
    label_map: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Refine a prior trajectory window by window.
    Refine {
        #[command(flatten)]
        data: DatasetArgs,
        /// Prior trajectory (KITTI pose format).
        #[arg(long)]
        priors: PathBuf,
        /// Output trajectory.
        #[arg(long)]
        output: PathBuf,
        /// JSON report path; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Ground truth used to add the ATE to the report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Include wall-clock timings in the report.
        #[arg(long)]
        timing: bool,
        /// Directory for per-window ECM and selection CSV traces.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Render a synthetic benchmark dataset.
    Simulate {
        /// corridor-degenerate, urban-block or ground-only.
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Per-axis sensor noise in meters.
        #[arg(long, default_value_t = crate::synth::BENCHMARK_NOISE)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Translation noise of the written priors in meters.
        #[arg(long, default_value_t = 0.3)]
        perturb_t: f64,
        /// Rotation noise of the written priors in degrees.
        #[arg(long, default_value_t = 2.0)]
        perturb_r_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATE RMSE of an estimate against ground truth.
    Evaluate {
        estimate: PathBuf,
        truth: PathBuf,
        #[arg(long, default_value = "rigid")]
        align: String,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Build the map at the given poses and dump it.
    InspectGmm {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        ply: PathBuf,
    },
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_common(data: &DatasetArgs) -> Result<(LabelMap, WindowConfig, Vec<PathBuf>, Vec<PathBuf>)> {
    let map = match &data.label_map {
        Some(p) => LabelMap::from_file(p)?,
        None => LabelMap::semantic_kitti(),
    };
    let cfg = match &data.config {
        Some(p) => WindowConfig::from_file(p)?,
        None => WindowConfig::default(),
    };
    let scans = files_with_extension(&data.scans, "bin")?;
    let labels = files_with_extension(&data.labels, "label")?;
    Ok((map, cfg, scans, labels))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Refine {
            data,
            priors,
            output,
            report,
            truth,
            seed,
            timing,
            trace_dir,
        } => {
            let (map, mut cfg, scan_paths, label_paths) = load_common(&data)?;
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            let truth = truth.as_deref().map(read_poses).transpose()?;
            let out = run_sequence(&scan_paths, &label_paths, &priors, &map, &cfg)?;
            write_poses(&output, &out.poses)?;
            if let Some(dir) = trace_dir {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for w in &out.windows {
                    write_text(
                        &dir.join(format!("window_{:03}_ecm.csv", w.index)),
                        &trace_csv(&w.result.ecm_trace),
                    )?;
                    write_text(
                        &dir.join(format!("window_{:03}_selection.csv", w.index)),
                        &selection_csv(&w.result.selection_trace),
                    )?;
                }
            }
            let rep = out.report(truth.as_deref(), timing)?;
            let text = serde_json::to_string_pretty(&rep).expect("report serializes") + "\n";
            match report {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Simulate {
            scene,
            frames,
            noise,
            seed,
            perturb_t,
            perturb_r_deg,
            out,
        } => {
            let kind: BenchmarkScene = scene.parse()?;
            if frames == 0 {
                return Err(Error::InvalidInput("frames must be positive".into()));
            }
            if !(noise >= 0.0) || !(perturb_t >= 0.0) || !(perturb_r_deg >= 0.0) {
                return Err(Error::InvalidInput("noise levels must be non-negative".into()));
            }
            let map = LabelMap::semantic_kitti();
            let (scene_spec, truth) = make_benchmark_scene(kind, frames);
            scene_spec.validate(&map)?;
            let scans = render_sequence(&scene_spec, &truth, BENCHMARK_RANGE, noise, seed);
            let priors = perturb_trajectory(&truth, perturb_t, perturb_r_deg.to_radians(), seed ^ 0x9e37_79b9);
            let velo = out.join("velodyne");
            let labels = out.join("labels");
            for d in [&velo, &labels] {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            for (k, scan) in scans.iter().enumerate() {
                write_scan(&velo.join(format!("{k:06}.bin")), scan)?;
                write_labels(&labels.join(format!("{k:06}.label")), scan)?;
            }
            write_poses(&out.join("poses.txt"), &priors)?;
            write_poses(&out.join("ground_truth.txt"), &truth)?;
            write_text(&out.join("label_map.txt"), &map.to_text())?;
            println!("wrote {} scans of {} to {}", scans.len(), kind.name(), out.display());
            Ok(())
        }
        Command::Evaluate {
            estimate,
            truth,
            align,
            json: json_path,
        } => {
            let align: Alignment = align.parse()?;
            let est = read_poses(&estimate)?;
            let gt = read_poses(&truth)?;
            let rep = ate_rmse(&est, &gt, align)?;
            println!("ate_rmse {:.6} m over {} poses ({:?} alignment)", rep.rmse, rep.errors.len(), align);
            let value = json!({ "schema": 1, "ate": rep });
            let text = serde_json::to_string_pretty(&value).expect("report serializes");
            println!("{text}");
            if let Some(p) = json_path {
                write_text(&p, &(text + "\n"))?;
            }
            Ok(())
        }
        Command::InspectGmm {
            data,
            poses,
            json: json_path,
            ply,
        } => {
            let (map, cfg, scan_paths, label_paths) = load_common(&data)?;
            let poses = read_poses(&poses)?;
            if poses.len() != scan_paths.len() || label_paths.len() != scan_paths.len() {
                return Err(Error::InvalidInput(format!(
                    "{} scans, {} label files, {} poses",
                    scan_paths.len(),
                    label_paths.len(),
                    poses.len()
                )));
            }
            let mut scans = Vec::with_capacity(scan_paths.len());
            for (k, (sp, lp)) in scan_paths.iter().zip(&label_paths).enumerate() {
                let mut s = crate::cloud_io::read_scan_with_range(sp, cfg.max_range)?;
                s.index = k;
                scans.push(crate::cloud_io::read_labels(lp, s)?);
            }
            let sizes = VoxelSizes::with_ground(&map, cfg.voxel_ground, cfg.voxel_other);
            let model = init_from_voxels(&scans, &poses, &map, &sizes, &cfg.ecm.gmm)?;
            dump_gmm(&model, &json_path, &ply)?;
            println!("{} components in {} layers", model.len(), model.layer_count());
            Ok(())
        }
    }
}
