//! Command-line front end: dataset tracking/reconstruction, synthetic
//! sequence generation, and evaluation utilities.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vifusion_core::frame::{SequenceConfig, SequenceConfigFile, SequenceEvent};
use vifusion_core::geometry::CameraIntrinsics;
use vifusion_core::metrics::absolute_trajectory_error;
use vifusion_core::pipeline::{Pipeline, PipelineConfig};
use vifusion_core::synth::{
    generate_sequence, write_sequence, GenerateOptions, Primitive, Scene, SceneObject, Texture,
    Trajectory,
};
use vifusion_core::tum::{read_trajectory, write_trajectory, TumSequence, ASSOCIATION_WINDOW};

#[derive(Parser)]
#[command(name = "vifusion", version, about = "RGB-D-inertial scene reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a TUM-layout dataset and reconstruct its TSDF volume.
    Run {
        /// Dataset directory (rgb.txt, depth.txt, imu.txt, sequence.toml).
        dataset: PathBuf,
        /// Pipeline configuration TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable inertial propagation (static-motion prior instead).
        #[arg(long)]
        no_imu: bool,
        /// Disable per-pixel patch deformation (rigid windows instead).
        #[arg(long)]
        no_deformation: bool,
        /// Estimated trajectory output (TUM format).
        #[arg(long, default_value = "trajectory.txt")]
        trajectory_out: PathBuf,
        /// Optional binary PLY mesh output.
        #[arg(long)]
        mesh_out: Option<PathBuf>,
        /// Optional JSON run report output.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Generate a synthetic RGB-D + IMU sequence with ground truth.
    Synth {
        /// Output directory.
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TrajectoryKind::Sinusoid)]
        trajectory: TrajectoryKind,
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare tracking quality with and without patch deformation.
    TrackEval {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM trajectory files.
    EvalAte {
        estimate: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = ASSOCIATION_WINDOW)]
        window: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajectoryKind {
    Static,
    Line,
    Orbit,
    Sinusoid,
    Fast,
}

fn load_pipeline_config(path: Option<&Path>) -> Result<PipelineConfig, String> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", p.display()))
        }
    }
}

fn load_sequence_config(dataset: &Path) -> Result<SequenceConfig, String> {
    let path = dataset.join("sequence.toml");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let file: SequenceConfigFile =
        toml::from_str(&text).map_err(|e| format!("invalid {}: {e}", path.display()))?;
    Ok(file.to_config())
}

fn run_pipeline(
    dataset: &Path,
    config: PipelineConfig,
    seq_cfg: &SequenceConfig,
) -> Result<Pipeline, String> {
    let sequence = TumSequence::open(dataset, seq_cfg)
        .map_err(|e| format!("cannot open dataset {}: {e}", dataset.display()))?;
    let mut pipeline =
        Pipeline::new(config, seq_cfg).map_err(|e| format!("pipeline setup failed: {e}"))?;
    for event in sequence.events() {
        match event.map_err(|e| format!("dataset error: {e}"))? {
            SequenceEvent::Frame(frame) => {
                let report = pipeline
                    .push_frame(&frame)
                    .map_err(|e| format!("frame {:.6} failed: {e}", frame.timestamp))?;
                log::info!(
                    "frame {} t={:.3} patches={} iters={} residuals={}",
                    report.frame_index,
                    report.timestamp,
                    report.tracked_patches,
                    report.update.iterations,
                    report.update.residual_count,
                );
            }
            SequenceEvent::Imu(sample) => pipeline.push_imu(sample),
        }
    }
    Ok(pipeline)
}

fn cmd_run(
    dataset: &Path,
    config: Option<&Path>,
    no_imu: bool,
    no_deformation: bool,
    trajectory_out: &Path,
    mesh_out: Option<&Path>,
    report_out: Option<&Path>,
) -> Result<(), String> {
    let mut cfg = load_pipeline_config(config)?;
    if no_imu {
        cfg.use_imu = false;
    }
    if no_deformation {
        cfg.use_deformation = false;
    }
    let seq_cfg = load_sequence_config(dataset)?;
    let pipeline = run_pipeline(dataset, cfg, &seq_cfg)?;

    write_trajectory(trajectory_out, &pipeline.trajectory)
        .map_err(|e| format!("cannot write trajectory: {e}"))?;
    println!(
        "tracked {} frames, {} live patches, AIE {}",
        pipeline.trajectory.len(),
        pipeline.features.len(),
        pipeline
            .average_intensity_error()
            .map_or("n/a".to_string(), |v| format!("{v:.3}")),
    );

    let gt_path = dataset.join("groundtruth.txt");
    if gt_path.exists() {
        let reference =
            read_trajectory(&gt_path).map_err(|e| format!("cannot read ground truth: {e}"))?;
        match absolute_trajectory_error(&pipeline.trajectory, &reference, ASSOCIATION_WINDOW) {
            Ok(ate) => println!("ATE RMSE {ate:.4} m"),
            Err(e) => println!("ATE unavailable: {e}"),
        }
    }

    if let Some(path) = mesh_out {
        pipeline.write_mesh(path).map_err(|e| format!("mesh export failed: {e}"))?;
        println!("mesh written to {}", path.display());
    }
    if let Some(path) = report_out {
        let json = serde_json::to_string_pretty(&pipeline.report())
            .map_err(|e| format!("report serialization failed: {e}"))?;
        std::fs::write(path, json).map_err(|e| format!("cannot write report: {e}"))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn default_scene(seed: u64) -> Scene {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Scene {
        objects: vec![
            SceneObject {
                primitive: Primitive::Plane { point: [0.0, 0.0, 3.0], normal: [0.0, 0.0, -1.0] },
                texture: Texture::default_random(&mut rng, 0.4),
            },
            SceneObject {
                primitive: Primitive::Plane { point: [-2.0, 0.0, 0.0], normal: [1.0, 0.0, 0.0] },
                texture: Texture::default_random(&mut rng, 0.5),
            },
            SceneObject {
                primitive: Primitive::Plane { point: [0.0, 1.5, 0.0], normal: [0.0, -1.0, 0.0] },
                texture: Texture::default_random(&mut rng, 0.5),
            },
            SceneObject {
                primitive: Primitive::AxisBox { min: [-0.6, -0.5, 1.6], max: [-0.1, 0.4, 2.2] },
                texture: Texture::default_random(&mut rng, 0.2),
            },
            SceneObject {
                primitive: Primitive::Sphere { center: [0.7, 0.2, 2.2], radius: 0.35 },
                texture: Texture::default_random(&mut rng, 0.25),
            },
        ],
    }
}

fn preset_trajectory(kind: TrajectoryKind) -> Trajectory {
    match kind {
        TrajectoryKind::Static => Trajectory::Static { position: [0.0; 3], rotation: [0.0; 3] },
        TrajectoryKind::Line => Trajectory::Line {
            start: [-0.3, 0.0, 0.0],
            velocity: [0.15, 0.0, 0.0],
            rotation: [0.0; 3],
        },
        TrajectoryKind::Orbit => Trajectory::Orbit {
            center: [0.0, 0.0, 0.0],
            radius: 0.3,
            angular_rate: 0.5,
            rotation: [0.0; 3],
        },
        TrajectoryKind::Sinusoid => Trajectory::Sinusoid {
            position: [0.0; 3],
            rotation: [0.0; 3],
            trans_amplitude: [0.08, 0.05, 0.03],
            trans_frequency: [0.4, 0.3, 0.25],
            trans_phase: [0.0, 1.3, 2.1],
            rot_axis: [0.0, 1.0, 0.0],
            rot_amplitude: 0.05,
            rot_frequency: 0.3,
        },
        TrajectoryKind::Fast => Trajectory::Sinusoid {
            position: [0.0; 3],
            rotation: [0.0; 3],
            trans_amplitude: [0.25, 0.15, 0.1],
            trans_frequency: [1.2, 1.0, 0.8],
            trans_phase: [0.0, 1.3, 2.1],
            rot_axis: [0.2, 1.0, 0.1],
            rot_amplitude: 0.4,
            rot_frequency: 1.0,
        },
    }
}

fn cmd_synth(out: &Path, kind: TrajectoryKind, duration: f64, seed: u64) -> Result<(), String> {
    let intr = CameraIntrinsics::new(240.0, 240.0, 159.5, 119.5, 320, 240);
    let seq_cfg = SequenceConfig::new(intr, 200.0, 30.0);
    let scene = default_scene(seed);
    let traj = preset_trajectory(kind);
    let opts = GenerateOptions { duration, seed, ..Default::default() };
    let seq = generate_sequence(&scene, &traj, &seq_cfg, &opts)
        .map_err(|e| format!("generation failed: {e}"))?;
    write_sequence(out, &seq, &seq_cfg).map_err(|e| format!("cannot write sequence: {e}"))?;
    println!(
        "wrote {} events to {} (motion class: {:?})",
        seq.events.len(),
        out.display(),
        seq.motion_class
    );
    Ok(())
}

fn cmd_track_eval(dataset: &Path, config: Option<&Path>) -> Result<(), String> {
    let base = load_pipeline_config(config)?;
    let seq_cfg = load_sequence_config(dataset)?;
    let mut with = base.clone();
    with.use_deformation = true;
    let mut without = base;
    without.use_deformation = false;

    let p_with = run_pipeline(dataset, with, &seq_cfg)?;
    let p_without = run_pipeline(dataset, without, &seq_cfg)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("AIE with deformation:    {}", fmt(p_with.average_intensity_error()));
    println!("AIE without deformation: {}", fmt(p_without.average_intensity_error()));
    Ok(())
}

fn cmd_eval_ate(estimate: &Path, reference: &Path, window: f64) -> Result<(), String> {
    let est = read_trajectory(estimate)
        .map_err(|e| format!("cannot read {}: {e}", estimate.display()))?;
    let refr = read_trajectory(reference)
        .map_err(|e| format!("cannot read {}: {e}", reference.display()))?;
    let ate = absolute_trajectory_error(&est, &refr, window)
        .map_err(|e| format!("ATE failed: {e}"))?;
    println!("ATE RMSE {ate:.6} m");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            dataset,
            config,
            no_imu,
            no_deformation,
            trajectory_out,
            mesh_out,
            report_out,
        } => cmd_run(
            dataset,
            config.as_deref(),
            *no_imu,
            *no_deformation,
            trajectory_out,
            mesh_out.as_deref(),
            report_out.as_deref(),
        ),
        Command::Synth { out, trajectory, duration, seed } => {
            cmd_synth(out, *trajectory, *duration, *seed)
        }
        Command::TrackEval { dataset, config } => cmd_track_eval(dataset, config.as_deref()),
        Command::EvalAte { estimate, reference, window } => {
            cmd_eval_ate(estimate, reference, *window)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            // configuration/input problems exit with 2, runtime failures with 1
            if msg.starts_with("invalid") || msg.starts_with("cannot read") {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
