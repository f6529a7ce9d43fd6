//! `gde`: ground depth maps, pose fitting, experiments and gradient checks.

mod plot;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::TypedValueParser as _;
use clap::{Args, Parser, Subcommand};
use gde_core::camera::CameraIntrinsics;
use gde_core::error::PoseError;
use gde_core::fusion::gradcheck::{run_suite, GradCheckConfig};
use gde_core::ground::{
    build_map, default_stabilizer, GroundPlaneConfig, DEFAULT_BASELINE, DEFAULT_ELEVATION, DEFAULT_STRIDE,
};
use gde_core::kitti::{parse_calib, parse_labels};
use gde_core::pose::{fit_pose, g_map, pose_loss, CameraPose, HorizonLine, PoseObservation, VanishingPoint};
use gde_core::scene::{run_ablation, run_robustness, AblationSettings, ExperimentConfig, PoseSource, DEFAULT_MAX_DEPTH};
use serde_json::json;

/// Negative-control target for `grad-check --break-gradient`.
const BROKEN_CLASS: &str = "head.weight";

#[derive(Parser)]
#[command(name = "gde", version, about = "Pose-aware ground depth maps and ground-aware fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the ground depth map for a camera pose and export it
    DepthMap(DepthMapArgs),
    /// Fit pitch and roll to horizon / vanishing-point observations
    FitPose(FitPoseArgs),
    /// Run a synthetic experiment
    #[command(subcommand)]
    Experiment(Experiment),
    /// Finite-difference check of the fusion transformer's gradients
    GradCheck(GradCheckArgs),
    /// Parse a KITTI file and print it back in canonical form
    #[command(subcommand)]
    ParseKitti(ParseKitti),
}

#[derive(Args)]
struct IntrinsicsArgs {
    /// KITTI calibration file; intrinsics are read from its P2 line
    #[arg(long, value_name = "FILE", conflicts_with_all = ["fx", "fy", "cx", "cy"])]
    calib: Option<PathBuf>,
    /// Focal length along x, pixels
    #[arg(long, required_unless_present = "calib")]
    fx: Option<f64>,
    /// Focal length along y, pixels
    #[arg(long, required_unless_present = "calib")]
    fy: Option<f64>,
    /// Principal point column, pixels
    #[arg(long, required_unless_present = "calib")]
    cx: Option<f64>,
    /// Principal point row, pixels
    #[arg(long, required_unless_present = "calib")]
    cy: Option<f64>,
}

#[derive(Args)]
struct DepthMapArgs {
    #[command(flatten)]
    intrinsics: IntrinsicsArgs,
    /// Image width, pixels
    #[arg(long)]
    width: usize,
    /// Image height, pixels
    #[arg(long)]
    height: usize,
    /// Down-sampling factor s; the map is (width/s) × (height/s) with intrinsics divided by s
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
    /// Camera height above the ground EL, meters
    #[arg(long, default_value_t = DEFAULT_ELEVATION)]
    el: f64,
    /// Virtual stereo baseline B, meters
    #[arg(long, default_value_t = DEFAULT_BASELINE)]
    baseline: f64,
    /// Stabilizer b [default: 0.01·fy·EL, with fy at map resolution]
    #[arg(long)]
    stabilizer: Option<f64>,
    /// Camera pitch, degrees
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    /// Camera roll, degrees
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    roll: f64,
    /// CSV of the encoded map, one row per line
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// CSV of the metric ground depth (0 where there is no ground)
    #[arg(long, value_name = "FILE")]
    depth_csv: Option<PathBuf>,
    /// 16-bit binary PGM of the encoded map
    #[arg(long, value_name = "FILE")]
    pgm: Option<PathBuf>,
    /// Encoded value mapped to 65535 in the PGM [default: the map's maximum]
    #[arg(long)]
    d_max: Option<f64>,
}

#[derive(Args)]
struct FitPoseArgs {
    /// Observation CSV, one `vp_u,vp_v,horizon_angle_rad,horizon_row` per line
    observations: PathBuf,
    #[command(flatten)]
    intrinsics: IntrinsicsArgs,
    /// Also write the result as JSON
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Experiment {
    /// Depth error of ground-contact reads against pose noise σ
    Robustness(RobustnessArgs),
    /// Encoder-only baseline against the ground-depth fused model
    Ablation(AblationArgs),
}

#[derive(Args)]
struct RobustnessArgs {
    /// Pose noise levels, degrees
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    sigmas: Vec<f64>,
    /// Trials per σ
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Random seed
    #[arg(long, env = "GDE_SEED", default_value_t = 7)]
    seed: u64,
    /// Objects per scene
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    objects: u64,
    /// Depth reported for reads beyond it or above the horizon, meters
    #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
    max_depth: f64,
    /// Skip the pose-corrected reads
    #[arg(long)]
    no_correction: bool,
    /// Correct with a pose fitted to this many jittered observations instead of the true pose
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    fit_observations: Option<u64>,
    /// Uniform jitter on fitted observations, pixels
    #[arg(long, default_value_t = 0.5)]
    fit_noise_px: f64,
    /// Directory for robustness_trials.csv, robustness_summary.csv and robustness.svg
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    /// Number of consecutive seeds, starting at --seed
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Random seed
    #[arg(long, env = "GDE_SEED", default_value_t = 0)]
    seed: u64,
    /// Optimizer steps per model
    #[arg(long, default_value_t = AblationSettings::default().steps)]
    steps: usize,
    /// Fresh scenes per step
    #[arg(long, default_value_t = AblationSettings::default().batch, value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
    batch: usize,
    /// Held-out scenes
    #[arg(long, default_value_t = AblationSettings::default().test_scenes, value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
    test_scenes: usize,
    /// Peak Adam learning rate (cosine decay to zero)
    #[arg(long, default_value_t = AblationSettings::default().adam.learning_rate)]
    lr: f64,
    /// Attention window radius in feature cells, both models
    #[arg(long, default_value_t = AblationSettings::default().window_radius)]
    window_radius: usize,
    /// Pose noise of the synthetic scenes, degrees
    #[arg(long, default_value_t = ExperimentConfig::ablation_default().pose_noise_sigma)]
    sigma: f64,
    /// Replace the fused model's depth queries with zeros
    #[arg(long)]
    zero_depth: bool,
    /// Directory for ablation.csv
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random seed
    #[arg(long, env = "GDE_SEED", default_value_t = 0)]
    seed: u64,
    /// Random 4×4×2 configurations
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    configs: u64,
    /// Corrupt one analytic gradient entry (negative control; must fail)
    #[arg(long)]
    break_gradient: bool,
}

#[derive(Subcommand)]
enum ParseKitti {
    /// Print the P2 intrinsics and the normalized calibration file
    Calib { file: PathBuf },
    /// Print every label in devkit format
    Labels {
        file: PathBuf,
        /// Also print the level-ground contact row of each car (EL = 1.65 m)
        #[arg(long, value_name = "FILE")]
        calib: Option<PathBuf>,
    },
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self { code: 3, message: format!("{}: {err}", path.display()) }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Outcome
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let file = File::create(path).map_err(|e| Failure::io(path, e))?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Failure::io(path, e))
}

fn intrinsics(args: &IntrinsicsArgs) -> Result<CameraIntrinsics<f64>, Failure> {
    if let Some(path) = &args.calib {
        return parse_calib(&read(path)?).map(|c| c.intrinsics()).map_err(|e| Failure::io(path, e));
    }
    match (args.fx, args.fy, args.cx, args.cy) {
        (Some(fx), Some(fy), Some(cx), Some(cy)) => {
            CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| Failure::usage(e.to_string()))
        }
        _ => Err(Failure::usage("intrinsics need --calib or all of --fx --fy --cx --cy")),
    }
}

fn depth_map(args: &DepthMapArgs) -> Outcome {
    let k = intrinsics(&args.intrinsics)?;
    if args.stride == 0 || args.width < args.stride || args.height < args.stride {
        return Err(Failure::usage(format!("stride {} does not fit a {}×{} image", args.stride, args.width, args.height)));
    }
    let kf = k.downscaled(args.stride as f64);
    let b = args.stabilizer.unwrap_or_else(|| default_stabilizer(args.el, &kf));
    let ground = GroundPlaneConfig::new(args.el, args.baseline, b).map_err(|e| Failure::usage(e.to_string()))?;
    let pose = CameraPose::from_degrees(args.pitch, args.roll);
    let (w, h) = (args.width / args.stride, args.height / args.stride);
    let map = build_map(w, h, &kf, &pose, &ground).map_err(|e| Failure::usage(e.to_string()))?;

    if let Some(path) = &args.output {
        write_with(path, |o| map.write_csv(o))?;
    }
    if let Some(path) = &args.depth_csv {
        write_with(path, |o| map.write_depth_csv(o))?;
    }
    let (lo, hi) = map.encoded_range();
    if let Some(path) = &args.pgm {
        let d_max = args.d_max.unwrap_or(hi);
        write_with(path, |o| map.write_pgm(o, d_max))?;
    }
    let horizon = map.horizon_row().map_or_else(|| "none".to_string(), |r| r.to_string());
    println!("map {w}x{h} stride {} stabilizer {b}", args.stride);
    println!("horizon_row {horizon}");
    println!("encoded_min {lo}");
    println!("encoded_max {hi}");
    Ok(())
}

fn parse_observations(text: &str, path: &Path) -> Result<Vec<PoseObservation<f64>>, Failure> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("vp_u")) {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::io(path, format!("line {}: {e}", i + 1)))?;
        if v.len() != 4 || v.iter().any(|x| !x.is_finite()) {
            return Err(Failure::io(path, format!("line {}: expected 4 finite numbers", i + 1)));
        }
        out.push(PoseObservation {
            vp: VanishingPoint { u: v[0], v: v[1] },
            horizon: HorizonLine { angle: v[2], row_at_cx: v[3] },
        });
    }
    Ok(out)
}

fn fit_pose_cmd(args: &FitPoseArgs) -> Outcome {
    let k = intrinsics(&args.intrinsics)?;
    let obs = parse_observations(&read(&args.observations)?, &args.observations)?;
    let pose = fit_pose(&obs, &k).map_err(|e| match e {
        PoseError::EmptyObservations => Failure { code: 4, message: format!("{}: no observations", args.observations.display()) },
        other => Failure::usage(other.to_string()),
    })?;
    let loss = obs.iter().map(|o| pose_loss(&pose, &g_map(&o.horizon, &o.vp, &k))).sum::<f64>() / obs.len() as f64;
    let (pitch, roll) = (pose.pitch().to_degrees(), pose.roll().to_degrees());
    println!("pitch_deg {pitch}");
    println!("roll_deg {roll}");
    println!("loss {loss}");
    if let Some(path) = &args.json {
        let value = json!({ "pitch_deg": pitch, "roll_deg": roll, "loss": loss, "observations": obs.len() });
        write_with(path, |o| writeln!(o, "{value:#}"))?;
    }
    Ok(())
}

fn robustness(args: &RobustnessArgs) -> Outcome {
    let cfg = ExperimentConfig {
        sigmas: args.sigmas.clone(),
        trials: args.trials as usize,
        seed: args.seed,
        objects_per_scene: args.objects as usize,
        max_depth: args.max_depth,
        use_pose_correction: !args.no_correction,
        pose_source: match args.fit_observations {
            Some(n) => PoseSource::Fitted { observations: n as usize, noise_px: args.fit_noise_px },
            None => PoseSource::True,
        },
        ..ExperimentConfig::default()
    };
    let report = run_robustness(&cfg).map_err(|e| Failure::usage(e.to_string()))?;
    let mut summary = Vec::new();
    report.write_summary_csv(&mut summary).expect("writing to memory");
    print!("{}", String::from_utf8_lossy(&summary));
    let verdict = if report.uncorrected_strictly_increasing() { "yes" } else { "no" };
    println!("uncorrected error strictly increasing over sigma: {verdict}");
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        write_with(&dir.join("robustness_trials.csv"), |o| report.write_trials_csv(o))?;
        write_with(&dir.join("robustness_summary.csv"), |o| o.write_all(&summary))?;
        let svg = plot::error_bar_svg(&report.summary);
        write_with(&dir.join("robustness.svg"), |o| o.write_all(svg.as_bytes()))?;
    }
    Ok(())
}

fn ablation(args: &AblationArgs) -> Outcome {
    let defaults = AblationSettings::default();
    let settings = AblationSettings {
        steps: args.steps,
        batch: args.batch,
        test_scenes: args.test_scenes,
        window_radius: args.window_radius,
        adam: gde_core::fusion::train::AdamConfig { learning_rate: args.lr, ..defaults.adam },
        ..defaults
    };
    let header = "seed,oracle_near_m,oracle_far_m,baseline_near_m,baseline_far_m,fused_near_m,fused_far_m";
    let mut csv = vec![header.to_string()];
    let mut wins = 0;
    println!("{header}");
    for seed in args.seed..args.seed + args.seeds {
        let cfg = ExperimentConfig {
            seed,
            pose_noise_sigma: args.sigma,
            use_fusion: !args.zero_depth,
            ..ExperimentConfig::ablation_default()
        };
        let r = run_ablation(&cfg, &settings).map_err(|e| Failure::usage(e.to_string()))?;
        if r.fused.far < r.baseline.far {
            wins += 1;
        }
        let line = format!(
            "{seed},{},{},{},{},{},{}",
            r.oracle.near, r.oracle.far, r.baseline.near, r.baseline.far, r.fused.near, r.fused.far
        );
        println!("{line}");
        csv.push(line);
    }
    println!("fused far-bucket error below baseline in {wins}/{} seeds", args.seeds);
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        write_with(&dir.join("ablation.csv"), |o| writeln!(o, "{}", csv.join("\n")))?;
    }
    Ok(())
}

fn grad_check(args: &GradCheckArgs) -> Outcome {
    let cfg = GradCheckConfig::default();
    let corrupt = args.break_gradient.then_some(BROKEN_CLASS);
    let report = run_suite(args.seed, args.configs as usize, &cfg, corrupt).map_err(|e| Failure::usage(e.to_string()))?;
    println!("{:<32} {:>14} {:>8}", "class", "worst_rel_err", "entries");
    for c in &report.classes {
        println!("{:<32} {:>14.3e} {:>8}", c.class, c.worst_relative_error, c.entries);
    }
    if report.passed(cfg.tolerance) {
        println!("PASS worst {:.3e} < {:e}", report.worst(), cfg.tolerance);
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("FAIL worst {:.3e} >= {:e}", report.worst(), cfg.tolerance) })
    }
}

fn parse_kitti(cmd: &ParseKitti) -> Outcome {
    match cmd {
        ParseKitti::Calib { file } => {
            let calib = parse_calib(&read(file)?).map_err(|e| Failure::io(file, e))?;
            let k = calib.intrinsics();
            println!("# fx {} fy {} cx {} cy {}", k.fx, k.fy, k.cx, k.cy);
            print!("{}", calib.to_text());
        }
        ParseKitti::Labels { file, calib } => {
            let labels = parse_labels(&read(file)?).map_err(|e| Failure::io(file, e))?;
            let k = match calib {
                Some(path) => Some(parse_calib(&read(path)?).map_err(|e| Failure::io(path, e))?.intrinsics()),
                None => None,
            };
            for l in &labels {
                match k.as_ref().filter(|_| l.is_untruncated_car()).and_then(|k| l.contact_row(k, DEFAULT_ELEVATION)) {
                    Some(row) => {
                        let inside = l.bbox[1] <= row && row <= l.bbox[3];
                        println!("{}  # contact_row {row:.2} {}", l.to_line(), if inside { "inside" } else { "OUTSIDE" });
                    }
                    None => println!("{}", l.to_line()),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::DepthMap(a) => depth_map(a),
        Command::FitPose(a) => fit_pose_cmd(a),
        Command::Experiment(Experiment::Robustness(a)) => robustness(a),
        Command::Experiment(Experiment::Ablation(a)) => ablation(a),
        Command::GradCheck(a) => grad_check(a),
        Command::ParseKitti(c) => parse_kitti(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gde: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
