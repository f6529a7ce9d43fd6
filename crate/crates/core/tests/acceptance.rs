//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion. Pass criterion numbers as arguments to run a
//! subset: `cargo test --test acceptance -- 4 9`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gde_core::camera::{depth_from_displaced_contact, ray_ground_intersection, CameraIntrinsics, PixelCoord};
use gde_core::fusion::gradcheck::{parameter_class, run_suite, GradCheckConfig};
use gde_core::fusion::{AttentionMask, FeatureMap, FusionModel, Mat, MaskMode, ModelConfig, PositionEncoding};
use gde_core::ground::{build_map, encode_disparity, GroundPlaneConfig};
use gde_core::kitti::{labels_to_text, parse_calib, parse_labels};
use gde_core::pose::{g_map, render_observations, CameraPose};
use gde_core::scene::ablation::{oracle_pairs, train_variant, Variant};
use gde_core::scene::{run_robustness, AblationSettings, BucketMae, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

fn ground_depth_closed_form() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let level = CameraPose::identity();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let fy = rng.gen_range(50.0..3000.0);
        let el = rng.gen_range(0.3..5.0);
        let cy = rng.gen_range(0.0..600.0);
        let v = cy + rng.gen_range(1e-3..2000.0);
        let k = CameraIntrinsics::new(fy, fy, 0.0, cy).unwrap();
        let g = GroundPlaneConfig::new(el, 0.54, 0.0).unwrap();
        let z = ray_ground_intersection(PixelCoord::new(0.0, v), &k, &level, &g).map_err(|e| e.to_string())?;
        worst = worst.max(rel(z, fy * el / (v - cy)));
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e} over 10^4 triples"))
}

fn disparity_encoding() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let fy = rng.gen_range(50.0..3000.0);
        let el = rng.gen_range(0.3..5.0);
        let b = rng.gen_range(0.05..2.0);
        let s = rng.gen_range(0.0..100.0);
        let off = rng.gen_range(1e-6..2000.0);
        let k = CameraIntrinsics::new(fy, fy, 0.0, 0.0).unwrap();
        let g = GroundPlaneConfig::new(el, b, s).unwrap();
        worst = worst.max(rel(encode_disparity(off, &k, &g), fy * b * off / (fy * el + s)));
        let neg = encode_disparity(-off, &k, &g);
        ensure(neg == 0.0, || format!("negative offset {} gave {neg}", -off))?;
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:e}"))?;
    let k = CameraIntrinsics::new(721.5377, 721.5377, 609.5593, 172.854).unwrap();
    let g = GroundPlaneConfig::with_default_stabilizer(1.65, 0.54, &k).unwrap();
    let at_zero = encode_disparity(0.0, &k, &g);
    ensure(at_zero == 0.0, || format!("value at the horizon {at_zero}"))?;
    for h in [1e-3, 1e-6, 1e-9, 1e-12] {
        let (above, below) = (encode_disparity(-h, &k, &g), encode_disparity(h, &k, &g));
        ensure(above == 0.0 && below <= h, || format!("one-sided limits at h={h}: {above}, {below}"))?;
    }
    Ok(format!("max relative error {worst:.1e}; d(0) = 0; one-sided limits agree"))
}

fn displaced_contact_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let fy = rng.gen_range(50.0..3000.0);
        let el = rng.gen_range(0.3..5.0);
        let cy = rng.gen_range(0.0..600.0);
        let off = rng.gen_range(1e-2..1000.0);
        let t_y = off * rng.gen_range(0.0..0.99);
        let k = CameraIntrinsics::new(fy, fy, 0.0, cy).unwrap();
        let g = GroundPlaneConfig::new(el, 0.54, 0.0).unwrap();
        let z_r = fy * el / off;
        let z = depth_from_displaced_contact(z_r, t_y, &k, &g).map_err(|e| e.to_string())?;
        worst = worst.max(rel(z, fy * el / (off - t_y)));
        let same = depth_from_displaced_contact(z_r, 0.0, &k, &g).map_err(|e| e.to_string())?;
        ensure(same == z_r, || format!("t_y = 0 gave {same} for z_r = {z_r}"))?;
    }
    ensure(worst < 1e-9, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}; t_y = 0 exact"))
}

fn posed_map_reduction() -> Check {
    let k = CameraIntrinsics::new(1000.0, 1000.0, 320.0, 180.0).unwrap();
    let g = GroundPlaneConfig::with_default_stabilizer(1.65, 0.54, &k).unwrap();
    let map = build_map(640, 360, &k, &CameraPose::identity(), &g).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for row in 0..360 {
        let expected = encode_disparity(row as f64 + 0.5 - k.cy, &k, &g);
        for col in 0..640 {
            worst = worst.max((map.encoded_at(col, row) - expected).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("identity map deviates by {worst:e}"))?;
    let mut worst_row = 0.0f64;
    for deg in [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0f64] {
        let map = build_map(640, 360, &k, &CameraPose::from_degrees(deg, 0.0), &g).map_err(|e| e.to_string())?;
        let row = map.horizon_row().ok_or_else(|| format!("no ground at pitch {deg}°"))? as f64;
        let expected = k.cy - k.fy * deg.to_radians().tan();
        worst_row = worst_row.max((row - expected).abs());
    }
    ensure(worst_row <= 0.5, || format!("horizon row off by {worst_row} px"))?;
    Ok(format!("identity max abs error {worst:.1e}; pitched horizon within {worst_row:.3} px"))
}

fn pose_round_trip() -> Check {
    let k = CameraIntrinsics::new(1000.0, 900.0, 640.0, 200.0).unwrap();
    let mut worst = 0.0f64;
    for i in 0..31 {
        for j in 0..31 {
            let pitch = (-15.0 + i as f64).to_radians();
            let roll = (-15.0 + j as f64).to_radians();
            let (gp, vp) = render_observations(&CameraPose::from_angles(pitch, roll), &k).map_err(|e| e.to_string())?;
            let back = g_map(&gp, &vp, &k);
            worst = worst.max((back.pitch() - pitch).abs()).max((back.roll() - roll).abs());
        }
    }
    ensure(worst < 1e-9, || format!("max angle error {worst:e} rad"))?;
    Ok(format!("max angle error {worst:.1e} rad over 31x31 grid"))
}

fn gradient_suite() -> Check {
    let cfg = GradCheckConfig::default();
    let report = run_suite(2024, 20, &cfg, None).map_err(|e| e.to_string())?;
    let model = FusionModel::<f64>::random(
        ModelConfig { channels: 2, encoder_layers: 2, decoder_layers: 2, ..ModelConfig::default() },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .map_err(|e| e.to_string())?;
    let mut expected: BTreeSet<String> = model.params.tensor_names().iter().map(|n| parameter_class(n)).collect();
    expected.extend(["input.image".to_string(), "input.depth".to_string()]);
    let seen: BTreeSet<String> = report.classes.iter().map(|c| c.class.clone()).collect();
    ensure(expected.is_subset(&seen), || format!("classes not checked: {:?}", expected.difference(&seen).collect::<Vec<_>>()))?;
    ensure(report.passed(cfg.tolerance), || {
        let bad: Vec<_> = report.classes.iter().filter(|c| c.worst_relative_error >= cfg.tolerance).collect();
        format!("{bad:?}")
    })?;
    let broken = run_suite(2024, 2, &cfg, Some("decoder.cross.wv_enc")).map_err(|e| e.to_string())?;
    ensure(!broken.passed(cfg.tolerance), || "corrupted gradient went unnoticed".into())?;
    Ok(format!("{} classes, worst {:.1e}; corrupted gradient detected ({:.1e})", seen.len(), report.worst(), broken.worst()))
}

fn attention_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ws, hs, c) = (7, 6, 4);
    let mut worst = 0.0f64;
    let mut matrices = 0;
    for radius in [0, 1, 2, 4] {
        for heads in [1, 2] {
            for mode in [MaskMode::Renormalize, MaskMode::Additive] {
                let config = ModelConfig {
                    channels: c,
                    heads,
                    encoder_layers: 2,
                    decoder_layers: 2,
                    window_radius: radius,
                    mask_mode: mode,
                    ..ModelConfig::default()
                };
                let model = FusionModel::<f64>::random(config, &mut rng).map_err(|e| e.to_string())?;
                let img = FeatureMap::new(ws, hs, Mat::from_fn(ws * hs, c, |_, _| rng.gen_range(-1.0..1.0)))
                    .map_err(|e| e.to_string())?;
                let depth: Vec<f64> = (0..ws * hs).map(|_| rng.gen_range(0.0..1.0)).collect();
                let pe = PositionEncoding::sinusoidal(ws, hs, c).map_err(|e| e.to_string())?;
                let mask = AttentionMask::window(ws, hs, radius);
                let trace = model.forward(&img, &depth, &pe, &mask).map_err(|e| e.to_string())?;
                for out in [trace.encoder_output(), trace.output()] {
                    ensure((out.ws(), out.hs(), out.channels()) == (ws, hs, c), || "shape changed".into())?;
                }
                let weights = trace.attention_weights();
                ensure(weights.len() == 2 * heads + 2 * 2 * heads, || format!("{} attention matrices", weights.len()))?;
                for w in weights {
                    matrices += 1;
                    for i in 0..ws * hs {
                        worst = worst.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
                        for j in 0..ws * hs {
                            let far = (i / ws).abs_diff(j / ws).max((i % ws).abs_diff(j % ws)) > radius;
                            ensure(!far || w.get(i, j) == 0.0, || format!("weight {i}->{j} at radius {radius}"))?;
                        }
                    }
                }
            }
        }
    }
    ensure(worst < 1e-6, || format!("row sum off by {worst:e}"))?;
    Ok(format!("{matrices} attention matrices: row sums within {worst:.1e}, zero outside the window, shapes kept"))
}

/// Uncorrected mean absolute error for exact pure-pitch noise, contacts
/// uniform on 5–50 m, reads capped at 80 m: Gauss–Hermite quadrature over the
/// pitch error and Gauss–Legendre over depth.
const ORACLE_MAE: [(f64, f64); 3] = [(1.0, 8.17053), (2.0, 13.87079), (3.0, 17.70385)];
const ORACLE_TOLERANCE: f64 = 0.20;

fn robustness() -> Check {
    let cfg = ExperimentConfig { seed: 7, trials: 100, sigmas: vec![0.0, 1.0, 2.0, 3.0], ..ExperimentConfig::default() };
    let report = run_robustness(&cfg).map_err(|e| e.to_string())?;
    let mae: Vec<f64> = report.summary.iter().map(|s| s.uncorrected_mae).collect();
    ensure(report.uncorrected_strictly_increasing(), || format!("not increasing: {mae:?}"))?;
    for (sigma, expected) in ORACLE_MAE {
        let s = report.summary.iter().find(|s| s.sigma_deg == sigma).unwrap();
        ensure(rel(s.uncorrected_mae, expected) <= ORACLE_TOLERANCE, || {
            format!("σ={sigma}: {} m vs oracle {expected} m", s.uncorrected_mae)
        })?;
    }
    let corrected = report.summary[3].corrected_mae.unwrap();
    ensure(corrected <= 1e-6, || format!("corrected error at 3° is {corrected:e} m"))?;
    Ok(format!(
        "uncorrected MAE {:.2} < {:.2} < {:.2} < {:.2} m (oracle 8.17/13.87/17.70); corrected at 3° {corrected:.1e} m",
        mae[0], mae[1], mae[2], mae[3]
    ))
}

const ABLATION_SEEDS: u64 = 10;
const REQUIRED_WINS: usize = 9;
/// Share of the achievable far-bucket gain (baseline minus contact-row oracle)
/// the fused model must realize on average.
const REQUIRED_GAIN_SHARE: f64 = 0.25;

struct SeedResult {
    oracle: BucketMae,
    baseline: BucketMae,
    fused: BucketMae,
    zeroed: BucketMae,
}

fn ablation() -> Check {
    let settings = AblationSettings::default();
    let results: Vec<SeedResult> = (0..ABLATION_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = ExperimentConfig { seed, ..ExperimentConfig::ablation_default() };
            let mae = |v| train_variant(&cfg, &settings, v).map(|p| BucketMae::from_pairs(&p));
            Ok(SeedResult {
                oracle: BucketMae::from_pairs(&oracle_pairs(&cfg, &settings)?),
                baseline: mae(Variant::Baseline)?,
                fused: mae(Variant::Fused)?,
                zeroed: mae(Variant::ZeroedDepth)?,
            })
        })
        .collect::<Result<_, gde_core::error::SceneError>>()
        .map_err(|e| e.to_string())?;
    for (seed, r) in results.iter().enumerate() {
        println!(
            "      seed {seed}: far MAE oracle {:.2}  baseline {:.2}  fused {:.2}  zeroed {:.2} m",
            r.oracle.far, r.baseline.far, r.fused.far, r.zeroed.far
        );
    }
    let n = results.len() as f64;
    let achievable = results.iter().map(|r| r.baseline.far - r.oracle.far).sum::<f64>() / n;
    let threshold = REQUIRED_GAIN_SHARE * achievable;
    let gain = |f: fn(&SeedResult) -> f64| results.iter().map(|r| r.baseline.far - f(r)).sum::<f64>() / n;
    let wins = |f: fn(&SeedResult) -> f64| results.iter().filter(|r| f(r) < r.baseline.far).count();
    let (fused_gain, fused_wins) = (gain(|r| r.fused.far), wins(|r| r.fused.far));
    let (zeroed_gain, zeroed_wins) = (gain(|r| r.zeroed.far), wins(|r| r.zeroed.far));
    let summary = format!(
        "fused beats baseline in {fused_wins}/{ABLATION_SEEDS} seeds, mean far gain {fused_gain:.2} m; zeroed depth {zeroed_wins}/{ABLATION_SEEDS}, {zeroed_gain:.2} m; threshold {threshold:.2} m"
    );
    ensure(fused_wins >= REQUIRED_WINS && fused_gain >= threshold, || summary.clone())?;
    ensure(zeroed_gain < threshold, || format!("zeroed depth keeps the advantage: {summary}"))?;
    Ok(summary)
}

fn fixture(name: &str) -> Result<String, String> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))
}

fn parser_fidelity() -> Check {
    let mut checked = 0;
    let mut k = None;
    for name in ["calib_000000.txt", "calib_short.txt"] {
        let calib = parse_calib(&fixture(name)?).map_err(|e| e.to_string())?;
        let again = parse_calib(&calib.to_text()).map_err(|e| e.to_string())?;
        ensure(again.p2 == calib.p2, || format!("{name} P2 changed"))?;
        ensure(again.other_lines().eq(calib.other_lines()), || format!("{name} other lines changed"))?;
        k.get_or_insert(calib.intrinsics());
    }
    let k = k.unwrap();
    let mut cars = 0;
    for name in ["label_000000.txt"] {
        let labels = parse_labels(&fixture(name)?).map_err(|e| e.to_string())?;
        let again = parse_labels(&labels_to_text(&labels)).map_err(|e| e.to_string())?;
        ensure(again == labels, || format!("{name} changed on round trip"))?;
        checked += labels.len();
        for l in labels.iter().filter(|l| l.is_untruncated_car()) {
            let row = l.contact_row(&k, 1.65).ok_or("car behind camera")?;
            ensure(l.bbox[1] <= row && row <= l.bbox[3], || format!("contact row {row:.2} outside {:?}", l.bbox))?;
            cars += 1;
        }
    }
    Ok(format!("2 calib files and {checked} labels round-trip; {cars} cars have their contact row inside the box"))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "ground depth closed form", limit: Duration::from_secs(1), run: ground_depth_closed_form },
        Criterion { id: 2, name: "disparity encoding", limit: Duration::from_secs(1), run: disparity_encoding },
        Criterion { id: 3, name: "displaced contact", limit: Duration::from_secs(1), run: displaced_contact_identity },
        Criterion { id: 4, name: "posed map reduction", limit: Duration::from_secs(5), run: posed_map_reduction },
        Criterion { id: 5, name: "pose round trip", limit: Duration::from_secs(1), run: pose_round_trip },
        Criterion { id: 6, name: "gradient suite", limit: Duration::from_secs(30), run: gradient_suite },
        Criterion { id: 7, name: "attention contracts", limit: Duration::from_secs(5), run: attention_contracts },
        Criterion { id: 8, name: "pose-noise robustness", limit: Duration::from_secs(60), run: robustness },
        Criterion { id: 9, name: "fusion ablation", limit: Duration::from_secs(600), run: ablation },
        Criterion { id: 10, name: "KITTI parser fidelity", limit: Duration::from_secs(1), run: parser_fidelity },
    ];
    let only: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; too slow")),
            Err(e) => (false, e),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "{} #{:<2} {} [{:.2?} / {:?}]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed,
            c.limit
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
