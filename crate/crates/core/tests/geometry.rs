use gde_core::camera::{
    back_project, depth_from_displaced_contact, project, ray_ground_intersection, CameraIntrinsics, PixelCoord,
};
use gde_core::ground::{build_map, build_map_chunked, encode_disparity, encode_disparity_from_depth, GroundPlaneConfig};
use gde_core::pose::{fit_pose, g_map, pose_loss, render_observations, CameraPose, PoseObservation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intrinsics() -> impl Strategy<Value = CameraIntrinsics<f64>> {
    (100.0..2000.0f64, 100.0..2000.0f64, 0.0..1300.0f64, 0.0..400.0f64)
        .prop_map(|(fx, fy, cx, cy)| CameraIntrinsics::new(fx, fy, cx, cy).unwrap())
}

fn ground() -> impl Strategy<Value = GroundPlaneConfig<f64>> {
    (0.5..3.0f64, 0.1..1.0f64, 0.0..50.0f64).prop_map(|(el, b, s)| GroundPlaneConfig::new(el, b, s).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

proptest! {
    #[test]
    fn project_inverts_back_project(k in intrinsics(), u in -500.0..2000.0f64, v in -500.0..900.0f64, z in 0.01..500.0f64) {
        let q = project(back_project(PixelCoord::new(u, v), z, &k), &k).unwrap();
        prop_assert!((q.u - u).abs() <= 1e-12 * u.abs().max(k.cx).max(1.0));
        prop_assert!((q.v - v).abs() <= 1e-12 * v.abs().max(k.cy).max(1.0));
    }

    #[test]
    fn level_ray_matches_closed_form(k in intrinsics(), g in ground(), dv in 1e-3..1000.0f64, u in 0.0..1300.0f64) {
        let p = PixelCoord::new(u, k.cy + dv);
        let z = ray_ground_intersection(p, &k, &CameraPose::identity(), &g).unwrap();
        prop_assert!(rel(z, k.fy * g.el / dv) < 1e-12);
    }

    #[test]
    fn level_depth_decreases_down_the_image(k in intrinsics(), g in ground(), dv in 1e-3..500.0f64, step in 1e-3..10.0f64) {
        let level = CameraPose::identity();
        let upper = ray_ground_intersection(PixelCoord::new(k.cx, k.cy + dv), &k, &level, &g).unwrap();
        let lower = ray_ground_intersection(PixelCoord::new(k.cx, k.cy + dv + step), &k, &level, &g).unwrap();
        prop_assert!(lower < upper);
    }

    #[test]
    fn displaced_contact_is_a_row_shift(k in intrinsics(), g in ground(), dv in 1.0..500.0f64, frac in 0.0..0.95f64) {
        let t_y = frac * dv;
        let z_r = k.fy * g.el / dv;
        let z = depth_from_displaced_contact(z_r, t_y, &k, &g).unwrap();
        prop_assert!(rel(z, k.fy * g.el / (dv - t_y)) < 1e-9);
    }

    #[test]
    fn disparity_of_depth_matches_row_form(k in intrinsics(), g in ground(), dv in 1e-3..500.0f64) {
        let z = k.fy * g.el / dv;
        let d = encode_disparity_from_depth(z, &k, &g).unwrap();
        prop_assert!(rel(d, encode_disparity(dv, &k, &g)) < 1e-12);
    }

    #[test]
    fn disparity_is_monotone(k in intrinsics(), g in ground(), a in -100.0..500.0f64, b in -100.0..500.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(encode_disparity(lo, &k, &g) <= encode_disparity(hi, &k, &g));
    }

    #[test]
    fn posed_map_is_pointwise_geometry(
        pitch in -0.2..0.2f64,
        roll in -0.3..0.3f64,
        chunk in 1usize..20,
    ) {
        let k = CameraIntrinsics::new(80.0, 90.0, 20.0, 12.0).unwrap();
        let g = GroundPlaneConfig::with_default_stabilizer(1.65, 0.54, &k).unwrap();
        let pose = CameraPose::from_angles(pitch, roll);
        let map = build_map(40, 24, &k, &pose, &g).unwrap();
        prop_assert_eq!(&map, &build_map_chunked(40, 24, &k, &pose, &g, chunk).unwrap());
        for row in 0..24 {
            for col in 0..40 {
                let p = PixelCoord::new(col as f64 + 0.5, row as f64 + 0.5);
                let (z, d) = match ray_ground_intersection(p, &k, &pose, &g) {
                    Ok(z) => (z, encode_disparity_from_depth(z, &k, &g).unwrap()),
                    Err(_) => (0.0, 0.0),
                };
                prop_assert_eq!(map.depth_at(col, row), z);
                prop_assert_eq!(map.encoded_at(col, row), d);
            }
        }
    }

    #[test]
    fn pose_round_trip(k in intrinsics(), pitch in -0.26..0.26f64, roll in -0.26..0.26f64) {
        let pose = CameraPose::from_angles(pitch, roll);
        let (gp, vp) = render_observations(&pose, &k).unwrap();
        let back = g_map(&gp, &vp, &k);
        prop_assert!((back.pitch() - pitch).abs() < 1e-9);
        prop_assert!((back.roll() - roll).abs() < 1e-9);
    }

    #[test]
    fn pose_loss_is_a_metric(p1 in -0.5..0.5f64, r1 in -0.5..0.5f64, p2 in -0.5..0.5f64, r2 in -0.5..0.5f64) {
        let a = CameraPose::from_angles(p1, r1);
        let b = CameraPose::from_angles(p2, r2);
        prop_assert!(pose_loss(&a, &b) >= 0.0);
        prop_assert_eq!(pose_loss(&a, &b), pose_loss(&b, &a));
        prop_assert_eq!(pose_loss(&a, &a), 0.0);
        if (p1 - p2).abs() > 1e-6 || (r1 - r2).abs() > 1e-6 {
            prop_assert!(pose_loss(&a, &b) > 0.0);
        }
    }

    #[test]
    fn g_map_pitch_is_lipschitz(k in intrinsics(), pitch in -0.2..0.2f64, delta in -5.0..5.0f64) {
        let (gp, mut vp) = render_observations(&CameraPose::from_angles(pitch, 0.0), &k).unwrap();
        let before = g_map(&gp, &vp, &k).pitch();
        vp.v += delta;
        let after = g_map(&gp, &vp, &k).pitch();
        prop_assert!((after - before).abs() <= delta.abs() / k.fy + 1e-15);
    }
}

fn noisy_observations(k: &CameraIntrinsics<f64>) -> Vec<PoseObservation<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..100)
        .map(|_| {
            let pitch = 0.05 + rng.gen_range(-0.005..0.005);
            let roll = 0.02 + rng.gen_range(-0.005..0.005);
            let (horizon, vp) = render_observations(&CameraPose::from_angles(pitch, roll), k).unwrap();
            PoseObservation { horizon, vp }
        })
        .collect()
}

#[test]
fn fit_pose_matches_grid_search_on_noisy_observations() {
    let k = CameraIntrinsics::new(721.5377, 721.5377, 609.5593, 172.854).unwrap();
    let obs = noisy_observations(&k);
    let targets: Vec<CameraPose<f64>> = obs.iter().map(|o| g_map(&o.horizon, &o.vp, &k)).collect();
    let mean = |p: f64, r: f64| {
        let pose = CameraPose::from_angles(p, r);
        targets.iter().map(|t| pose_loss(&pose, t)).sum::<f64>() / targets.len() as f64
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in -100..=100 {
        for j in -100..=100 {
            let (p, r) = (0.05 + i as f64 * 1e-4, 0.02 + j as f64 * 1e-4);
            let l = mean(p, r);
            if l < best.0 {
                best = (l, p, r);
            }
        }
    }
    let fit = fit_pose(&obs, &k).unwrap();
    assert!((fit.pitch() - 0.05).abs() < 0.002 && (fit.roll() - 0.02).abs() < 0.002, "{fit:?}");
    assert!((fit.pitch() - best.1).abs() < 5e-4 && (fit.roll() - best.2).abs() < 5e-4);
    assert!(mean(fit.pitch(), fit.roll()) <= best.0 + 1e-9);
}
