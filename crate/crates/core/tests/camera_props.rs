//! Pinhole geometry properties.

use gridsight_core::{CameraRig, GridSpec, Intrinsics};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rig(pitch_deg: f64) -> CameraRig {
    let k = Intrinsics::new(2262.0, 2262.0, 1023.5, 511.5, 2048, 1024).unwrap();
    CameraRig::pitched(k, 0.22, [1.0, 0.0, 1.5], pitch_deg).unwrap()
}

#[test]
fn project_backproject_round_trip_100k() {
    let r = rig(2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let u = rng.random_range(0.0..2048.0);
        let v = rng.random_range(0.0..1024.0);
        let z = rng.random_range(0.5..200.0);
        let p = r.backproject(u, v, z).unwrap();
        let (pu, pv, pz) = r.project(&p).unwrap();
        worst = worst.max((pu - u).abs()).max((pv - v).abs());
        assert!((pz - z).abs() < 1e-9 * z.max(1.0));
    }
    assert!(worst < 1e-6, "worst pixel error {worst:e}");
}

proptest! {
    #[test]
    fn round_trip_under_any_pitch(
        pitch in -10.0f64..10.0,
        u in 0.0f64..2048.0,
        v in 0.0f64..1024.0,
        z in 0.1f64..500.0,
    ) {
        let r = rig(pitch);
        let (pu, pv, _) = r.project(&r.backproject(u, v, z).unwrap()).unwrap();
        prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
    }

    #[test]
    fn ground_hit_lies_on_the_plane_in_front(
        pitch in -5.0f64..5.0,
        u in 0.0f64..2048.0,
        v in 0.0f64..1024.0,
    ) {
        let r = rig(pitch);
        if let Some((x, y)) = r.ray_ground_intersection(u, v) {
            let (pu, pv, depth) = r.project(&Vector3::new(x, y, 0.0)).expect("in front of the camera");
            prop_assert!(depth > 0.0);
            // grazing rays hit kilometres away where f64 spacing exceeds the tolerance
            prop_assume!(depth < 1e3);
            prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
            let back = r.backproject(u, v, depth).unwrap();
            prop_assert!(back.z.abs() < 1e-9);
        }
    }

    #[test]
    fn cropping_width_never_adds_cells(w1 in 16usize..2048, w2 in 16usize..2048) {
        let (small, large) = (w1.min(w2), w1.max(w2));
        // centered crop of the same sensor
        let mk = |w: usize| {
            let k = Intrinsics::new(2262.0, 2262.0, (w as f64 - 1.0) / 2.0, 511.5, w, 1024).unwrap();
            CameraRig::level(k, 0.22, [1.0, 0.0, 1.5]).unwrap()
        };
        let spec = GridSpec::default();
        let (a, b) = (mk(small).fov_mask(&spec), mk(large).fov_mask(&spec));
        for (i, (&s, &l)) in a.iter().zip(&b).enumerate() {
            prop_assert!(!s || l, "cell {} visible at width {} but not {}", i, small, large);
        }
    }
}

#[test]
fn rays_above_the_horizon_miss_the_ground() {
    let r = rig(0.0);
    assert!(r.ray_ground_intersection(1000.0, 400.0).is_none());
    assert!(r.ray_ground_intersection(1000.0, 600.0).is_some());
}
