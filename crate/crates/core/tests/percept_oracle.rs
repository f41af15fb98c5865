mod common;

use nalgebra::{Isometry3, Vector3};
use proptest::prelude::*;
use strider::percept::{raycast, render_cubemap, render_front, CameraModel, MAX_RANGE, MIN_RANGE};
use strider::terrain::{generate, Family, TerrainSpec};

#[test]
fn traversal_matches_marcher_on_random_rays() {
    let scenes = common::scene_suite();
    let mut rng = common::rng(2024);
    let mut worst: f64 = 0.0;
    for n in 0..10_000 {
        let t = &scenes[n % scenes.len()];
        let (o, d) = common::random_ray(&mut rng);
        let fast = raycast(t, o, d, 4.0);
        let slow = common::march(t, o, d, 4.0);
        worst = worst.max((fast - slow).abs());
        assert!(
            (fast - slow).abs() <= 1e-6,
            "ray {n}: {fast} vs {slow} from {o:?} along {d:?}"
        );
    }
    eprintln!("worst ray disagreement {worst:e} m");
}

#[test]
fn axis_aligned_rays_match_marcher() {
    let scenes = common::scene_suite();
    let dirs = [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    let mut rng = common::rng(7);
    for t in &scenes {
        for d in dirs {
            let (o, _) = common::random_ray(&mut rng);
            assert!((raycast(t, o, d, 4.0) - common::march(t, o, d, 4.0)).abs() <= 1e-6);
        }
    }
}

#[test]
fn translating_scene_and_body_together_renders_identically() {
    let base = generate(&TerrainSpec::new(Family::Stairs, 0.8, 3)).unwrap();
    let cam = CameraModel::default();
    let mut rng = common::rng(5);
    use rand::Rng;
    for _ in 0..8 {
        // Dyadic positions keep the relative offsets exact.
        let p = Vector3::new(
            rng.gen_range(0..256) as f64 / 32.0 + 1.0,
            rng.gen_range(0..64) as f64 / 32.0 + 1.0,
            rng.gen_range(8..24) as f64 / 32.0,
        );
        let rot = Vector3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-3.0..3.0),
        );
        let shift = Vector3::new(
            rng.gen_range(-16..16) as f64 / 4.0,
            rng.gen_range(-16..16) as f64 / 4.0,
            0.0,
        );
        let moved = base
            .clone()
            .with_origin([shift.x as f32, shift.y as f32, 0.0]);
        let a = Isometry3::new(p, rot);
        let b = Isometry3::new(p + shift, rot);
        assert_eq!(
            render_front(&base, &cam, &a),
            render_front(&moved, &cam, &b)
        );
        assert_eq!(render_cubemap(&base, &a), render_cubemap(&moved, &b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rendered_texels_stay_in_range(
        x in 0.0f64..12.0, y in 0.0f64..4.0, z in 0.0f64..1.5,
        roll in -0.5f64..0.5, pitch in -0.5f64..0.5, yaw in -3.2f64..3.2,
        family in 0usize..6, d in 0.0f64..=1.0,
    ) {
        let t = generate(&TerrainSpec::new(Family::ALL[family], d, 1)).unwrap();
        let pose = Isometry3::new(Vector3::new(x, y, z), Vector3::new(roll, pitch, yaw));
        let front = render_front(&t, &CameraModel::default(), &pose);
        prop_assert!(front.data.iter().all(|&v| (MIN_RANGE..=MAX_RANGE).contains(&v)));
        let cube = render_cubemap(&t, &pose);
        prop_assert_eq!(cube.faces.len(), 5);
        prop_assert!(cube.flatten().iter().all(|&v| (MIN_RANGE..=MAX_RANGE).contains(&v)));
    }
}
