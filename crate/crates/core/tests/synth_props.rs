use acmseg_core::acm::{heaviside, local_means, AcmParams, RegionMode};
use acmseg_core::synth::{
    gen_dataset, gen_scene, oracle_global_means, scene_seed, SceneSpec, ShapeKind,
};
use acmseg_core::Grid;
use proptest::prelude::*;

fn kinds() -> impl Strategy<Value = Vec<ShapeKind>> {
    prop::sample::subsequence(vec![ShapeKind::Rects, ShapeKind::Disks, ShapeKind::Blobs], 1..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenes_are_well_formed(
        seed in any::<u64>(),
        size in 8usize..48,
        shape_kinds in kinds(),
        lo in 0usize..3,
        extra in 0usize..3,
        noise in 0.0..0.3f64,
        shade in 0.0..0.6f64,
    ) {
        let spec = SceneSpec {
            size,
            n_instances: (lo, lo + extra),
            shape_kinds,
            noise_sigma: noise,
            illumination_gradient: shade,
            seed,
            ..SceneSpec::default()
        };
        let s = gen_scene(&spec).unwrap();
        prop_assert_eq!(s.image.dims(), (size, size));
        prop_assert!(s.gt.values().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(s.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(s.placed <= s.requested);
        prop_assert!((lo..=lo + extra).contains(&s.requested));
        prop_assert_eq!(s.placed == 0, s.gt.sum() == 0.0);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let a = gen_scene(&spec).unwrap();
        let b = gen_scene(&spec).unwrap();
        prop_assert_eq!(a.image, b.image);
        prop_assert_eq!(a.gt, b.gt);
    }

    #[test]
    fn global_means_match_direct_sums(seed in any::<u64>(), eps in 0.2..3.0f64) {
        let s = gen_scene(&SceneSpec { size: 24, seed, ..SceneSpec::default() }).unwrap();
        let phi = Grid::from_fn(24, 24, |i, j| (i as f64 - 11.5) * 0.3 + (j as f64 - 7.0) * 0.2);
        let params = AcmParams { eps, region_mode: RegionMode::Global, ..AcmParams::default() };
        let (m1, m2) = local_means(&s.image, &phi, &params).unwrap();
        let (o1, o2) = oracle_global_means(&s.image, &phi, eps);
        prop_assert!((m1.get(0, 0) - o1).abs() < 1e-10, "{} vs {}", m1.get(0, 0), o1);
        prop_assert!((m2.get(0, 0) - o2).abs() < 1e-10);
        // the soft interior weights really are the Heaviside
        prop_assert!(heaviside(&phi, eps).values().iter().all(|&h| (0.0..=1.0).contains(&h)));
    }
}

#[test]
fn dataset_scenes_use_derived_seeds() {
    let spec = SceneSpec {
        seed: 42,
        ..SceneSpec::default()
    };
    let data = gen_dataset(&spec, 6).unwrap();
    for (k, s) in data.iter().enumerate() {
        let alone = gen_scene(&SceneSpec {
            seed: scene_seed(42, k as u64),
            ..spec.clone()
        })
        .unwrap();
        assert_eq!(s.image, alone.image);
        assert_eq!(s.gt, alone.gt);
    }
    let seeds: std::collections::HashSet<u64> = (0..1000).map(|k| scene_seed(42, k)).collect();
    assert_eq!(seeds.len(), 1000);
}

#[test]
fn seed_values_are_pinned() {
    // guards against silent changes to the generator or its seeding, which
    // would move every seeded experiment
    let s = gen_scene(&SceneSpec {
        seed: 7,
        illumination_gradient: 0.4,
        ..SceneSpec::default()
    })
    .unwrap();
    assert_eq!(s.requested, 1);
    assert_eq!(s.placed, 1);
    let again = gen_scene(&SceneSpec {
        seed: 7,
        illumination_gradient: 0.4,
        ..SceneSpec::default()
    })
    .unwrap();
    assert_eq!(s.gt.sum(), again.gt.sum());
}
