use cosmosseg_core::{Grid3, LabelVolume, Shape3, SideRanges};
use cosmosseg_segnet::{augment, AugmentationConfig, SpatialTransform};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labels(shape: Shape3, seed: u64) -> Grid3<u8> {
    let mut i = seed;
    Grid3::from_fn(shape, |_, _, _| {
        i = i.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((i >> 33) % 5) as u8
    })
}

fn tasks(g: &Grid3<u8>) -> (Grid3<bool>, Grid3<bool>) {
    LabelVolume::new(g.clone(), SideRanges::default()).unwrap().map_to_tasks()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn geometric_transforms_commute_with_task_masks(seed in 0u64..10_000, flips_only in any::<bool>()) {
        let shape = Shape3::new(6, 8, 8);
        let g = labels(shape, seed);
        let mut cfg = AugmentationConfig::default();
        cfg.noise.enabled = false;
        if flips_only {
            cfg = AugmentationConfig::disabled();
            cfg.flip.enabled = true;
        } else {
            for p in [&mut cfg.rotation.p, &mut cfg.scaling.p, &mut cfg.elastic.p, &mut cfg.crop.p] {
                *p = 1.0;
            }
            cfg.elastic.alpha = (0.0, 4.0);
            cfg.elastic.sigma = (1.0, 2.0);
        }
        let t = SpatialTransform::sample(&cfg, shape, &mut ChaCha8Rng::seed_from_u64(seed));
        let moved = t.apply_nearest(&g, cosmosseg_core::volume::IGNORE);
        let (lumen, wall) = tasks(&g);
        let (lumen_t, wall_t) = tasks(&moved);
        prop_assert_eq!(lumen_t, t.apply_nearest(&lumen, false));
        prop_assert_eq!(wall_t, t.apply_nearest(&wall, false));
    }

    #[test]
    fn augment_never_invents_classes(seed in 0u64..10_000) {
        let shape = Shape3::new(4, 8, 8);
        let g = labels(shape, seed);
        let img = g.map(|c| c as f32);
        let (_, out) = augment(&img, &g, &AugmentationConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.shape(), shape);
        prop_assert!(out.data().iter().all(|&c| c <= 4));
    }
}
