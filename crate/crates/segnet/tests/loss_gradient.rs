use cosmosseg_segnet::{dice_ce_loss, SegNetError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 64;

fn random_case(seed: u64, classes: usize) -> (Vec<f64>, Vec<u8>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..classes * N).map(|_| rng.random_range(-2.0..2.0)).collect();
    let target = (0..N).map(|_| rng.random_range(0..classes as u8)).collect();
    let ignore = (0..N).map(|_| rng.random_bool(0.2)).collect();
    (scores, target, ignore)
}

#[test]
fn gradient_matches_central_differences_two_class_4x4x4() {
    for seed in 0..3 {
        let (scores, target, ignore) = random_case(seed, 2);
        let out = dice_ce_loss(&scores, &target, &ignore, 1, 2).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..scores.len() {
            let mut s = scores.clone();
            s[i] += h;
            let up = dice_ce_loss(&s, &target, &ignore, 1, 2).unwrap().loss;
            s[i] -= 2.0 * h;
            let down = dice_ce_loss(&s, &target, &ignore, 1, 2).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            let g = out.grad[i];
            let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-8);
            if g.abs().max(fd.abs()) > 1e-9 {
                worst = worst.max(rel);
            } else {
                assert!((fd - g).abs() < 1e-9);
            }
        }
        assert!(worst <= 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn batch_of_two_four_classes_gradient() {
    let (scores, target, ignore) = random_case(9, 4);
    let (s2, t2, i2) = random_case(10, 4);
    let scores: Vec<f64> = scores.into_iter().chain(s2).collect();
    let target: Vec<u8> = target.into_iter().chain(t2).collect();
    let ignore: Vec<bool> = ignore.into_iter().chain(i2).collect();
    let out = dice_ce_loss(&scores, &target, &ignore, 2, 4).unwrap();
    let h = 1e-6;
    for i in (0..scores.len()).step_by(7) {
        let mut s = scores.clone();
        s[i] += h;
        let up = dice_ce_loss(&s, &target, &ignore, 2, 4).unwrap().loss;
        s[i] -= 2.0 * h;
        let down = dice_ce_loss(&s, &target, &ignore, 2, 4).unwrap().loss;
        let fd = (up - down) / (2.0 * h);
        assert!((fd - out.grad[i]).abs() <= 1e-4 * fd.abs().max(out.grad[i].abs()).max(1e-6), "{i}: {fd} vs {}", out.grad[i]);
    }
}

#[test]
fn ignored_voxels_have_zero_gradient_and_no_influence() {
    let (mut scores, target, ignore) = random_case(4, 2);
    let before = dice_ce_loss(&scores, &target, &ignore, 1, 2).unwrap();
    for c in 0..2 {
        for v in 0..N {
            if ignore[v] {
                assert_eq!(before.grad[c * N + v], 0.0);
                scores[c * N + v] = 0.0;
            }
        }
    }
    let after = dice_ce_loss(&scores, &target, &ignore, 1, 2).unwrap();
    assert_eq!(before.loss, after.loss);
}

#[test]
fn uniform_scores_give_ln4_cross_entropy() {
    let out = dice_ce_loss(&vec![0.0; 4 * N], &[1; N], &[false; N], 1, 4).unwrap();
    assert!((out.ce - 4f64.ln()).abs() < 1e-12);
    assert!(out.loss >= 0.0);
    assert_eq!(dice_ce_loss(&vec![0.0; 4 * N], &[1; N], &[true; N], 1, 4), Err(SegNetError::AllIgnored));
}
