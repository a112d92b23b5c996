use cosmosseg_core::phantom::{generate_phantom, PhantomConfig};
use cosmosseg_core::Shape3;
use cosmosseg_segnet::{build_model, train, AugmentationConfig, Checkpoint, Tensor, TrainingCase, TrainingConfig, UNet3DConfig};

fn small_phantom() -> TrainingCase {
    let cfg = PhantomConfig {
        shape: Shape3::new(32, 48, 64),
        centerline_amplitude: 3.0,
        lumen_radius: (2.5, 4.0),
        wall_thickness: (1.0, 2.0),
        plaque_boost: 1.5,
        plaque_span: (4, 8),
        seed: 3,
        ..Default::default()
    };
    let (img, labels) = generate_phantom(&cfg, "tiny").unwrap();
    let img = img.normalize_zscore().unwrap();
    TrainingCase::new("tiny", img.into_grid(), labels.into_grid()).unwrap()
}

fn tiny_unet() -> UNet3DConfig {
    UNet3DConfig {
        num_downsamplings: 2,
        base_channels: 4,
        max_channels: 16,
        ..Default::default()
    }
}

fn tiny_training(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        patch_size: Shape3::new(32, 32, 32),
        epochs,
        iterations_per_epoch: 4,
        foreground_oversample_prob: 0.5,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn tiny_training_reduces_loss() {
    let case = small_phantom();
    let ck = train(&[case], &tiny_unet(), &tiny_training(20), &AugmentationConfig::disabled()).unwrap();
    let h = &ck.loss_history;
    assert_eq!(h.len(), 20);
    assert!(h.iter().all(|l| l.is_finite()));
    assert!(h[19] < h[0], "history {h:?}");
}

#[test]
fn same_seed_same_history_and_weights() {
    let case = small_phantom();
    let run = || train(std::slice::from_ref(&case), &tiny_unet(), &tiny_training(3), &AugmentationConfig::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.weights, b.weights);
    assert!(a.deterministic);
}

#[test]
fn zero_epochs_returns_initialization() {
    let case = small_phantom();
    let ck = train(&[case], &tiny_unet(), &tiny_training(0), &AugmentationConfig::disabled()).unwrap();
    assert!(ck.loss_history.is_empty());
    assert_eq!(ck.weights, build_model(tiny_unet(), 11).unwrap().params());
}

#[test]
fn checkpoint_reload_gives_identical_forward() {
    let case = small_phantom();
    let ck = train(&[case], &tiny_unet(), &tiny_training(1), &AugmentationConfig::disabled()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let mut x = Tensor::zeros(1, Shape3::new(8, 8, 8));
    x.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 37) % 11) as f32 / 5.0 - 1.0);
    assert_eq!(ck.model().unwrap().forward(&x).unwrap(), back.model().unwrap().forward(&x).unwrap());
}

#[test]
fn output_shape_matches_reference_patch() {
    let cfg = UNet3DConfig {
        base_channels: 1,
        max_channels: 2,
        ..Default::default()
    };
    let net = build_model(cfg, 0).unwrap();
    let x = Tensor::zeros(1, Shape3::new(96, 160, 160));
    let ys = net.forward_batch(&[x.clone(), x]).unwrap();
    assert_eq!(ys.len(), 2);
    for y in ys {
        assert_eq!((y.channels, y.shape), (4, Shape3::new(96, 160, 160)));
    }
}
