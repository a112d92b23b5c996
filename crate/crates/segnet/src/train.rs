//! SGD training loop with polynomial learning-rate decay.

use crate::augment::{augment, AugmentationConfig};
use crate::checkpoint::Checkpoint;
use crate::loss::item_terms;
use crate::model::{build_model, UNet3D, UNet3DConfig};
use crate::sampling::{Patch, TrainingCase};
use crate::schedule::poly_lr;
use crate::tensor::Tensor;
use crate::SegNetError;
use cosmosseg_core::Shape3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::mpsc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub patch_size: Shape3,
    pub batch_size: usize,
    pub lr0: f64,
    /// `T`, the number of epochs.
    pub epochs: usize,
    pub poly_exponent: f64,
    pub iterations_per_epoch: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub foreground_oversample_prob: f64,
    pub seed: u64,
    /// Loader threads. `1` loads inline and is the only reproducible mode.
    pub num_workers: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            patch_size: Shape3::new(96, 160, 160),
            batch_size: 2,
            lr0: 0.01,
            epochs: 500,
            poly_exponent: 0.9,
            iterations_per_epoch: 250,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 3e-5,
            grad_clip: Some(12.0),
            foreground_oversample_prob: 0.33,
            seed: 0,
            num_workers: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, unet: &UNet3DConfig) -> Result<(), SegNetError> {
        let bad = |m: &str| Err(SegNetError::InvalidConfig(format!("training: {m}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.batch_size == 0 || self.iterations_per_epoch == 0 || self.num_workers == 0 {
            return bad("batch_size, iterations_per_epoch and num_workers must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.foreground_oversample_prob) {
            return bad("momentum in [0, 1), weight_decay >= 0, oversampling in [0, 1]");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        unet.check_patch(self.patch_size)
    }

    pub fn deterministic(&self) -> bool {
        self.num_workers == 1
    }
}

/// Learning rate for epoch `t` of `cfg`.
pub fn lr_schedule(t: usize, cfg: &TrainingConfig) -> Result<f64, SegNetError> {
    poly_lr(t, cfg.epochs, cfg.lr0, cfg.poly_exponent)
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// SGD with (Nesterov) momentum, L2 weight decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: UNet3D,
    velocity: Vec<f32>,
    grad: Vec<f32>,
    momentum: f32,
    nesterov: bool,
    weight_decay: f32,
    grad_clip: Option<f64>,
}

impl Trainer {
    pub fn new(model: UNet3D, cfg: &TrainingConfig) -> Self {
        let n = model.num_params();
        Self {
            model,
            velocity: vec![0.0; n],
            grad: vec![0.0; n],
            momentum: cfg.momentum as f32,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay as f32,
            grad_clip: cfg.grad_clip,
        }
    }

    /// Loss of one batch and accumulated gradient; the model is unchanged.
    pub fn loss_and_grad(&mut self, batch: &[Patch]) -> Result<f64, SegNetError> {
        let classes = self.model.config().num_classes;
        let count: usize = batch.iter().map(|p| p.ignore.data().iter().filter(|&&i| !i).count()).sum();
        if count == 0 {
            return Err(SegNetError::AllIgnored);
        }
        self.grad.fill(0.0);
        let (mut ce, mut dice) = (0.0, 0.0);
        for p in batch {
            let x = Tensor::from_grid(&p.image);
            let (logits, cache) = self.model.forward_train(&x)?;
            let scores: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
            let t = item_terms(&scores, p.labels.data(), p.ignore.data(), classes, count, batch.len())?;
            ce += t.ce;
            dice += t.dice / batch.len() as f64;
            let d = Tensor {
                channels: classes,
                shape: logits.shape,
                data: t.grad.iter().map(|&g| g as f32).collect(),
            };
            drop(logits);
            self.model.backward(cache, &d, &mut self.grad);
        }
        Ok(ce + 1.0 - dice)
    }

    /// Gradient step at learning rate `lr` using the gradient from
    /// [`Trainer::loss_and_grad`].
    pub fn apply(&mut self, lr: f64) -> f64 {
        let wd = self.weight_decay;
        let params = self.model.params_mut();
        if wd > 0.0 {
            self.grad.iter_mut().zip(params.iter()).for_each(|(g, w)| *g += wd * w);
        }
        let norm = self.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if let Some(clip) = self.grad_clip {
            if norm > clip {
                let s = (clip / (norm + 1e-6)) as f32;
                self.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let (mu, lr) = (self.momentum, lr as f32);
        for ((w, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(&self.grad) {
            *v = mu * *v + g;
            let step = if self.nesterov { g + mu * *v } else { *v };
            *w -= lr * step;
        }
        norm
    }

    pub fn step(&mut self, batch: &[Patch], lr: f64) -> Result<StepStats, SegNetError> {
        let loss = self.loss_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(SegNetError::DivergedLoss { loss });
        }
        let grad_norm = self.apply(lr);
        Ok(StepStats { loss, grad_norm })
    }
}

fn draw_batch<R: Rng + ?Sized>(cases: &[TrainingCase], tc: &TrainingConfig, aug: &AugmentationConfig, rng: &mut R) -> Vec<Patch> {
    (0..tc.batch_size)
        .map(|_| {
            let case = &cases[rng.random_range(0..cases.len())];
            let p = case.sample(tc.patch_size, tc.foreground_oversample_prob, rng);
            let (image, labels) = augment(&p.image, &p.labels, aug, rng);
            Patch::new(image, labels)
        })
        .collect()
}

/// Per-epoch progress passed to the observer of [`train_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

pub fn train(cases: &[TrainingCase], unet: &UNet3DConfig, tc: &TrainingConfig, aug: &AugmentationConfig) -> Result<Checkpoint, SegNetError> {
    train_with(cases, unet, tc, aug, |_| {})
}

/// Trains a fresh network for `tc.epochs` epochs. Batches whose voxels are
/// all ignored after augmentation are skipped.
pub fn train_with(
    cases: &[TrainingCase],
    unet: &UNet3DConfig,
    tc: &TrainingConfig,
    aug: &AugmentationConfig,
    mut on_epoch: impl FnMut(EpochReport),
) -> Result<Checkpoint, SegNetError> {
    tc.validate(unet)?;
    aug.validate()?;
    if cases.is_empty() {
        return Err(SegNetError::EmptyTrainingSet);
    }
    let model = build_model(unet.clone(), tc.seed)?;
    let mut trainer = Trainer::new(model, tc);
    let mut history = Vec::with_capacity(tc.epochs);
    let total = tc.epochs * tc.iterations_per_epoch;

    let mut run = |next: &mut dyn FnMut() -> Vec<Patch>| -> Result<(), SegNetError> {
        for epoch in 0..tc.epochs {
            let lr = lr_schedule(epoch, tc)?;
            let (mut sum, mut n) = (0.0, 0usize);
            for _ in 0..tc.iterations_per_epoch {
                let batch = next();
                match trainer.step(&batch, lr) {
                    Ok(s) => {
                        sum += s.loss;
                        n += 1;
                    }
                    Err(SegNetError::AllIgnored) => continue,
                    Err(SegNetError::DivergedLoss { loss }) => return Err(SegNetError::Diverged { epoch, loss }),
                    Err(e) => return Err(e),
                }
            }
            let mean_loss = if n > 0 { sum / n as f64 } else { f64::NAN };
            history.push(mean_loss);
            on_epoch(EpochReport { epoch, lr, mean_loss });
        }
        Ok(())
    };

    if tc.num_workers <= 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(1);
        run(&mut || draw_batch(cases, tc, aug, &mut rng))?;
    } else {
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<Vec<Patch>>(2 * tc.num_workers);
            for w in 0..tc.num_workers {
                let tx = tx.clone();
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
                    rng.set_stream(2 + w as u64);
                    while tx.send(draw_batch(cases, tc, aug, &mut rng)).is_ok() {}
                });
            }
            drop(tx);
            let mut received = 0usize;
            let res = run(&mut || {
                received += 1;
                rx.recv().expect("loader workers alive while the receiver exists")
            });
            debug_assert!(received <= total);
            drop(rx);
            res
        })?;
    }

    Ok(Checkpoint {
        unet: unet.clone(),
        training: tc.clone(),
        augmentation: aug.clone(),
        epoch: tc.epochs,
        loss_history: history,
        deterministic: tc.deterministic(),
        weights: trainer.model.params().to_vec(),
    })
}
