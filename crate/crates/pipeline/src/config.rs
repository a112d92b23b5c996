//! Pipeline configuration file (TOML), profiles and the resolved settings
//! that key the work directory.

use crate::inference::SlidingWindowConfig;
use crate::PipelineError;
use cosmosseg_core::Shape3;
use cosmosseg_segnet::{AugmentationConfig, TrainingConfig, UNet3DConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size network and schedule.
    Paper,
    /// Small network, short schedule, 32×64×64 patches.
    #[default]
    Desk,
}

/// Which voxels a held-out case is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeChoice {
    /// Dense truth when the case has it, annotated ranges otherwise.
    #[default]
    Auto,
    Full,
    Annotated,
}

/// Model whose predictions feed the diagnosis stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnosisModel {
    A,
    #[default]
    B,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub work_dir: Option<PathBuf>,
    pub catalog: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalSection {
    pub k: usize,
    /// Subset of folds to run; all `k` when absent.
    pub folds: Option<Vec<u8>>,
}

impl Default for CrossvalSection {
    fn default() -> Self {
        Self { k: 4, folds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    /// Diseased-wall voxels needed to call a slice atherosclerotic.
    pub tau: usize,
    pub scope: ScopeChoice,
    pub diagnose_with: DiagnosisModel,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            tau: 1,
            scope: ScopeChoice::Auto,
            diagnose_with: DiagnosisModel::B,
        }
    }
}

/// Partial tables merged over the profile presets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub unet: Option<toml::Table>,
    pub training: Option<toml::Table>,
    pub augmentation: Option<toml::Table>,
    pub sliding_window: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub profile: Profile,
    pub paths: Paths,
    #[serde(default)]
    pub crossval: CrossvalSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub overrides: Overrides,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file; a relative catalog path is taken relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(path.to_path_buf(), e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.paths.catalog.is_relative() {
            cfg.paths.catalog = base.join(&cfg.paths.catalog);
        }
        if let Some(w) = cfg.paths.work_dir.as_mut().filter(|w| w.is_relative()) {
            *w = base.join(&*w);
        }
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<PipelineSettings, PipelineError> {
        let p = Preset::of(self.profile);
        let o = &self.overrides;
        let unet: UNet3DConfig = merged(&p.unet, o.unet.as_ref(), "unet")?;
        let training: TrainingConfig = merged(&p.training, o.training.as_ref(), "training")?;
        let augmentation: AugmentationConfig = merged(&p.augmentation, o.augmentation.as_ref(), "augmentation")?;
        // the window follows the training patch unless set explicitly
        let sw_base = SlidingWindowConfig {
            window: training.patch_size,
            ..p.sliding_window
        };
        let sliding_window: SlidingWindowConfig = merged(&sw_base, o.sliding_window.as_ref(), "sliding_window")?;
        let k = self.crossval.k;
        if k < 2 {
            return Err(PipelineError::Config(format!("cross-validation needs k >= 2, got {k}")));
        }
        let folds = match &self.crossval.folds {
            Some(f) if f.is_empty() => return Err(PipelineError::Config("crossval.folds is empty".into())),
            Some(f) => {
                let mut f = f.clone();
                f.sort_unstable();
                f.dedup();
                if let Some(bad) = f.iter().find(|&&x| x as usize >= k) {
                    return Err(PipelineError::Config(format!("fold {bad} outside 0..{k}")));
                }
                f
            }
            None => (0..k as u8).collect(),
        };
        let s = PipelineSettings {
            seed: self.seed,
            k,
            folds,
            unet,
            training,
            augmentation,
            sliding_window,
            tau: self.inference.tau.max(1),
            scope: self.inference.scope,
            diagnose_with: self.inference.diagnose_with,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Profile defaults before overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub unet: UNet3DConfig,
    pub training: TrainingConfig,
    pub augmentation: AugmentationConfig,
    pub sliding_window: SlidingWindowConfig,
}

impl Preset {
    pub fn of(profile: Profile) -> Self {
        match profile {
            Profile::Paper => {
                let training = TrainingConfig::default();
                Self {
                    unet: UNet3DConfig::default(),
                    sliding_window: SlidingWindowConfig::for_patch(training.patch_size),
                    training,
                    augmentation: AugmentationConfig::default(),
                }
            }
            Profile::Desk => {
                // 800 steps instead of 125 000: lower momentum keeps rare
                // classes from collapsing early, and more foreground patches
                // make up for the short schedule.
                let training = TrainingConfig {
                    patch_size: Shape3::new(32, 64, 64),
                    epochs: 40,
                    iterations_per_epoch: 20,
                    momentum: 0.9,
                    foreground_oversample_prob: 0.66,
                    ..Default::default()
                };
                Self {
                    unet: UNet3DConfig {
                        num_downsamplings: 3,
                        base_channels: 8,
                        max_channels: 64,
                        ..Default::default()
                    },
                    sliding_window: SlidingWindowConfig::for_patch(training.patch_size),
                    training,
                    augmentation: AugmentationConfig::default(),
                }
            }
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn merged<T: Serialize + DeserializeOwned>(base: &T, over: Option<&toml::Table>, what: &str) -> Result<T, PipelineError> {
    let err = |e: &dyn std::fmt::Display| PipelineError::Config(format!("{what}: {e}"));
    let mut table = toml::Table::try_from(base).map_err(|e| err(&e))?;
    if let Some(over) = over {
        if let Some(key) = over.keys().find(|k| !table.contains_key(*k)) {
            return Err(PipelineError::Config(format!("unknown {what} override `{key}`")));
        }
        merge_tables(&mut table, over);
    }
    table.try_into().map_err(|e| err(&e))
}

/// Fully resolved run settings; their hash names the work directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub seed: u64,
    pub k: usize,
    pub folds: Vec<u8>,
    pub unet: UNet3DConfig,
    pub training: TrainingConfig,
    pub augmentation: AugmentationConfig,
    pub sliding_window: SlidingWindowConfig,
    pub tau: usize,
    pub scope: ScopeChoice,
    pub diagnose_with: DiagnosisModel,
}

/// The two networks of the label-propagation chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    /// Trained on single-side scans with interpolated labels.
    A,
    /// Retrained on whole scans with corrected pseudo labels.
    B,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::A => "Seg-Model-A",
            Self::B => "Seg-Model-B",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::A => "seg-model-a",
            Self::B => "seg-model-b",
        }
    }
}

/// SplitMix64 finaliser, used to derive independent per-fold seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.unet.validate()?;
        self.training.validate(&self.unet)?;
        self.augmentation.validate()?;
        self.sliding_window.validate()?;
        self.unet.check_patch(self.sliding_window.window)?;
        Ok(())
    }

    /// Training settings of one model in one fold; seeds differ per fold and model.
    pub fn training_for(&self, model: ModelKind, fold: u8) -> TrainingConfig {
        let tag = 1 + 2 * fold as u64 + (model == ModelKind::B) as u64;
        TrainingConfig {
            seed: mix_seed(self.seed ^ self.training.seed, tag),
            ..self.training.clone()
        }
    }

    pub fn deterministic(&self) -> bool {
        self.training.deterministic()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("settings serialize");
        hex(&Sha256::digest(&json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_values() {
        let cfg = PipelineConfig::parse("profile = \"paper\"\n[paths]\ncatalog = \"c.csv\"\n").unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.training.patch_size, Shape3::new(96, 160, 160));
        assert_eq!((s.training.batch_size, s.training.lr0, s.training.epochs, s.training.poly_exponent), (2, 0.01, 500, 0.9));
        assert_eq!(s.unet.num_downsamplings, 5);
        assert_eq!(s.sliding_window.window, s.training.patch_size);
        assert_eq!(s.folds, vec![0, 1, 2, 3]);
    }

    #[test]
    fn desk_profile_and_overrides() {
        let text = r#"
seed = 7
[paths]
catalog = "c.csv"
[crossval]
folds = [2, 0, 2]
[overrides.training]
epochs = 3
patch_size = { z = 16, y = 32, x = 32 }
[overrides.augmentation.flip]
p = 0.25
"#;
        let s = PipelineConfig::parse(text).unwrap().resolve().unwrap();
        assert_eq!(s.unet.num_downsamplings, 3);
        assert_eq!(s.training.epochs, 3);
        assert_eq!(s.training.iterations_per_epoch, 20);
        assert_eq!(s.training.momentum, 0.9);
        assert_eq!(s.sliding_window.window, Shape3::new(16, 32, 32));
        assert_eq!(s.augmentation.flip.p, 0.25);
        assert!(s.augmentation.flip.enabled);
        assert_eq!(s.folds, vec![0, 2]);
    }

    #[test]
    fn bad_configs_rejected() {
        let base = "[paths]\ncatalog = \"c.csv\"\n";
        assert!(PipelineConfig::parse(&format!("{base}[overrides.training]\nepoch = 3\n")).unwrap().resolve().is_err());
        assert!(PipelineConfig::parse(&format!("{base}[crossval]\nfolds = [4]\n")).unwrap().resolve().is_err());
        assert!(PipelineConfig::parse(&format!("{base}[overrides.training]\npatch_size = {{ z = 20, y = 64, x = 64 }}\n"))
            .unwrap()
            .resolve()
            .is_err());
        assert!(PipelineConfig::parse("bogus = 1\n[paths]\ncatalog = \"c\"\n").is_err());
    }

    #[test]
    fn hash_tracks_settings_and_fold_seeds_differ() {
        let cfg = PipelineConfig::parse("[paths]\ncatalog = \"c.csv\"\n").unwrap();
        let a = cfg.resolve().unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let seeds: std::collections::HashSet<u64> = (0..4).flat_map(|f| [ModelKind::A, ModelKind::B].map(|m| a.training_for(m, f).seed)).collect();
        assert_eq!(seeds.len(), 8);
    }
}
