//! Trained weights plus the configuration that produced them, stored as a
//! single uncompressed tar archive:
//!
//! - `config.json`: network, training and augmentation settings
//! - `weights.bin`: little-endian `f32` parameters
//! - `epoch.txt`: completed epochs
//! - `loss_history.csv`: `epoch,loss`

use crate::augment::AugmentationConfig;
use crate::model::{UNet3D, UNet3DConfig};
use crate::train::TrainingConfig;
use crate::SegNetError;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub unet: UNet3DConfig,
    pub training: TrainingConfig,
    pub augmentation: AugmentationConfig,
    pub epoch: usize,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// False when batches came from several loader threads.
    pub deterministic: bool,
    pub weights: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ConfigSnapshot {
    unet: UNet3DConfig,
    training: TrainingConfig,
    augmentation: AugmentationConfig,
    deterministic: bool,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> SegNetError {
    SegNetError::Checkpoint(format!("{}: {msg}", path.display()))
}

impl Checkpoint {
    pub fn model(&self) -> Result<UNet3D, SegNetError> {
        UNet3D::with_params(self.unet.clone(), self.weights.clone())
    }

    /// Serializes to bytes; identical checkpoints give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>, SegNetError> {
        let snap = ConfigSnapshot {
            unet: self.unet.clone(),
            training: self.training.clone(),
            augmentation: self.augmentation.clone(),
            deterministic: self.deterministic,
        };
        let config = serde_json::to_vec_pretty(&snap).map_err(|e| SegNetError::Checkpoint(e.to_string()))?;
        let weights: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        let mut history = String::from("epoch,loss\n");
        for (e, l) in self.loss_history.iter().enumerate() {
            history.push_str(&format!("{e},{l}\n"));
        }
        let mut builder = tar::Builder::new(Vec::new());
        for (name, data) in [
            ("config.json", config.as_slice()),
            ("weights.bin", weights.as_slice()),
            ("epoch.txt", format!("{}\n", self.epoch).as_bytes()),
            ("loss_history.csv", history.as_bytes()),
        ] {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_mtime(0);
            h.set_cksum();
            builder.append_data(&mut h, name, data).map_err(|e| SegNetError::Checkpoint(e.to_string()))?;
        }
        builder.into_inner().map_err(|e| SegNetError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SegNetError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| SegNetError::Io(path.to_path_buf(), e);
        let bytes = self.to_bytes()?;
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        f.write_all(&bytes).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SegNetError> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| SegNetError::Io(path.to_path_buf(), e))?;
        let mut archive = tar::Archive::new(f);
        let (mut config, mut weights, mut epoch, mut history) = (None, None, None, None);
        for entry in archive.entries().map_err(|e| corrupt(path, e))? {
            let mut entry = entry.map_err(|e| corrupt(path, e))?;
            let name = entry.path().map_err(|e| corrupt(path, e))?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| corrupt(path, e))?;
            match name.as_str() {
                "config.json" => config = Some(buf),
                "weights.bin" => weights = Some(buf),
                "epoch.txt" => epoch = Some(buf),
                "loss_history.csv" => history = Some(buf),
                _ => {}
            }
        }
        let missing = |n: &str| corrupt(path, format!("missing {n}"));
        let snap: ConfigSnapshot = serde_json::from_slice(&config.ok_or_else(|| missing("config.json"))?).map_err(|e| corrupt(path, e))?;
        let weights = weights.ok_or_else(|| missing("weights.bin"))?;
        if weights.len() % 4 != 0 {
            return Err(corrupt(path, "weights.bin length is not a multiple of 4"));
        }
        let weights: Vec<f32> = weights.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let epoch: usize = String::from_utf8_lossy(&epoch.ok_or_else(|| missing("epoch.txt"))?)
            .trim()
            .parse()
            .map_err(|e| corrupt(path, e))?;
        let history_text = String::from_utf8(history.ok_or_else(|| missing("loss_history.csv"))?).map_err(|e| corrupt(path, e))?;
        let mut loss_history = Vec::new();
        for line in history_text.lines().skip(1).filter(|l| !l.is_empty()) {
            let (_, v) = line.split_once(',').ok_or_else(|| corrupt(path, "bad loss history row"))?;
            loss_history.push(v.parse::<f64>().map_err(|e| corrupt(path, e))?);
        }
        let ck = Checkpoint {
            unet: snap.unet,
            training: snap.training,
            augmentation: snap.augmentation,
            epoch,
            loss_history,
            deterministic: snap.deterministic,
            weights,
        };
        ck.model()?;
        Ok(ck)
    }
}
