use cosmosseg_core::{Grid3, Shape3};
use serde::{Deserialize, Serialize};

/// Channel-major feature map of a single sample: `data[c * shape.len() + voxel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * shape.len()],
        }
    }

    pub fn from_grid(grid: &Grid3<f32>) -> Self {
        Self {
            channels: 1,
            shape: grid.shape(),
            data: grid.data().to_vec(),
        }
    }

    pub fn voxels(&self) -> usize {
        self.shape.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks the channels of `self` followed by those of `other`.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "concat of mismatched shapes");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            shape: self.shape,
            data,
        }
    }

    /// Splits channels at `at` (inverse of [`Tensor::concat`]).
    pub fn split_channels(mut self, at: usize) -> (Tensor, Tensor) {
        let rest = self.data.split_off(at * self.voxels());
        let second = Tensor {
            channels: self.channels - at,
            shape: self.shape,
            data: rest,
        };
        self.channels = at;
        (self, second)
    }

    /// Per-voxel softmax over channels.
    pub fn softmax(&self) -> Tensor {
        let n = self.voxels();
        let mut out = self.clone();
        for v in 0..n {
            let mut m = f32::NEG_INFINITY;
            for c in 0..self.channels {
                m = m.max(self.data[c * n + v]);
            }
            let mut s = 0.0f32;
            for c in 0..self.channels {
                let e = (self.data[c * n + v] - m).exp();
                out.data[c * n + v] = e;
                s += e;
            }
            for c in 0..self.channels {
                out.data[c * n + v] /= s;
            }
        }
        out
    }
}
