use crate::layers::{Conv3, Head, NormAct, NormStats, UpConv, LEAK};
use crate::tensor::Tensor;
use crate::SegNetError;
use cosmosseg_core::{ClassId, Shape3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// 3×3×3 convolutions, stride-2 convolutions for downsampling,
    /// 2×2×2 transposed convolutions for upsampling.
    Cube3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Affine instance norm followed by leaky ReLU (slope 0.01).
    InstanceLeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNet3DConfig {
    pub num_downsamplings: usize,
    pub base_channels: usize,
    /// Channel count stops doubling at this value.
    pub max_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub kernel: KernelKind,
    pub norm: NormKind,
}

impl Default for UNet3DConfig {
    fn default() -> Self {
        Self {
            num_downsamplings: 5,
            base_channels: 32,
            max_channels: 320,
            in_channels: 1,
            num_classes: ClassId::NUM_PREDICTED,
            kernel: KernelKind::Cube3,
            norm: NormKind::InstanceLeakyRelu,
        }
    }
}

impl UNet3DConfig {
    pub fn validate(&self) -> Result<(), SegNetError> {
        let bad = |m: &str| Err(SegNetError::InvalidConfig(m.to_string()));
        if self.num_downsamplings == 0 {
            return bad("num_downsamplings must be at least 1");
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad("need 0 < base_channels <= max_channels");
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes");
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(20)).min(self.max_channels)
    }

    /// Checks divisibility by `2^depth` per axis.
    pub fn check_patch(&self, patch: Shape3) -> Result<(), SegNetError> {
        let f = 1usize << self.num_downsamplings;
        if patch.as_array().iter().any(|&d| d == 0 || d % f != 0) {
            return Err(SegNetError::IncompatiblePatch {
                patch,
                factor: f,
            });
        }
        Ok(())
    }

    pub fn bottleneck_shape(&self, patch: Shape3) -> Result<Shape3, SegNetError> {
        self.check_patch(patch)?;
        let f = 1usize << self.num_downsamplings;
        Ok(Shape3::new(patch.z / f, patch.y / f, patch.x / f))
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv3,
    norm: NormAct,
}

#[derive(Debug, Clone)]
struct Stage {
    a: Block,
    b: Block,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: UpConv,
    stage: Stage,
}

struct BlockCache {
    input: Tensor,
    pre: Tensor,
    stats: NormStats,
}

struct StageCache {
    a: BlockCache,
    b: BlockCache,
}

/// Saved activations of one sample for [`UNet3D::backward`].
pub struct ForwardCache {
    encoder: Vec<StageCache>,
    up_inputs: Vec<Tensor>,
    decoder: Vec<StageCache>,
    head_input: Tensor,
}

/// Encoder–decoder with skip connections; all weights in one flat buffer.
#[derive(Debug, Clone)]
pub struct UNet3D {
    cfg: UNet3DConfig,
    encoder: Vec<Stage>,
    decoder: Vec<UpStage>,
    head: Head,
    params: Vec<f32>,
}

impl Block {
    fn new(cin: usize, cout: usize, stride: usize, offset: &mut usize) -> Self {
        let conv = Conv3 { cin, cout, stride, offset: *offset };
        *offset += conv.len();
        let norm = NormAct { ch: cout, offset: *offset };
        *offset += norm.len();
        Self { conv, norm }
    }

    fn forward(&self, p: &[f32], x: Tensor, cache: Option<&mut Vec<BlockCache>>) -> Tensor {
        let pre = self.conv.forward(p, &x);
        let (y, stats) = self.norm.forward(p, &pre);
        if let Some(c) = cache {
            c.push(BlockCache { input: x, pre, stats });
        }
        y
    }

    fn backward(&self, p: &[f32], c: BlockCache, dy: &Tensor, g: &mut [f32], need_dx: bool) -> Option<Tensor> {
        let dpre = self.norm.backward(p, &c.pre, &c.stats, dy, g);
        self.conv.backward(p, &c.input, &dpre, g, need_dx)
    }
}

impl Stage {
    fn forward(&self, p: &[f32], x: Tensor, cache: Option<&mut Vec<StageCache>>) -> Tensor {
        match cache {
            None => {
                let h = self.a.forward(p, x, None);
                self.b.forward(p, h, None)
            }
            Some(c) => {
                let mut v = Vec::with_capacity(2);
                let h = self.a.forward(p, x, Some(&mut v));
                let y = self.b.forward(p, h, Some(&mut v));
                let b = v.pop().unwrap();
                let a = v.pop().unwrap();
                c.push(StageCache { a, b });
                y
            }
        }
    }

    fn backward(&self, p: &[f32], c: StageCache, dy: &Tensor, g: &mut [f32], need_dx: bool) -> Option<Tensor> {
        let dh = self.b.backward(p, c.b, dy, g, true).expect("inner gradient");
        self.a.backward(p, c.a, &dh, g, need_dx)
    }
}

impl UNet3D {
    /// Fresh network with Kaiming-normal weights drawn from `seed`.
    pub fn new(cfg: UNet3DConfig, seed: u64) -> Result<Self, SegNetError> {
        cfg.validate()?;
        let d = cfg.num_downsamplings;
        let mut off = 0;
        let mut encoder = Vec::with_capacity(d + 1);
        for s in 0..=d {
            let cin = if s == 0 { cfg.in_channels } else { cfg.channels(s - 1) };
            let c = cfg.channels(s);
            let a = Block::new(cin, c, if s == 0 { 1 } else { 2 }, &mut off);
            let b = Block::new(c, c, 1, &mut off);
            encoder.push(Stage { a, b });
        }
        let mut decoder = Vec::with_capacity(d);
        for s in (0..d).rev() {
            let c = cfg.channels(s);
            let up = UpConv { cin: cfg.channels(s + 1), cout: c, offset: off };
            off += up.len();
            let a = Block::new(2 * c, c, 1, &mut off);
            let b = Block::new(c, c, 1, &mut off);
            decoder.push(UpStage { up, stage: Stage { a, b } });
        }
        let head = Head { cin: cfg.channels(0), cout: cfg.num_classes, offset: off };
        off += head.len();

        let mut params = vec![0.0f32; off];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0 / (1.0 + (LEAK as f64).powi(2));
        let mut kaiming = |slice: &mut [f32], fan_in: usize| {
            let n = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            slice.iter_mut().for_each(|w| *w = n.sample(&mut rng) as f32);
        };
        let blocks = encoder.iter().chain(decoder.iter().map(|u| &u.stage)).flat_map(|s| [&s.a, &s.b]);
        for blk in blocks {
            let c = &blk.conv;
            kaiming(&mut params[c.offset..c.offset + c.len()], c.fan_in());
            params[blk.norm.offset..blk.norm.offset + blk.norm.ch].fill(1.0);
        }
        for u in &decoder {
            kaiming(&mut params[u.up.offset..u.up.offset + u.up.len()], u.up.fan_in());
        }
        kaiming(&mut params[head.offset..head.offset + head.cin * head.cout], head.cin);
        Ok(Self { cfg, encoder, decoder, head, params })
    }

    pub fn with_params(cfg: UNet3DConfig, params: Vec<f32>) -> Result<Self, SegNetError> {
        let mut net = Self::new(cfg, 0)?;
        if params.len() != net.params.len() {
            return Err(SegNetError::WeightCount {
                expected: net.params.len(),
                found: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &UNet3DConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), SegNetError> {
        if x.channels != self.cfg.in_channels || x.data.len() != x.channels * x.voxels() {
            return Err(SegNetError::InputChannels {
                expected: self.cfg.in_channels,
                found: x.channels,
            });
        }
        self.cfg.check_patch(x.shape)
    }

    fn run(&self, x: Tensor, mut cache: Option<&mut ForwardCache>) -> Tensor {
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for stage in &self.encoder {
            h = stage.forward(p, h, cache.as_deref_mut().map(|c| &mut c.encoder));
            skips.push(h.clone());
        }
        skips.pop();
        for u in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = u.up.forward(p, &h);
            if let Some(c) = cache.as_deref_mut() {
                c.up_inputs.push(h);
            }
            h = u.stage.forward(p, up.concat(&skip), cache.as_deref_mut().map(|c| &mut c.decoder));
        }
        let out = self.head.forward(p, &h);
        if let Some(c) = cache {
            c.head_input = h;
        }
        out
    }

    /// Class scores (logits) of shape `(num_classes, D, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, SegNetError> {
        self.check_input(x)?;
        Ok(self.run(x.clone(), None))
    }

    /// Softmax probabilities.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor, SegNetError> {
        Ok(self.forward(x)?.softmax())
    }

    /// Batched forward: each input `(1, D, H, W)` maps to `(num_classes, D, H, W)`.
    pub fn forward_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>, SegNetError> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache), SegNetError> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            encoder: Vec::new(),
            up_inputs: Vec::new(),
            decoder: Vec::new(),
            head_input: Tensor::zeros(0, x.shape),
        };
        let out = self.run(x.clone(), Some(&mut cache));
        Ok((out, cache))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(&self, cache: ForwardCache, dlogits: &Tensor, grad: &mut [f32]) {
        assert_eq!(grad.len(), self.params.len());
        let p = &self.params;
        let ForwardCache {
            mut encoder,
            mut up_inputs,
            mut decoder,
            head_input,
        } = cache;
        let mut dh = self.head.backward(p, &head_input, dlogits, grad);
        drop(head_input);
        // decoder stages run deepest-first, so unwind them in reverse
        let mut dskips = Vec::with_capacity(self.decoder.len());
        for u in self.decoder.iter().rev() {
            let c = decoder.pop().expect("decoder cache");
            let dcat = u.stage.backward(p, c, &dh, grad, true).expect("decoder gradient");
            let (dup, dskip) = dcat.split_channels(u.up.cout);
            dskips.push(dskip);
            let x = up_inputs.pop().expect("upsampling cache");
            dh = u.up.backward(p, &x, &dup, grad);
        }
        // dskips[i] belongs to encoder stage i
        for (s, stage) in self.encoder.iter().enumerate().rev() {
            let c = encoder.pop().expect("encoder cache");
            if s < self.encoder.len() - 1 {
                let skip = &dskips[s];
                dh.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            }
            match stage.backward(p, c, &dh, grad, s > 0) {
                Some(d) => dh = d,
                None => break,
            }
        }
    }
}

/// Validates the config and builds a freshly initialized network.
pub fn build_model(cfg: UNet3DConfig, seed: u64) -> Result<UNet3D, SegNetError> {
    UNet3D::new(cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(depth: usize) -> UNet3DConfig {
        UNet3DConfig {
            num_downsamplings: depth,
            base_channels: 2,
            max_channels: 8,
            ..Default::default()
        }
    }

    #[test]
    fn bottleneck_of_reference_patch() {
        let cfg = UNet3DConfig::default();
        assert_eq!(cfg.bottleneck_shape(Shape3::new(96, 160, 160)).unwrap(), Shape3::new(3, 5, 5));
        assert!(matches!(
            cfg.bottleneck_shape(Shape3::new(90, 160, 160)),
            Err(SegNetError::IncompatiblePatch { factor: 32, .. })
        ));
    }

    #[test]
    fn channel_growth_is_capped() {
        let cfg = UNet3DConfig::default();
        let ch: Vec<_> = (0..=5).map(|s| cfg.channels(s)).collect();
        assert_eq!(ch, vec![32, 64, 128, 256, 320, 320]);
    }

    #[test]
    fn invalid_configs() {
        assert!(UNet3D::new(UNet3DConfig { num_downsamplings: 0, ..tiny(1) }, 0).is_err());
        assert!(UNet3D::new(UNet3DConfig { num_classes: 1, ..tiny(1) }, 0).is_err());
        let net = UNet3D::new(tiny(2), 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(1, Shape3::new(4, 4, 6))), Err(SegNetError::IncompatiblePatch { .. })));
        assert!(matches!(net.forward(&Tensor::zeros(2, Shape3::new(4, 4, 4))), Err(SegNetError::InputChannels { .. })));
    }

    #[test]
    fn output_shape_matches_input() {
        let net = UNet3D::new(tiny(2), 0).unwrap();
        let xs = vec![Tensor::zeros(1, Shape3::new(8, 4, 12)); 2];
        let out = net.forward_batch(&xs).unwrap();
        assert_eq!(out.len(), 2);
        for o in out {
            assert_eq!((o.channels, o.shape), (4, Shape3::new(8, 4, 12)));
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = UNet3D::new(tiny(2), 9).unwrap();
        let b = UNet3D::new(tiny(2), 9).unwrap();
        let c = UNet3D::new(tiny(2), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    /// Directional derivative of a random linear readout of the logits,
    /// compared against the analytic gradient along the same direction.
    #[test]
    fn network_gradient_matches_directional_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = UNet3D::new(tiny(2), 1).unwrap();
        let mut x = Tensor::zeros(1, Shape3::new(4, 8, 4));
        x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let (out, cache) = net.forward_train(&x).unwrap();
        let mut r = out.clone();
        r.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut g = vec![0.0; net.num_params()];
        net.backward(cache, &r, &mut g);

        let f = |params: &[f32]| {
            let n = UNet3D::with_params(tiny(2), params.to_vec()).unwrap();
            let o = n.forward(&x).unwrap();
            o.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        let dir: Vec<f32> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let h = 1e-3f32;
        let plus: Vec<f32> = net.params().iter().zip(&dir).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f32> = net.params().iter().zip(&dir).map(|(p, d)| p - h * d).collect();
        let fd = (f(&plus) - f(&minus)) / (2.0 * h as f64);
        assert!((fd - analytic).abs() < 2e-2 * analytic.abs().max(1.0), "fd {fd} vs analytic {analytic}");
    }
}
