//! Multi-scale feature aggregation from a frozen backbone.
//!
//! A pretrained (or randomly initialized, then frozen) convolutional backbone
//! is tapped at several depths; the tapped maps are bilinearly resized to a
//! common grid and concatenated along the channel axis.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

/// Preprocessed input image: `(3, H, W)` pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub pixels: Tensor,
    pub source_path: String,
}

impl ImageTensor {
    pub fn new(pixels: Tensor, source_path: impl Into<String>) -> Result<Self> {
        let (c, _, _) = pixels.dims3()?;
        if c != 3 {
            return Err(Error::argument(format!(
                "image tensor must have 3 channels, got {c}"
            )));
        }
        Ok(Self {
            pixels,
            source_path: source_path.into(),
        })
    }

    /// Loads an 8-bit PNG/JPEG, triplicating grayscale, resizing to
    /// `resolution`×`resolution` with bilinear interpolation.
    pub fn load(path: &Path, resolution: usize, device: &Device) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = vec![0f32; 3 * (h as usize) * (w as usize)];
        let plane = (h * w) as usize;
        for (x, y, px) in img.enumerate_pixels() {
            let idx = y as usize * w as usize + x as usize;
            data[idx] = px.0[0] as f32 / 255.0;
            data[plane + idx] = px.0[1] as f32 / 255.0;
            data[2 * plane + idx] = px.0[2] as f32 / 255.0;
        }
        let t = Tensor::from_vec(data, (3, h as usize, w as usize), device)?;
        let t = ops::resize_bilinear(&t, resolution, resolution)?;
        Self::new(t, path.to_string_lossy())
    }
}

/// Aligned multi-scale feature grid, stored as `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims3()?;
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dims3().map(|(c, _, _)| c).unwrap_or(0)
    }

    pub fn height(&self) -> usize {
        self.data.dims3().map(|(_, h, _)| h).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.data.dims3().map(|(_, _, w)| w).unwrap_or(0)
    }
}

pub const WEIGHTS_RANDOM_FROZEN: &str = "random-frozen";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// "vgg16" or "toy".
    #[serde(default = "default_architecture")]
    pub architecture_name: String,
    /// 1-based tap blocks, strictly increasing.
    #[serde(default = "default_layer_indices")]
    pub layer_indices: Vec<usize>,
    /// Path to a safetensors weights file, or "random-frozen".
    #[serde(default = "default_weights_source")]
    pub weights_source: String,
    /// Always true; the backbone never receives gradient updates.
    #[serde(default = "default_true")]
    pub frozen: bool,
    /// Seed for "random-frozen" weight generation.
    #[serde(default)]
    pub weights_seed: u64,
}

fn default_architecture() -> String {
    "vgg16".to_string()
}
fn default_layer_indices() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_weights_source() -> String {
    WEIGHTS_RANDOM_FROZEN.to_string()
}
fn default_true() -> bool {
    true
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            architecture_name: default_architecture(),
            layer_indices: default_layer_indices(),
            weights_source: default_weights_source(),
            frozen: true,
            weights_seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Built-in toy backbone: three small frozen conv blocks (8/16/32 ch).
    pub fn toy(weights_seed: u64) -> Self {
        Self {
            architecture_name: "toy".to_string(),
            layer_indices: vec![1, 2, 3],
            weights_source: WEIGHTS_RANDOM_FROZEN.to_string(),
            frozen: true,
            weights_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layer_indices.is_empty() {
            return Err(Error::config("layer_indices must be non-empty"));
        }
        if !self.layer_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("layer_indices must be strictly increasing"));
        }
        if self.layer_indices[0] == 0 {
            return Err(Error::config("layer_indices are 1-based"));
        }
        if !self.frozen {
            return Err(Error::config("backbone must be frozen"));
        }
        Ok(())
    }
}

/// One frozen conv block: a stack of 3×3 convolutions with ReLU.
struct ConvBlock {
    /// (weight, bias, stride) per convolution.
    convs: Vec<(Tensor, Tensor, usize)>,
    /// Whether a 2×2 max-pool follows the block (feeding the next block only;
    /// taps are taken before pooling).
    pool_after: bool,
}

/// Frozen feature extractor. Read-only after construction.
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<ConvBlock>,
    /// Per-channel (mean, std) input normalization.
    norm: Option<([f32; 3], [f32; 3])>,
}

/// VGG16 conv channel plan per block.
const VGG16_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

/// torchvision `features.<idx>` indices of the VGG16 convolutions.
const VGG16_CONV_INDICES: [&[usize]; 5] = [
    &[0, 2],
    &[5, 7],
    &[10, 12, 14],
    &[17, 19, 21],
    &[24, 26, 28],
];

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const TOY_CHANNELS: [usize; 3] = [8, 16, 32];

impl Backbone {
    pub fn new(config: &BackboneConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        match config.architecture_name.as_str() {
            "vgg16" => Self::build_vgg16(config, device),
            "toy" => Self::build_toy(config, device),
            other => Err(Error::config(format!("unknown architecture '{other}'"))),
        }
    }

    fn build_vgg16(config: &BackboneConfig, device: &Device) -> Result<Self> {
        let max_block = *config.layer_indices.iter().max().unwrap();
        if max_block > VGG16_BLOCKS.len() {
            return Err(Error::config(format!(
                "tap block {max_block} beyond VGG16 depth {}",
                VGG16_BLOCKS.len()
            )));
        }
        let random = config.weights_source == WEIGHTS_RANDOM_FROZEN;
        let loaded = if random {
            None
        } else {
            let path = Path::new(&config.weights_source);
            let map = candle_core::safetensors::load(path, device)
                .map_err(|e| Error::Load(format!("{}: {e}", config.weights_source)))?;
            Some(map)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.weights_seed ^ 0x5647_4731_36);
        let mut blocks = Vec::new();
        let mut in_ch = 3usize;
        for (b, plan) in VGG16_BLOCKS.iter().enumerate().take(max_block) {
            let mut convs = Vec::new();
            for (ci, &out_ch) in plan.iter().enumerate() {
                let (w, bias) = match &loaded {
                    Some(map) => {
                        let idx = VGG16_CONV_INDICES[b][ci];
                        let wname = format!("features.{idx}.weight");
                        let bname = format!("features.{idx}.bias");
                        let w = map
                            .get(&wname)
                            .ok_or_else(|| Error::Load(format!("missing tensor {wname}")))?
                            .to_dtype(DType::F32)?;
                        let bias = map
                            .get(&bname)
                            .ok_or_else(|| Error::Load(format!("missing tensor {bname}")))?
                            .to_dtype(DType::F32)?;
                        let dims = w.dims4()?;
                        if dims != (out_ch, in_ch, 3, 3) {
                            return Err(Error::Load(format!(
                                "{wname}: expected shape {:?}, got {:?}",
                                (out_ch, in_ch, 3, 3),
                                dims
                            )));
                        }
                        (w, bias)
                    }
                    None => random_conv(&mut rng, out_ch, in_ch, 3, device)?,
                };
                convs.push((w, bias, 1));
                in_ch = out_ch;
            }
            blocks.push(ConvBlock {
                convs,
                pool_after: true,
            });
        }
        let norm = if random {
            None
        } else {
            Some((IMAGENET_MEAN, IMAGENET_STD))
        };
        Ok(Self {
            config: config.clone(),
            blocks,
            norm,
        })
    }

    fn build_toy(config: &BackboneConfig, device: &Device) -> Result<Self> {
        let max_block = *config.layer_indices.iter().max().unwrap();
        if max_block > TOY_CHANNELS.len() {
            return Err(Error::config(format!(
                "tap block {max_block} beyond toy depth {}",
                TOY_CHANNELS.len()
            )));
        }
        if config.weights_source != WEIGHTS_RANDOM_FROZEN {
            return Err(Error::config(
                "toy backbone only supports the random-frozen weights source",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.weights_seed ^ 0x544f_59);
        let mut blocks = Vec::new();
        let mut in_ch = 3usize;
        for &out_ch in TOY_CHANNELS.iter().take(max_block) {
            let (w, b) = random_conv(&mut rng, out_ch, in_ch, 3, device)?;
            blocks.push(ConvBlock {
                convs: vec![(w, b, 2)],
                pool_after: false,
            });
            in_ch = out_ch;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
            norm: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Checksum over all frozen weights; constant across extraction/training.
    pub fn checksum(&self) -> Result<u64> {
        let tensors: Vec<&Tensor> = self
            .blocks
            .iter()
            .flat_map(|b| b.convs.iter().flat_map(|(w, bias, _)| [w, bias]))
            .collect();
        ops::weights_checksum(tensors)
    }

    /// Runs the frozen forward pass and returns one feature map per tap
    /// block, in layer order. Taps are taken after the last convolution of a
    /// block, before that block's pooling.
    pub fn extract(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>> {
        let mut x = image.pixels.unsqueeze(0)?.detach();
        if let Some((mean, std)) = &self.norm {
            let m = Tensor::from_vec(mean.to_vec(), (1, 3, 1, 1), x.device())?;
            let s = Tensor::from_vec(std.to_vec(), (1, 3, 1, 1), x.device())?;
            x = x.broadcast_sub(&m)?.broadcast_div(&s)?;
        }
        let mut taps = Vec::new();
        let max_block = *self.config.layer_indices.iter().max().unwrap();
        for (bi, block) in self.blocks.iter().enumerate().take(max_block) {
            for (w, bias, stride) in &block.convs {
                let b4 = bias.reshape((1, bias.dims1()?, 1, 1))?;
                x = x.conv2d(w, 1, *stride, 1, 1)?.broadcast_add(&b4)?.relu()?;
            }
            if self.config.layer_indices.contains(&(bi + 1)) {
                taps.push(FeatureMap::new(x.squeeze(0)?.detach())?);
            }
            if block.pool_after && bi + 1 < max_block {
                x = x.max_pool2d(2)?;
            }
        }
        Ok(taps)
    }
}

fn random_conv(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    // He-style scale keeps activations in a usable range through ReLU stacks.
    let std = (2.0 / (in_ch * k * k) as f64).sqrt();
    let n = out_ch * in_ch * k * k;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push((gauss(rng) * std) as f32);
    }
    let w = Tensor::from_vec(data, (out_ch, in_ch, k, k), device)?;
    let b = Tensor::zeros(out_ch, DType::F32, device)?;
    Ok((w, b))
}

/// Box-Muller sample; keeps weight generation independent of rand_distr.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Resizes every map to `target_size` and concatenates along channels, in
/// input order.
pub fn aggregate(maps: &[FeatureMap], target_size: (usize, usize)) -> Result<FeatureMap> {
    if maps.is_empty() {
        return Err(Error::argument("aggregate requires a non-empty map list"));
    }
    let (th, tw) = target_size;
    if th == 0 || tw == 0 {
        return Err(Error::argument("target size must be positive"));
    }
    let mut resized = Vec::with_capacity(maps.len());
    for m in maps {
        resized.push(ops::resize_bilinear(&m.data, th, tw)?);
    }
    let refs: Vec<&Tensor> = resized.iter().collect();
    FeatureMap::new(Tensor::cat(&refs, 0)?)
}

/// Convenience: extract + aggregate in one call.
pub fn extract_aggregated(
    backbone: &Backbone,
    image: &ImageTensor,
    target_size: (usize, usize),
) -> Result<FeatureMap> {
    let maps = backbone.extract(image)?;
    aggregate(&maps, target_size)
}
