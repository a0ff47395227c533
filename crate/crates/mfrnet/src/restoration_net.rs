//! Feature restoration network: head conv, five-stage hybrid transformer
//! body with additive skip connections, tail conv.
//!
//! Each hybrid transformer block combines a locally position-aware 3×3
//! convolution (LPA), multi-pooling self-attention whose keys/values come
//! from average-pooled copies of the input (MPSA), and a convolutional
//! feed-forward network (CFFN), with pre-LayerNorm residual wiring.

use std::collections::BTreeMap;
use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::ops::softmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_aggregator::FeatureMap;
use crate::ops;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const CFFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RestorationNetConfig {
    /// Channel count of the aggregated feature map.
    pub in_channels: usize,
    /// C0: working width after the head convolution.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Average-pooling ratios feeding MPSA keys/values.
    #[serde(default = "default_pooling_ratios")]
    pub pooling_ratios: Vec<usize>,
    /// Hybrid transformer blocks per stage.
    #[serde(default = "default_block_counts")]
    pub stage_block_counts: [usize; 5],
    /// Per-stage channel multipliers relative to C0.
    #[serde(default = "default_channel_multipliers")]
    pub stage_channel_multipliers: [usize; 5],
}

fn default_base_channels() -> usize {
    64
}
fn default_pooling_ratios() -> Vec<usize> {
    vec![2, 3, 4, 5]
}
fn default_block_counts() -> [usize; 5] {
    [1, 2, 4, 2, 1]
}
fn default_channel_multipliers() -> [usize; 5] {
    [1, 2, 4, 2, 1]
}

impl RestorationNetConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: default_base_channels(),
            pooling_ratios: default_pooling_ratios(),
            stage_block_counts: default_block_counts(),
            stage_channel_multipliers: default_channel_multipliers(),
        }
    }

    /// Small configuration for tests and desk-scale experiments.
    pub fn toy(in_channels: usize, base_channels: usize, ratios: Vec<usize>) -> Self {
        Self {
            in_channels,
            base_channels,
            pooling_ratios: ratios,
            stage_block_counts: [1, 1, 1, 1, 1],
            stage_channel_multipliers: default_channel_multipliers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.pooling_ratios.is_empty() || self.pooling_ratios.iter().any(|&r| r == 0) {
            return Err(Error::config("pooling_ratios must be non-empty with ratios >= 1"));
        }
        let m = &self.stage_channel_multipliers;
        // Stages 1-2 double channels while downsampling, 4-5 undo it.
        if m[1] != 2 * m[0] || m[2] != 2 * m[1] || m[3] != m[1] || m[4] != m[0] {
            return Err(Error::config(
                "stage_channel_multipliers must follow the [m, 2m, 4m, 2m, m] pattern",
            ));
        }
        if self.stage_block_counts.iter().any(|&b| b == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        Ok(())
    }

    /// Total learnable parameter count, as a pure function of the config.
    pub fn parameter_count(&self) -> usize {
        let c_in = self.in_channels;
        let c0 = self.base_channels;
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let block = |d: usize| {
            let lpa = conv(d, d, 3);
            let ln = 2 * (2 * d);
            let attn = 3 * d * d;
            let hidden = CFFN_EXPANSION * d;
            let cffn = conv(d, hidden, 1) + conv(hidden, hidden, 3) + conv(hidden, d, 1);
            lpa + ln + attn + cffn
        };
        let mut total = conv(c_in, c0, 3) + conv(c0, c_in, 3); // head + tail
        for s in 0..5 {
            let d = c0 * self.stage_channel_multipliers[s];
            total += self.stage_block_counts[s] * block(d);
        }
        // Two stride-2 down convs, two stride-2 transposed up convs.
        total += conv(c0, 2 * c0, 3) + conv(2 * c0, 4 * c0, 3);
        total += conv(4 * c0, 2 * c0, 3) + conv(2 * c0, c0, 3);
        total
    }
}

/// Registry of learnable tensors, ordered by name for determinism.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            vars: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    pub fn checksum(&self) -> Result<u64> {
        ops::weights_checksum(self.vars.values().map(|v| v.as_tensor()))
    }

    /// Replaces every parameter with the same-named tensor from `weights`.
    pub fn load(&mut self, weights: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars.iter() {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

enum Init<'a> {
    Seeded(ChaCha8Rng),
    Loaded(&'a HashMap<String, Tensor>),
}

struct Builder<'a> {
    store: ParamStore,
    init: Init<'a>,
    dtype: DType,
    device: Device,
}

impl<'a> Builder<'a> {
    fn tensor(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let t = match &mut self.init {
            Init::Seeded(rng) => {
                let data: Vec<f64> = (0..n).map(|_| trunc_normal(rng, std)).collect();
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
            Init::Loaded(map) => {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?;
                if t.dims() != shape {
                    return Err(Error::Load(format!(
                        "parameter {name}: expected shape {shape:?}, got {:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?
            }
        };
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.tensor(name, shape, 0.0)
    }

    fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let t = match &mut self.init {
            Init::Seeded(_) => {
                Tensor::ones(shape, self.dtype, &self.device)?
            }
            Init::Loaded(map) => map
                .get(name)
                .ok_or_else(|| Error::Load(format!("missing parameter {name}")))?
                .to_dtype(self.dtype)?,
        };
        let _ = n;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Result<Conv> {
        // He-style fan-in scale for conv weights.
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = self.tensor(&format!("{name}.weight"), &[co, ci, k, k], std)?;
        let b = self.zeros(&format!("{name}.bias"), &[co])?;
        Ok(Conv {
            w,
            b,
            stride,
            padding: k / 2,
        })
    }

    fn conv_transpose(&mut self, name: &str, ci: usize, co: usize) -> Result<ConvTranspose> {
        let std = (2.0 / (ci * 9) as f64).sqrt();
        let w = self.tensor(&format!("{name}.weight"), &[ci, co, 3, 3], std)?;
        let b = self.zeros(&format!("{name}.bias"), &[co])?;
        Ok(ConvTranspose { w, b })
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.ones(&format!("{name}.gamma"), &[d])?,
            beta: self.zeros(&format!("{name}.beta"), &[d])?,
        })
    }

    fn projection(&mut self, name: &str, d: usize) -> Result<Tensor> {
        self.tensor(name, &[d, d], 0.02)
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    // Resample outside two standard deviations.
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        let b = self.b.reshape((1, self.b.dims1()?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

struct ConvTranspose {
    w: Tensor,
    b: Tensor,
}

impl ConvTranspose {
    /// Stride-2 3×3 transposed conv doubling the spatial size exactly.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.w, 1, 1, 2, 1)?;
        let b = self.b.reshape((1, self.b.dims1()?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// LayerNorm over the channel dimension of a `(B, D, H, W)` tensor.
struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.permute((0, 2, 3, 1))?.contiguous()?;
        let mean = x.mean_keepdim(candle_core::D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(candle_core::D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        let y = normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?;
        Ok(y.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

pub struct HybridBlock {
    lpa: Conv,
    ln_attn: LayerNorm,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    ln_ffn: LayerNorm,
    cffn_in: Conv,
    cffn_mid: Conv,
    cffn_out: Conv,
    dim: usize,
}

/// Token count of the pooled key/value sequence: `Σ_r ⌊H/r⌋·⌊W/r⌋`.
pub fn pooled_token_count(h: usize, w: usize, ratios: &[usize]) -> usize {
    ratios.iter().map(|&r| (h / r) * (w / r)).sum()
}

impl HybridBlock {
    fn build(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        let hidden = CFFN_EXPANSION * dim;
        Ok(Self {
            lpa: b.conv(&format!("{name}.lpa"), dim, dim, 3, 1)?,
            ln_attn: b.layer_norm(&format!("{name}.ln_attn"), dim)?,
            w_q: b.projection(&format!("{name}.w_q"), dim)?,
            w_k: b.projection(&format!("{name}.w_k"), dim)?,
            w_v: b.projection(&format!("{name}.w_v"), dim)?,
            ln_ffn: b.layer_norm(&format!("{name}.ln_ffn"), dim)?,
            cffn_in: b.conv(&format!("{name}.cffn_in"), dim, hidden, 1, 1)?,
            cffn_mid: b.conv(&format!("{name}.cffn_mid"), hidden, hidden, 3, 1)?,
            cffn_out: b.conv(&format!("{name}.cffn_out"), hidden, dim, 1, 1)?,
            dim,
        })
    }

    /// Locally position-aware module: shape-preserving 3×3 convolution.
    pub fn lpa(&self, x: &Tensor) -> Result<Tensor> {
        self.lpa.forward(x)
    }

    /// Multi-pooling self-attention. Returns the output grid and the
    /// attention matrix `(B, H·W, T')`.
    pub fn mpsa_with_attention(
        &self,
        x: &Tensor,
        ratios: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        let (bsz, d, h, w) = x.dims4()?;
        if d != self.dim {
            return Err(Error::argument(format!(
                "mpsa dim mismatch: {d} vs {}",
                self.dim
            )));
        }
        if let Some(&bad) = ratios.iter().find(|&&r| r > h.min(w)) {
            return Err(Error::config(format!(
                "pooling ratio {bad} exceeds spatial size {h}x{w}"
            )));
        }
        // Tokens: (B, H·W, D).
        let z = x.reshape((bsz, d, h * w))?.transpose(1, 2)?.contiguous()?;
        // Pooled key/value tokens from each ratio, concatenated.
        let mut pooled = Vec::with_capacity(ratios.len());
        for &r in ratios {
            let p = ops::avg_pool_exact(x, r)?;
            let (_, _, ph, pw) = p.dims4()?;
            pooled.push(p.reshape((bsz, d, ph * pw))?.transpose(1, 2)?.contiguous()?);
        }
        let refs: Vec<&Tensor> = pooled.iter().collect();
        let z_pooled = Tensor::cat(&refs, 1)?;

        let wq = self.w_q.unsqueeze(0)?;
        let wk = self.w_k.unsqueeze(0)?;
        let wv = self.w_v.unsqueeze(0)?;
        let q = z.broadcast_matmul(&wq)?;
        let k = z_pooled.broadcast_matmul(&wk)?;
        let v = z_pooled.broadcast_matmul(&wv)?;
        let scale = 1.0 / (d as f64).sqrt();
        let logits = (q.matmul(&k.transpose(1, 2)?)? * scale)?;
        let attn = softmax(&logits, candle_core::D::Minus1)?;
        let out = attn.matmul(&v)?; // (B, H·W, D)
        let out = out.transpose(1, 2)?.reshape((bsz, d, h, w))?;
        Ok((out, attn))
    }

    pub fn mpsa(&self, x: &Tensor, ratios: &[usize]) -> Result<Tensor> {
        Ok(self.mpsa_with_attention(x, ratios)?.0)
    }

    /// Convolutional feed-forward: 1×1 → GELU → 3×3 → GELU → 1×1.
    pub fn cffn(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cffn_in.forward(x)?.gelu()?;
        let y = self.cffn_mid.forward(&y)?.gelu()?;
        self.cffn_out.forward(&y)
    }

    fn forward(&self, x: &Tensor, ratios: &[usize]) -> Result<Tensor> {
        let x = (x + self.lpa(x)?)?;
        let x = (&x + self.mpsa(&self.ln_attn.forward(&x)?, ratios)?)?;
        let x = (&x + self.cffn(&self.ln_ffn.forward(&x)?)?)?;
        Ok(x)
    }
}

pub struct RestorationNet {
    config: RestorationNetConfig,
    head: Conv,
    stages: Vec<Vec<HybridBlock>>,
    down: Vec<Conv>,
    up: Vec<ConvTranspose>,
    tail: Conv,
    params: ParamStore,
}

impl RestorationNet {
    /// Fresh network with seeded deterministic initialization.
    pub fn new(
        config: &RestorationNetConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Self::build(config, Init::Seeded(ChaCha8Rng::seed_from_u64(seed)), dtype, device)
    }

    /// Network with parameters taken from a name→tensor map (checkpoints).
    pub fn from_weights(
        config: &RestorationNetConfig,
        weights: &HashMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Self::build(config, Init::Loaded(weights), dtype, device)
    }

    fn build(
        config: &RestorationNetConfig,
        init: Init,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            init,
            dtype,
            device: device.clone(),
        };
        let c_in = config.in_channels;
        let c0 = config.base_channels;
        let head = b.conv("head", c_in, c0, 3, 1)?;
        let mut stages = Vec::with_capacity(5);
        for (s, &count) in config.stage_block_counts.iter().enumerate() {
            let dim = c0 * config.stage_channel_multipliers[s];
            let mut blocks = Vec::with_capacity(count);
            for i in 0..count {
                blocks.push(HybridBlock::build(&mut b, &format!("stage{s}.block{i}"), dim)?);
            }
            stages.push(blocks);
        }
        let down = vec![
            b.conv("down0", c0, 2 * c0, 3, 2)?,
            b.conv("down1", 2 * c0, 4 * c0, 3, 2)?,
        ];
        let up = vec![
            b.conv_transpose("up0", 4 * c0, 2 * c0)?,
            b.conv_transpose("up1", 2 * c0, c0)?,
        ];
        let tail = b.conv("tail", c0, c_in, 3, 1)?;
        Ok(Self {
            config: config.clone(),
            head,
            stages,
            down,
            up,
            tail,
            params: b.store,
        })
    }

    pub fn config(&self) -> &RestorationNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn run_stage(&self, s: usize, x: Tensor) -> Result<Tensor> {
        let mut x = x;
        for block in &self.stages[s] {
            x = block.forward(&x, &self.config.pooling_ratios)?;
        }
        Ok(x)
    }

    /// Batched forward over `(B, C, H, W)`; output shape equals input shape.
    pub fn forward_batch(&self, masked: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = masked.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::argument(format!(
                "input channels {c} do not match configured {}",
                self.config.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::argument(format!(
                "spatial size {h}x{w} must be divisible by 4"
            )));
        }
        let x0 = self.head.forward(masked)?;
        let s1 = self.run_stage(0, x0)?;
        let s2 = self.run_stage(1, self.down[0].forward(&s1)?)?;
        let s3 = self.run_stage(2, self.down[1].forward(&s2)?)?;
        // Additive skips: stage-2 output into stage 4, stage-1 into stage 5.
        let s4 = self.run_stage(3, (self.up[0].forward(&s3)? + &s2)?)?;
        let s5 = self.run_stage(4, (self.up[1].forward(&s4)? + &s1)?)?;
        self.tail.forward(&s5).map_err(Into::into)
    }

    /// Single-map forward on `(C, H, W)`.
    pub fn forward(&self, masked: &FeatureMap) -> Result<FeatureMap> {
        let y = self.forward_batch(&masked.data.unsqueeze(0)?)?;
        FeatureMap::new(y.squeeze(0)?)
    }

    /// First block of the middle stage; used by tests probing MPSA/LPA/CFFN.
    pub fn probe_block(&self) -> &HybridBlock {
        &self.stages[2][0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar_ref;

    fn dev() -> Device {
        Device::Cpu
    }

    fn toy_config() -> RestorationNetConfig {
        RestorationNetConfig::toy(12, 8, vec![2])
    }

    fn pseudo(shape: (usize, usize, usize, usize), salt: u64) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let x = (i as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(salt);
                ((x >> 33) as f32 / (1u64 << 31) as f32) - 0.5
            })
            .collect();
        Tensor::from_vec(data, shape, &dev()).unwrap()
    }

    #[test]
    fn forward_preserves_shape() {
        let net = RestorationNet::new(&toy_config(), 1, DType::F32, &dev()).unwrap();
        let x = pseudo((1, 12, 8, 8), 0);
        let y = net.forward_batch(&x).unwrap();
        assert_eq!(y.dims4().unwrap(), (1, 12, 8, 8));
        let x = pseudo((2, 12, 16, 12), 1);
        let y = net.forward_batch(&x).unwrap();
        assert_eq!(y.dims4().unwrap(), (2, 12, 16, 12));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = RestorationNet::new(&toy_config(), 2, DType::F32, &dev()).unwrap();
        let x = pseudo((1, 12, 8, 8), 7);
        let a: Vec<f32> = net
            .forward_batch(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f32> = net
            .forward_batch(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_seeds_build_identical_networks() {
        let a = RestorationNet::new(&toy_config(), 5, DType::F32, &dev()).unwrap();
        let b = RestorationNet::new(&toy_config(), 5, DType::F32, &dev()).unwrap();
        assert_eq!(a.params().checksum().unwrap(), b.params().checksum().unwrap());
        let c = RestorationNet::new(&toy_config(), 6, DType::F32, &dev()).unwrap();
        assert_ne!(a.params().checksum().unwrap(), c.params().checksum().unwrap());
    }

    #[test]
    fn zero_input_zero_tail_gives_zero_output() {
        let net = RestorationNet::new(&toy_config(), 3, DType::F32, &dev()).unwrap();
        let tail_w = net.params().vars().get("tail.weight").unwrap();
        tail_w
            .set(&Tensor::zeros(tail_w.dims(), DType::F32, &dev()).unwrap())
            .unwrap();
        let x = Tensor::zeros((1, 12, 8, 8), DType::F32, &dev()).unwrap();
        let y = net.forward_batch(&x).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = RestorationNet::new(&toy_config(), 0, DType::F32, &dev()).unwrap();
        // Wrong channel count.
        assert!(net.forward_batch(&pseudo((1, 5, 8, 8), 0)).is_err());
        // Not divisible by 4.
        assert!(net.forward_batch(&pseudo((1, 12, 10, 10), 0)).is_err());
    }

    #[test]
    fn mpsa_token_count_and_softmax_rows() {
        let cfg = RestorationNetConfig::toy(12, 8, vec![2, 3, 4, 5]);
        let net = RestorationNet::new(&cfg, 4, DType::F32, &dev()).unwrap();
        let block = net.probe_block();
        let dim = 8 * cfg.stage_channel_multipliers[2];
        let x = pseudo((1, dim, 20, 20), 3);
        let (out, attn) = block.mpsa_with_attention(&x, &[2, 3, 4, 5]).unwrap();
        assert_eq!(out.dims4().unwrap(), (1, dim, 20, 20));
        assert_eq!(pooled_token_count(20, 20, &[2, 3, 4, 5]), 177);
        assert_eq!(attn.dims3().unwrap(), (1, 400, 177));
        let sums: Vec<f32> = attn.sum(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mpsa_ratio_one_is_plain_self_attention() {
        let cfg = RestorationNetConfig::toy(12, 8, vec![1]);
        let net = RestorationNet::new(&cfg, 8, DType::F32, &dev()).unwrap();
        let block = net.probe_block();
        let dim = 8 * cfg.stage_channel_multipliers[2];
        let x = pseudo((1, dim, 6, 6), 9);
        let (_, attn) = block.mpsa_with_attention(&x, &[1]).unwrap();
        // Keys/values are the un-pooled tokens themselves.
        assert_eq!(attn.dims3().unwrap(), (1, 36, 36));
    }

    #[test]
    fn mpsa_rejects_oversized_ratio() {
        let net = RestorationNet::new(&toy_config(), 0, DType::F32, &dev()).unwrap();
        let dim = 8 * 4;
        let x = pseudo((1, dim, 2, 2), 0);
        assert!(net.probe_block().mpsa(&x, &[3]).is_err());
    }

    #[test]
    fn lpa_matches_naive_convolution() {
        let net = RestorationNet::new(&toy_config(), 11, DType::F64, &dev()).unwrap();
        let block = net.probe_block();
        let dim = 8 * 4;
        let x = pseudo((1, dim, 7, 7), 5).to_dtype(DType::F64).unwrap();
        let got: Vec<f64> = block
            .lpa(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        // Brute-force: per output channel, sum naive 3x3 zero-pad convs over
        // input channels plus bias.
        let w: Vec<f64> = net
            .params()
            .vars()
            .get("stage2.block0.lpa.weight")
            .unwrap()
            .as_tensor()
            .to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f64> = net
            .params()
            .vars()
            .get("stage2.block0.lpa.bias")
            .unwrap()
            .as_tensor()
            .to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let plane = 49;
        for co in 0..dim {
            let mut expect = vec![b[co]; plane];
            for ci in 0..dim {
                let mut kernel = [0f64; 9];
                kernel.copy_from_slice(&w[(co * dim + ci) * 9..(co * dim + ci + 1) * 9]);
                let part =
                    scalar_ref::conv3x3_zero_pad(&xs[ci * plane..(ci + 1) * plane], 7, 7, &kernel);
                for (e, p) in expect.iter_mut().zip(part) {
                    *e += p;
                }
            }
            for (g, e) in got[co * plane..(co + 1) * plane].iter().zip(&expect) {
                assert!((g - e).abs() < 1e-9, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn cffn_preserves_shape_and_zero_weights_give_zero() {
        let net = RestorationNet::new(&toy_config(), 13, DType::F32, &dev()).unwrap();
        let block = net.probe_block();
        let dim = 8 * 4;
        let x = pseudo((2, dim, 5, 9), 2);
        let y = block.cffn(&x).unwrap();
        assert_eq!(y.dims4().unwrap(), (2, dim, 5, 9));
        for name in ["cffn_in", "cffn_mid", "cffn_out"] {
            let v = net
                .params()
                .vars()
                .get(&format!("stage2.block0.{name}.weight"))
                .unwrap();
            v.set(&Tensor::zeros(v.dims(), DType::F32, &dev()).unwrap())
                .unwrap();
        }
        let y = block.cffn(&x).unwrap();
        let vals: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(vals.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_formula_matches_instantiation() {
        for cfg in [
            toy_config(),
            RestorationNetConfig::new(448),
            RestorationNetConfig::toy(56, 16, vec![2, 4]),
        ] {
            let net = RestorationNet::new(&cfg, 0, DType::F32, &dev()).unwrap();
            assert_eq!(net.params().parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn default_config_parameter_count_regression() {
        // Frozen from the formula at the default configuration (C_in = 448,
        // C0 = 64, blocks [1,2,4,2,1], multipliers [1,2,4,2,1]).
        assert_eq!(RestorationNetConfig::new(448).parameter_count(), 15_088_272);
    }

    #[test]
    fn config_validation_rejects_bad_multipliers() {
        let mut cfg = toy_config();
        cfg.stage_channel_multipliers = [1, 3, 6, 3, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.pooling_ratios = vec![];
        assert!(cfg.validate().is_err());
    }

    /// Analytic gradients vs central finite differences through the full
    /// network and hybrid loss, in f64, sampling entries from every
    /// parameter tensor.
    #[test]
    fn gradients_match_finite_differences() {
        use crate::losses::{hybrid_loss, LossConfig};
        let cfg = toy_config();
        let net = RestorationNet::new(&cfg, 21, DType::F64, &dev()).unwrap();
        let loss_cfg = LossConfig {
            ssim_window: 5,
            ssim_a1: 0.01,
            ssim_a2: 0.01,
            gms_b: 0.01,
        };
        let x = pseudo((1, 12, 8, 8), 6).to_dtype(DType::F64).unwrap();
        let target = pseudo((1, 12, 8, 8), 60)
            .to_dtype(DType::F64)
            .unwrap()
            .squeeze(0)
            .unwrap();

        let eval = |net: &RestorationNet| -> f64 {
            let y = net.forward_batch(&x).unwrap().squeeze(0).unwrap();
            hybrid_loss(&target, &y, &loss_cfg)
                .unwrap()
                .total_value()
                .unwrap()
        };

        let y = net.forward_batch(&x).unwrap().squeeze(0).unwrap();
        let loss = hybrid_loss(&target, &y, &loss_cfg).unwrap();
        let grads = loss.total.backward().unwrap();

        let names: Vec<String> = net.params().vars().keys().cloned().collect();
        let h = 1e-5;
        let mut checked = 0usize;
        for name in names {
            let var = net.params().vars().get(&name).unwrap().clone();
            let grad = match grads.get(&var) {
                Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                None => continue,
            };
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let n = base.len();
            // Sample up to three entries per tensor.
            for &idx in [0, n / 2, n - 1].iter().take(n.min(3)) {
                let mut plus = base.clone();
                plus[idx] += h;
                var.set(
                    &Tensor::from_vec(plus, var.dims().to_vec(), &dev()).unwrap(),
                )
                .unwrap();
                let fp = eval(&net);
                let mut minus = base.clone();
                minus[idx] -= h;
                var.set(
                    &Tensor::from_vec(minus, var.dims().to_vec(), &dev()).unwrap(),
                )
                .unwrap();
                let fm = eval(&net);
                var.set(
                    &Tensor::from_vec(base.clone(), var.dims().to_vec(), &dev()).unwrap(),
                )
                .unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let denom = fd.abs().max(grad[idx].abs()).max(1e-4);
                let rel = (fd - grad[idx]).abs() / denom;
                assert!(
                    rel < 1e-3,
                    "{name}[{idx}]: analytic {} vs fd {fd} (rel {rel})",
                    grad[idx]
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "only {checked} gradient entries checked");
    }
}
