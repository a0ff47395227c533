//! Hybrid training/scoring objective: contextual L2, SSIM and GMS losses.
//!
//! All loss functions operate on `(C, H, W)` tensors and stay on the autograd
//! path, so the same code drives both optimization and anomaly scoring.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

pub const GRADIENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// Odd SSIM window size.
    #[serde(default = "default_window")]
    pub ssim_window: usize,
    /// SSIM mean stabilizer a1.
    #[serde(default = "default_constant")]
    pub ssim_a1: f64,
    /// SSIM variance stabilizer a2.
    #[serde(default = "default_constant")]
    pub ssim_a2: f64,
    /// GMS stabilizer b.
    #[serde(default = "default_constant")]
    pub gms_b: f64,
}

fn default_window() -> usize {
    11
}
fn default_constant() -> f64 {
    1e-4
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ssim_window: default_window(),
            ssim_a1: default_constant(),
            ssim_a2: default_constant(),
            gms_b: default_constant(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window % 2 == 0 || self.ssim_window < 3 {
            return Err(Error::config("ssim_window must be odd and >= 3"));
        }
        if self.ssim_a1 <= 0.0 || self.ssim_a2 <= 0.0 || self.gms_b <= 0.0 {
            return Err(Error::config("loss stabilizer constants must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Ssim,
    Gms,
}

/// Channel-averaged per-pixel similarity map.
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    /// `(H, W)` tensor.
    pub values: Tensor,
    pub kind: SimilarityKind,
}

fn check_shapes(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize)> {
    let dx = x.dims3()?;
    let dy = y.dims3()?;
    if dx != dy {
        return Err(Error::argument(format!(
            "shape mismatch: {dx:?} vs {dy:?}"
        )));
    }
    Ok(dx)
}

/// `L_Con = (1 / (H·W)) · ‖x − y‖²` summed over all channels.
pub fn contextual_loss(target: &Tensor, recon: &Tensor) -> Result<Tensor> {
    let (_, h, w) = check_shapes(target, recon)?;
    let diff = target.sub(recon)?;
    Ok((diff.sqr()?.sum_all()? / (h * w) as f64)?)
}

/// Windowed SSIM map with replicate boundary, channels averaged.
pub fn ssim_map(x: &Tensor, y: &Tensor, config: &LossConfig) -> Result<SimilarityMap> {
    let (_, h, w) = check_shapes(x, y)?;
    let win = config.ssim_window;
    if h < win || w < win {
        return Err(Error::argument(format!(
            "spatial size {h}x{w} smaller than ssim window {win}"
        )));
    }
    let mx = ops::window_mean(x, win)?;
    let my = ops::window_mean(y, win)?;
    let mxx = ops::window_mean(&x.sqr()?, win)?;
    let myy = ops::window_mean(&y.sqr()?, win)?;
    let mxy = ops::window_mean(&x.mul(y)?, win)?;
    let vx = mxx.sub(&mx.sqr()?)?;
    let vy = myy.sub(&my.sqr()?)?;
    let cov = mxy.sub(&mx.mul(&my)?)?;
    let a1 = config.ssim_a1;
    let a2 = config.ssim_a2;
    let num = (((&mx * &my)? * 2.0)? + a1)?.mul(&((&cov * 2.0)? + a2)?)?;
    let den = ((mx.sqr()? + my.sqr()?)? + a1)?.mul(&((vx + vy)? + a2)?)?;
    let per_channel = num.div(&den)?;
    Ok(SimilarityMap {
        values: per_channel.mean(0)?,
        kind: SimilarityKind::Ssim,
    })
}

/// `L_SSIM = mean(1 − ssim_map)`.
pub fn ssim_loss(x: &Tensor, y: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let map = ssim_map(x, y, config)?;
    Ok(map.values.mean_all()?.affine(-1.0, 1.0)?)
}

/// Prewitt gradient magnitude map, `√(gx² + gy² + ε)` per channel.
pub fn gradient_magnitude(x: &Tensor) -> Result<Tensor> {
    let (gx, gy) = ops::prewitt_gradients(x)?;
    Ok(((gx.sqr()? + gy.sqr()?)? + GRADIENT_EPS)?.sqrt()?)
}

/// Gradient magnitude similarity map, channels averaged.
pub fn gms_map(x: &Tensor, y: &Tensor, config: &LossConfig) -> Result<SimilarityMap> {
    check_shapes(x, y)?;
    let gx = gradient_magnitude(x)?;
    let gy = gradient_magnitude(y)?;
    let b = config.gms_b;
    let num = ((gx.mul(&gy)? * 2.0)? + b)?;
    let den = ((gx.sqr()? + gy.sqr()?)? + b)?;
    let per_channel = num.div(&den)?;
    Ok(SimilarityMap {
        values: per_channel.mean(0)?,
        kind: SimilarityKind::Gms,
    })
}

/// `L_GMS = mean(1 − gms_map)`.
pub fn gms_loss(x: &Tensor, y: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let map = gms_map(x, y, config)?;
    Ok(map.values.mean_all()?.affine(-1.0, 1.0)?)
}

/// Total loss plus the per-term breakdown for logging.
#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub total: Tensor,
    pub contextual: f64,
    pub ssim: f64,
    pub gms: f64,
}

impl HybridLoss {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self
            .total
            .to_dtype(candle_core::DType::F64)?
            .to_scalar::<f64>()?)
    }
}

/// `L = L_Con + L_SSIM + L_GMS`.
pub fn hybrid_loss(target: &Tensor, recon: &Tensor, config: &LossConfig) -> Result<HybridLoss> {
    let con = contextual_loss(target, recon)?;
    let ssim = ssim_loss(target, recon, config)?;
    let gms = gms_loss(target, recon, config)?;
    let total = ((&con + &ssim)? + &gms)?;
    let scalar = |t: &Tensor| -> Result<f64> {
        Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    };
    Ok(HybridLoss {
        total,
        contextual: scalar(&con)?,
        ssim: scalar(&ssim)?,
        gms: scalar(&gms)?,
    })
}
