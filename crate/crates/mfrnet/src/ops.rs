//! Small differentiable tensor helpers built from candle primitives.
//!
//! Everything here keeps an exact autograd path: pooling and windowed means
//! go through `conv2d` (whose backward is exact for any stride), and resizes
//! go through dense interpolation matrices applied with matmul.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Dense bilinear interpolation matrix (align-corners disabled).
///
/// Row `i` of the returned `(out_len, in_len)` matrix holds the weights of
/// the source samples contributing to output sample `i`.
pub fn bilinear_matrix(
    out_len: usize,
    in_len: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = (i as f64 + 0.5) * scale - 0.5;
        let src = src.max(0.0).min((in_len - 1) as f64);
        let j0 = src.floor() as usize;
        let j1 = (j0 + 1).min(in_len - 1);
        let frac = src - j0 as f64;
        data[i * in_len + j0] += 1.0 - frac;
        data[i * in_len + j1] += frac;
    }
    let m = Tensor::from_vec(data, (out_len, in_len), device)?;
    Ok(m.to_dtype(dtype)?)
}

/// Bilinear resize of a `(C, H, W)` tensor to `(C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let rh = bilinear_matrix(out_h, h, x.dtype(), x.device())?.unsqueeze(0)?;
    let rw = bilinear_matrix(out_w, w, x.dtype(), x.device())?
        .t()?
        .unsqueeze(0)?;
    let y = rh.broadcast_matmul(x)?; // (C, out_h, W)
    Ok(y.broadcast_matmul(&rw)?) // (C, out_h, out_w)
}

/// Replicate-pad the two trailing spatial dims of a `(B, C, H, W)` tensor.
pub fn replicate_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let top = x.narrow(2, 0, 1)?;
    let bottom = x.narrow(2, h - 1, 1)?;
    let mut rows = Vec::with_capacity(2 * pad + 1);
    for _ in 0..pad {
        rows.push(top.clone());
    }
    rows.push(x.clone());
    for _ in 0..pad {
        rows.push(bottom.clone());
    }
    let x = Tensor::cat(&rows, 2)?;
    let left = x.narrow(3, 0, 1)?;
    let right = x.narrow(3, w - 1, 1)?;
    let mut cols = Vec::with_capacity(2 * pad + 1);
    for _ in 0..pad {
        cols.push(left.clone());
    }
    cols.push(x.clone());
    for _ in 0..pad {
        cols.push(right.clone());
    }
    Ok(Tensor::cat(&cols, 3)?)
}

/// Windowed local mean of a `(C, H, W)` tensor with an odd square window,
/// replicate boundary, output at full `(C, H, W)` extent.
pub fn window_mean(x: &Tensor, window: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let pad = window / 2;
    let x4 = x.reshape((c, 1, h, w))?;
    let padded = replicate_pad(&x4, pad)?;
    let kernel = Tensor::full(
        1.0 / (window * window) as f64,
        (1, 1, window, window),
        x.device(),
    )?
    .to_dtype(x.dtype())?;
    let y = padded.conv2d(&kernel, 0, 1, 1, 1)?;
    Ok(y.reshape((c, h, w))?)
}

/// Per-channel horizontal and vertical Prewitt responses of a `(C, H, W)`
/// tensor, zero padding, same spatial extent. Kernels carry the usual 1/3
/// normalization.
pub fn prewitt_gradients(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.dims3()?;
    let third = 1.0f64 / 3.0;
    #[rustfmt::skip]
    let kh: Vec<f64> = vec![
        third, 0.0, -third,
        third, 0.0, -third,
        third, 0.0, -third,
    ];
    #[rustfmt::skip]
    let kv: Vec<f64> = vec![
        third, third, third,
        0.0, 0.0, 0.0,
        -third, -third, -third,
    ];
    let mut k = kh;
    k.extend(kv);
    let kernel = Tensor::from_vec(k, (2, 1, 3, 3), x.device())?.to_dtype(x.dtype())?;
    let x4 = x.reshape((c, 1, h, w))?;
    let g = x4.conv2d(&kernel, 1, 1, 1, 1)?; // (C, 2, H, W)
    let gx = g.narrow(1, 0, 1)?.reshape((c, h, w))?;
    let gy = g.narrow(1, 1, 1)?.reshape((c, h, w))?;
    Ok((gx, gy))
}

/// Non-overlapping average pooling of a `(B, C, H, W)` tensor with ratio `r`.
///
/// Output spatial size is `(⌊H/r⌋, ⌊W/r⌋)`; trailing rows/columns that do not
/// fill a full window are dropped. Implemented via strided `conv2d` so the
/// gradient is exact for non-divisible sizes.
pub fn avg_pool_exact(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let oh = h / r;
    let ow = w / r;
    let cropped = x.narrow(2, 0, oh * r)?.narrow(3, 0, ow * r)?;
    let flat = cropped.reshape((b * c, 1, oh * r, ow * r))?;
    let kernel =
        Tensor::full(1.0 / (r * r) as f64, (1, 1, r, r), x.device())?.to_dtype(x.dtype())?;
    let y = flat.conv2d(&kernel, 0, r, 1, 1)?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Gaussian smoothing of a `(H, W)` map, replicate boundary, separable.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let (h, w) = x.dims2()?;
    let mh = gaussian_matrix(h, sigma, x.dtype(), x.device())?;
    let mw = gaussian_matrix(w, sigma, x.dtype(), x.device())?;
    let y = mh.matmul(x)?;
    Ok(y.matmul(&mw.t()?)?)
}

fn gaussian_matrix(n: usize, sigma: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        weights.push((-((t * t) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = weights.iter().sum();
    let mut data = vec![0f64; n * n];
    for i in 0..n as i64 {
        for (idx, t) in (-radius..=radius).enumerate() {
            let j = (i + t).clamp(0, n as i64 - 1) as usize;
            data[i as usize * n + j] += weights[idx] / norm;
        }
    }
    let m = Tensor::from_vec(data, (n, n), device)?;
    Ok(m.to_dtype(dtype)?)
}

/// FNV-1a checksum over the little-endian f32 bytes of a set of tensors.
pub fn weights_checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<u64> {
    let mut hash: u64 = 0xcbf29ce484222325;
    for t in tensors {
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for v in flat {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    Ok(hash)
}
