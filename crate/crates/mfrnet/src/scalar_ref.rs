//! Scalar reference implementations used only for verification.
//!
//! Everything in this module is written as plain nested loops over `f64`
//! slices, deliberately sharing no code with the tensor implementations it
//! checks. Test suites compare the vectorized paths against these.

#![doc(hidden)]

/// Replicate-boundary lookup into a row-major `(h, w)` plane.
fn at(plane: &[f64], h: usize, w: usize, i: i64, j: i64) -> f64 {
    let ii = i.clamp(0, h as i64 - 1) as usize;
    let jj = j.clamp(0, w as i64 - 1) as usize;
    plane[ii * w + jj]
}

/// Zero-boundary lookup.
fn at_zero(plane: &[f64], h: usize, w: usize, i: i64, j: i64) -> f64 {
    if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
        0.0
    } else {
        plane[i as usize * w + j as usize]
    }
}

/// Naive 3×3 convolution with zero padding 1 over one `(h, w)` plane.
/// `kernel` is row-major 3×3 and applied as cross-correlation, matching
/// `conv2d`.
pub fn conv3x3_zero_pad(plane: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0f64; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut acc = 0.0;
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    let k = kernel[((di + 1) * 3 + dj + 1) as usize];
                    acc += k * at_zero(plane, h, w, i + di, j + dj);
                }
            }
            out[i as usize * w + j as usize] = acc;
        }
    }
    out
}

/// Windowed mean with replicate boundary over one plane.
fn local_mean(plane: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let mut out = vec![0f64; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    acc += at(plane, h, w, i + di, j + dj);
                }
            }
            out[i as usize * w + j as usize] = acc / (window * window) as f64;
        }
    }
    out
}

/// Channel-averaged SSIM map. `x`, `y` are `(c, h, w)` row-major.
pub fn ssim_map(
    x: &[f64],
    y: &[f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    a1: f64,
    a2: f64,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0f64; plane];
    for ch in 0..c {
        let xs = &x[ch * plane..(ch + 1) * plane];
        let ys = &y[ch * plane..(ch + 1) * plane];
        let xy: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();
        let xx: Vec<f64> = xs.iter().map(|a| a * a).collect();
        let yy: Vec<f64> = ys.iter().map(|a| a * a).collect();
        let mx = local_mean(xs, h, w, window);
        let my = local_mean(ys, h, w, window);
        let mxy = local_mean(&xy, h, w, window);
        let mxx = local_mean(&xx, h, w, window);
        let myy = local_mean(&yy, h, w, window);
        for p in 0..plane {
            let vx = mxx[p] - mx[p] * mx[p];
            let vy = myy[p] - my[p] * my[p];
            let cov = mxy[p] - mx[p] * my[p];
            let num = (2.0 * mx[p] * my[p] + a1) * (2.0 * cov + a2);
            let den = (mx[p] * mx[p] + my[p] * my[p] + a1) * (vx + vy + a2);
            out[p] += num / den;
        }
    }
    for v in &mut out {
        *v /= c as f64;
    }
    out
}

const PREWITT_H: [f64; 9] = [
    1.0 / 3.0,
    0.0,
    -1.0 / 3.0,
    1.0 / 3.0,
    0.0,
    -1.0 / 3.0,
    1.0 / 3.0,
    0.0,
    -1.0 / 3.0,
];
const PREWITT_V: [f64; 9] = [
    1.0 / 3.0,
    1.0 / 3.0,
    1.0 / 3.0,
    0.0,
    0.0,
    0.0,
    -1.0 / 3.0,
    -1.0 / 3.0,
    -1.0 / 3.0,
];

/// Gradient magnitude of one plane: Prewitt pair, zero padding.
pub fn gradient_magnitude(plane: &[f64], h: usize, w: usize, eps: f64) -> Vec<f64> {
    let gx = conv3x3_zero_pad(plane, h, w, &PREWITT_H);
    let gy = conv3x3_zero_pad(plane, h, w, &PREWITT_V);
    gx.iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b + eps).sqrt())
        .collect()
}

/// Channel-averaged GMS map.
pub fn gms_map(
    x: &[f64],
    y: &[f64],
    c: usize,
    h: usize,
    w: usize,
    b: f64,
    eps: f64,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0f64; plane];
    for ch in 0..c {
        let gx = gradient_magnitude(&x[ch * plane..(ch + 1) * plane], h, w, eps);
        let gy = gradient_magnitude(&y[ch * plane..(ch + 1) * plane], h, w, eps);
        for p in 0..plane {
            out[p] += (2.0 * gx[p] * gy[p] + b) / (gx[p] * gx[p] + gy[p] * gy[p] + b);
        }
    }
    for v in &mut out {
        *v /= c as f64;
    }
    out
}

/// `(1 / (H·W)) · Σ (x − y)²` over all channels.
pub fn contextual_loss(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    ss / (h * w) as f64
}

/// Pairwise Mann-Whitney AUROC, ties counted 1/2. O(P·N).
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0f64;
    let mut pairs = 0f64;
    for (sp, lp) in scores.iter().zip(labels) {
        if !lp {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
