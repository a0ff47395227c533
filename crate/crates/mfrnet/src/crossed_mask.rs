//! Crossed-mask generation and application.
//!
//! The feature grid is partitioned into `k`×`k` cells; the cells are dealt
//! into `n` disjoint subsets. Mask `i` is 1 on visible cells and 0 on the
//! cells owned by subset `i`, so the masked regions jointly tile the grid.

use candle_core::{Device, Tensor};
#[cfg(test)]
use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_aggregator::FeatureMap;

/// `n` complementary binary keep-masks over a cell grid.
#[derive(Debug, Clone)]
pub struct MaskSet {
    /// `(H, W)` f32 tensors; 1 = visible, 0 = masked.
    pub masks: Vec<Tensor>,
    /// Subset owning each cell, row-major over the cell grid.
    pub cell_owner: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub cell_size: usize,
    pub subset_count: usize,
    pub seed: u64,
}

/// Deterministic balanced random partition of the cell grid.
pub fn generate_masks(
    height: usize,
    width: usize,
    cell_size: usize,
    subset_count: usize,
    seed: u64,
) -> Result<MaskSet> {
    if cell_size == 0 || height == 0 || width == 0 {
        return Err(Error::argument("dimensions and cell size must be positive"));
    }
    if height % cell_size != 0 || width % cell_size != 0 {
        return Err(Error::argument(format!(
            "grid {height}x{width} not divisible by cell size {cell_size}"
        )));
    }
    let cells_h = height / cell_size;
    let cells_w = width / cell_size;
    let cell_count = cells_h * cells_w;
    if subset_count == 0 || subset_count > cell_count {
        return Err(Error::argument(format!(
            "subset count {subset_count} outside 1..={cell_count}"
        )));
    }

    let mut order: Vec<usize> = (0..cell_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    // Deal shuffled cells round-robin so per-subset counts differ by at most 1.
    let mut cell_owner = vec![0u32; cell_count];
    for (pos, &cell) in order.iter().enumerate() {
        cell_owner[cell] = (pos % subset_count) as u32;
    }

    let device = Device::Cpu;
    let mut masks = Vec::with_capacity(subset_count);
    for subset in 0..subset_count as u32 {
        let mut data = vec![1f32; height * width];
        for (cell, &owner) in cell_owner.iter().enumerate() {
            if owner == subset {
                let cy = cell / cells_w;
                let cx = cell % cells_w;
                for dy in 0..cell_size {
                    for dx in 0..cell_size {
                        data[(cy * cell_size + dy) * width + cx * cell_size + dx] = 0.0;
                    }
                }
            }
        }
        masks.push(Tensor::from_vec(data, (height, width), &device)?);
    }

    Ok(MaskSet {
        masks,
        cell_owner,
        height,
        width,
        cell_size,
        subset_count,
        seed,
    })
}

impl MaskSet {
    /// Number of masked cells per subset.
    pub fn masked_cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.subset_count];
        for &owner in &self.cell_owner {
            counts[owner as usize] += 1;
        }
        counts
    }
}

/// Elementwise product of a feature map with a mask replicated over channels.
pub fn apply_mask(features: &FeatureMap, mask: &Tensor) -> Result<FeatureMap> {
    let (_, h, w) = features.data.dims3()?;
    let (mh, mw) = mask.dims2()?;
    if (mh, mw) != (h, w) {
        return Err(Error::argument(format!(
            "mask size {mh}x{mw} does not match feature size {h}x{w}"
        )));
    }
    let m = mask.to_dtype(features.data.dtype())?.unsqueeze(0)?;
    FeatureMap::new(features.data.broadcast_mul(&m)?)
}

/// Union of the restored regions: `Σ_i partials_i × (1 − M_i)`.
///
/// Each output pixel comes from exactly the partial whose mask hid it.
pub fn compose_restoration(partials: &[FeatureMap], mask_set: &MaskSet) -> Result<FeatureMap> {
    if partials.len() != mask_set.subset_count {
        return Err(Error::argument(format!(
            "expected {} partial restorations, got {}",
            mask_set.subset_count,
            partials.len()
        )));
    }
    let (c, h, w) = partials[0].data.dims3()?;
    if (h, w) != (mask_set.height, mask_set.width) {
        return Err(Error::argument("partial size does not match mask size"));
    }
    let dtype = partials[0].data.dtype();
    let mut acc: Option<Tensor> = None;
    for (partial, mask) in partials.iter().zip(&mask_set.masks) {
        if partial.data.dims3()? != (c, h, w) {
            return Err(Error::argument("partial shapes differ"));
        }
        let hole = mask.affine(-1.0, 1.0)?.to_dtype(dtype)?.unsqueeze(0)?;
        let piece = partial.data.broadcast_mul(&hole)?;
        acc = Some(match acc {
            Some(a) => a.add(&piece)?,
            None => piece,
        });
    }
    FeatureMap::new(acc.unwrap())
}
