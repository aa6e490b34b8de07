//! Simulated missingness: rectangular patch masks shared across channels
//! and zero substitution of the missing values.
//!
//! Mask convention: `true` (1) marks a missing coordinate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditional::SplitIndex;
use crate::error::{Error, Result};
use crate::tensorio::{self, ImageShape};

/// Random stream used for evaluation masks; training uses the epoch number.
pub const EVAL_STREAM: u64 = u64::MAX;

/// Counter-based generator for `(seed, stream, index)`: every sample of every
/// epoch gets an independent stream, so results do not depend on the order
/// or thread in which samples are processed.
pub fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"dmfamask");
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
    shape: ImageShape,
}

impl Mask {
    pub fn new(bits: Vec<bool>, shape: ImageShape) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(Error::Shape(format!(
                "mask has {} bits, shape needs {}",
                bits.len(),
                shape.len()
            )));
        }
        Ok(Self { bits, shape })
    }

    pub fn none(shape: ImageShape) -> Self {
        Self {
            bits: vec![false; shape.len()],
            shape,
        }
    }

    pub fn all(shape: ImageShape) -> Self {
        Self {
            bits: vec![true; shape.len()],
            shape,
        }
    }

    /// Rectangle with top-left corner `(top, left)` removed from every
    /// channel.
    pub fn patch(shape: ImageShape, top: usize, left: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if top + patch_h > shape.height || left + patch_w > shape.width {
            return Err(Error::Config(format!(
                "{patch_h}x{patch_w} patch at ({top}, {left}) does not fit a {}x{} image",
                shape.height, shape.width
            )));
        }
        let mut bits = vec![false; shape.len()];
        for c in 0..shape.channels {
            for y in top..top + patch_h {
                let row = c * shape.pixels() + y * shape.width;
                bits[row + left..row + left + patch_w].fill(true);
            }
        }
        Ok(Self { bits, shape })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_missing(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn split_index(&self) -> SplitIndex {
        SplitIndex::from_mask(&self.bits)
    }

    /// Missing pixels white, observed black. Multi-channel masks are written
    /// from their first channel (patch masks are channel-consistent).
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let hw = self.shape.pixels();
        let v: Vec<f32> = self.bits[..hw].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        tensorio::write_pnm(path, ImageShape::new(1, self.shape.height, self.shape.width), &v)
    }
}

/// Drops a `patch_h × patch_w` rectangle at a uniformly random position.
pub fn random_patch_mask<R: Rng + ?Sized>(
    shape: ImageShape,
    patch_h: usize,
    patch_w: usize,
    rng: &mut R,
) -> Result<Mask> {
    if patch_h > shape.height || patch_w > shape.width {
        return Err(Error::Config(format!(
            "{patch_h}x{patch_w} patch does not fit a {}x{} image",
            shape.height, shape.width
        )));
    }
    let top = rng.random_range(0..=shape.height - patch_h);
    let left = rng.random_range(0..=shape.width - patch_w);
    Mask::patch(shape, top, left, patch_h, patch_w)
}

/// A data point with its missing coordinates zeroed out.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub values: Vec<f32>,
    pub mask: Mask,
    pub ground_truth: Vec<f32>,
}

impl MaskedSample {
    pub fn missing_indices(&self) -> Vec<usize> {
        self.mask.missing_indices()
    }

    /// Ground truth restricted to the missing coordinates.
    pub fn missing_values(&self) -> Vec<f32> {
        self.mask
            .bits()
            .iter()
            .zip(&self.ground_truth)
            .filter_map(|(&m, &v)| m.then_some(v))
            .collect()
    }
}

pub fn apply_mask(x: &[f32], mask: &Mask) -> Result<MaskedSample> {
    if x.len() != mask.bits.len() {
        return Err(Error::Shape(format!(
            "sample has length {}, mask has {}",
            x.len(),
            mask.bits.len()
        )));
    }
    let values = x
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    Ok(MaskedSample {
        values,
        mask: mask.clone(),
        ground_truth: x.to_vec(),
    })
}

/// `(x_o, x_m, split)` in increasing index order.
pub fn split<T: Copy>(x: &[T], mask: &Mask) -> Result<(Vec<T>, Vec<T>, SplitIndex)> {
    if x.len() != mask.bits.len() {
        return Err(Error::Shape(format!(
            "sample has length {}, mask has {}",
            x.len(),
            mask.bits.len()
        )));
    }
    let s = mask.split_index();
    Ok((s.gather_observed(x), s.gather_missing(x), s))
}
