//! Binary pixel masks with the run-length encoding shared by ground-truth
//! files and audit reports.
//!
//! RLE layout: row-major, alternating run lengths starting with a zero-run,
//! so a mask that begins with set pixels encodes a leading run of length 0.
//! Run lengths always sum to `width * height`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions {0}x{1} do not match {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("run lengths sum to {got}, expected {expected}")]
    BadRunLength { got: usize, expected: usize },
}

/// A width x height binary plane, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for row in 0..height {
            for col in 0..width {
                m.bits[row * width + col] = f(row, col);
            }
        }
        m
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Mask {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixelwise intersection count.
    pub fn overlap(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Sets every pixel that is set in `other`.
    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Intersection-over-union; 1.0 when both masks are empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.overlap(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Alternating run lengths, starting with a zero-run.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &bit in &self.bits {
            if bit == current {
                len += 1;
            } else {
                runs.push(len);
                current = bit;
                len = 1;
            }
        }
        runs.push(len);
        if self.bits.is_empty() {
            runs.clear();
            runs.push(0);
        }
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[usize]) -> Result<Self, MaskError> {
        let expected = width * height;
        let total: usize = runs.iter().sum();
        if total != expected {
            return Err(MaskError::BadRunLength {
                got: total,
                expected,
            });
        }
        let mut bits = Vec::with_capacity(expected);
        let mut value = false;
        for &run in runs {
            bits.extend(std::iter::repeat(value).take(run));
            value = !value;
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }
}

/// Serialized form: dimensions plus run lengths.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<usize>,
}

impl From<&Mask> for RleMask {
    fn from(mask: &Mask) -> Self {
        RleMask {
            width: mask.width,
            height: mask.height,
            runs: mask.to_rle(),
        }
    }
}

impl TryFrom<&RleMask> for Mask {
    type Error = MaskError;

    fn try_from(rle: &RleMask) -> Result<Self, MaskError> {
        Mask::from_rle(rle.width, rle.height, &rle.runs)
    }
}
