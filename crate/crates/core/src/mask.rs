use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pixel, Window};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions differ: {a:?} vs {b:?}")]
    DimMismatch { a: (usize, usize), b: (usize, usize) },
}

/// Pixel adjacency used for connected components and contour tracing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Boolean raster, shape `(H, W)`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Array2<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { bits: Array2::from_elem((height, width), false) }
    }

    pub fn from_array(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self { bits: Array2::from_shape_fn((height, width), |(r, c)| f(r, c)) }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: impl IntoIterator<Item = Pixel>) -> Self {
        let mut m = Self::new(height, width);
        for p in pixels {
            m.set(p.row, p.col, true);
        }
        m
    }

    pub fn height(&self) -> usize {
        self.bits.nrows()
    }

    pub fn width(&self) -> usize {
        self.bits.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bits.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[[row, col]]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height()
            && (col as usize) < self.width()
            && self.bits[[row as usize, col as usize]]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[[row, col]] = value;
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.bits.indexed_iter().filter(|(_, &b)| b).map(|((r, c), _)| Pixel::new(r, c))
    }

    fn check_dims(&self, other: &Self) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimMismatch { a: self.dims(), b: other.dims() });
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        Ok(Self { bits: ndarray::Zip::from(&self.bits).and(&other.bits).map_collect(|&a, &b| a || b) })
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize, MaskError> {
        self.check_dims(other)?;
        Ok(ndarray::Zip::from(&self.bits).and(&other.bits).fold(0, |n, &a, &b| n + (a && b) as usize))
    }

    pub fn is_subset_of(&self, other: &Self) -> Result<bool, MaskError> {
        self.check_dims(other)?;
        Ok(ndarray::Zip::from(&self.bits).and(&other.bits).all(|&a, &b| !a || b))
    }

    /// Tight bounding box, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<Window> {
        let mut it = self.pixels();
        let first = it.next()?;
        let (mut r0, mut r1, mut c0, mut c1) = (first.row, first.row, first.col, first.col);
        for p in it {
            r0 = r0.min(p.row);
            r1 = r1.max(p.row);
            c0 = c0.min(p.col);
            c1 = c1.max(p.col);
        }
        Some(Window::new(r0, c0, r1 - r0 + 1, c1 - c0 + 1))
    }

    /// Mean pixel position (row, col), `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut n, mut sr, mut sc) = (0usize, 0f64, 0f64);
        for p in self.pixels() {
            n += 1;
            sr += p.row as f64;
            sc += p.col as f64;
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }

    /// Copies `src` into this mask with its top-left corner at `(row0, col0)` (OR-combined).
    pub fn paste_or(&mut self, src: &BinaryMask, row0: usize, col0: usize) {
        for p in src.pixels() {
            self.set(row0 + p.row, col0 + p.col, true);
        }
    }
}

/// Intersection over union; two empty masks score 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
