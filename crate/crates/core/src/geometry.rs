use serde::{Deserialize, Serialize};

/// Pixel coordinate in image frame: `row` down, `col` right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl From<[usize; 2]> for Pixel {
    fn from([row, col]: [usize; 2]) -> Self {
        Self { row, col }
    }
}

impl From<Pixel> for [usize; 2] {
    fn from(p: Pixel) -> Self {
        [p.row, p.col]
    }
}

/// Axis-aligned box `(row0, col0, height, width)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub const fn new(row0: usize, col0: usize, height: usize, width: usize) -> Self {
        Self { row0, col0, height, width }
    }

    pub fn row_end(&self) -> usize {
        self.row0 + self.height
    }

    pub fn col_end(&self) -> usize {
        self.col0 + self.width
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.row >= self.row0 && p.row < self.row_end() && p.col >= self.col0 && p.col < self.col_end()
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.row_end() <= height && self.col_end() <= width
    }
}
