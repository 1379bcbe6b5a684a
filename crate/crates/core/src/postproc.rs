//! Normalized attribution map to instance masks: threshold, close, label, filter.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionMap, Normalization};
use crate::geometry::{Pixel, Window};
use crate::mask::{BinaryMask, Connectivity};

#[derive(Debug, Error, PartialEq)]
pub enum PostprocError {
    #[error("binarization needs a unit-max map, got {0:?}")]
    NotNormalized(Normalization),
    #[error("invalid post-processing config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    pub theta: f64,
    pub closure_kernel: usize,
    pub min_area: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self { theta: 0.1, closure_kernel: 5, min_area: 64, connectivity: Connectivity::Eight }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<(), PostprocError> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(PostprocError::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if self.closure_kernel % 2 == 0 {
            return Err(PostprocError::Config(format!("closure_kernel must be odd, got {}", self.closure_kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Row-major order.
    pub pixels: Vec<Pixel>,
    pub bbox: Window,
    /// Mean (row, col).
    pub centroid: (f64, f64),
}

impl Component {
    fn from_pixels(mut pixels: Vec<Pixel>) -> Self {
        pixels.sort();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        let (mut sr, mut sc) = (0.0, 0.0);
        for p in &pixels {
            r0 = r0.min(p.row);
            r1 = r1.max(p.row);
            c0 = c0.min(p.col);
            c1 = c1.max(p.col);
            sr += p.row as f64;
            sc += p.col as f64;
        }
        let n = pixels.len() as f64;
        Self { bbox: Window::new(r0, c0, r1 - r0 + 1, c1 - c0 + 1), centroid: (sr / n, sc / n), pixels }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn to_mask(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_pixels(height, width, self.pixels.iter().copied())
    }
}

/// Components of one mask, ordered by their first pixel in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    pub height: usize,
    pub width: usize,
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn total_area(&self) -> usize {
        self.components.iter().map(Component::area).sum()
    }

    pub fn union_mask(&self) -> BinaryMask {
        BinaryMask::from_pixels(self.height, self.width, self.components.iter().flat_map(|c| c.pixels.iter().copied()))
    }
}

/// `value >= theta`.
pub fn binarize(map: &AttributionMap, theta: f64) -> Result<BinaryMask, PostprocError> {
    if map.normalization != Normalization::UnitMax {
        return Err(PostprocError::NotNormalized(map.normalization));
    }
    Ok(BinaryMask::from_array(map.values.mapv(|v| v >= theta)))
}

/// Max filter along rows then columns with a window of `2 * radius + 1`.
fn dilate(bits: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = bits.dim();
    let rows = Array2::from_shape_fn((h, w), |(r, c)| {
        (c.saturating_sub(radius)..(c + radius + 1).min(w)).any(|k| bits[[r, k]])
    });
    Array2::from_shape_fn((h, w), |(r, c)| (r.saturating_sub(radius)..(r + radius + 1).min(h)).any(|k| rows[[k, c]]))
}

fn erode(bits: &Array2<bool>, radius: usize) -> Array2<bool> {
    dilate(&bits.mapv(|b| !b), radius).mapv(|b| !b)
}

/// Dilation then erosion with a `kernel × kernel` square. The image is
/// treated as surrounded by background, so the result is the restriction of
/// the closing in the unbounded plane: it always contains the input and
/// applying it twice changes nothing.
pub fn closure(mask: &BinaryMask, kernel: usize) -> BinaryMask {
    let radius = kernel / 2;
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    // The dilated set reaches at most `radius` pixels past the border, so a
    // margin of that size makes both passes exact.
    let mut padded = Array2::from_elem((h + 2 * radius, w + 2 * radius), false);
    padded.slice_mut(ndarray::s![radius..radius + h, radius..radius + w]).assign(mask.bits());
    let dilated = dilate(&padded, radius);
    // Erosion windows of the cropped pixels stay inside the canvas.
    let closed = erode(&dilated, radius);
    BinaryMask::from_array(closed.slice(ndarray::s![radius..radius + h, radius..radius + w]).to_owned())
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass labelling with union-find.
pub fn components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentSet {
    let (h, w) = mask.dims();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut parent: Vec<u32> = vec![0];
    // neighbours already visited in a raster scan
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut label = 0u32;
            for &(dr, dc) in back {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if !mask.get_signed(nr, nc) {
                    continue;
                }
                let other = find(&mut parent, labels[[nr as usize, nc as usize]]);
                if label == 0 {
                    label = other;
                } else if other != label {
                    let (lo, hi) = (label.min(other), label.max(other));
                    parent[hi as usize] = lo;
                    label = lo;
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            labels[[r, c]] = label;
        }
    }
    let mut slot = vec![usize::MAX; parent.len()];
    let mut groups: Vec<Vec<Pixel>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = labels[[r, c]];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            if slot[root] == usize::MAX {
                slot[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[root]].push(Pixel::new(r, c));
        }
    }
    ComponentSet { height: h, width: w, components: groups.into_iter().map(Component::from_pixels).collect() }
}

/// Keeps components with `area >= min_area`.
pub fn filter_area(set: &ComponentSet, min_area: usize) -> ComponentSet {
    ComponentSet {
        height: set.height,
        width: set.width,
        components: set.components.iter().filter(|c| c.area() >= min_area).cloned().collect(),
    }
}

/// Intermediate masks of [`postprocess`], for debugging and inspection.
#[derive(Clone, Debug)]
pub struct PostprocStages {
    pub binary: BinaryMask,
    pub closed: BinaryMask,
    pub all_components: ComponentSet,
    pub kept: ComponentSet,
}

pub fn postprocess_stages(map: &AttributionMap, config: &PostprocConfig) -> Result<PostprocStages, PostprocError> {
    config.validate()?;
    let binary = binarize(map, config.theta)?;
    let closed = closure(&binary, config.closure_kernel);
    let all_components = components(&closed, config.connectivity);
    let kept = filter_area(&all_components, config.min_area);
    Ok(PostprocStages { binary, closed, all_components, kept })
}

/// `filter_area(components(closure(binarize(map))))`.
pub fn postprocess(map: &AttributionMap, config: &PostprocConfig) -> Result<ComponentSet, PostprocError> {
    Ok(postprocess_stages(map, config)?.kept)
}
