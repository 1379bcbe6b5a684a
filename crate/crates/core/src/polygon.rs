//! Outer contours of mask components and their rasterization.
//!
//! Vertices sit on the pixel-corner lattice: corner `(r, c)` is the top-left
//! corner of pixel `(r, c)`, so a single pixel at `(2, 3)` traces to the
//! square `(2,3) (2,4) (3,4) (3,3)`.

use serde::{Deserialize, Serialize};

use crate::mask::{BinaryMask, Connectivity};

/// Closed ring of `(row, col)` corners, clockwise on screen, first vertex not repeated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<[usize; 2]>,
}

const DIRS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
// Pixel offsets, relative to the current corner, of the pixels ahead-left and
// ahead-right of each direction.
const AHEAD: [[(isize, isize); 2]; 4] = [
    [(-1, 0), (0, 0)],
    [(0, 0), (0, -1)],
    [(0, -1), (-1, -1)],
    [(-1, -1), (-1, 0)],
];

impl Polygon {
    /// Traces the outer boundary of the component containing the first
    /// foreground pixel in row-major order. Holes are ignored. Returns `None`
    /// for an empty mask.
    ///
    /// Where two pixels touch only at a corner, the walk joins them under
    /// 8-connectivity and separates them under 4-connectivity.
    pub fn trace(mask: &BinaryMask, connectivity: Connectivity) -> Option<Self> {
        let start_px = mask.pixels().next()?;
        let start = (start_px.row as isize, start_px.col as isize);
        let fg = |corner: (isize, isize), off: (isize, isize)| mask.get_signed(corner.0 + off.0, corner.1 + off.1);
        let mut vertices = vec![[start_px.row, start_px.col]];
        let mut pos = start;
        let mut dir = 0usize;
        loop {
            pos = (pos.0 + DIRS[dir].0, pos.1 + DIRS[dir].1);
            let [al, ar] = AHEAD[dir];
            let (left, right) = (fg(pos, al), fg(pos, ar));
            let next = match connectivity {
                Connectivity::Eight if left => (dir + 3) % 4,
                Connectivity::Four if left && right => (dir + 3) % 4,
                _ if right => dir,
                _ => (dir + 1) % 4,
            };
            if pos == start && next == 0 {
                break;
            }
            if next != dir {
                vertices.push([pos.0 as usize, pos.1 as usize]);
            }
            dir = next;
        }
        Some(Self { vertices })
    }

    /// Even-odd fill sampled at pixel centres.
    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let mut mask = BinaryMask::new(height, width);
        let n = self.vertices.len();
        let mut xs = Vec::new();
        for r in 0..height {
            let y = r as f64 + 0.5;
            xs.clear();
            for i in 0..n {
                let [r0, c0] = self.vertices[i].map(|v| v as f64);
                let [r1, c1] = self.vertices[(i + 1) % n].map(|v| v as f64);
                if (r0 <= y) != (r1 <= y) {
                    xs.push(c0 + (y - r0) / (r1 - r0) * (c1 - c0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // pixel c is inside when pair[0] <= c + 0.5 < pair[1]
                let lo = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let hi = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for c in lo..hi {
                    mask.set(r, c, true);
                }
            }
        }
        mask
    }

    /// Douglas-Peucker simplification of the closed ring. Vertices stay on
    /// the corner lattice; a tolerance of 0 returns the ring unchanged.
    pub fn simplify(&self, tolerance: f64) -> Self {
        let v = &self.vertices;
        if tolerance <= 0.0 || v.len() <= 4 {
            return self.clone();
        }
        let far = (1..v.len()).max_by(|&a, &b| dist2(v[0], v[a]).total_cmp(&dist2(v[0], v[b]))).expect("len > 4");
        let mut keep = vec![false; v.len()];
        keep[0] = true;
        keep[far] = true;
        douglas_peucker(v, 0, far, tolerance, &mut keep);
        let tail: Vec<[usize; 2]> = v[far..].iter().chain(std::iter::once(&v[0])).copied().collect();
        let mut keep_tail = vec![false; tail.len()];
        douglas_peucker(&tail, 0, tail.len() - 1, tolerance, &mut keep_tail);
        for (i, k) in keep_tail.iter().enumerate().take(tail.len() - 1) {
            keep[far + i] |= *k;
        }
        let vertices: Vec<[usize; 2]> = v.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
        if vertices.len() < 3 {
            return self.clone();
        }
        Self { vertices }
    }
}

fn dist2(a: [usize; 2], b: [usize; 2]) -> f64 {
    let dr = a[0] as f64 - b[0] as f64;
    let dc = a[1] as f64 - b[1] as f64;
    dr * dr + dc * dc
}

fn segment_distance(p: [usize; 2], a: [usize; 2], b: [usize; 2]) -> f64 {
    let [pr, pc, ar, ac, br, bc] = [p[0], p[1], a[0], a[1], b[0], b[1]].map(|v| v as f64);
    let (dr, dc) = (br - ar, bc - ac);
    let len2 = dr * dr + dc * dc;
    if len2 == 0.0 {
        return dist2(p, a).sqrt();
    }
    let t = (((pr - ar) * dr + (pc - ac) * dc) / len2).clamp(0.0, 1.0);
    let (qr, qc) = (ar + t * dr, ac + t * dc);
    ((pr - qr).powi(2) + (pc - qc).powi(2)).sqrt()
}

fn douglas_peucker(v: &[[usize; 2]], lo: usize, hi: usize, tol: f64, keep: &mut [bool]) {
    keep[lo] = true;
    keep[hi] = true;
    if hi <= lo + 1 {
        return;
    }
    let (idx, d) = (lo + 1..hi)
        .map(|i| (i, segment_distance(v[i], v[lo], v[hi])))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty range");
    if d > tol {
        douglas_peucker(v, lo, idx, tol, keep);
        douglas_peucker(v, idx, hi, tol, keep);
    }
}
