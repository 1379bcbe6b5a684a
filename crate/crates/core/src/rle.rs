//! COCO-style run-length encoding of binary masks.
//!
//! Runs are taken in column-major order and alternate background/foreground,
//! starting with background (a leading zero run is emitted when pixel (0,0) is
//! foreground). The counts are packed into an ASCII string; the byte layout is
//! described in `docs/formats.md`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("invalid character {0:?} in RLE counts")]
    BadChar(char),
    #[error("RLE counts string ends inside a value")]
    Truncated,
    #[error("negative run length at index {0}")]
    NegativeRun(usize),
    #[error("runs cover {covered} pixels, mask has {expected}")]
    Coverage { covered: u64, expected: u64 },
}

/// `{"size": [height, width], "counts": "..."}`
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: String,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let (h, w) = mask.dims();
        Self { size: [h, w], counts: counts_to_string(&runs(mask)) }
    }

    pub fn decode(&self) -> Result<BinaryMask, RleError> {
        let [h, w] = self.size;
        let counts = string_to_counts(&self.counts)?;
        let covered: u64 = counts.iter().map(|&c| c as u64).sum();
        if covered != (h * w) as u64 {
            return Err(RleError::Coverage { covered, expected: (h * w) as u64 });
        }
        let mut mask = BinaryMask::new(h, w);
        let mut pos = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            if i % 2 == 1 {
                for k in pos..pos + c as usize {
                    mask.set(k % h, k / h, true);
                }
            }
            pos += c as usize;
        }
        Ok(mask)
    }

    /// Foreground pixel count without materializing the mask.
    pub fn area(&self) -> Result<u64, RleError> {
        Ok(string_to_counts(&self.counts)?.iter().skip(1).step_by(2).map(|&c| c as u64).sum())
    }
}

/// Alternating run lengths over the column-major pixel sequence.
pub fn runs(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v != current {
                out.push(len);
                len = 0;
                current = v;
            }
            len += 1;
        }
    }
    out.push(len);
    out
}

/// Packs run lengths: from index 3 on, each value is stored as the difference
/// to the value two places earlier, then written as little-endian groups of
/// 5 bits with a continuation flag (0x20), offset by 48 into printable ASCII.
pub fn counts_to_string(counts: &[u32]) -> String {
    let mut s = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut ch = (x & 0x1f) as u8;
            x >>= 5;
            let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            s.push((ch + 48) as char);
            if !more {
                break;
            }
        }
    }
    s
}

pub fn string_to_counts(s: &str) -> Result<Vec<u32>, RleError> {
    let mut out: Vec<u32> = Vec::new();
    let mut bytes = s.chars().peekable();
    while bytes.peek().is_some() {
        let mut x = 0i64;
        let mut k = 0;
        loop {
            let ch = bytes.next().ok_or(RleError::Truncated)?;
            if !(48..48 + 64).contains(&(ch as u32)) {
                return Err(RleError::BadChar(ch));
            }
            let c = ch as i64 - 48;
            x |= (c & 0x1f) << (5 * k);
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if k > 12 {
                return Err(RleError::Truncated);
            }
        }
        let m = out.len();
        if m > 2 {
            x += out[m - 2] as i64;
        }
        let v = u32::try_from(x).map_err(|_| RleError::NegativeRun(m))?;
        out.push(v);
    }
    Ok(out)
}
