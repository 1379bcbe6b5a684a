//! Planar RGB images with `f32` samples in `[0, 1]`.

use std::path::Path;

use ndarray::{s, Array3, Array4, Axis};
use thiserror::Error;

use crate::geometry::Window;
use crate::nn::Scalar;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("expected 3 channels, got {0}")]
    Channels(usize),
    #[error("window {window:?} does not fit in a {height}x{width} image")]
    Window { window: Window, height: usize, width: usize },
    #[error("cannot read image {path}: {source}")]
    Decode { path: String, source: image::ImageError },
    #[error("cannot write image {path}: {source}")]
    Encode { path: String, source: image::ImageError },
}

/// RGB image, shape `(3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    data: Array3<f32>,
}

impl Raster {
    pub fn new(data: Array3<f32>) -> Result<Self, RasterError> {
        match data.dim().0 {
            3 => Ok(Self { data }),
            c => Err(RasterError::Channels(c)),
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self { data: Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn crop(&self, window: Window) -> Result<Raster, RasterError> {
        if !window.fits_in(self.height(), self.width()) {
            return Err(RasterError::Window { window, height: self.height(), width: self.width() });
        }
        Ok(Self {
            data: self
                .data
                .slice(s![.., window.row0..window.row_end(), window.col0..window.col_end()])
                .to_owned(),
        })
    }

    /// Single-image batch `(1, 3, H, W)` in the requested precision.
    pub fn to_batch<T: Scalar>(&self) -> Array4<T> {
        self.data.mapv(|v| T::from_f64(v as f64)).insert_axis(Axis(0))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, r, col)| {
            img.get_pixel(col as u32, r as u32)[c] as f32 / 255.0
        });
        Self { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path).map_err(|source| RasterError::Decode { path: path.display().to_string(), source })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| RasterError::Encode { path: path.display().to_string(), source })
    }

    /// Rotates by `quarter_turns * 90°` counter-clockwise and optionally mirrors columns.
    pub fn dihedral(&self, quarter_turns: u8, flip: bool) -> Self {
        let mut d = self.data.clone();
        if flip {
            d.invert_axis(Axis(2));
        }
        for _ in 0..quarter_turns % 4 {
            // (c, r, k) -> (c, W-1-k, r)
            let mut t = d.permuted_axes([0, 2, 1]);
            t.invert_axis(Axis(1));
            d = t.as_standard_layout().to_owned();
        }
        Self { data: d }
    }
}
