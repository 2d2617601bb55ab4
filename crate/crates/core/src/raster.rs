//! In-memory float raster images and PNG persistence.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("pixel buffer length {got} does not match {height}x{width}x3 = {expected}")]
    BufferLength {
        height: usize,
        width: usize,
        got: usize,
        expected: usize,
    },
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f32),
    #[error("image dimensions {0}x{1} mismatch {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: String,
        source: image::ImageError,
    },
    #[error("unsupported image layout in {0}")]
    Unsupported(String),
}

/// H x W x 3 raster with channel values in [0, 1]. Row-major storage with the
/// channel index fastest: `pixels[(y * width + x) * 3 + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::EmptyDimensions { height, width });
        }
        let expected = height * width * 3;
        if pixels.len() != expected {
            return Err(RasterError::BufferLength {
                height,
                width,
                got: pixels.len(),
                expected,
            });
        }
        for &v in &pixels {
            if !(0.0..=1.0).contains(&v) {
                return Err(RasterError::PixelRange(v));
            }
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Constant-color image.
    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self, RasterError> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(height, width, pixels)
    }

    /// Build from a per-pixel function returning RGB; out-of-range values are
    /// clamped to [0, 1].
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::EmptyDimensions { height, width });
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for c in rgb {
                    pixels.push(c.clamp(0.0, 1.0));
                }
            }
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn same_dims(&self, other: &RasterImage) -> Result<(), RasterError> {
        if self.height != other.height || self.width != other.width {
            return Err(RasterError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    /// Quantize to 8-bit and save as PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| RasterError::Codec {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a PNG (or any 8-bit RGB-convertible image) as floats in [0, 1].
    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)
            .map_err(|source| RasterError::Codec {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(height, width, pixels)
    }
}
