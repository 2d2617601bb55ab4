//! Resolving manifest image refs into rasters and bundling a manifest with
//! its loaded images.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::raster::{RasterError, RasterImage};
use crate::store::{ImageSource, Manifest, StoreError};
use crate::synthdata;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("record {id}: image count {images} does not match manifest length {records}")]
    Misaligned {
        id: String,
        images: usize,
        records: usize,
    },
}

/// Resolve one image ref. Relative paths resolve against `base_dir` (use
/// the manifest's directory); inline synth refs regenerate procedurally.
pub fn load_image(source: &ImageSource, base_dir: &Path) -> Result<RasterImage, DatasetError> {
    match source {
        ImageSource::Path(p) => {
            let path = PathBuf::from(p);
            let full = if path.is_absolute() {
                path
            } else {
                base_dir.join(path)
            };
            Ok(RasterImage::load_png(&full)?)
        }
        ImageSource::Synth {
            place_seed,
            view_seed,
            size,
            jitter_bits,
        } => Ok(synthdata::render_view(
            *place_seed,
            *view_seed,
            *size,
            f64::from_bits(*jitter_bits),
        )),
    }
}

/// A manifest with its images materialized in record order.
#[derive(Debug, Clone)]
pub struct LoadedSet {
    pub manifest: Manifest,
    pub images: Vec<RasterImage>,
}

impl LoadedSet {
    pub fn load(manifest: Manifest, base_dir: &Path) -> Result<Self, DatasetError> {
        let images = manifest
            .records()
            .iter()
            .map(|r| load_image(&r.image, base_dir))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { manifest, images })
    }

    pub fn from_parts(manifest: Manifest, images: Vec<RasterImage>) -> Result<Self, DatasetError> {
        if manifest.len() != images.len() {
            return Err(DatasetError::Misaligned {
                id: manifest
                    .records()
                    .first()
                    .map(|r| r.id.clone())
                    .unwrap_or_default(),
                images: images.len(),
                records: manifest.len(),
            });
        }
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
