//! Desk-scale day/night visual place recognition toolkit.
//!
//! The pipeline: generate a synthetic "places" dataset, derive a night-style
//! version of it with a parametric transform, pretrain a small descriptor
//! network on day images with a large-margin cosine loss, fine-tune a night
//! model guided by descriptors inherited from the pretrained model, then
//! evaluate recall@N retrieval with a 25-meter positive criterion, routing
//! each query to the day or night encoder by solar time.

pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod geo;
pub mod losses;
pub mod nightgen;
pub mod pipeline;
pub mod raster;
pub mod retrieval;
pub mod seed;
pub mod store;
pub mod synthdata;
pub mod trainer;

pub use encoder::{Descriptor, EncoderConfig, EncoderParams};
pub use geo::{DomainTag, GeoPoint, PlanarPoint, SolarConfig};
pub use losses::{ClassifierHead, LossConfig};
pub use raster::RasterImage;
pub use store::{Checkpoint, DescriptorDB, ImageRecord, Manifest};
