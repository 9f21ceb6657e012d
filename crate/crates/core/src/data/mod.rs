//! Manifests, splits, training crops and synthetic degradations.

mod crop;
mod manifest;
pub mod synth;

use std::path::Path;

use image::RgbImage;

pub use crop::{center_crop_to_multiple, reflect_pad_to, sample_crop, MIN_CROP_SOURCE_SIDE};
pub use manifest::{
    load_manifest, split_counts, split_manifest, Manifest, SampleRecord, Split, DEGENERATE_LABEL, MIN_SPLIT_RECORDS,
};
pub use synth::{pseudo_mos, synthesize, synthesize_dataset, DegradationKind, DegradationSpec, SynthGrid};

use crate::error::{Error, Result};

/// Read an 8-bit RGB image; other layouts are rejected rather than converted.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?;
    let channels = img.color().channel_count();
    if channels != 3 {
        return Err(Error::Shape(format!(
            "{}: expected an RGB image, got {channels} channels",
            path.display()
        )));
    }
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(Error::Shape(format!(
            "{}: expected 8-bit RGB, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}
