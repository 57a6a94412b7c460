//! Paired cloudy/cloudless data: images, masks, the RICE directory layout,
//! splits, cropping and synthetic pairs.

mod image;
mod rice;
pub mod synth;

pub use self::image::{from_tensor, quantize_unit, to_tensor, CloudMask, ImageU8};
pub use rice::{
    default_train_count, load_rice_layout, write_synthetic_dataset, DatasetIndex, RiceSource,
    Split,
};
pub use synth::synth_pair;
pub(crate) use rice::tempfile_dir;

use rand::Rng;

use crate::{Error, Result};

/// Default mask threshold on the max-channel absolute difference.
pub const DEFAULT_MASK_THRESHOLD: f64 = 30.0 / 255.0;

/// A cloudy input with its cloudless ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub cloudy: ImageU8,
    pub cloudless: ImageU8,
    pub mask: Option<CloudMask>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        cloudy: ImageU8,
        cloudless: ImageU8,
        mask: Option<CloudMask>,
    ) -> Result<Self> {
        if !cloudy.same_size(&cloudless) {
            return Err(Error::Data(format!(
                "cloudy {}x{} and cloudless {}x{} differ",
                cloudy.width(),
                cloudy.height(),
                cloudless.width(),
                cloudless.height()
            )));
        }
        if let Some(m) = &mask {
            if m.width() != cloudy.width() || m.height() != cloudy.height() {
                return Err(Error::Data("mask size differs from image".into()));
            }
        }
        Ok(Sample {
            id: id.into(),
            cloudy,
            cloudless,
            mask,
        })
    }

    /// The stored mask, or one computed at `threshold`.
    pub fn mask_or_computed(&self, threshold: f64) -> Result<CloudMask> {
        match &self.mask {
            Some(m) => Ok(m.clone()),
            None => compute_mask(&self.cloudy, &self.cloudless, threshold),
        }
    }
}

/// Mark pixels whose largest per-channel difference exceeds `threshold`
/// (as a fraction of 255).
pub fn compute_mask(cloudy: &ImageU8, cloudless: &ImageU8, threshold: f64) -> Result<CloudMask> {
    if !cloudy.same_size(cloudless) {
        return Err(Error::shape("compute_mask", "image sizes differ"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let data = cloudy
        .data()
        .chunks_exact(3)
        .zip(cloudless.data().chunks_exact(3))
        .map(|(a, b)| {
            let diff = (0..3).map(|c| a[c].abs_diff(b[c])).max().unwrap_or(0);
            u8::from(diff as f64 / 255.0 > threshold)
        })
        .collect();
    CloudMask::new(cloudy.width(), cloudy.height(), data)
}

/// Cut the same `size x size` window out of every image of `sample`.
pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Result<Sample> {
    let (w, h) = (sample.cloudy.width(), sample.cloudy.height());
    if size == 0 || size > w.min(h) {
        return Err(Error::InvalidArgument(format!(
            "crop {size} does not fit {w}x{h}"
        )));
    }
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    Ok(Sample {
        id: sample.id.clone(),
        cloudy: sample.cloudy.crop(x0, y0, size, size)?,
        cloudless: sample.cloudless.crop(x0, y0, size, size)?,
        mask: sample
            .mask
            .as_ref()
            .map(|m| m.crop(x0, y0, size, size))
            .transpose()?,
    })
}

/// Indexed access to samples, in memory or on disk.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        self.as_slice()
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("sample index {index} out of range")))
    }
}
