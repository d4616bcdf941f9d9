//! Segmentation samples: synthetic generation, directory loading, splitting and batching.

mod loader;
mod resize;
mod split;
mod synthetic;

pub use loader::{
    load_directory, load_images, read_image, write_image_png, write_index_png, write_label_png, write_overlay_png,
    LoadReport, LoadedImage, Palette, PaletteEntry,
};
pub use resize::{resize_batch, resize_image_bilinear, resize_mask_nearest};
pub use split::{split, split_hash, SplitSpec};
pub use synthetic::generate_synthetic;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::{Scalar, Tensor};

/// One image with its label mask. Pixels are stored channel-major in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl SegmentationSample {
    pub fn label_map(&self) -> LabelMap {
        LabelMap { height: self.height, width: self.width, labels: self.mask.clone() }
    }

    pub fn check(&self, label_classes: usize) -> Result<()> {
        let hw = self.height * self.width;
        if self.image.len() != self.channels * hw || self.mask.len() != hw {
            return Err(Error::Data(format!("{}: image and mask extents disagree", self.id)));
        }
        if let Some(&bad) = self.mask.iter().find(|&&l| l as usize >= label_classes) {
            return Err(Error::Data(format!("{}: label {bad} outside 0..{label_classes}", self.id)));
        }
        Ok(())
    }

    /// Random horizontal/vertical flips and, for square samples, a quarter turn.
    pub fn augmented<R: Rng>(&self, rng: &mut R) -> SegmentationSample {
        let (h, w) = (self.height, self.width);
        let (flip_x, flip_y) = (rng.random_bool(0.5), rng.random_bool(0.5));
        let transpose = h == w && rng.random_bool(0.5);
        let source = |y: usize, x: usize| {
            let (y, x) = if transpose { (x, y) } else { (y, x) };
            let y = if flip_y { h - 1 - y } else { y };
            let x = if flip_x { w - 1 - x } else { x };
            y * w + x
        };
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let src = source(y, x);
                out.mask[y * w + x] = self.mask[src];
                for c in 0..self.channels {
                    out.image[c * h * w + y * w + x] = self.image[c * h * w + src];
                }
            }
        }
        out
    }
}

/// Stacked images `(n, c, h, w)` with labels flattened to `n * h * w`.
#[derive(Debug, Clone)]
pub struct SegmentationBatch<F: Scalar> {
    pub images: Tensor<F>,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
}

impl<F: Scalar> SegmentationBatch<F> {
    /// Stacks samples that already share one size.
    pub fn stack(samples: &[&SegmentationSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("cannot batch zero samples".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut pixels = Vec::with_capacity(samples.len() * c * h * w);
        let mut labels = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.channels, s.height, s.width) != (c, h, w) {
                return Err(Error::Data(format!(
                    "{}: {}x{}x{} does not match batch extent {c}x{h}x{w}",
                    s.id, s.channels, s.height, s.width
                )));
            }
            pixels.extend(s.image.iter().map(|&v| F::lit(v as f64)));
            labels.extend_from_slice(&s.mask);
        }
        Ok(SegmentationBatch {
            images: Tensor::from_vec(&[samples.len(), c, h, w], pixels)?,
            labels,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn label_maps(&self) -> Vec<LabelMap> {
        let (h, w) = (self.images.shape()[2], self.images.shape()[3]);
        self.labels.chunks(h * w).map(|c| LabelMap { height: h, width: w, labels: c.to_vec() }).collect()
    }
}
