use super::{SegmentationBatch, SegmentationSample};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Pixel-center-aligned bilinear resampling of a `(channels, h, w)` image.
pub fn resize_image_bilinear(
    image: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Nearest-neighbor resampling; every output label is copied from some input pixel.
pub fn resize_mask_nearest(mask: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let nearest =
        |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    (0..out_h * out_w).map(|p| mask[nearest(p / out_w, out_h, h) * w + nearest(p % out_w, out_w, w)]).collect()
}

/// Resizes every sample to `target × target` and stacks them.
pub fn resize_batch<F: Scalar>(samples: &[&SegmentationSample], target: usize) -> Result<SegmentationBatch<F>> {
    if target == 0 || !target.is_multiple_of(16) {
        return Err(Error::Config(format!("target size {target} must be a positive multiple of 16")));
    }
    let resized: Vec<SegmentationSample> = samples
        .iter()
        .map(|s| {
            if s.height == target && s.width == target {
                return (*s).clone();
            }
            SegmentationSample {
                id: s.id.clone(),
                channels: s.channels,
                height: target,
                width: target,
                image: resize_image_bilinear(&s.image, s.channels, s.height, s.width, target, target),
                mask: resize_mask_nearest(&s.mask, s.height, s.width, target, target),
            }
        })
        .collect();
    SegmentationBatch::stack(&resized.iter().collect::<Vec<_>>())
}
