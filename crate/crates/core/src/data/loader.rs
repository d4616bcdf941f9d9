use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SegmentationSample;
use crate::error::{Error, Result};
use crate::metrics::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub color: [u8; 3],
    pub class: u8,
}

/// Maps mask colors to class ids by nearest color. A pixel farther than
/// `tolerance` (Euclidean RGB distance) from every entry is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub colors: Vec<PaletteEntry>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    48.0
}

impl Default for Palette {
    fn default() -> Self {
        Palette::binary()
    }
}

impl Palette {
    /// Black background, white foreground.
    pub fn binary() -> Self {
        Palette::grayscale(&[(0, 0), (255, 1)])
    }

    pub fn grayscale(levels: &[(u8, u8)]) -> Self {
        Palette {
            colors: levels.iter().map(|&(v, class)| PaletteEntry { color: [v; 3], class }).collect(),
            tolerance: default_tolerance(),
        }
    }

    /// Inverse of [`write_label_png`]: gray level `class * (255 / (L - 1))` is class `class`.
    pub fn for_labels(label_classes: usize) -> Self {
        let classes = label_classes.clamp(2, 256);
        let step = 255 / (classes - 1);
        let levels: Vec<(u8, u8)> = (0..classes).map(|c| ((c * step) as u8, c as u8)).collect();
        Palette { tolerance: (step as f64 / 2.0).min(default_tolerance()) * 3f64.sqrt(), ..Palette::grayscale(&levels) }
    }

    pub fn classify(&self, rgb: [u8; 3]) -> Option<u8> {
        let dist =
            |c: [u8; 3]| -> f64 { c.iter().zip(rgb).map(|(&a, b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt() };
        self.colors
            .iter()
            .map(|e| (dist(e.color), e.class))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .filter(|(d, _)| *d <= self.tolerance)
            .map(|(_, class)| class)
    }
}

/// Files that could not be paired; their samples are skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub missing_mask: Vec<String>,
    pub missing_image: Vec<String>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.missing_mask.is_empty() && self.missing_image.is_empty()
    }
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images without mask: {}", self.missing_mask.len())?;
        for id in &self.missing_mask {
            writeln!(f, "  {id}")?;
        }
        writeln!(f, "masks without image: {}", self.missing_image.len())?;
        for id in &self.missing_image {
            writeln!(f, "  {id}")?;
        }
        Ok(())
    }
}

fn list(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str());
        if let (Some(ext), Some(stem)) = (ext, stem) {
            if extensions.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })
}

/// Decodes an image to `channels` (1 or 3) planes scaled to `[0, 1]`; returns `(pixels, h, w)`.
pub fn read_image(path: &Path, channels: usize) -> Result<(Vec<f32>, usize, usize)> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => return Err(Error::Config(format!("images must have 1 or 3 channels, not {channels}"))),
    };
    let mut planes = vec![0f32; channels * h * w];
    for (i, &v) in interleaved.iter().enumerate() {
        planes[(i % channels) * h * w + i / channels] = v as f32 / 255.0;
    }
    Ok((planes, h, w))
}

fn read_mask(path: &Path, palette: &Palette) -> Result<(Vec<u8>, usize, usize)> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let labels = rgb
        .pixels()
        .map(|p| {
            palette
                .classify(p.0)
                .ok_or_else(|| Error::Data(format!("{}: color {:?} matches no palette entry", path.display(), p.0)))
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok((labels, h, w))
}

/// Pairs `images_dir/<id>.(png|jpg|jpeg)` with `masks_dir/<id>.png`, in id order.
pub fn load_directory(
    images_dir: &Path,
    masks_dir: &Path,
    palette: &Palette,
    channels: usize,
) -> Result<(Vec<SegmentationSample>, LoadReport)> {
    let images = list(images_dir, &["png", "jpg", "jpeg"])?;
    let masks = list(masks_dir, &["png"])?;
    let mut report = LoadReport {
        missing_image: masks.keys().filter(|k| !images.contains_key(*k)).cloned().collect(),
        ..LoadReport::default()
    };
    let mut samples = Vec::new();
    for (id, image_path) in &images {
        let Some(mask_path) = masks.get(id) else {
            report.missing_mask.push(id.clone());
            continue;
        };
        let (image, h, w) = read_image(image_path, channels)?;
        let (mask, mh, mw) = read_mask(mask_path, palette)?;
        if (h, w) != (mh, mw) {
            return Err(Error::Data(format!("{id}: image is {h}x{w} but mask is {mh}x{mw}")));
        }
        samples.push(SegmentationSample { id: id.clone(), channels, height: h, width: w, image, mask });
    }
    Ok((samples, report))
}

/// `(id, pixels, height, width)` with pixels as from [`read_image`].
pub type LoadedImage = (String, Vec<f32>, usize, usize);

/// Every `<id>.(png|jpg|jpeg)` in `dir`, without masks, in id order.
pub fn load_images(dir: &Path, channels: usize) -> Result<Vec<LoadedImage>> {
    list(dir, &["png", "jpg", "jpeg"])?
        .into_iter()
        .map(|(id, path)| read_image(&path, channels).map(|(px, h, w)| (id, px, h, w)))
        .collect()
}

fn interleave(planes: &[f32], channels: usize, h: usize, w: usize) -> Vec<u8> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    (0..h * w).flat_map(|p| (0..3).map(move |c| to_u8(planes[c.min(channels - 1) * h * w + p]))).collect()
}

fn save(img: image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })
}

fn rgb_image(path: &Path, w: usize, h: usize, px: Vec<u8>) -> Result<image::RgbImage> {
    image::RgbImage::from_raw(w as u32, h as u32, px)
        .ok_or_else(|| Error::Data(format!("{}: pixel buffer does not match {w}x{h}", path.display())))
}

/// Writes a sample's image as an 8-bit RGB PNG (one-channel images become gray).
pub fn write_image_png(path: &Path, sample: &SegmentationSample) -> Result<()> {
    let px = interleave(&sample.image, sample.channels, sample.height, sample.width);
    save(rgb_image(path, sample.width, sample.height, px)?, path)
}

/// Writes labels as an 8-bit grayscale PNG whose pixel values are the class indices.
pub fn write_index_png(path: &Path, labels: &LabelMap) -> Result<()> {
    image::GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.labels.clone())
        .ok_or_else(|| Error::Data(format!("{}: label map extent mismatch", path.display())))?
        .save(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })
}

/// Distinct, saturated color per foreground class.
fn class_rgb(class: u8) -> [f32; 3] {
    let hue = (class as f32 - 1.0) * 0.618_034 % 1.0 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    match hue as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Blends class colors at 50% over the image; background pixels are left as they are.
pub fn write_overlay_png(path: &Path, image: &[f32], channels: usize, labels: &LabelMap) -> Result<()> {
    let (h, w) = (labels.height, labels.width);
    if image.len() != channels * h * w || channels == 0 {
        return Err(Error::Data(format!("{}: image does not match the {h}x{w} label map", path.display())));
    }
    let mut px = interleave(image, channels, h, w);
    for (p, &label) in labels.labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let color = class_rgb(label);
        for c in 0..3 {
            let base = px[p * 3 + c] as f32 / 255.0;
            px[p * 3 + c] = ((0.5 * base + 0.5 * color[c]) * 255.0).round() as u8;
        }
    }
    save(rgb_image(path, w, h, px)?, path)
}

/// Writes labels as an 8-bit grayscale PNG, spreading `0..label_classes` over `0..=255`.
pub fn write_label_png(path: &Path, labels: &LabelMap, label_classes: usize) -> Result<()> {
    let step = 255 / (label_classes.max(2) - 1) as u32;
    let pixels: Vec<u8> = labels.labels.iter().map(|&l| (l as u32 * step).min(255) as u8).collect();
    image::GrayImage::from_raw(labels.width as u32, labels.height as u32, pixels)
        .ok_or_else(|| Error::Data(format!("{}: label map extent mismatch", path.display())))?
        .save(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn save_gray(path: &Path, w: u32, h: u32, px: Vec<u8>) {
        image::GrayImage::from_raw(w, h, px).unwrap().save(path).unwrap();
    }

    #[test]
    fn label_png_round_trips_through_palette() {
        let dir = tempfile::tempdir().unwrap();
        for classes in [2usize, 3, 9] {
            let labels = LabelMap { height: 1, width: classes, labels: (0..classes as u8).collect() };
            let path = dir.path().join(format!("m{classes}.png"));
            write_label_png(&path, &labels, classes).unwrap();
            let (back, _, _) = read_mask(&path, &Palette::for_labels(classes)).unwrap();
            assert_eq!(back, labels.labels);
        }
    }

    #[test]
    fn index_png_stores_class_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.png");
        let labels = LabelMap { height: 2, width: 2, labels: vec![0, 1, 2, 1] };
        write_index_png(&path, &labels).unwrap();
        assert_eq!(image::open(&path).unwrap().to_luma8().into_raw(), labels.labels);
        let overlay = dir.path().join("ov.png");
        write_overlay_png(&overlay, &[0.5; 12], 3, &labels).unwrap();
        let rgb = image::open(&overlay).unwrap().to_rgb8();
        assert_eq!(rgb.get_pixel(0, 0).0, [128, 128, 128]);
        assert_ne!(rgb.get_pixel(1, 0).0, [128, 128, 128]);
    }

    #[test]
    fn empty_directories_load_nothing() {
        let root = tempfile::tempdir().unwrap();
        let (imgs, masks) = (root.path().join("images"), root.path().join("masks"));
        std::fs::create_dir_all(&imgs).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        let (samples, report) = load_directory(&imgs, &masks, &Palette::binary(), 3).unwrap();
        assert!(samples.is_empty() && report.is_clean());
    }

    #[test]
    fn checkerboard_mask_and_missing_pairs() {
        let root = tempfile::tempdir().unwrap();
        let (imgs, masks) = (root.path().join("images"), root.path().join("masks"));
        std::fs::create_dir_all(&imgs).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        let checker: Vec<u8> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 255 } else { 0 }).collect();
        save_gray(&imgs.join("a.png"), 4, 4, (0..16).map(|i| i * 16).collect());
        save_gray(&masks.join("a.png"), 4, 4, checker.clone());
        save_gray(&imgs.join("lonely.png"), 4, 4, vec![0; 16]);
        save_gray(&masks.join("orphan.png"), 4, 4, vec![0; 16]);
        let (samples, report) = load_directory(&imgs, &masks, &Palette::binary(), 1).unwrap();
        assert_eq!(samples.len(), 1);
        let expected: Vec<u8> = checker.iter().map(|&v| u8::from(v == 255)).collect();
        assert_eq!(samples[0].mask, expected);
        assert_eq!(samples[0].image[1], 16.0 / 255.0);
        assert_eq!(report.missing_mask, vec!["lonely".to_string()]);
        assert_eq!(report.missing_image, vec!["orphan".to_string()]);
    }

    #[test]
    fn unmappable_color_names_file() {
        let root = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(root.path().join("i")).unwrap();
        std::fs::create_dir_all(root.path().join("m")).unwrap();
        save_gray(&root.path().join("i/x.png"), 2, 1, vec![0, 0]);
        save_gray(&root.path().join("m/x.png"), 2, 1, vec![0, 128]);
        let err = load_directory(&root.path().join("i"), &root.path().join("m"), &Palette::binary(), 1).unwrap_err();
        assert!(err.to_string().contains("x.png") && err.to_string().contains("128"), "{err}");
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let map = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        write_label_png(&path, &map, 3).unwrap();
        let pal = Palette::grayscale(&[(0, 0), (127, 1), (254, 2)]);
        let (labels, h, w) = read_mask(&path, &pal).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(labels, map.labels);
    }
}
