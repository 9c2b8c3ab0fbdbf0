//! Image datasets on disk (`labels.csv` + `images/<id>.ppm`) and the
//! synthetic glyph generator.

use std::fs;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbones::ImageSample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Number of glyph classes produced by [`Dataset::synthetic`].
pub const SYNTH_CLASSES: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: String,
    label: usize,
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn to_pixels(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        raw[rest * 3 + c] as f64 / 255.0
    })
}

fn to_image(pixels: &Tensor) -> RgbImage {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let d = pixels.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    })
}

/// Reads one PPM image; `id` is its file stem.
pub fn read_image(path: &Path, label: usize, image_size: usize) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| dataset_err(path, e.to_string()))?.to_rgb8();
    if img.dimensions() != (image_size as u32, image_size as u32) {
        return Err(dataset_err(path, format!("expected {image_size}x{image_size}, found {:?}", img.dimensions())));
    }
    let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    ImageSample::new(id, label, to_pixels(&img))
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
            return Err(Error::config("model.class_names", format!("sample {} has label {} of {num_classes}", s.id, s.label)));
        }
        Ok(Dataset { samples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads `labels.csv` and the listed images, in file order.
    pub fn load(dir: &Path, num_classes: usize, image_size: usize) -> Result<Self> {
        let labels = dir.join("labels.csv");
        let mut reader = csv::Reader::from_path(&labels).map_err(|e| dataset_err(&labels, e.to_string()))?;
        let mut samples = Vec::new();
        for row in reader.deserialize::<LabelRow>() {
            let row = row.map_err(|e| dataset_err(&labels, e.to_string()))?;
            if row.label >= num_classes {
                return Err(dataset_err(&labels, format!("label {} of {} is out of range", row.label, row.id)));
            }
            let path = dir.join("images").join(format!("{}.ppm", row.id));
            let mut sample = read_image(&path, row.label, image_size)?;
            sample.id = row.id;
            samples.push(sample);
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset { samples, num_classes })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        let labels = dir.join("labels.csv");
        let mut writer = csv::Writer::from_path(&labels).map_err(|e| dataset_err(&labels, e.to_string()))?;
        for s in &self.samples {
            writer
                .serialize(LabelRow {
                    id: s.id.clone(),
                    label: s.label,
                })
                .map_err(|e| dataset_err(&labels, e.to_string()))?;
            let path = images.join(format!("{}.ppm", s.id));
            to_image(&s.pixels)
                .save_with_format(&path, ImageFormat::Pnm)
                .map_err(|e| dataset_err(&path, e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Sample indices grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.label].push(i);
        }
        groups
    }

    /// Per-class holdout of `floor(fraction · class size)` samples, chosen by
    /// a seeded shuffle. Returns `(train, val)` index lists in dataset order.
    pub fn stratified_split(&self, fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        let mut val = Vec::new();
        for mut group in self.by_class() {
            let k = (fraction * group.len() as f64).floor() as usize;
            rng.shuffle(&mut group);
            val.extend_from_slice(&group[..k]);
        }
        val.sort_unstable();
        let train = (0..self.len()).filter(|i| val.binary_search(i).is_err()).collect();
        (train, val)
    }

    /// `n_per_class` images for each of the glyph classes: a class-specific
    /// stroke pattern at a random offset in a random colour, over a noisy
    /// random background.
    pub fn synthetic(n_per_class: usize, image_size: usize, seed: u64) -> Result<Self> {
        if n_per_class == 0 {
            return Err(Error::EmptyDataset);
        }
        let glyph = (image_size / 2).max(4);
        if image_size < glyph + 2 {
            return Err(Error::config("data.image_size", "too small for the glyphs"));
        }
        let mut rng = Rng::new(seed).split("synthetic");
        let mut samples = Vec::with_capacity(n_per_class * SYNTH_CLASSES);
        for n in 0..n_per_class {
            for class in 0..SYNTH_CLASSES {
                let img = render_glyph(class, image_size, glyph, &mut rng);
                let id = format!("c{class}_{n:04}");
                samples.push(ImageSample::new(id, class, to_pixels(&img))?);
            }
        }
        Ok(Dataset {
            samples,
            num_classes: SYNTH_CLASSES,
        })
    }
}

fn glyph_mask(class: usize, g: usize, y: usize, x: usize) -> bool {
    let t = (g / 6).max(1);
    let mid = g / 2;
    let near = |a: usize, b: usize| a.abs_diff(b) < t;
    match class {
        0 => near(y, mid),
        1 => near(x, mid),
        2 => near(x, y),
        3 => near(x + y, g - 1),
        4 => near(y, mid) || near(x, mid),
        5 => y < t || x < t || y + t >= g || x + t >= g,
        _ => near(x, y) || near(x + y, g - 1),
    }
}

fn render_glyph(class: usize, size: usize, g: usize, rng: &mut Rng) -> RgbImage {
    let base: [f64; 3] = [rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)];
    let ink: [f64; 3] = [rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)];
    let oy = rng.below(size - g + 1);
    let ox = rng.below(size - g + 1);
    let mut px = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let on = y >= oy && x >= ox && y < oy + g && x < ox + g && glyph_mask(class, g, y - oy, x - ox);
            let src = if on { ink } else { base };
            for c in 0..3 {
                px[y * size + x][c] = src[c] + 0.08 * rng.normal();
            }
        }
    }
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = px[y as usize * size + x as usize];
        image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_range() {
        let d = Dataset::synthetic(10, 32, 1).unwrap();
        assert_eq!(d.len(), 70);
        assert!(d.by_class().iter().all(|g| g.len() == 10));
        assert!(d.samples.iter().all(|s| s.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_eq!(d, Dataset::synthetic(10, 32, 1).unwrap());
        assert_ne!(d, Dataset::synthetic(10, 32, 2).unwrap());
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let d = Dataset::synthetic(2, 32, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), SYNTH_CLASSES, 32).unwrap();
        assert_eq!(back, d);
        assert!(matches!(Dataset::load(dir.path(), 3, 32), Err(Error::Dataset { .. })));
        assert!(matches!(Dataset::load(dir.path(), 7, 16), Err(Error::Dataset { .. })));
    }

    #[test]
    fn stratified_split_takes_fraction_of_each_class() {
        let d = Dataset::synthetic(10, 32, 1).unwrap();
        let (train, val) = d.stratified_split(0.15, &mut Rng::new(0));
        assert_eq!(val.len(), 7);
        assert_eq!(train.len() + val.len(), 70);
        let mut per = [0; 7];
        for &i in &val {
            per[d.samples[i].label] += 1;
        }
        assert!(per.iter().all(|&c| c == 1));
    }

    /// Leave-one-out nearest class mean in raw pixel space.
    #[test]
    fn nearest_centroid_baseline_is_imperfect() {
        let d = Dataset::synthetic(10, 32, 0).unwrap();
        let dim = d.samples[0].pixels.numel();
        let mut sums = vec![vec![0.0; dim]; 7];
        for s in &d.samples {
            for (a, b) in sums[s.label].iter_mut().zip(s.pixels.data()) {
                *a += b;
            }
        }
        let mut correct = 0;
        for s in &d.samples {
            let mut best = (f64::INFINITY, 0);
            for (c, sum) in sums.iter().enumerate() {
                let n = if c == s.label { 9.0 } else { 10.0 };
                let dist: f64 = sum
                    .iter()
                    .zip(s.pixels.data())
                    .map(|(t, x)| {
                        let mean = if c == s.label { (t - x) / n } else { t / n };
                        (mean - x).powi(2)
                    })
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            correct += (best.1 == s.label) as usize;
        }
        let acc = correct as f64 / d.len() as f64;
        assert!(acc < 1.0, "nearest centroid accuracy {acc}");
    }
}
