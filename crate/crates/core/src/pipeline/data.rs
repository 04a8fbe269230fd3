//! Labeled image sets: synthetic blob generator, directory ingestion,
//! stratified splitting.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale images `[1×H×W]` in `[0,1]` with binary labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples per label.
    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes `<root>/<class>/<index>.pgm`, 8-bit.
    pub fn write_images(&self, root: &Path, class_names: &[String; 2]) -> Result<()> {
        for name in class_names {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let bytes = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let gray = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
            let path = root.join(&class_names[label]).join(format!("{i:05}.pgm"));
            gray.save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        }
        Ok(())
    }
}

/// Which synthetic distribution to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Target,
    /// Brighter, noisier background and a dimmer blob.
    Source,
}

struct Look {
    noise: (f32, f32),
    peak: (f32, f32),
}

impl Domain {
    fn look(self) -> Look {
        match self {
            Domain::Target => Look {
                noise: (0.0, 0.2),
                peak: (0.7, 1.0),
            },
            Domain::Source => Look {
                noise: (0.1, 0.4),
                peak: (0.5, 0.8),
            },
        }
    }
}

/// Noise images, plus one Gaussian blob for label 0 (tumor).
///
/// Blob centers sit on whole pixels so the peak pixel carries the full
/// amplitude. Output depends only on the arguments.
pub fn synth_generate(counts: [usize; NUM_CLASSES], size: (usize, usize), domain: Domain, seed: u64) -> Result<Dataset> {
    if counts.contains(&0) {
        return Err(Error::Contract(format!("synthetic counts must be positive, got {counts:?}")));
    }
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!("synthetic images must be at least 8x8, got {h}x{w}")));
    }
    let look = domain.look();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    for (label, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut px: Vec<f32> = (0..h * w).map(|_| rng.gen_range(look.noise.0..look.noise.1)).collect();
            if label == 0 {
                let small = h.min(w) as f32;
                let sigma = rng.gen_range(small / 20.0..small / 10.0);
                let margin = (2.0 * sigma).ceil() as usize;
                let cy = rng.gen_range(margin..h - margin) as f32;
                let cx = rng.gen_range(margin..w - margin) as f32;
                let peak = rng.gen_range(look.peak.0..=look.peak.1);
                let inv = 1.0 / (2.0 * sigma * sigma);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        let v = &mut px[y * w + x];
                        *v = (*v + peak * (-d2 * inv).exp()).min(1.0);
                    }
                }
            }
            ds.images.push(Tensor::new(&[1, h, w], px)?);
            ds.labels.push(label);
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub counts: [usize; NUM_CLASSES],
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
}

/// Loads `<dir>/<class_names[label]>/*.png|*.pgm`, resized bilinearly to
/// `size` and scaled to `[0,1]`. Files are read in name order.
pub fn ingest_dataset(dir: &Path, class_names: &[String; 2], size: (usize, usize)) -> Result<(Dataset, IngestReport)> {
    let mut ds = Dataset::default();
    let mut report = IngestReport::default();
    for (label, name) in class_names.iter().enumerate() {
        let class_dir = dir.join(name);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        for path in files {
            let img = match image::open(&path) {
                Ok(img) => img.to_luma8(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    report.skipped.push(path);
                    continue;
                }
            };
            let img = image::imageops::resize(&img, size.1 as u32, size.0 as u32, FilterType::Triangle);
            let px = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
            ds.images.push(Tensor::new(&[1, size.0, size.1], px)?);
            ds.labels.push(label);
            report.counts[label] += 1;
        }
        if report.counts[label] == 0 {
            return Err(Error::Dataset(format!("class {name} has no readable images in {}", class_dir.display())));
        }
    }
    log::info!(
        "ingested {}: {} {}, {} {}, {} skipped",
        dir.display(),
        report.counts[0],
        class_names[0],
        report.counts[1],
        class_names[1],
        report.skipped.len()
    );
    Ok((ds, report))
}

/// Stratified split into `(train, test)` indices. Each label is shuffled
/// with its own seeded stream; the first `⌊ratio·count⌋` go to train.
pub fn split_indices(labels: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio must be in (0,1), got {ratio}")));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for label in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        let c = idx.len();
        if c < 2 {
            return Err(Error::Split(format!("label {label} has {c} samples, need at least 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        idx.shuffle(&mut rng);
        // small guard so 0.29·100 lands on 29 despite rounding
        let k = ((ratio * c as f64 + 1e-9).floor() as usize).clamp(1, c - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    Ok((train, test))
}

pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(&ds.labels, ratio, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Keeps `limit` samples with label shares proportional to the input
/// (floor per label, leftovers to the lowest labels), drawn in a seeded order.
pub fn stratified_take(ds: &Dataset, limit: usize, seed: u64) -> Result<Dataset> {
    if limit >= ds.len() {
        return Ok(ds.clone());
    }
    let counts = ds.counts();
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * limit / ds.len()).collect();
    let mut left = limit - quota.iter().sum::<usize>();
    for (q, &c) in quota.iter_mut().zip(&counts) {
        let extra = left.min(c - *q);
        *q += extra;
        left -= extra;
    }
    if quota.contains(&0) {
        return Err(Error::Split(format!("limit {limit} leaves a label without samples")));
    }
    let mut keep = Vec::with_capacity(limit);
    for (label, &q) in quota.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == label).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x100 + label as u64);
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..q]);
    }
    Ok(ds.subset(&keep))
}
