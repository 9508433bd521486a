//! Dataset ingestion: the CIFAR-10 binary format and a synthetic desk-scale
//! substitute with the same record layout.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_IMAGES_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: usize = CIFAR_RECORD_BYTES * CIFAR_IMAGES_PER_FILE;

/// Per-channel statistics used when `normalize` is requested.
pub const CIFAR_MEANS: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STDS: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone)]
pub struct Dataset {
    /// N x 3 x H x W images.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    splits: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "Dataset::new",
                detail: format!("{} images vs {} labels", images.shape()[0], labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            splits: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn set_split(&mut self, name: &str, indices: Vec<usize>) {
        self.splits.insert(name.to_string(), indices);
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::InvalidArg(format!("dataset has no split named '{name}'")))
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.splits.contains_key(name)
    }

    /// Partitions the given indices 50/50 into the search train/valid splits,
    /// deterministically from the seed and covering the source exactly once.
    pub fn split_half_for_search(&mut self, source: &str, seed: u64) -> Result<()> {
        let mut order = self.split(source)?.to_vec();
        let mut rng = Rng::new(seed ^ 0x0a11_5711);
        rng.shuffle(&mut order);
        let half = order.len() / 2;
        let train = order[..half].to_vec();
        let valid = order[half..].to_vec();
        self.set_split("train", train);
        self.set_split("valid", valid);
        Ok(())
    }

    /// Gathers batch `index` (of size `batch_size`) from the ordered indices.
    pub fn gather_batch(&self, order: &[usize], index: usize, batch_size: usize) -> Result<Batch> {
        let start = index * batch_size;
        let end = ((index + 1) * batch_size).min(order.len());
        if start >= end {
            return Err(Error::InvalidArg(format!("batch {index} is out of range")));
        }
        self.gather(&order[start..end])
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let (c, h, w) = (
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let img_len = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * img_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * img_len..(i + 1) * img_len]);
            labels.push(self.labels[i]);
        }
        Ok(Batch {
            images: Tensor::from_raw(vec![indices.len(), c, h, w], data),
            labels,
        })
    }

    /// Standardizes in place with the given per-channel means and stds.
    pub fn normalize(&mut self, means: &[f64; 3], stds: &[f64; 3]) {
        let (n, c, h, w) = (
            self.images.shape()[0],
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let plane = h * w;
        let data = self.images.data_mut();
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    data[base + i] = (data[base + i] - means[ch]) / stds[ch];
                }
            }
        }
    }
}

/// Parses one CIFAR-10 binary file: 3073-byte records, 1 label byte then
/// 3072 channel-major pixel bytes (R, G, B planes of a row-major 32x32 image).
fn read_cifar_file(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != CIFAR_FILE_BYTES {
        return Err(Error::Format(format!(
            "{}: expected {CIFAR_FILE_BYTES} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(CIFAR_IMAGES_PER_FILE * 3072);
    let mut labels = Vec::with_capacity(CIFAR_IMAGES_PER_FILE);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format(format!(
                "{}: label byte {label} exceeds 9",
                path.display()
            )));
        }
        labels.push(label as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads the CIFAR-10 binary release from a directory holding
/// data_batch_1..5.bin and test_batch.bin. Train images land in the "full"
/// split (plus a 50/50 "train"/"valid" search partition seeded by `seed`),
/// test images in "test". `subset` keeps only the first N train images after
/// a seeded shuffle.
pub fn load_cifar10(
    dir: &Path,
    normalize: bool,
    subset: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let (p, l) = read_cifar_file(&dir.join(format!("data_batch_{i}.bin")))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let train_total = labels.len();
    let (test_pixels, test_labels) = read_cifar_file(&dir.join("test_batch.bin"))?;
    pixels.extend(test_pixels);
    labels.extend(test_labels);

    let n = labels.len();
    let images = Tensor::from_raw(vec![n, 3, 32, 32], pixels);
    let mut ds = Dataset::new(images, labels, 10)?;

    let mut train_indices: Vec<usize> = (0..train_total).collect();
    if let Some(keep) = subset {
        let mut rng = Rng::new(seed ^ 0xc1fa_0010);
        rng.shuffle(&mut train_indices);
        train_indices.truncate(keep);
        train_indices.sort_unstable();
    }
    ds.set_split("full", train_indices);
    ds.set_split("test", (train_total..n).collect());
    ds.split_half_for_search("full", seed)?;
    if normalize {
        ds.normalize(&CIFAR_MEANS, &CIFAR_STDS);
    }
    Ok(ds)
}

/// Synthetic classification data: each class is a Gaussian intensity blob at
/// a class-specific position with a class-specific color, plus N(0, 0.1)
/// noise, clipped to [0, 1]. Balanced, deterministic under the seed.
pub fn gen_synthetic(num_classes: usize, n_per_class: usize, hw: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArg("need at least 2 classes".to_string()));
    }
    let mut rng = Rng::new(seed);
    let n = num_classes * n_per_class;
    let img_len = 3 * hw * hw;
    let mut pixels = Vec::with_capacity(n * img_len);
    let mut labels = Vec::with_capacity(n);
    let templates = class_templates(num_classes, hw);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..n_per_class {
            labels.push(class);
            for &t in template {
                let v = (t + 0.1 * rng.normal()).clamp(0.0, 1.0);
                pixels.push(v);
            }
        }
    }
    let images = Tensor::from_raw(vec![n, 3, hw, hw], pixels);
    let mut ds = Dataset::new(images, labels, num_classes)?;
    ds.set_split("full", (0..n).collect());
    ds.split_half_for_search("full", seed)?;
    Ok(ds)
}

/// Noise-free class templates (3 x hw x hw each), shared with the
/// nearest-template oracle in tests.
pub fn class_templates(num_classes: usize, hw: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let theta = std::f64::consts::TAU * class as f64 / num_classes as f64;
        let cx = hw as f64 / 2.0 + 0.33 * hw as f64 * theta.cos();
        let cy = hw as f64 / 2.0 + 0.33 * hw as f64 * theta.sin();
        let sigma = hw as f64 / 5.0;
        let color = [
            0.5 + 0.5 * theta.cos(),
            0.5 + 0.5 * (theta - std::f64::consts::TAU / 3.0).cos(),
            0.5 + 0.5 * (theta + std::f64::consts::TAU / 3.0).cos(),
        ];
        let mut template = vec![0.0; 3 * hw * hw];
        for ch in 0..3 {
            for y in 0..hw {
                for x in 0..hw {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    template[(ch * hw + y) * hw + x] =
                        color[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        out.push(template);
    }
    out
}

/// Pad-4 random crop plus horizontal flip, the retraining augmentation.
pub fn augment_batch(batch: &Batch, rng: &mut Rng) -> Batch {
    let (n, c, h, w) = (
        batch.images.shape()[0],
        batch.images.shape()[1],
        batch.images.shape()[2],
        batch.images.shape()[3],
    );
    let pad = 4usize;
    let mut out = vec![0.0; batch.images.numel()];
    for img in 0..n {
        let dy = rng.below(2 * pad + 1);
        let dx = rng.below(2 * pad + 1);
        let flip = rng.next_u64() & 1 == 1;
        for ch in 0..c {
            let src_plane = &batch.images.data()[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            let dst_plane = &mut out[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            for y in 0..h {
                let sy = y as isize + dy as isize - pad as isize;
                for x in 0..w {
                    let sx_raw = x as isize + dx as isize - pad as isize;
                    let sx = if flip { w as isize - 1 - sx_raw } else { sx_raw };
                    dst_plane[y * w + x] =
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_plane[sy as usize * w + sx as usize]
                        };
                }
            }
        }
    }
    Batch {
        images: Tensor::from_raw(vec![n, c, h, w], out),
        labels: batch.labels.clone(),
    }
}

/// Writes images/labels in the CIFAR binary record layout (requires 32x32
/// images and at most 10 classes). Pixels are rounded to bytes.
pub fn export_cifar_format(ds: &Dataset, indices: &[usize], path: &Path) -> Result<()> {
    let (h, w) = ds.image_hw();
    if h != 32 || w != 32 {
        return Err(Error::InvalidArg(format!(
            "CIFAR record layout requires 32x32 images, got {h}x{w}"
        )));
    }
    if ds.num_classes > 10 {
        return Err(Error::InvalidArg(
            "CIFAR record layout holds labels 0..=9".to_string(),
        ));
    }
    let img_len = 3 * h * w;
    let mut bytes = Vec::with_capacity(indices.len() * CIFAR_RECORD_BYTES);
    for &i in indices {
        bytes.push(ds.labels[i] as u8);
        for &v in &ds.images.data()[i * img_len..(i + 1) * img_len] {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(10, 50, 16, 7).unwrap();
        let b = gen_synthetic(10, 50, 16, 7).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 500);
        for class in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 50);
        }
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_nearest_template_oracle() {
        let ds = gen_synthetic(10, 20, 16, 3).unwrap();
        let templates = class_templates(10, 16);
        let img_len = 3 * 16 * 16;
        let mut correct = 0;
        for i in 0..ds.len() {
            let img = &ds.images.data()[i * img_len..(i + 1) * img_len];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, t) in templates.iter().enumerate() {
                let d: f64 = img.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.9, "template accuracy {acc}");
    }

    #[test]
    fn search_split_is_a_partition() {
        let ds = gen_synthetic(4, 25, 8, 11).unwrap();
        let train = ds.split("train").unwrap();
        let valid = ds.split("valid").unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(valid.len(), 50);
        let mut all: Vec<usize> = train.iter().chain(valid.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        // deterministic under the seed
        let ds2 = gen_synthetic(4, 25, 8, 11).unwrap();
        assert_eq!(ds.split("train").unwrap(), ds2.split("train").unwrap());
    }

    #[test]
    fn cifar_loader_parses_and_validates() {
        let dir = std::env::temp_dir().join(format!("mixbit_cifar_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        // fabricate a full set of files: record = label byte + 3072 pixel bytes
        let mut record = vec![0u8; CIFAR_RECORD_BYTES];
        record[0] = 7;
        record[1] = 255;
        let file: Vec<u8> = record
            .iter()
            .copied()
            .cycle()
            .take(CIFAR_FILE_BYTES)
            .collect();
        for i in 1..=5 {
            std::fs::write(dir.join(format!("data_batch_{i}.bin")), &file).unwrap();
        }
        std::fs::write(dir.join("test_batch.bin"), &file).unwrap();

        let ds = load_cifar10(&dir, false, None, 0).unwrap();
        assert_eq!(ds.len(), 60_000);
        assert_eq!(ds.split("test").unwrap().len(), 10_000);
        assert_eq!(ds.labels[0], 7);
        assert_eq!(ds.images.data()[0], 1.0);
        assert_eq!(ds.images.data()[1], 0.0);

        // truncated file names expected vs actual sizes
        std::fs::write(dir.join("data_batch_1.bin"), &file[..100]).unwrap();
        let err = load_cifar10(&dir, false, None, 0).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("30730000") && msg.contains("100"), "{msg}");

        // bad label byte
        let mut bad = file.clone();
        bad[0] = 10;
        std::fs::write(dir.join("data_batch_1.bin"), &bad).unwrap();
        assert!(load_cifar10(&dir, false, None, 0).is_err());

        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn cifar_export_round_trips() {
        let mut ds = gen_synthetic(10, 4, 32, 5).unwrap();
        // quantize pixels to bytes first so the round trip is exact
        for v in ds.images.data_mut() {
            *v = (*v * 255.0).round() / 255.0;
        }
        let path = std::env::temp_dir().join(format!("mixbit_export_{}.bin", std::process::id()));
        let indices: Vec<usize> = (0..ds.len()).collect();
        export_cifar_format(&ds, &indices, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), ds.len() * CIFAR_RECORD_BYTES);
        assert_eq!(bytes[0] as usize, ds.labels[0]);
        let px = bytes[1] as f64 / 255.0;
        assert!((px - ds.images.data()[0]).abs() < 1e-12);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let ds = gen_synthetic(3, 5, 16, 9).unwrap();
        let batch = ds.gather(&[0, 5, 10]).unwrap();
        let mut rng = Rng::new(1);
        let aug = augment_batch(&batch, &mut rng);
        assert_eq!(aug.images.shape(), batch.images.shape());
        assert_eq!(aug.labels, batch.labels);
        assert!(aug.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
