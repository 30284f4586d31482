//! Datasets: CIFAR-10 binary batches, seeded synthetic blobs, and batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Shape;
use crate::real::Real;
use crate::tensor::Tensor4D;

/// In-memory labelled images, stored as f32 in CHW order per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Shape, classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * shape.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} pixels for {} samples of {:?}", images.len(), labels.len(), shape),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape("dataset", format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { shape, classes, images, labels })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers the listed samples into a batch tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor4D<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
        }
        let dims = [indices.len(), self.shape.c, self.shape.h, self.shape.w];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor4D::from_vec(dims, data).expect("batch dims are consistent"), labels)
    }

    /// Per-channel pixel means.
    /// Keeps only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.images.truncate(n * self.shape.len());
            self.labels.truncate(n);
        }
    }

    pub fn channel_means(&self) -> Vec<f32> {
        let plane = self.shape.h * self.shape.w;
        let mut sums = vec![0f64; self.shape.c];
        for img in self.images.chunks(self.shape.len()) {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += img[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        sums.into_iter().map(|s| (s / count) as f32).collect()
    }

    pub fn subtract_channel_means(&mut self, means: &[f32]) {
        let plane = self.shape.h * self.shape.w;
        let n = self.shape.len();
        for img in self.images.chunks_mut(n) {
            for (c, &m) in means.iter().enumerate() {
                img[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v -= m);
            }
        }
    }
}

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_IMAGE_BYTES;
pub const CIFAR_CLASSES: usize = 10;

/// One CIFAR-10 record: a label byte then 1024 red, 1024 green and 1024 blue
/// bytes, each plane row-major 32x32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 batch of {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::Format(format!("record {i} has label {}", rec[0])));
            }
            Ok(CifarRecord { label: rec[0], pixels: rec[1..].to_vec() })
        })
        .collect()
}

pub fn encode_cifar10(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

/// Pixels scaled to `[0, 1]`.
pub fn records_to_dataset(records: &[CifarRecord]) -> Dataset {
    let images = records.iter().flat_map(|r| r.pixels.iter().map(|&p| p as f32 / 255.0)).collect();
    let labels = records.iter().map(|r| r.label as usize).collect();
    Dataset::new(Shape::new(3, 32, 32), CIFAR_CLASSES, images, labels).expect("record layout is fixed")
}

pub fn read_cifar10_file(path: &Path) -> Result<Vec<CifarRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

/// Loads `data_batch_*.bin` (sorted by name) as the training set and
/// `test_batch.bin` if present. With `subtract_mean`, the training set's
/// per-channel means are removed from both splits.
pub fn load_cifar10(dir: &Path, subtract_mean: bool) -> Result<Cifar10> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut train_files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
        })
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Format(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let mut records = Vec::new();
    for f in &train_files {
        records.extend(read_cifar10_file(f)?);
    }
    let mut train = records_to_dataset(&records);
    let test_path = dir.join("test_batch.bin");
    let mut test = if test_path.exists() { Some(records_to_dataset(&read_cifar10_file(&test_path)?)) } else { None };
    if subtract_mean {
        let means = train.channel_means();
        train.subtract_channel_means(&means);
        if let Some(t) = test.as_mut() {
            t.subtract_channel_means(&means);
        }
    }
    Ok(Cifar10 { train, test })
}

/// Class-conditional Gaussian-blob images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

struct Prototypes {
    shape: Shape,
    images: Vec<Vec<f32>>,
}

fn prototypes(spec: &SyntheticSpec, seed: u64) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(spec.channels, spec.size, spec.size);
    let s = spec.size as f64;
    let width = (s / 4.0).max(0.75);
    let images = (0..spec.classes)
        .map(|_| {
            let mut img = vec![0f32; shape.len()];
            for c in 0..spec.channels {
                // Two blobs per channel with random centres and signs.
                for _ in 0..2 {
                    let cy = rng.gen_range(0.0..s);
                    let cx = rng.gen_range(0.0..s);
                    let amp = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    for y in 0..spec.size {
                        for x in 0..spec.size {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(c * spec.size + y) * spec.size + x] += (amp * (-d2 / (2.0 * width * width)).exp()) as f32;
                        }
                    }
                }
            }
            img
        })
        .collect();
    Prototypes { shape, images }
}

fn sample(protos: &Prototypes, spec: &SyntheticSpec, per_class: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite std");
    let mut images = Vec::with_capacity(spec.classes * per_class * protos.shape.len());
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for (k, proto) in protos.images.iter().enumerate() {
        for _ in 0..per_class {
            images.extend(proto.iter().map(|&p| p + noise.sample(rng) as f32));
            labels.push(k);
        }
    }
    Dataset::new(protos.shape, spec.classes, images, labels).expect("generated layout is consistent")
}

/// `classes * per_class` samples, byte-identical for a fixed seed.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Dataset {
    make_synthetic_split(spec, seed, 0).0
}

/// Train and test sets drawn around the same class prototypes.
pub fn make_synthetic_split(spec: &SyntheticSpec, seed: u64, test_per_class: usize) -> (Dataset, Dataset) {
    let protos = prototypes(spec, seed);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    (sample(&protos, spec, spec.per_class, &mut train_rng), sample(&protos, spec, test_per_class, &mut test_rng))
}

/// Deterministic minibatches: a fresh seeded shuffle every epoch; a tail
/// shorter than the batch size is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, epoch: 0, rng }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let b = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec { classes: 2, per_class: 200, channels: 1, size: 6, noise: 0.3 }
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = make_synthetic(&spec(), 9);
        let b = make_synthetic(&spec(), 9);
        let c = make_synthetic(&spec(), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 400);
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 200);
    }

    #[test]
    fn split_shares_prototypes_but_not_noise() {
        let (train, test) = make_synthetic_split(&spec(), 4, 50);
        assert_eq!(test.len(), 100);
        assert_ne!(train.image(0), test.image(0));
        // Class means of the two splits agree up to noise.
        let mean = |d: &Dataset, k: usize| -> f64 {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == k).collect();
            idx.iter().map(|&i| d.image(i)[0] as f64).sum::<f64>() / idx.len() as f64
        };
        assert!((mean(&train, 0) - mean(&test, 0)).abs() < 0.15);
    }

    #[test]
    fn truncated_cifar_is_rejected() {
        let bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES + 7];
        assert!(matches!(parse_cifar10(&bytes), Err(Error::Format(_))));
        let mut bad = vec![0u8; CIFAR_RECORD_BYTES];
        bad[0] = 10;
        assert!(matches!(parse_cifar10(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn full_batch_arithmetic() {
        let bytes: Vec<u8> = (0..10_000 * CIFAR_RECORD_BYTES).map(|i| (i % 251) as u8 % 10).collect();
        let records = parse_cifar10(&bytes).unwrap();
        assert_eq!(records.len(), 10_000);
        let ds = records_to_dataset(&records);
        assert_eq!(ds.shape(), Shape::new(3, 32, 32));
        assert_eq!(ds.image(9_999).len(), 3072);
        assert_eq!(encode_cifar10(&records), bytes);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.epoch(), 0);
        s.next_batch(2);
        assert_eq!(s.epoch(), 1);
        let mut t = BatchSampler::new(10, 1);
        let mut u = BatchSampler::new(10, 1);
        for _ in 0..20 {
            assert_eq!(t.next_batch(3), u.next_batch(3));
        }
    }

    #[test]
    fn channel_mean_subtraction() {
        let mut ds = make_synthetic(&SyntheticSpec { channels: 3, ..spec() }, 2);
        let means = ds.channel_means();
        ds.subtract_channel_means(&means);
        assert!(ds.channel_means().iter().all(|m| m.abs() < 1e-5));
    }
}
