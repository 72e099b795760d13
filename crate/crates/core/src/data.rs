//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), normalisation to [0,1]
//! and seeded batching.
//!
//! Images are stored channel-planar (C, H, W). Shuffles use ChaCha8 seeded
//! from the caller's `u64`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Planar pixels; every value must be finite and inside [0,1].
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::Shape { expected: vec![channels, height, width], got: vec![pixels.len()] });
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Precondition(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image { channels, height, width, pixels })
    }

    pub(crate) fn from_planar_unchecked(shape: [usize; 3], pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), shape.iter().product::<usize>());
        Image { channels: shape[0], height: shape[1], width: shape[2], pixels }
    }

    /// Builds an image from interleaved H x W x C values.
    pub fn from_hwc(height: usize, width: usize, channels: usize, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != height * width * channels {
            return Err(Error::Shape { expected: vec![height, width, channels], got: vec![hwc.len()] });
        }
        let mut planar = vec![0.0; hwc.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    planar[(c * height + y) * width + x] = hwc[(y * width + x) * channels + c];
                }
            }
        }
        Image::new(channels, height, width, planar)
    }

    pub fn to_hwc(&self) -> Vec<f32> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = vec![0.0; self.pixels.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ch] = self.pixels[(ch * h + y) * w + x];
                }
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn dim(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.pixels[c * self.height * self.width..][..self.height * self.width]
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.pixels.clone())
    }

    /// Copies `pixels`, clamping into [0,1].
    pub fn with_pixels_clamped(&self, pixels: &[f32]) -> Image {
        assert_eq!(pixels.len(), self.pixels.len());
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An ordered, immutable set of equally shaped labelled images.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub class_count: usize,
    shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn from_examples(name: &str, split: Split, class_count: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::Precondition("empty dataset".into()))?;
        let shape = first.image.shape();
        let mut pixels = Vec::with_capacity(examples.len() * first.image.dim());
        let mut labels = Vec::with_capacity(examples.len());
        for e in examples {
            if e.image.shape() != shape {
                return Err(Error::Shape { expected: shape.to_vec(), got: e.image.shape().to_vec() });
            }
            if e.label >= class_count {
                return Err(Error::InvalidClass { label: e.label, classes: class_count });
            }
            pixels.extend_from_slice(e.image.pixels());
            labels.push(e.label);
        }
        Ok(LabeledDataset { name: name.into(), split, class_count, shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let d = self.image_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn image(&self, i: usize) -> Image {
        Image::from_planar_unchecked(self.shape, self.pixels(i).to_vec())
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> LabeledExample {
        LabeledExample { image: self.image(i), label: self.labels[i] }
    }

    pub fn examples(&self) -> impl Iterator<Item = LabeledExample> + '_ {
        (0..self.len()).map(|i| self.example(i))
    }

    /// New dataset holding the given rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Precondition("empty subset".into()));
        }
        let mut pixels = Vec::with_capacity(idx.len() * self.image_dim());
        for &i in idx {
            pixels.extend_from_slice(self.pixels(i));
        }
        Ok(LabeledDataset {
            name: self.name.clone(),
            split: self.split,
            class_count: self.class_count,
            shape: self.shape,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Splits off the last `n` rows (e.g. a validation hold-out).
    pub fn split_tail(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Precondition(format!("cannot split {n} of {} rows", self.len())));
        }
        let head: Vec<usize> = (0..self.len() - n).collect();
        let tail: Vec<usize> = (self.len() - n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// `N x C x H x W` tensor of the selected rows.
    pub fn batch_tensor(&self, idx: &[usize]) -> Tensor<f32> {
        let d = self.image_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.pixels(i));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![idx.len(), c, h, w], data)
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Raw IDX byte streams `(images, labels)` with pixels rounded back to
    /// 0..=255.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let [_, h, w] = self.shape;
        let mut img = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGE_MAGIC, self.len() as u32, h as u32, w as u32] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend(self.pixels.iter().map(|&p| to_byte(p)));
        let mut lab = Vec::with_capacity(8 + self.len());
        for v in [IDX_LABEL_MAGIC, self.len() as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend(self.labels.iter().map(|&l| l as u8));
        (img, lab)
    }

    /// CIFAR-10 binary records (label byte followed by planar R, G, B).
    pub fn to_cifar_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * (1 + self.image_dim()));
        for i in 0..self.len() {
            out.push(self.labels[i] as u8);
            out.extend(self.pixels(i).iter().map(|&p| to_byte(p)));
        }
        out
    }
}

fn to_byte(p: f32) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated { expected: at + 4, found: bytes.len() })
}

/// Parses in-memory IDX image and label streams.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8], split: Split) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic { expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABEL_MAGIC, found: magic });
    }
    let n = be_u32(images, 4)? as usize;
    let (h, w) = (be_u32(images, 8)? as usize, be_u32(images, 12)? as usize);
    let nl = be_u32(labels, 4)? as usize;
    if n != nl {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    let need = 16 + n * h * w;
    if images.len() < need {
        return Err(Error::Truncated { expected: need, found: images.len() });
    }
    if labels.len() < 8 + n {
        return Err(Error::Truncated { expected: 8 + n, found: labels.len() });
    }
    if n == 0 {
        return Err(Error::Format("IDX file holds zero images".into()));
    }
    let pixels = images[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let class_count = 10;
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::InvalidClass { label: bad, classes: class_count });
    }
    Ok(LabeledDataset { name: "mnist".into(), split, class_count, shape: [1, h, w], pixels, labels })
}

/// Loads an MNIST-format pair of IDX files. The split is inferred from the
/// file name (`t10k` means test).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let split = if images_path.to_string_lossy().contains("t10k") { Split::Test } else { Split::Train };
    parse_mnist_idx(&read(images_path)?, &read(labels_path)?, split)
}

pub fn parse_cifar_binary(chunks: &[Vec<u8>], split: Split) -> Result<LabeledDataset> {
    if chunks.is_empty() {
        return Err(Error::Precondition("no CIFAR batch files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for bytes in chunks {
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!("CIFAR batch of {} bytes is not a multiple of {CIFAR_RECORD}", bytes.len())));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(Error::InvalidClass { label: rec[0] as usize, classes: 10 });
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(LabeledDataset { name: "cifar10".into(), split, class_count: 10, shape: [3, 32, 32], pixels, labels })
}

/// Loads CIFAR-10 binary batches (`test_batch.bin` means test split).
pub fn load_cifar_binary<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    let split = match batch_paths.first() {
        Some(p) if p.as_ref().to_string_lossy().contains("test") => Split::Test,
        _ => Split::Train,
    };
    let chunks = batch_paths.iter().map(|p| read(p.as_ref())).collect::<Result<Vec<_>>>()?;
    parse_cifar_binary(&chunks, split)
}

/// Index batches covering `0..ds.len()`, optionally shuffled with ChaCha8
/// seeded by `seed`. The last batch may be short.
pub fn batches(ds: &LabeledDataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    index_batches(ds.len(), batch_size, seed, shuffle)
}

pub fn index_batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Precondition("batch_size must be positive".into()));
    }
    if batch_size > n {
        return Err(Error::Precondition(format!("batch_size {batch_size} exceeds dataset size {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// `n` distinct indices drawn from `0..len` with ChaCha8.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Precondition(format!("cannot sample {n} of {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, len, n).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> LabeledDataset {
        let ex = (0..n)
            .map(|i| LabeledExample {
                image: Image::new(1, 2, 2, vec![(i % 5) as f32 / 4.0; 4]).unwrap(),
                label: i % 3,
            })
            .collect();
        LabeledDataset::from_examples("toy", Split::Train, 3, ex).unwrap()
    }

    #[test]
    fn unshuffled_batches_keep_order() {
        let b = batches(&toy(10), 3, 0, false).unwrap();
        assert_eq!(b, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9]]);
    }

    #[test]
    fn batch_size_zero_rejected() {
        assert!(matches!(batches(&toy(4), 0, 0, true), Err(Error::Precondition(_))));
        assert!(matches!(batches(&toy(4), 5, 0, true), Err(Error::Precondition(_))));
    }

    #[test]
    fn hwc_round_trip() {
        let hwc: Vec<f32> = (0..12).map(|v| v as f32 / 11.0).collect();
        let img = Image::from_hwc(2, 2, 3, &hwc).unwrap();
        assert_eq!(img.channel(1), &[hwc[1], hwc[4], hwc[7], hwc[10]]);
        assert_eq!(img.to_hwc(), hwc);
    }

    #[test]
    fn out_of_range_pixel_rejected() {
        assert!(Image::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5, f32::NAN]).is_err());
    }

    #[test]
    fn subset_and_split() {
        let ds = toy(6);
        let (a, b) = ds.split_tail(2).unwrap();
        assert_eq!((a.len(), b.len()), (4, 2));
        assert_eq!(b.labels(), &[1, 2]);
        assert_eq!(ds.subset(&[5, 0]).unwrap().labels(), &[2, 0]);
    }
}
