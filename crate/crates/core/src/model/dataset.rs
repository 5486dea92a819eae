//! Datasets: synthetic generators, the CIFAR-10 binary-record loader, and
//! the raw tensor file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    Calibration,
}

/// Labeled images with pixel values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid_argument(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid_argument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid_argument(format!(
                    "image {i} has pixels outside [0, 1]"
                )));
            }
        }
        Ok(Dataset { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` samples as a new dataset (for calibration subsets).
    pub fn take(&self, n: usize, split: Split) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split,
        }
    }
}

/// Ten distinguishable 2-D patterns rendered per class.
fn shape_mask(class: usize, size: usize, y: usize, x: usize) -> bool {
    let s = size as isize;
    let (yi, xi) = (y as isize, x as isize);
    let c = s / 2;
    let r = s / 4;
    match class {
        // filled square
        0 => (yi - c).abs() <= r && (xi - c).abs() <= r,
        // hollow square
        1 => {
            let d = (yi - c).abs().max((xi - c).abs());
            d <= r && d >= r - 1
        }
        // X cross
        2 => (yi - xi).abs() <= 1 || (yi + xi - s + 1).abs() <= 1,
        // plus cross
        3 => (yi - c).abs() <= 1 || (xi - c).abs() <= 1,
        // horizontal stripes
        4 => (y / 2) % 2 == 0,
        // vertical stripes
        5 => (x / 2) % 2 == 0,
        // checkerboard
        6 => ((y / 4) + (x / 4)) % 2 == 0,
        // disk
        7 => (yi - c).pow(2) + (xi - c).pow(2) <= r * r,
        // ring
        8 => {
            let d2 = (yi - c).pow(2) + (xi - c).pow(2);
            d2 <= r * r && d2 >= (r - 2).max(1) * (r - 2).max(1)
        }
        // lower-left triangle
        _ => yi >= xi,
    }
}

/// Synthetic multi-class image set: per-class geometric pattern, small random
/// translation, per-pixel noise. Learnable well past 90% by the toy models
/// yet noisy enough to keep decision margins moderate.
pub fn synthetic_shapes(
    n: usize,
    classes: usize,
    size: usize,
    channels: usize,
    noise: f32,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if classes == 0 || classes > 10 {
        return Err(Error::invalid_argument("synthetic_shapes supports 1..=10 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let dy = rng.gen_range(-2i32..=2);
        let dx = rng.gen_range(-2i32..=2);
        let mut data = vec![0.0f32; size * size * channels];
        for y in 0..size {
            for x in 0..size {
                let sy = (y as i32 - dy).rem_euclid(size as i32) as usize;
                let sx = (x as i32 - dx).rem_euclid(size as i32) as usize;
                let fg = shape_mask(class, size, sy, sx);
                for ch in 0..channels {
                    // Foreground intensity varies per channel so color carries
                    // some class signal too.
                    let base = if fg {
                        0.85 - 0.15 * ((class + ch) % 3) as f32
                    } else {
                        0.15
                    };
                    let v = base + rng.gen_range(-noise..noise);
                    data[(y * size + x) * channels + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        images.push(Tensor::new(vec![size, size, channels], data)?);
        labels.push(class);
    }
    Dataset::new(images, labels, classes, split)
}

/// Linearly separable class blobs in pixel space: class k gets mean intensity
/// pattern along a fixed direction, plus small noise.
pub fn synthetic_blobs(
    n: usize,
    classes: usize,
    size: usize,
    channels: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let center = 0.2 + 0.6 * class as f32 / (classes.max(2) - 1) as f32;
        let data: Vec<f32> = (0..size * size * channels)
            .map(|_| (center + rng.gen_range(-0.08..0.08f32)).clamp(0.0, 1.0))
            .collect();
        images.push(Tensor::new(vec![size, size, channels], data)?);
        labels.push(class);
    }
    Dataset::new(images, labels, classes, split)
}

const CIFAR_RECORD: usize = 1 + 3072;

/// Load CIFAR-10 binary-version records: 1 label byte followed by 3072 pixel
/// bytes (three 32x32 planes, R then G then B). Pixels are scaled to [0, 1]
/// and transposed to HWC.
pub fn load_cifar10_bin(path: &Path, limit: Option<usize>, split: Split) -> Result<Dataset> {
    let mut file = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            message: format!(
                "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    let n_records = bytes.len() / CIFAR_RECORD;
    let n = limit.map_or(n_records, |l| l.min(n_records));
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label byte {label} out of range 0..=9"),
            });
        }
        let mut data = vec![0.0f32; 3072];
        for y in 0..32 {
            for x in 0..32 {
                for ch in 0..3 {
                    let plane = 1 + ch * 1024 + y * 32 + x;
                    data[(y * 32 + x) * 3 + ch] = rec[plane] as f32 / 255.0;
                }
            }
        }
        images.push(Tensor::new(vec![32, 32, 3], data)?);
        labels.push(label);
    }
    Dataset::new(images, labels, 10, split)
}

/// Write the raw tensor format: u32 ndims, ndims x u32 dims, u64 element
/// count, then little-endian f32 data.
pub fn write_raw_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&(t.numel() as u64).to_le_bytes())?;
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw_tensor(path: &Path) -> Result<Tensor> {
    let mut file = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut read_exact = |buf: &mut [u8]| -> Result<()> {
        file.read_exact(buf).map_err(|_| Error::Format {
            offset,
            message: "unexpected end of raw tensor file".into(),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut u32_buf = [0u8; 4];
    read_exact(&mut u32_buf)?;
    let ndims = u32::from_le_bytes(u32_buf) as usize;
    if ndims == 0 || ndims > 8 {
        return Err(Error::Format { offset: 0, message: format!("implausible ndims {ndims}") });
    }
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        read_exact(&mut u32_buf)?;
        shape.push(u32::from_le_bytes(u32_buf) as usize);
    }
    let mut u64_buf = [0u8; 8];
    read_exact(&mut u64_buf)?;
    let count = u64::from_le_bytes(u64_buf) as usize;
    if count != shape.iter().product::<usize>() {
        return Err(Error::Format {
            offset: offset - 8,
            message: format!("element count {count} does not match shape {shape:?}"),
        });
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut u32_buf)?;
        data.push(f32::from_le_bytes(u32_buf));
    }
    Tensor::new(shape, data)
}
