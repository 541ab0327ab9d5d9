//! Datasets: IDX (MNIST-compatible) files and a seeded synthetic-digits
//! generator, so the full pipeline runs without any downloads.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::qnn::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set, pixels stored as f64 in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    shape: (usize, usize, usize),
    images: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: (usize, usize, usize), images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let sample = shape.0 * shape.1 * shape.2;
        if sample == 0 || images.len() != sample * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels cannot hold {} samples of shape {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        Ok(Dataset {
            shape,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.sample_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            shape: self.shape,
            images,
            labels,
        }
    }

    /// Deterministically shuffle sample order.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        self.subset(&order)
    }

    /// Contiguous index batches of at most `batch_size`.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch_size)).map(move |b| {
            let start = b * batch_size;
            (start..(start + batch_size).min(n)).collect()
        })
    }

    /// Stack the given samples into an input tensor `[n, c, h, w]`.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_vec(
            &[indices.len(), self.shape.0, self.shape.1, self.shape.2],
            data,
        )
        .expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            reason: format!("file too short reading {what}"),
        })
}

/// Load an IDX image/label file pair into a dataset, scaling pixels to
/// `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_u32_be(&img_bytes, 0, images_path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            reason: format!("bad image magic 0x{magic:08x}"),
        });
    }
    let count = read_u32_be(&img_bytes, 4, images_path, "count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path, "rows")? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path, "cols")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            reason: format!("expected {expected} bytes, found {}", img_bytes.len()),
        });
    }

    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_u32_be(&lbl_bytes, 0, labels_path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            reason: format!("bad label magic 0x{magic:08x}"),
        });
    }
    let lcount = read_u32_be(&lbl_bytes, 4, labels_path, "count")? as usize;
    if lcount != count {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            reason: format!("{lcount} labels for {count} images"),
        });
    }
    if lbl_bytes.len() != 8 + lcount {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            reason: "label payload length mismatch".to_string(),
        });
    }

    let images: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = lbl_bytes[8..].to_vec();
    Dataset::new((1, rows, cols), images, labels)
}

/// Write a dataset back out as an IDX image/label file pair.
pub fn save_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = dataset.shape();
    if c != 1 {
        return Err(Error::InvalidArgument(
            "IDX export supports single-channel images only".into(),
        ));
    }
    let mut img = Vec::with_capacity(16 + dataset.len() * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for i in 0..dataset.len() {
        img.extend(
            dataset
                .image(i)
                .iter()
                .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;

    let mut lbl = Vec::with_capacity(8 + dataset.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lbl.extend_from_slice(dataset.labels());
    fs::write(labels_path, lbl).map_err(|e| Error::io(labels_path, e))
}

// 5x7 digit glyphs, one bit per pixel, MSB on the left.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Procedurally rendered 10-class digit glyphs with position, intensity and
/// pixel noise. `image_size` must be 16 or 28.
pub fn synthetic_digits(n: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    let scale = match image_size {
        16 => 2usize,
        28 => 3usize,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "synthetic digits support sizes 16 and 28, got {image_size}"
            )))
        }
    };
    let glyph_w = 5 * scale;
    let glyph_h = 7 * scale;
    let max_x = image_size - glyph_w;
    let max_y = image_size - glyph_h;

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut images = vec![0.0f64; n * image_size * image_size];
    let mut labels = Vec::with_capacity(n);

    for i in 0..n {
        let class = rng.random_range(0..10u8);
        let ox = rng.random_range(0..=max_x);
        let oy = rng.random_range(0..=max_y);
        let intensity: f64 = 0.7 + 0.3 * rng.random::<f64>();
        let img = &mut images[i * image_size * image_size..(i + 1) * image_size * image_size];
        for (row, bits) in GLYPHS[class as usize].iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let y = oy + row * scale + dy;
                            let x = ox + col * scale + dx;
                            img[y * image_size + x] = intensity;
                        }
                    }
                }
            }
        }
        for px in img.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *px = (*px + 0.08 * noise).clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset::new((1, image_size, image_size), images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn synthetic_digits_are_deterministic() {
        let a = synthetic_digits(32, 16, 9).unwrap();
        let b = synthetic_digits(32, 16, 9).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.image(7), b.image(7));
        assert_eq!(a.shape(), (1, 16, 16));
    }

    #[test]
    fn synthetic_digits_cover_all_classes() {
        let d = synthetic_digits(500, 16, 3).unwrap();
        for class in 0..10u8 {
            assert!(d.labels().contains(&class), "class {class} missing");
        }
    }

    #[test]
    fn unsupported_size_rejected() {
        assert!(synthetic_digits(4, 20, 0).is_err());
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempdir().unwrap();
        let d = synthetic_digits(20, 16, 11).unwrap();
        let imgs = dir.path().join("images.idx");
        let lbls = dir.path().join("labels.idx");
        save_idx(&d, &imgs, &lbls).unwrap();
        let back = load_idx(&imgs, &lbls).unwrap();
        assert_eq!(back.len(), 20);
        assert_eq!(back.labels(), d.labels());
        // Pixels survive the u8 round trip within one quantization step.
        for (a, b) in back.image(3).iter().zip(d.image(3)) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn idx_bad_magic_names_file() {
        let dir = tempdir().unwrap();
        let imgs = dir.path().join("bad.idx");
        let lbls = dir.path().join("labels.idx");
        fs::write(&imgs, 0xdead_beefu32.to_be_bytes()).unwrap();
        fs::write(&lbls, IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        match load_idx(&imgs, &lbls) {
            Err(Error::Idx { path, reason }) => {
                assert!(path.ends_with("bad.idx"));
                assert!(reason.contains("magic"));
            }
            other => panic!("expected Idx error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let d = synthetic_digits(5, 16, 1).unwrap();
        let imgs = dir.path().join("images.idx");
        let lbls = dir.path().join("labels.idx");
        save_idx(&d, &imgs, &lbls).unwrap();
        let mut bytes = fs::read(&imgs).unwrap();
        bytes.pop();
        fs::write(&imgs, bytes).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::Idx { .. })));
    }

    #[test]
    fn shuffle_and_subset_are_consistent() {
        let d = synthetic_digits(50, 16, 2).unwrap();
        let s = d.shuffled(4);
        assert_eq!(s.len(), d.len());
        let mut counts = [0usize; 10];
        for &l in s.labels() {
            counts[l as usize] += 1;
        }
        let mut original = [0usize; 10];
        for &l in d.labels() {
            original[l as usize] += 1;
        }
        assert_eq!(counts, original);
    }
}
