//! MNIST in the IDX format: big-endian `u32` magic and dimensions followed by
//! raw `u8` payload.
//!
//! The loader looks for the four standard files in one directory, each
//! either raw or gzip-compressed with a `.gz` suffix:
//! `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use normlab_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const PIXELS: usize = 784;
pub const CLASSES: usize = 10;
pub const VALIDATION_SIZE: usize = 5000;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: not found (also tried {}.gz)", path.display(), path.display())]
    Missing { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: bad magic {found:#010x}, expected {expected:#010x}", path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{}: truncated, header promises {expected} bytes but the file holds {actual}", path.display())]
    Truncated { path: PathBuf, expected: usize, actual: usize },

    #[error("{}: {extra} bytes after the declared payload", path.display())]
    TrailingBytes { path: PathBuf, extra: usize },

    #[error("{}: images are {rows}x{cols}, expected 28x28", path.display())]
    ImageSize { path: PathBuf, rows: usize, cols: usize },

    #[error("{}: label {label} at record {index} is outside 0..=9", path.display())]
    BadLabel { path: PathBuf, index: usize, label: u8 },

    #[error("{}: {labels} labels but {} holds {images} images", path.display(), images_path.display())]
    CountMismatch {
        path: PathBuf,
        images_path: PathBuf,
        images: usize,
        labels: usize,
    },

    #[error("{}: {records} training records cannot leave a {validation}-record validation split", path.display())]
    TooFewRecords { path: PathBuf, records: usize, validation: usize },
}

/// Images as `[N, 784]` rows in `[0, 1]` with labels in `0..10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` gathered into a new `[indices.len(), 784]` split.
    pub fn gather(&self, indices: &[usize]) -> Split {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Split {
            images: Tensor::new(vec![indices.len(), PIXELS], data).expect("gathered rows are 784 wide"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` records (all of them if `n` is larger).
    pub fn truncated(&self, n: usize) -> Split {
        let n = n.min(self.len());
        self.gather(&(0..n).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistDataset {
    pub train: Split,
    pub validation: Split,
    pub test: Split,
    /// Indices into the original training file, in split order.
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Loads the standard files from `dir` and holds out [`VALIDATION_SIZE`]
/// training records: a `seed`-keyed permutation of the training file, first
/// records to `train`, the rest to `validation`.
pub fn load_mnist(dir: &Path, seed: u64) -> Result<MnistDataset, DataError> {
    load_mnist_with_validation(dir, seed, VALIDATION_SIZE)
}

pub fn load_mnist_with_validation(dir: &Path, seed: u64, validation: usize) -> Result<MnistDataset, DataError> {
    let (full, images_path) = load_pair(dir, TRAIN_IMAGES, TRAIN_LABELS)?;
    let (test, _) = load_pair(dir, TEST_IMAGES, TEST_LABELS)?;
    if full.len() <= validation {
        return Err(DataError::TooFewRecords {
            path: images_path,
            records: full.len(),
            validation,
        });
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_indices, validation_indices) = order.split_at(full.len() - validation);
    Ok(MnistDataset {
        train: full.gather(train_indices),
        validation: full.gather(validation_indices),
        test,
        train_indices: train_indices.to_vec(),
        validation_indices: validation_indices.to_vec(),
    })
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<(Split, PathBuf), DataError> {
    let (images_path, image_bytes) = read_maybe_gz(&dir.join(images))?;
    let (labels_path, label_bytes) = read_maybe_gz(&dir.join(labels))?;
    let pixels = parse_images(&images_path, &image_bytes)?;
    let labels = parse_labels(&labels_path, &label_bytes)?;
    let count = pixels.len() / PIXELS;
    if count != labels.len() {
        return Err(DataError::CountMismatch {
            path: labels_path,
            images_path,
            images: count,
            labels: labels.len(),
        });
    }
    let images = Tensor::new(vec![count, PIXELS], pixels).expect("payload length checked");
    Ok((Split { images, labels }, images_path))
}

fn read_maybe_gz(path: &Path) -> Result<(PathBuf, Vec<u8>), DataError> {
    fn io(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
        move |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
    if path.is_file() {
        return Ok((path.to_path_buf(), fs::read(path).map_err(io(path))?));
    }
    let gz = path.with_file_name(format!("{}.gz", path.file_name().unwrap_or_default().to_string_lossy()));
    if gz.is_file() {
        let mut bytes = Vec::new();
        GzDecoder::new(fs::File::open(&gz).map_err(io(&gz))?)
            .read_to_end(&mut bytes)
            .map_err(io(&gz))?;
        return Ok((gz, bytes));
    }
    Err(DataError::Missing { path: path.to_path_buf() })
}

fn be_u32(path: &Path, bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let word = bytes.get(at..at + 4).ok_or(DataError::Truncated {
        path: path.to_path_buf(),
        expected: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(word.try_into().expect("4-byte slice")))
}

fn payload<'a>(path: &Path, bytes: &'a [u8], header: usize, len: usize) -> Result<&'a [u8], DataError> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - expected,
        });
    }
    Ok(&bytes[header..])
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(path, bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Pixels of an image file scaled to `[0, 1]`, 784 per record.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<Vec<f32>, DataError> {
    check_magic(path, bytes, IMAGE_MAGIC)?;
    let count = be_u32(path, bytes, 4)? as usize;
    let rows = be_u32(path, bytes, 8)? as usize;
    let cols = be_u32(path, bytes, 12)? as usize;
    if rows * cols != PIXELS {
        return Err(DataError::ImageSize {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let raw = payload(path, bytes, 16, count * PIXELS)?;
    Ok(raw.iter().map(|&p| f32::from(p) / 255.0).collect())
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    check_magic(path, bytes, LABEL_MAGIC)?;
    let count = be_u32(path, bytes, 4)? as usize;
    let raw = payload(path, bytes, 8, count)?;
    raw.iter()
        .enumerate()
        .map(|(index, &label)| {
            if usize::from(label) < CLASSES {
                Ok(usize::from(label))
            } else {
                Err(DataError::BadLabel {
                    path: path.to_path_buf(),
                    index,
                    label,
                })
            }
        })
        .collect()
}

/// IDX image file bytes for `count` 28x28 records.
pub fn encode_images(pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / PIXELS;
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGE_MAGIC, count as u32, 28, 28] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for word in [LABEL_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}

/// Writes a learnable stand-in dataset in the standard layout: each class
/// lights a different band of rows, plus seeded pixel noise. Used for smoke
/// runs and tests when the real files are absent.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize, seed: u64) -> std::io::Result<()> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize, images: &str, labels: &str| -> std::io::Result<()> {
        let mut pixels = vec![0u8; n * PIXELS];
        let mut ys = Vec::with_capacity(n);
        for (r, record) in pixels.chunks_mut(PIXELS).enumerate() {
            let y = (r % CLASSES) as u8;
            ys.push(y);
            for (p, v) in record.iter_mut().enumerate() {
                let band = (p / 28) * CLASSES / 28;
                let base: u8 = if band == usize::from(y) { 160 } else { 0 };
                *v = base.saturating_add(rng.random_range(0..96));
            }
        }
        fs::File::create(dir.join(images))?.write_all(&encode_images(&pixels))?;
        fs::File::create(dir.join(labels))?.write_all(&encode_labels(&ys))
    };
    split(train, TRAIN_IMAGES, TRAIN_LABELS)?;
    split(test, TEST_IMAGES, TEST_LABELS)
}
