//! MNIST IDX files: big-endian headers, `u8` payloads, optionally gzipped.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const ROWS: usize = 28;
pub const COLS: usize = 28;
pub const PIXELS: usize = ROWS * COLS;
pub const CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unexpected image size {rows}x{cols}, expected 28x28")]
    ImageSize { rows: usize, cols: usize },
    #[error("label {0} is not a digit")]
    LabelRange(u8),
    #[error("trailing bytes: expected {expected}, have {have}")]
    TrailingBytes { expected: usize, have: usize },
}

/// Images `[count][28·28]` with pixels in `[0, 1]`, and their digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, idx: usize) -> &[f64] {
        &self.images[idx * PIXELS..(idx + 1) * PIXELS]
    }

    /// The first `count` examples (or all of them if fewer).
    pub fn take(&self, count: usize) -> LabeledImages {
        let count = count.min(self.len());
        LabeledImages {
            images: self.images[..count * PIXELS].to_vec(),
            labels: self.labels[..count].to_vec(),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    let word = bytes.get(at..at + 4).ok_or(IdxError::Truncated {
        needed: at + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([word[0], word[1], word[2], word[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8], IdxError> {
    let needed = header + len;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(IdxError::TrailingBytes {
            expected: needed,
            have: bytes.len(),
        });
    }
    Ok(&bytes[header..])
}

/// Parses an image file body, returning pixels scaled by 1/255.
pub fn parse_images(bytes: &[u8]) -> Result<Vec<f64>, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != ROWS || cols != COLS {
        return Err(IdxError::ImageSize { rows, cols });
    }
    let body = payload(bytes, 16, count * PIXELS)?;
    Ok(body.iter().map(|&p| p as f64 / 255.0).collect())
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let body = payload(bytes, 8, count)?;
    body.iter()
        .map(|&l| {
            if (l as usize) < CLASSES {
                Ok(l as usize)
            } else {
                Err(IdxError::LabelRange(l))
            }
        })
        .collect()
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages, IdxError> {
    let images = parse_images(&read_bytes(images_path)?)?;
    let labels = parse_labels(&read_bytes(labels_path)?)?;
    if images.len() / PIXELS != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.len() / PIXELS,
            labels: labels.len(),
        });
    }
    Ok(LabeledImages { images, labels })
}

/// Finds `name` or `name.gz` in `dir`.
fn locate(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    if plain.exists() {
        return plain;
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        gz
    } else {
        plain
    }
}

/// Loads the train and test splits from a directory holding the four
/// standard MNIST files (plain or `.gz`).
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledImages, LabeledImages), IdxError> {
    let train = load_idx(&locate(dir, TRAIN_IMAGES), &locate(dir, TRAIN_LABELS))?;
    let test = load_idx(&locate(dir, TEST_IMAGES), &locate(dir, TEST_LABELS))?;
    Ok((train, test))
}

/// Encodes raw `u8` images (`count × 28 × 28`) as an IDX image file.
pub fn encode_images(pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / PIXELS;
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGE_MAGIC, count as u32, ROWS as u32, COLS as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&pixels[..count * PIXELS]);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes `bytes` to `path`, gzipping when the name ends in `.gz`.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path.extension().is_some_and(|e| e == "gz") {
        let file = fs::File::create(path).map_err(io)?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(io)?;
        enc.finish().map_err(io)?;
        Ok(())
    } else {
        fs::write(path, bytes).map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_image_fixture() {
        let pixels: Vec<u8> = (0..2 * PIXELS).map(|i| (i % 256) as u8).collect();
        let images = parse_images(&encode_images(&pixels)).unwrap();
        assert_eq!(images.len(), 2 * PIXELS);
        assert_eq!(images[255], 1.0);
        assert_eq!(parse_labels(&encode_labels(&[3, 7])).unwrap(), vec![3, 7]);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_labels(&[1]);
        bytes[3] = 0x03;
        let err = parse_labels(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("bad magic"));
    }
}
