//! IDX files as distributed with MNIST, optionally gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated IDX header ({} bytes)", bytes.len())))
}

/// Reads a file, inflating it when it starts with the gzip signature.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Decoded image file: `count` images of `rows x cols` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return format_err(format!(
            "bad magic 0x{magic:08x} in image file, expected 0x{IMAGE_MAGIC:08x}"
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    if bytes.len() != expected {
        return format_err(format!(
            "image file has {} bytes, expected 16 + {count}*{rows}*{cols} = {expected}",
            bytes.len()
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return format_err(format!(
            "bad magic 0x{magic:08x} in label file, expected 0x{LABEL_MAGIC:08x}"
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + count {
        return format_err(format!(
            "label file has {} bytes, expected 8 + {count} = {}",
            bytes.len(),
            8 + count
        ));
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes `bytes`, gzip-compressed when the path ends in `.gz`.
pub fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Images scaled by 1/255 with their labels.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if labels.len() != images.count {
        return format_err(format!("{} images but {} labels", images.count, labels.len()));
    }
    let n = images.rows * images.cols;
    let scenes = Array2::from_shape_fn((images.count, n), |(k, p)| images.pixels[k * n + p] as f64 / 255.0);
    Dataset::new(
        scenes,
        Some(labels.into_iter().map(usize::from).collect()),
        (images.rows, images.cols, 1),
    )
}

fn locate(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads the standard four-file layout from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<Split> {
    Ok(Split {
        train: load_mnist_idx(
            &locate(dir, "train-images-idx3-ubyte")?,
            &locate(dir, "train-labels-idx1-ubyte")?,
        )?,
        test: load_mnist_idx(
            &locate(dir, "t10k-images-idx3-ubyte")?,
            &locate(dir, "t10k-labels-idx1-ubyte")?,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 10, 20, 30, 40, 1, 2, 3, 4, 5, 6],
        }
    }

    #[test]
    fn round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lab = dir.path().join("lab");
        write_maybe_gz(&img, &encode_idx_images(&sample())).unwrap();
        write_maybe_gz(&lab, &encode_idx_labels(&[7, 3])).unwrap();
        let d = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.scene_len(), 6);
        assert_eq!(d.scenes[[0, 1]], 1.0);
        assert_eq!(d.labels, Some(vec![7, 3]));
    }

    #[test]
    fn rejects_bad_magic_and_sizes() {
        let mut bytes = encode_idx_images(&sample());
        bytes[3] = 0x02;
        let err = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let mut short = encode_idx_images(&sample());
        short.pop();
        assert!(parse_idx_images(&short).is_err());
        let mut long = encode_idx_images(&sample());
        long.push(0);
        assert!(parse_idx_images(&long).is_err());
        assert!(parse_idx_images(&[0, 0, 8]).is_err());
        assert!(parse_idx_labels(&encode_idx_images(&sample())).is_err());
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_maybe_gz(&img, &encode_idx_images(&sample())).unwrap();
        write_maybe_gz(&lab, &encode_idx_labels(&[1, 2, 3])).unwrap();
        assert!(load_mnist_idx(&img, &lab).is_err());
    }
}
