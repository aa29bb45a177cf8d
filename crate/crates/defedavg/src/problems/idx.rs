//! Reader for the IDX binary format used by common image benchmarks.
//!
//! Only the two layouts the experiments need are supported: unsigned-byte
//! images with three dimensions (magic `0x00000803`) and unsigned-byte
//! label vectors (magic `0x00000801`). All header integers are big-endian.
//! Pixel bytes are scaled to `[0, 1]`.

use std::path::Path;

use crate::{Error, Result};

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

/// Parsed contents of an IDX file.
#[derive(Debug, Clone)]
pub enum IdxFile {
    /// `count` images flattened row-major into `data`, `d_in` values each.
    Images { data: Vec<f64>, d_in: usize, count: usize },
    Labels(Vec<usize>),
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx { path: path.display().to_string(), reason: reason.into() }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(idx_err(path, format!("truncated header (need {end} bytes)")));
    }
    let mut buf = [0u8; 4];
    buf.copy_from_slice(&bytes[offset..end]);
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image or label file, dispatching on its magic number.
pub fn read_idx(path: &Path) -> Result<IdxFile> {
    let bytes = std::fs::read(path).map_err(|e| idx_err(path, e.to_string()))?;
    let magic = read_u32(&bytes, 0, path)?;
    match magic {
        MAGIC_IMAGES => {
            let count = read_u32(&bytes, 4, path)? as usize;
            let rows = read_u32(&bytes, 8, path)? as usize;
            let cols = read_u32(&bytes, 12, path)? as usize;
            let d_in = rows * cols;
            let expected = 16 + count * d_in;
            if bytes.len() != expected {
                return Err(idx_err(
                    path,
                    format!(
                        "payload is {} bytes, header promises {} ({} images of {}x{})",
                        bytes.len() - 16.min(bytes.len()),
                        expected - 16,
                        count,
                        rows,
                        cols
                    ),
                ));
            }
            let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxFile::Images { data, d_in, count })
        }
        MAGIC_LABELS => {
            let count = read_u32(&bytes, 4, path)? as usize;
            let expected = 8 + count;
            if bytes.len() != expected {
                return Err(idx_err(
                    path,
                    format!(
                        "payload is {} bytes, header promises {count} labels",
                        bytes.len() - 8.min(bytes.len())
                    ),
                ));
            }
            let labels = bytes[8..].iter().map(|&b| b as usize).collect();
            Ok(IdxFile::Labels(labels))
        }
        other => Err(idx_err(path, format!("unrecognized magic 0x{other:08x}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f.flush().unwrap();
        f
    }

    fn image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn parses_images_and_scales_pixels() {
        let f = write_temp(&image_bytes(2, 2, 2, &[0, 51, 102, 255, 255, 0, 51, 102]));
        match read_idx(f.path()).unwrap() {
            IdxFile::Images { data, d_in, count } => {
                assert_eq!((d_in, count), (4, 2));
                assert_eq!(data[0], 0.0);
                assert_eq!(data[3], 1.0);
                assert!((data[1] - 0.2).abs() < 1e-12);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn parses_labels() {
        let f = write_temp(&label_bytes(&[3, 1, 4, 1, 5]));
        match read_idx(f.path()).unwrap() {
            IdxFile::Labels(l) => assert_eq!(l, vec![3, 1, 4, 1, 5]),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let f = write_temp(&[0, 0, 9, 9, 0, 0, 0, 0]);
        let err = read_idx(f.path()).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = image_bytes(2, 2, 2, &[0; 8]);
        bytes.truncate(bytes.len() - 3);
        let f = write_temp(&bytes);
        assert!(read_idx(f.path()).is_err());
    }

    #[test]
    fn dataset_from_pair_checks_counts() {
        let imgs = write_temp(&image_bytes(2, 1, 3, &[10, 20, 30, 40, 50, 60]));
        let labs = write_temp(&label_bytes(&[1, 0]));
        let ds = super::super::Dataset::from_idx_pair(imgs.path(), labs.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.d_in(), 3);
        assert_eq!(ds.label(1), 0);

        let short = write_temp(&label_bytes(&[1]));
        assert!(super::super::Dataset::from_idx_pair(imgs.path(), short.path()).is_err());
    }
}
