//! IDX files as used by MNIST: big-endian, magic-prefixed, u8 payloads.
//! Paths ending in `.gz` are transparently (de)compressed.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if !is_gz(path) {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::io(path, e))?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if !is_gz(path) {
        return write_atomic(path, bytes);
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
    let packed = enc.finish().map_err(|e| Error::io(path, e))?;
    write_atomic(path, &packed)
}

fn parse_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(path, offset, "truncated header"))
}

/// Raw images from an IDX3 file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(parse_err(
            path,
            16 + body.len(),
            format!("truncated: {need} pixel bytes declared, {} present", body.len()),
        ));
    }
    if body.len() > need {
        return Err(parse_err(path, 16 + need, "trailing bytes after last image"));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(parse_err(
            path,
            8 + body.len().min(count),
            format!("{count} labels declared, {} present", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Contract("pixel buffer does not match image dimensions".into()));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    write_bytes(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_bytes(path, &out)
}

/// Loads an image/label pair with pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != images.count {
        return Err(parse_err(
            labels_path,
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    if images.count == 0 {
        return Err(parse_err(images_path, 4, "file holds no images"));
    }
    let p = images.rows * images.cols;
    let examples = Tensor::new(
        vec![images.count, p],
        images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(
        examples,
        Some(labels),
        classes,
        vec![1, images.rows, images.cols],
        Normalization::Unit,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, gz: bool) -> (PathBuf, PathBuf) {
        let ext = if gz { ".gz" } else { "" };
        let img = dir.join(format!("img{ext}"));
        let lab = dir.join(format!("lab{ext}"));
        write_idx_images(
            &img,
            &IdxImages {
                count: 2,
                rows: 2,
                cols: 3,
                pixels: vec![0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6],
            },
        )
        .unwrap();
        write_idx_labels(&lab, &[7, 3]).unwrap();
        (img, lab)
    }

    #[test]
    fn hand_built_fixture_recovers_pixels() {
        let dir = tempfile::tempdir().unwrap();
        for gz in [false, true] {
            let (img, lab) = fixture(dir.path(), gz);
            let ds = load_idx(&img, &lab).unwrap();
            assert_eq!(ds.examples.shape(), &[2, 6]);
            assert_eq!(ds.sample_shape, vec![1, 2, 3]);
            assert_eq!(ds.examples.row(0), &[0.0, 1.0, 0.2, 0.4, 0.6, 0.8]);
            assert_eq!(ds.labels().unwrap(), &[7, 3]);
            assert_eq!(ds.num_classes, 8);
        }
    }

    #[test]
    fn raw_header_is_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture(dir.path(), false);
        let bytes = std::fs::read(img).unwrap();
        assert_eq!(&bytes[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
    }

    #[test]
    fn wrong_magic_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path(), false);
        let err = read_idx_labels(&img).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");

        let bytes = std::fs::read(&img).unwrap();
        let cut = dir.path().join("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 1]).unwrap();
        let err = read_idx_images(&cut).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 27, .. }), "{err}");

        let short = dir.path().join("short");
        write_idx_labels(&short, &[1]).unwrap();
        let err = load_idx(&img, &short).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 4, .. }), "{err}");
        assert!(load_idx(&img, &lab).is_ok());
    }
}
