//! IDX (MNIST-style) ingestion. Files may be raw or gzip-compressed; a `.gz`
//! extension selects decompression. Byte offsets in errors refer to the
//! decompressed stream.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Sample, SamplePool};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err("truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(self.err(format!("expected {n} payload bytes, found {avail}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parses an image file into flat pixel vectors scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = read_file(path)?;
    parse_images(&bytes)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    parse_labels(&bytes)
}

fn parse_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut cur = Cursor {
        what: "IDX image file",
        bytes,
        pos: 0,
    };
    let magic = cur.u32_be()?;
    if magic != IMAGES_MAGIC {
        cur.pos = 0;
        return Err(cur.err(format!("bad magic number {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let pixels = rows * cols;
    let payload = cur.take(n * pixels)?;
    Ok(payload
        .chunks_exact(pixels.max(1))
        .take(n)
        .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect())
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor {
        what: "IDX label file",
        bytes,
        pos: 0,
    };
    let magic = cur.u32_be()?;
    if magic != LABELS_MAGIC {
        cur.pos = 0;
        return Err(cur.err(format!("bad magic number {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = cur.u32_be()? as usize;
    Ok(cur.take(n)?.to_vec())
}

/// Loads an image/label IDX pair as a sample pool.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<SamplePool> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            what: "IDX label file",
            offset: 4,
            reason: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(x, y)| Sample::new(x, usize::from(y)))
        .collect();
    SamplePool::new(samples)
}

/// Writes an IDX pair from raw `u8` pixels. Used for fixtures and format
/// conversion.
pub fn write_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
    labels: &[u8],
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for im in images {
        if im.len() != rows * cols {
            return Err(Error::Shape(format!(
                "image has {} pixels, expected {}",
                im.len(),
                rows * cols
            )));
        }
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        write_idx_pair(&ip, &lp, 2, 2, &[vec![0, 51, 102, 255], vec![255, 0, 1, 2]], &[3, 7]).unwrap();
        (ip, lp)
    }

    #[test]
    fn hand_built_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let pool = load_idx(&ip, &lp).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.input_dim, 4);
        assert_eq!(pool.samples[0].x, vec![0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0]);
        assert_eq!(pool.samples[1].x, vec![1.0, 0.0, 1.0 / 255.0, 2.0 / 255.0]);
        assert_eq!((pool.samples[0].label, pool.samples[1].label), (3, 7));
    }

    #[test]
    fn gzip_input() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        for p in [&ip, &lp] {
            let raw = fs::read(p).unwrap();
            let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(&raw).unwrap();
            fs::write(p.with_extension("idx.gz"), enc.finish().unwrap()).unwrap();
        }
        let a = load_idx(&ip, &lp).unwrap();
        let b = load_idx(&ip.with_extension("idx.gz"), &lp.with_extension("idx.gz")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        write_idx_pair(&ip, &lp, 1, 1, &[vec![1], vec![2]], &[0]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        fs::write(&ip, b"").unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let mut raw = fs::read(&ip).unwrap();
        raw[3] = 0x01;
        fs::write(&ip, &raw).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 0, .. })));
        raw[3] = 0x03;
        raw.truncate(raw.len() - 1);
        fs::write(&ip, &raw).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
