use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::warp::Image;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let head = 4 + 4 * dims;
    let truncated = |expected: u64| Error::TruncatedFile {
        path: path.to_owned(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(head as u64));
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < head {
        return Err(truncated(head as u64));
    }
    let sizes: Vec<usize> = (0..dims)
        .map(|d| BigEndian::read_u32(&bytes[4 + 4 * d..8 + 4 * d]) as usize)
        .collect();
    let expected = head as u64 + sizes.iter().map(|&s| s as u64).product::<u64>();
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    Ok(sizes)
}

/// Decodes an unsigned-byte image tensor; pixels are scaled to `[0, 1]` and
/// then each image to unit norm.
pub fn read_idx_images(path: &Path) -> Result<Vec<Image>> {
    let bytes = fs::read(path)?;
    let dims = header(path, &bytes, IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    (0..n)
        .map(|i| {
            let px = body[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&b| f64::from(b) / 255.0)
                .collect();
            Ok(Image::new(h, w, px)?.normalized())
        })
        .collect()
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let dims = header(path, &bytes, LABELS_MAGIC, 1)?;
    Ok(bytes[8..8 + dims[0]].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair as a training split.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    LabeledDataset::new(
        images,
        labels,
        Split::Train,
        images_path.display().to_string(),
    )
}

/// Writes images (each rescaled so its maximum maps to 255) and labels as
/// an IDX pair.
pub fn save_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w) = dataset.shape().unwrap_or((0, 0));
    let mut out = BufWriter::new(fs::File::create(images_path)?);
    out.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    for d in [dataset.len(), h, w] {
        out.write_u32::<BigEndian>(d as u32)?;
    }
    for img in &dataset.images {
        let max = img.pixels().iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let bytes: Vec<u8> = img
            .pixels()
            .iter()
            .map(|p| (p * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        out.write_all(&bytes)?;
    }
    out.flush()?;

    let mut out = BufWriter::new(fs::File::create(labels_path)?);
    out.write_u32::<BigEndian>(LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(dataset.len() as u32)?;
    for &l in &dataset.labels {
        if l > 255 {
            return Err(Error::InvalidValue(format!(
                "label {l} does not fit in a byte"
            )));
        }
        out.write_u8(l as u8)?;
    }
    out.flush()?;
    Ok(())
}
