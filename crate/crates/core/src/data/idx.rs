//! IDX image/label file pairs (big-endian header, one byte per pixel).

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::danil::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse(format!("{file}: truncated header at byte {at}")))
}

fn check_magic(bytes: &[u8], want: u32, file: &str) -> Result<()> {
    let got = be_u32(bytes, 0, file)?;
    if got != want {
        return Err(Error::Parse(format!("{file}: bad magic {got:#010x} at byte 0, expected {want:#010x}")));
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], start: usize, len: usize, file: &str) -> Result<&'a [u8]> {
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::Parse(format!("{file}: truncated at byte {}, header promises {end} bytes", bytes.len())));
    }
    if bytes.len() > end {
        return Err(Error::Parse(format!("{file}: unexpected trailing data at byte {end}")));
    }
    Ok(&bytes[start..end])
}

/// Parses an images/labels pair. Each image becomes a `(1, rows, cols)`
/// tensor with pixel bytes scaled by `1/255`.
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset> {
    check_magic(images, IDX_IMAGES_MAGIC, "images")?;
    check_magic(labels, IDX_LABELS_MAGIC, "labels")?;
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::Parse(format!("images file holds {n} images but labels file holds {n_labels} labels")));
    }
    let plane = rows * cols;
    let pixels = body(images, 16, n * plane, "images")?;
    let label_bytes = body(labels, 8, n, "labels")?;
    let mut inputs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for (i, &y) in label_bytes.iter().enumerate() {
        if y as usize >= classes {
            return Err(Error::Parse(format!(
                "labels: sample {i} at byte {} has label {y}, but there are {classes} classes",
                8 + i
            )));
        }
        ys.push(Label::new(classes, y as usize)?);
        let data = pixels[i * plane..(i + 1) * plane].iter().map(|&p| p as f64 / 255.0).collect();
        inputs.push(Tensor::new([1, rows, cols], data)?);
    }
    Dataset::new(inputs, ys, classes, Split::Full)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?, classes)
}

/// Encodes a dataset of `(1, H, W)` or `(H, W)` samples as an IDX pair.
/// Values are clamped to `[0, 1]` and rounded to the nearest byte.
pub fn encode_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match data.sample_shape() {
        None => (0, 0),
        Some(&[1, h, w]) | Some(&[h, w]) => (h, w),
        Some(s) => return Err(Error::shape("encode_idx", s, &[1, 0, 0])),
    };
    if data.classes() > 256 {
        return Err(Error::Domain(format!("{} classes do not fit a label byte", data.classes())));
    }
    let n = data.len() as u32;
    let mut images = Vec::with_capacity(16 + data.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for x in data.inputs() {
        images.extend(x.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(data.labels().iter().map(|l| l.index() as u8));
    Ok((images, labels))
}

pub fn write_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (img, lab) = encode_idx(data)?;
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = vec![
            0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, // header: 2 images of 2x2
            0, 255, 51, 102, // image 0
            255, 0, 0, 204, // image 1
        ];
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
        (images, labels)
    }

    #[test]
    fn handcrafted_pair() {
        let (img, lab) = fixture();
        let d = parse_idx(&img, &lab, 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.inputs()[0].shape(), &[1, 2, 2]);
        assert_eq!(d.inputs()[0].data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.inputs()[1].data(), &[1.0, 0.0, 0.0, 0.8]);
        assert_eq!(d.label_indices(), vec![1, 0]);
    }

    #[test]
    fn malformed_files() {
        let (img, lab) = fixture();
        let mut bad = img.clone();
        bad[3] = 4;
        assert!(matches!(parse_idx(&bad, &lab, 2), Err(Error::Parse(m)) if m.contains("byte 0")));
        assert!(matches!(parse_idx(&img[..20], &lab, 2), Err(Error::Parse(m)) if m.contains("truncated")));
        assert!(matches!(parse_idx(&img[..10], &lab, 2), Err(Error::Parse(_))));
        let err = parse_idx(&img, &lab, 1).unwrap_err().to_string();
        assert!(err.contains("sample 0") && err.contains("byte 8"), "{err}");
        let mut short = lab.clone();
        short[7] = 1;
        short.pop();
        assert!(matches!(parse_idx(&img, &short, 2), Err(Error::Parse(m)) if m.contains("2 images")));
    }

    #[test]
    fn encode_round_trip() {
        let (img, lab) = fixture();
        let d = parse_idx(&img, &lab, 2).unwrap();
        let (img2, lab2) = encode_idx(&d).unwrap();
        assert_eq!((img2, lab2), (img, lab));
    }
}
