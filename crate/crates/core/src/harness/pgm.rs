//! Binary greymap (P5) images with a maximum value of 255.

use crate::danil::GrayscaleImage;
use crate::error::{Error, Result};

pub fn encode_pgm(img: &GrayscaleImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayscaleImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse(format!("pgm: truncated header at byte {pos}")));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(Error::Parse("pgm: expected magic P5 at byte 0".into()));
    }
    let number = |(at, s): (usize, &str)| {
        s.parse::<usize>().map_err(|_| Error::Parse(format!("pgm: bad header field {s:?} at byte {at}")))
    };
    let (width, height, maxval) = (number(fields[1])?, number(fields[2])?, number(fields[3])?);
    if maxval != 255 {
        return Err(Error::Parse(format!("pgm: maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    if raster.len() != width * height {
        return Err(Error::Parse(format!(
            "pgm: raster at byte {} holds {} bytes, expected {}",
            pos + 1,
            raster.len(),
            width * height
        )));
    }
    Ok(GrayscaleImage { width, height, pixels: raster.to_vec() })
}
