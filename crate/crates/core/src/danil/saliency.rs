use super::ResponseMap;
use crate::error::{Error, Result};

/// How a `(C, H, W)` map is collapsed to one value per pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChannelReduce {
    /// Largest magnitude across channels.
    #[default]
    AbsMax,
    /// Signed mean across channels.
    Mean,
}

/// 8-bit single-channel image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayscaleImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Renders a response map as a grayscale image, min-max normalized so the
/// smallest value maps to 0 and the largest to 255. A constant map is all 0.
///
/// `(C, H, W)` maps are first collapsed across channels with `reduce`.
/// `(H, W)` maps, and `(d)` maps as a one-row image, have no channel axis
/// and are normalized with their sign intact.
pub fn export_response_map(map: &ResponseMap, reduce: ChannelReduce) -> Result<GrayscaleImage> {
    let t = &map.tensor;
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "export_response_map" });
    }
    let (height, width, values) = match *t.shape() {
        [d] => (1, d, t.data().to_vec()),
        [h, w] => (h, w, t.data().to_vec()),
        [c, h, w] => {
            let plane = h * w;
            let values = (0..plane)
                .map(|p| {
                    let channel = (0..c).map(|k| t.data()[k * plane + p]);
                    match reduce {
                        ChannelReduce::AbsMax => channel.map(f64::abs).fold(0.0, f64::max),
                        ChannelReduce::Mean => channel.sum::<f64>() / c as f64,
                    }
                })
                .collect();
            (h, w, values)
        }
        _ => return Err(Error::Domain(format!("cannot render a map of shape {:?}", t.shape()))),
    };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect();
    Ok(GrayscaleImage { width, height, pixels })
}
