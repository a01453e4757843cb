use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DataError, PatchRecord};
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 50;
pub const CHANNELS: usize = 3;

/// Handling of border patches smaller than 50×50.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Reject,
    /// Replicate the last row/column out to 50×50.
    Edge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `[3, 50, 50]`, channel-major, values in `[0, 1]`.
    pub pixels: Tensor,
    pub record: PatchRecord,
    /// Id of the original this patch was augmented from.
    pub augmented_from: Option<String>,
}

impl Patch {
    pub fn label(&self) -> u8 {
        self.record.label
    }

    /// The 7500-long flat vector, for dense-only baselines.
    pub fn flatten(&self) -> Vec<f32> {
        self.pixels.data().to_vec()
    }
}

fn to_tensor(img: &RgbImage, name: &str, pad: PadMode) -> Result<Tensor, DataError> {
    let (w, h) = img.dimensions();
    let size = PATCH_SIZE as u32;
    let fits = w == size && h == size;
    let paddable = pad == PadMode::Edge && w <= size && h <= size && w > 0 && h > 0;
    if !fits && !paddable {
        return Err(DataError::Size {
            path: name.to_string(),
            width: w,
            height: h,
            expected: size,
        });
    }
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut data = vec![0f32; CHANNELS * plane];
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let px = img.get_pixel((x as u32).min(w - 1), (y as u32).min(h - 1));
            for c in 0..CHANNELS {
                data[c * plane + y * PATCH_SIZE + x] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![CHANNELS, PATCH_SIZE, PATCH_SIZE], data).expect("fixed shape"))
}

/// Decodes an in-memory image into a `[3, 50, 50]` tensor scaled to `[0, 1]`.
pub fn decode_bytes(bytes: &[u8], name: &str, pad: PadMode) -> Result<Tensor, DataError> {
    let img = image::load_from_memory(bytes).map_err(|e| DataError::Decode {
        path: name.to_string(),
        message: e.to_string(),
    })?;
    to_tensor(&img.to_rgb8(), name, pad)
}

pub fn decode_and_normalize(path: &Path, pad: PadMode) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_bytes(&bytes, &path.display().to_string(), pad)
}

pub fn load_patch(record: &PatchRecord, pad: PadMode) -> Result<Patch, DataError> {
    Ok(Patch {
        pixels: decode_and_normalize(&record.source_path, pad)?,
        record: record.clone(),
        augmented_from: None,
    })
}

/// Encodes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn encode_png(pixels: &Tensor) -> Vec<u8> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let plane = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (pixels.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_of(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn scales_to_unit_range_channel_major() {
        let bytes = png_of(50, 50, |x, _| if x == 0 { [255, 0, 51] } else { [0, 0, 0] });
        let t = decode_bytes(&bytes, "t", PadMode::Reject).unwrap();
        assert_eq!(t.shape(), &[3, 50, 50]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[2500], 0.0);
        assert_eq!(t.data()[5000], 0.2);
        assert_eq!(t.data()[1], 0.0);
    }

    #[test]
    fn wrong_size_and_edge_padding() {
        let bytes = png_of(40, 50, |x, _| [x as u8, 0, 0]);
        assert!(matches!(decode_bytes(&bytes, "b", PadMode::Reject), Err(DataError::Size { width: 40, .. })));
        let t = decode_bytes(&bytes, "b", PadMode::Edge).unwrap();
        assert_eq!(t.data()[49], 39.0 / 255.0);
        assert!(matches!(decode_bytes(&png_of(60, 60, |_, _| [0; 3]), "c", PadMode::Edge), Err(DataError::Size { .. })));
    }

    #[test]
    fn garbage_is_a_decode_error() {
        assert!(matches!(decode_bytes(b"hello, not an image", "x.txt", PadMode::Reject), Err(DataError::Decode { .. })));
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let t = decode_bytes(&png_of(50, 50, |x, y| [(x * 5) as u8, (y * 3) as u8, 7]), "p", PadMode::Reject).unwrap();
        let again = decode_bytes(&encode_png(&t), "q", PadMode::Reject).unwrap();
        assert_eq!(t, again);
    }
}
