//! PNG encode/decode for 8-bit RGB images and grayscale masks.

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use super::RgbImage;
use crate::mask::BinaryMask;

/// Decoded 8-bit pixels plus their channel count.
fn decode(bytes: &[u8]) -> Result<(usize, usize, ColorType, Vec<u8>), String> {
    let mut decoder = Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let stride = info.line_size;
    let packed = if stride == w * channels {
        buf
    } else {
        buf.chunks(stride).flat_map(|row| &row[..w * channels]).copied().collect()
    };
    Ok((w, h, info.color_type, packed))
}

/// Decodes any 8-bit PNG into RGB; gray is replicated and alpha dropped.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, String> {
    let (width, height, color, px) = decode(bytes)?;
    let data = match color {
        ColorType::Rgb => px,
        ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        ColorType::Indexed => return Err("unexpanded palette".into()),
    };
    Ok(RgbImage { width, height, data })
}

/// Decodes an 8-bit grayscale PNG; values are returned untouched.
pub fn decode_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let (w, h, color, px) = decode(bytes)?;
    if color != ColorType::Grayscale {
        return Err(format!("mask must be 8-bit grayscale, got {color:?}"));
    }
    Ok((w, h, px))
}

/// Decodes a mask PNG, rejecting values other than 0 and 255.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, String> {
    let (w, h, px) = decode_gray(bytes)?;
    if let Some(v) = px.iter().find(|&&v| v != 0 && v != 255) {
        return Err(format!("non-binary mask value {v}"));
    }
    BinaryMask::from_bytes(w, h, &px).ok_or_else(|| "length mismatch".into())
}

fn encode(width: usize, height: usize, color: ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(data).expect("in-memory PNG data");
    }
    out
}

pub fn encode_rgb(image: &RgbImage) -> Vec<u8> {
    encode(image.width, image.height, ColorType::Rgb, &image.data)
}

pub fn encode_gray(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    encode(width, height, ColorType::Grayscale, data)
}

/// White (255) tumor on black (0).
pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    encode_gray(mask.width(), mask.height(), &mask.to_gray())
}
