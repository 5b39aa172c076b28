//! 8-bit grayscale and palette-indexed PNG encoding.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use super::taxonomy::PALETTE;
use crate::sce::LabelMask;
use crate::{Error, Result};

fn encode(width: usize, height: usize, data: &[u8], color: ColorType, palette: Option<Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(data).expect("in-memory PNG data");
        writer.finish().expect("in-memory PNG trailer");
    }
    out
}

pub fn encode_gray(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    encode(width, height, pixels, ColorType::Grayscale, None)
}

pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    let palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
    encode(mask.width, mask.height, &mask.labels, ColorType::Indexed, Some(palette))
}

/// Decodes raw 8-bit samples; palette indices are returned untranslated.
fn decode(bytes: &[u8], what: &Path) -> Result<(usize, usize, ColorType, Vec<u8>)> {
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", what.display()));
    let mut decoder = Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::Data(format!("{}: expected 8-bit samples", what.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit grayscale PNG as `(height, width, pixels)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, color, data) = decode(&read(path)?, path)?;
    if color != ColorType::Grayscale {
        return Err(Error::Data(format!("{}: expected grayscale, got {color:?}", path.display())));
    }
    Ok((h, w, data))
}

/// Reads a label mask stored as an indexed or grayscale 8-bit PNG.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let (w, h, color, data) = decode(&read(path)?, path)?;
    if !matches!(color, ColorType::Indexed | ColorType::Grayscale) {
        return Err(Error::Data(format!("{}: expected an indexed mask, got {color:?}", path.display())));
    }
    Ok(LabelMask::new(h, w, data))
}
