//! Binary netpbm files (P6 8-bit RGB, P5 grey at 8 or 16 bits) through the
//! `image` crate's PNM codec.

use std::io::Cursor;

use image::codecs::pnm::{GraymapHeader, PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error(transparent)]
    Codec(#[from] image::ImageError),
    #[error("unsupported pixel layout {0:?}")]
    Layout(ColorType),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pixels {
    Rgb8(Vec<u8>),
    Gray8(Vec<u8>),
    Gray16(Vec<u16>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Pixels,
}

fn encoder(out: &mut Vec<u8>, subtype: PnmSubtype) -> PnmEncoder<&mut Vec<u8>> {
    PnmEncoder::new(out).with_subtype(subtype)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = Vec::new();
    encoder(&mut out, PnmSubtype::Pixmap(SampleEncoding::Binary))
        .encode(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)
        .expect("raster matches its dimensions");
    out
}

pub fn encode_pgm8(width: usize, height: usize, grey: &[u8]) -> Vec<u8> {
    assert_eq!(grey.len(), width * height);
    let mut out = Vec::new();
    encoder(&mut out, PnmSubtype::Graymap(SampleEncoding::Binary))
        .encode(grey, width as u32, height as u32, ExtendedColorType::L8)
        .expect("raster matches its dimensions");
    out
}

/// Samples are stored big-endian, as the format requires.
pub fn encode_pgm16(width: usize, height: usize, grey: &[u16]) -> Vec<u8> {
    assert_eq!(grey.len(), width * height);
    let (width, height) = (width as u32, height as u32);
    let header = GraymapHeader { encoding: SampleEncoding::Binary, width, height, maxwhite: u32::from(u16::MAX) };
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_header(header.into())
        .encode(grey, width, height, ExtendedColorType::L16)
        .expect("raster matches its dimensions");
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image, NetpbmError> {
    let decoder = PnmDecoder::new(Cursor::new(bytes))?;
    let (width, height) = decoder.dimensions();
    let color = decoder.color_type();
    let mut raster = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut raster)?;
    let pixels = match color {
        ColorType::Rgb8 => Pixels::Rgb8(raster),
        ColorType::L8 => Pixels::Gray8(raster),
        ColorType::L16 => Pixels::Gray16(raster.chunks_exact(2).map(|p| u16::from_ne_bytes([p[0], p[1]])).collect()),
        other => return Err(NetpbmError::Layout(other)),
    };
    Ok(Image { width: width as usize, height: height as usize, pixels })
}
