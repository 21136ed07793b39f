//! PNG encoding for images and masks.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, RgbImage};
use thiserror::Error;

use crate::raster::{BinaryMask, ImageRaster, RasterError};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub fn encode_rgb_png(img: &ImageRaster) -> Result<Vec<u8>, CodecError> {
    let buf = RgbImage::from_raw(img.width(), img.height(), img.pixels().to_vec())
        .expect("raster length is validated");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<ImageRaster, CodecError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageRaster::new(w, h, img.into_raw())?)
}

/// 8-bit single-channel PNG with arbitrary per-pixel values.
pub fn encode_gray_png(width: u32, height: u32, values: Vec<u8>) -> Result<Vec<u8>, CodecError> {
    let buf = GrayImage::from_raw(width, height, values).ok_or(RasterError::BufferLength {
        width,
        height,
        expected: width as usize * height as usize,
        actual: 0,
    })?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage, CodecError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8())
}

/// Mask interchange: 0 = background, 255 = foreground.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>, CodecError> {
    encode_gray_png(mask.width(), mask.height(), mask.to_gray_bytes())
}

/// Any nonzero value reads as foreground.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask, CodecError> {
    let img = decode_gray_png(bytes)?;
    let (w, h) = img.dimensions();
    Ok(BinaryMask::new(
        w,
        h,
        img.into_raw().into_iter().map(|v| v != 0).collect(),
    )?)
}
