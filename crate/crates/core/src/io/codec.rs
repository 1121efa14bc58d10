use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use super::atomic_write;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"PNF1";

/// Rounds a `[0, 1]` value to 8 bits.
pub fn quantize_rgb8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { what, expected, got });
    }
    Ok(())
}

fn png_bytes<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    img: &ImageBuffer<P, Vec<S>>,
) -> Result<Vec<u8>>
where
    [S]: image::EncodableLayout,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Interleaved RGB floats to an 8-bit PNG.
pub fn encode_rgb8(width: u32, height: u32, rgb: &[f32]) -> Result<Vec<u8>> {
    check_len("rgb image", 3 * width as usize * height as usize, rgb.len())?;
    let data: Vec<u8> = rgb.iter().map(|v| quantize_rgb8(*v)).collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width, height, data).expect("length checked");
    png_bytes(&img)
}

/// Any 8-bit image to interleaved RGB floats in `[0, 1]` (`/255`).
pub fn decode_rgb8(bytes: &[u8]) -> Result<(u32, u32, Vec<f32>)> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()))
}

/// Single-channel mask, 0 or 255.
pub fn encode_mask(width: u32, height: u32, bits: &[bool]) -> Result<Vec<u8>> {
    check_len("mask image", width as usize * height as usize, bits.len())?;
    let data: Vec<u8> = bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
    let img: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width, height, data).expect("length checked");
    png_bytes(&img)
}

/// Pixels at or above mid-gray are set.
pub fn decode_mask(bytes: &[u8]) -> Result<(u32, u32, Vec<bool>)> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw().into_iter().map(|v| v >= 128).collect()))
}

/// Depth as 16-bit gray, `(d - near) / (far - near)` scaled to `0..=65535` and clamped.
pub fn encode_depth16(width: u32, height: u32, depth: &[f32], near: f64, far: f64) -> Result<Vec<u8>> {
    check_len("depth image", width as usize * height as usize, depth.len())?;
    if !(near < far) {
        return Err(Error::InvalidRange { near, far });
    }
    let data: Vec<u16> = depth
        .iter()
        .map(|d| (((*d as f64 - near) / (far - near)).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width, height, data).expect("length checked");
    png_bytes(&img)
}

pub fn decode_depth16(bytes: &[u8], near: f64, far: f64) -> Result<(u32, u32, Vec<f32>)> {
    if !(near < far) {
        return Err(Error::InvalidRange { near, far });
    }
    let img = image::load_from_memory(bytes)?.to_luma16();
    let (w, h) = img.dimensions();
    let d = img
        .into_raw()
        .into_iter()
        .map(|q| (near + (far - near) * q as f64 / 65535.0) as f32)
        .collect();
    Ok((w, h, d))
}

/// Raw feature image: magic, u32 height, width, channels, then row-major f32 values.
pub fn encode_features(width: u32, height: u32, channels: usize, data: &[f32]) -> Result<Vec<u8>> {
    check_len("feature image", width as usize * height as usize * channels, data.len())?;
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.write_u32::<LittleEndian>(height)?;
    out.write_u32::<LittleEndian>(width)?;
    out.write_u32::<LittleEndian>(channels as u32)?;
    for v in data {
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(out)
}

/// Returns `(width, height, channels, data)`.
pub fn decode_features(bytes: &[u8]) -> Result<(u32, u32, usize, Vec<f32>)> {
    let bad = |r: &str| Error::corrupt("feature image", r);
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let h = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let w = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let ch = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let n = (h as usize)
        .checked_mul(w as usize)
        .and_then(|v| v.checked_mul(ch))
        .ok_or_else(|| bad("header overflows"))?;
    let payload = bytes.len() - 16;
    if payload != 4 * n {
        return Err(bad(&format!(
            "header says {n} values ({} bytes), payload is {payload} bytes",
            4 * n
        )));
    }
    let mut data = vec![0f32; n];
    c.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated payload"))?;
    Ok((w, h, ch, data))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn save_rgb8(path: &Path, width: u32, height: u32, rgb: &[f32]) -> Result<()> {
    atomic_write(path, &encode_rgb8(width, height, rgb)?)
}

pub fn load_rgb8(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    decode_rgb8(&read(path)?)
}

pub fn save_mask(path: &Path, width: u32, height: u32, bits: &[bool]) -> Result<()> {
    atomic_write(path, &encode_mask(width, height, bits)?)
}

pub fn load_mask(path: &Path) -> Result<(u32, u32, Vec<bool>)> {
    decode_mask(&read(path)?)
}

pub fn save_depth16(path: &Path, width: u32, height: u32, depth: &[f32], near: f64, far: f64) -> Result<()> {
    atomic_write(path, &encode_depth16(width, height, depth, near, far)?)
}

pub fn load_depth16(path: &Path, near: f64, far: f64) -> Result<(u32, u32, Vec<f32>)> {
    decode_depth16(&read(path)?, near, far)
}

pub fn save_features(path: &Path, width: u32, height: u32, channels: usize, data: &[f32]) -> Result<()> {
    atomic_write(path, &encode_features(width, height, channels, data)?)
}

pub fn load_features(path: &Path) -> Result<(u32, u32, usize, Vec<f32>)> {
    decode_features(&read(path)?)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    read(path)
}
