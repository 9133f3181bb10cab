//! PNG for RGB and masks, portable float maps for depth.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use fwd_tensor::{Real, Tensor};
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{FwdError, Result};

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

/// Quantizes `[H, W, 3]` in `[0, 1]` to 8-bit RGB.
pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let &[h, w, 3] = image.shape() else {
        return Err(FwdError::shape(format!("expected [H, W, 3], got {:?}", image.shape())));
    };
    let bytes = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size"))
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let img = to_rgb8(image)?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| FwdError::format("<memory>", "png", e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8], name: &str) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| FwdError::format(name, "png", e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as Real / 255.0).collect();
    Ok(Tensor::new([h as usize, w as usize, 3], data)?)
}

pub fn write_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_png(image)?;
    fs::write(path, bytes).map_err(|e| FwdError::io(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| FwdError::io(path, e))?;
    decode_png(&bytes, &file_name(path))
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(FwdError::shape(format!("mask of {} for {height}×{width}", mask.len())));
    }
    let img = GrayImage::from_raw(width as u32, height as u32, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
        .expect("buffer size");
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| FwdError::format(file_name(path), "png", e.to_string()))
}

/// Returns `(width, height, mask)`; any nonzero value is valid.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| FwdError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| FwdError::format(file_name(path), "png", e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|b| b > 0).collect()))
}

/// Single-channel little-endian PFM (`Pf`, negative scale). Rows are stored
/// bottom to top as the format requires.
pub fn encode_pfm(depth: &Tensor) -> Result<Vec<u8>> {
    let &[h, w] = depth.shape() else {
        return Err(FwdError::shape(format!("expected [H, W] depth, got {:?}", depth.shape())));
    };
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for &v in &depth.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], name: &str) -> Result<Tensor> {
    let err = |field: &str, msg: &str| FwdError::format(name, field, msg);
    // four whitespace-separated header tokens: magic, width, height, scale
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("header", "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "Pf" {
        return Err(err("magic", "expected single-channel Pf"));
    }
    let w: usize = tokens[1].parse().map_err(|_| err("width", "not an integer"))?;
    let h: usize = tokens[2].parse().map_err(|_| err("height", "not an integer"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| err("scale", "not a number"))?;
    // exactly one whitespace byte separates the header from the data
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h * 4 {
        return Err(err("data", &format!("expected {} bytes, found {}", w * h * 4, data.len())));
    }
    let mut out = vec![0.0; w * h];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (h - 1 - i / w, i % w);
        out[row * w + col] = v as Real;
    }
    Ok(Tensor::new([h, w], out)?)
}

pub fn write_pfm(path: &Path, depth: &Tensor) -> Result<()> {
    fs::write(path, encode_pfm(depth)?).map_err(|e| FwdError::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| FwdError::io(path, e))?;
    decode_pfm(&bytes, &file_name(path))
}
