//! PNG codecs for depth maps, images and masks.
//!
//! Depth uses the KITTI depth-completion convention: single-channel 16-bit
//! PNG, `meters = raw / 256`, `raw == 0` marks a missing measurement.
//! Images are 8-bit RGB. Masks are 8-bit grayscale with 0 for unsampled and
//! 255 for sampled pixels.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::depth::{DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::mask::SampleMask;

/// Largest encodable depth in meters (raw code 65535).
pub const KITTI_MAX_DEPTH: f64 = 65535.0 / 256.0;

fn encode(width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Format(format!("png finish: {e}")))?;
    }
    Ok(out)
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png image too large".into()))?;
    let mut data = vec![0; size];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

pub fn kitti_encode_depth(depth: &DepthMap) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(2 * depth.len());
    for (&v, &ok) in depth.values().iter().zip(depth.valid()) {
        let r = if ok {
            let q = (v as f64 * 256.0).round();
            if q > u16::MAX as f64 {
                return Err(Error::Range(format!(
                    "depth {v} m exceeds the encodable limit {KITTI_MAX_DEPTH} m"
                )));
            }
            if q < 1.0 {
                return Err(Error::Range(format!(
                    "valid depth {v} m rounds to the missing-value code 0"
                )));
            }
            q as u16
        } else {
            0
        };
        raw.extend_from_slice(&r.to_be_bytes());
    }
    encode(depth.width(), depth.height(), ColorType::Grayscale, BitDepth::Sixteen, &raw)
}

pub fn kitti_decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let img = decode(bytes)?;
    if img.color != ColorType::Grayscale || img.depth != BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "KITTI depth must be 16-bit single-channel, got {:?} {:?}",
            img.color, img.depth
        )));
    }
    let (values, valid) = img
        .data
        .chunks_exact(2)
        .map(|c| {
            let raw = u16::from_be_bytes([c[0], c[1]]);
            (raw as f32 / 256.0, raw > 0)
        })
        .unzip();
    DepthMap::from_parts(img.height, img.width, values, valid)
}

pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    kitti_decode_depth(&bytes).map_err(|e| with_path(e, path))
}

pub fn write_depth_png(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, kitti_encode_depth(depth)?).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB, rounding intensities to the nearest of 256 levels.
pub fn encode_rgb(image: &RgbImage) -> Result<Vec<u8>> {
    let n = image.height() * image.width();
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in [r[i], g[i], b[i]] {
            data.push((c * 255.0).round() as u8);
        }
    }
    encode(image.width(), image.height(), ColorType::Rgb, BitDepth::Eight, &data)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = decode(bytes)?;
    if img.color != ColorType::Rgb || img.depth != BitDepth::Eight {
        return Err(Error::Format(format!(
            "image must be 8-bit RGB, got {:?} {:?}",
            img.color, img.depth
        )));
    }
    let n = img.width * img.height;
    let mut planar = vec![0.0; 3 * n];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    RgbImage::from_planar(img.height, img.width, planar)
}

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes).map_err(|e| with_path(e, path))
}

pub fn write_rgb_png(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_rgb(image)?).map_err(|e| Error::io(path, e))
}

/// Hardened masks only; soft masks have no lossless 0/255 form.
pub fn encode_mask(mask: &SampleMask) -> Result<Vec<u8>> {
    if !mask.is_hardened() {
        return Err(Error::Format("only hardened masks can be written as PNG".into()));
    }
    let data: Vec<u8> = mask.values().iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
    encode(mask.width(), mask.height(), ColorType::Grayscale, BitDepth::Eight, &data)
}

/// Reads a 0/255 mask; the budget is set to the number of sampled pixels.
pub fn decode_mask(bytes: &[u8]) -> Result<SampleMask> {
    let img = decode(bytes)?;
    if img.color != ColorType::Grayscale || img.depth != BitDepth::Eight {
        return Err(Error::Format(format!(
            "mask must be 8-bit grayscale, got {:?} {:?}",
            img.color, img.depth
        )));
    }
    let mut values = Vec::with_capacity(img.data.len());
    for &b in &img.data {
        values.push(match b {
            0 => 0.0,
            255 => 1.0,
            other => return Err(Error::Format(format!("mask pixel {other} is neither 0 nor 255"))),
        });
    }
    let k = values.iter().filter(|&&v| v == 1.0).count();
    SampleMask::hardened(img.height, img.width, values, k)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}
