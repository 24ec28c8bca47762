//! Binary PGM/PPM.
//!
//! Depth: `P5`, maxval 65535, big-endian millimeters, 0 = missing.
//! Labels and masks: `P5`, maxval 255; label 255 is [`IGNORE`](crate::IGNORE).
//! Color: `P6`, maxval 255, scaled to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{is_valid_depth, DepthMap};
use crate::tensor::{LabelMap, Mask, Shape, Tensor};

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path, magic: &str, maxval: usize) -> Result<Header> {
    let mut pos = 0usize;
    let mut next_token = |what: &str| -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => {
                    return Err(Error::format(
                        path,
                        format!("truncated header at byte {pos}: missing {what}"),
                    ))
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let found = next_token("magic")?;
    if found != magic {
        return Err(Error::format(
            path,
            format!("expected magic {magic}, found {found:?}"),
        ));
    }
    let mut number = |what: &str| -> Result<usize> {
        let tok = next_token(what)?;
        tok.parse()
            .map_err(|_| Error::format(path, format!("bad {what} {tok:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let found_max = number("maxval")?;
    if found_max != maxval {
        return Err(Error::format(
            path,
            format!("expected maxval {maxval}, found {found_max}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image size"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(
            path,
            format!("truncated header at byte {pos}: missing raster separator"),
        ));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos + 1,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, bytes_per_pixel: usize, path: &Path) -> Result<&'a [u8]> {
    let need = h.width * h.height * bytes_per_pixel;
    let have = bytes.len().saturating_sub(h.data_offset);
    if have < need {
        return Err(Error::format(
            path,
            format!(
                "truncated at byte {}: raster needs {need} bytes, found {have}",
                bytes.len()
            ),
        ));
    }
    Ok(&bytes[h.data_offset..h.data_offset + need])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, magic: &str, width: usize, height: usize, maxval: usize, raster: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(raster);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, path, "P5", 65535)?;
    let data = raster(&bytes, &h, 2, path)?
        .chunks_exact(2)
        .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 1000.0)
        .collect();
    DepthMap::from_vec(h.height, h.width, data)
}

/// Writes millimeter depth; missing and out-of-range depths become 0.
pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut raster = Vec::with_capacity(depth.data().len() * 2);
    for &z in depth.data() {
        let mm = if is_valid_depth(z) {
            (z * 1000.0).round().min(65535.0) as u16
        } else {
            0
        };
        raster.extend_from_slice(&mm.to_be_bytes());
    }
    write(path, "P5", depth.width(), depth.height(), 65535, &raster)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, path, "P5", 255)?;
    LabelMap::from_vec(h.height, h.width, raster(&bytes, &h, 1, path)?.to_vec())
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write(path, "P5", labels.width(), labels.height(), 255, labels.data())
}

/// Mask as an 8-bit image, 255 = valid.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raster: Vec<u8> = mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    write(path, "P5", mask.width(), mask.height(), 255, &raster)
}

/// Nonzero pixels are valid.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, path, "P5", 255)?;
    let data = raster(&bytes, &h, 1, path)?.iter().map(|&b| b != 0).collect();
    Mask::from_vec(h.height, h.width, data)
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let h = parse_header(&bytes, path, "P6", 255)?;
    let raw = raster(&bytes, &h, 3, path)?;
    let plane = h.width * h.height;
    let mut t = Tensor::zeros(Shape::new(3, h.height, h.width));
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data_mut()[c * plane + p] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(t)
}

/// Writes a 3-channel tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn save_rgb(path: &Path, rgb: &Tensor) -> Result<()> {
    if rgb.channels() != 3 {
        return Err(Error::Shape(format!("rgb needs 3 channels, got {}", rgb.channels())));
    }
    let plane = rgb.height() * rgb.width();
    let mut raster = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            let v = rgb.data()[c * plane + p];
            raster.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write(path, "P6", rgb.width(), rgb.height(), 255, &raster)
}
