//! Binary PGM (P5) and PPM (P6) files with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.hwc();
    if c != 3 {
        return Err(Error::shape("write_ppm", format!("{:?}", image.shape())));
    }
    let px: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    write_netpbm(path, "P6", w, h, &px)
}

/// Writes an `[H, W]` map with values in `[0, 1]`.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::shape("write_pgm", format!("{:?}", map.shape())));
    }
    let px: Vec<u8> = map.data().iter().map(|&v| to_u8(v)).collect();
    write_netpbm(path, "P5", map.shape()[1], map.shape()[0], &px)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(String, usize, usize, usize, usize)> {
    let bad = |msg: &str| Error::Dataset(format!("{}: {msg}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates header and raster
    i += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    Ok((fields[0].clone(), w, h, max, i))
}

/// Reads a P6 file into an `[H, W, 3]` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, _, start) = parse_header(&bytes, path)?;
    if magic != "P6" {
        return Err(Error::Dataset(format!("{}: not a P6 file", path.display())));
    }
    let raster = bytes
        .get(start..start + w * h * 3)
        .ok_or_else(|| Error::Dataset(format!("{}: truncated raster", path.display())))?;
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Reads a P5 file into an `[H, W]` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, _, start) = parse_header(&bytes, path)?;
    if magic != "P5" {
        return Err(Error::Dataset(format!("{}: not a P5 file", path.display())));
    }
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::Dataset(format!("{}: truncated raster", path.display())))?;
    Tensor::new(vec![h, w], raster.iter().map(|&b| b as f64 / 255.0).collect())
}
