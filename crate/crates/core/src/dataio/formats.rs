//! Image, flow, and depth file formats.
//!
//! - PNG: 8-bit RGB frames mapped to [0,1], plus single-channel label masks.
//! - FLO: Middlebury optical flow; magic float 202021.25, i32 LE width and
//!   height, interleaved (u,v) f32 LE rows.
//! - PFM: grayscale portable float map, negative scale = little-endian,
//!   rows stored bottom-to-top.
//!
//! PFM and FLO round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FLO_MAGIC: f32 = 202021.25;

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::parse(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

pub fn write_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("write_image expects 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = [
                (t.data()[p] * 255.0).round().clamp(0.0, 255.0) as u8,
                (t.data()[h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8,
                (t.data()[2 * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other.to_string()),
    })
}

/// 8-bit single-channel PNG holding class labels.
pub fn write_label_png(path: impl AsRef<Path>, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let path = path.as_ref();
    let img = image::GrayImage::from_raw(w as u32, h as u32, labels.to_vec())
        .ok_or_else(|| Error::Shape(format!("label buffer {} != {h}x{w}", labels.len())))?;
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other.to_string()),
    })
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize)> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::parse(path, format!("png decode failed: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

/// Reads a Middlebury .flo file into a [2,H,W] tensor (u then v planes).
pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::parse(path, "truncated .flo header"));
    }
    let magic = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != FLO_MAGIC {
        return Err(Error::parse(
            path,
            format!("bad .flo magic {magic}, expected {FLO_MAGIC} (\"PIEH\")"),
        ));
    }
    let w = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let h = i32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if w <= 0 || h <= 0 {
        return Err(Error::parse(path, format!("bad .flo dims {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + w * h * 2 * 4;
    if bytes.len() < need {
        return Err(Error::parse(
            path,
            format!(".flo payload truncated: {} bytes, need {need}", bytes.len()),
        ));
    }
    let mut data = vec![0.0f32; 2 * h * w];
    for p in 0..h * w {
        let off = 12 + p * 8;
        data[p] = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        data[h * w + p] =
            f32::from_le_bytes([bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]]);
    }
    Tensor::from_vec(vec![2, h, w], data)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = flow.chw()?;
    if c != 2 {
        return Err(Error::Shape(format!("write_flo expects [2,H,W], got {:?}", flow.shape())));
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    out.write_all(&FLO_MAGIC.to_le_bytes()).map_err(io)?;
    out.write_all(&(w as i32).to_le_bytes()).map_err(io)?;
    out.write_all(&(h as i32).to_le_bytes()).map_err(io)?;
    let u = flow.channel(0);
    let v = flow.channel(1);
    let mut buf = Vec::with_capacity(h * w * 8);
    for p in 0..h * w {
        buf.extend_from_slice(&u[p].to_le_bytes());
        buf.extend_from_slice(&v[p].to_le_bytes());
    }
    out.write_all(&buf).map_err(io)
}

/// Reads a grayscale PFM into a [1,H,W] tensor.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    if header.trim() != "Pf" {
        return Err(Error::parse(
            path,
            format!("bad PFM magic {:?}, expected \"Pf\" (grayscale)", header.trim()),
        ));
    }
    let mut dims = String::new();
    r.read_line(&mut dims).map_err(|e| Error::io(path, e))?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path, "bad PFM width"))?;
    let h: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path, "bad PFM height"))?;
    let mut scale_line = String::new();
    r.read_line(&mut scale_line).map_err(|e| Error::io(path, e))?;
    let scale: f32 = scale_line
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, "bad PFM scale line"))?;
    let little_endian = scale < 0.0;
    let mut payload = vec![0u8; w * h * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::parse(path, "PFM payload truncated"))?;
    let mut data = vec![0.0f32; h * w];
    // PFM rows run bottom-to-top.
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            let off = (row * w + x) * 4;
            let b = [payload[off], payload[off + 1], payload[off + 2], payload[off + 3]];
            data[y * w + x] = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Tensor::from_vec(vec![1, h, w], data)
}

pub fn write_pfm(path: impl AsRef<Path>, depth: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = depth.chw()?;
    if c != 1 {
        return Err(Error::Shape(format!("write_pfm expects [1,H,W], got {:?}", depth.shape())));
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    write!(out, "Pf\n{w} {h}\n-1.0\n").map_err(io)?;
    let plane = depth.channel(0);
    let mut buf = Vec::with_capacity(h * w * 4);
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            buf.extend_from_slice(&plane[y * w + x].to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)
}
