//! Binary PGM (`P5`) and lossless raw-float (`GTRAW01`) image files.

use std::fs;
use std::path::Path;

use crate::data::ImageGray;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 7] = b"GTRAW01";

/// Sample depth of a written PGM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

impl PgmDepth {
    fn maxval(self) -> u32 {
        match self {
            PgmDepth::Eight => 255,
            PgmDepth::Sixteen => 65535,
        }
    }
}

pub fn encode_pgm(img: &ImageGray, depth: PgmDepth) -> Vec<u8> {
    let maxval = depth.maxval();
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &p in img.pixels() {
        let q = (p.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        match depth {
            PgmDepth::Eight => out.push(q as u8),
            PgmDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<ImageGray> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(malformed("missing P magic"));
    }
    if bytes[1] != b'5' {
        return Err(Error::UnsupportedPgm(
            String::from_utf8_lossy(&bytes[..2]).into_owned(),
        ));
    }
    let mut at = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments before each header token
        loop {
            match bytes.get(at) {
                Some(b) if b.is_ascii_whitespace() => at += 1,
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ends early")),
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        if start == at {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .unwrap()
            .parse()
            .map_err(|_| malformed("header field out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(at).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after maxval"));
    }
    at += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(malformed("zero extent or maxval outside 1..=65535"));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width as usize * height as usize;
    let raster = &bytes[at..];
    if raster.len() < n * bps {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            what: format!("raster needs {} bytes, found {}", n * bps, raster.len()),
        });
    }
    let scale = 1.0 / maxval as f64;
    let pixels = (0..n)
        .map(|i| {
            let v = if bps == 1 {
                raster[i] as u32
            } else {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
            };
            (v.min(maxval) as f64 * scale).min(1.0)
        })
        .collect();
    ImageGray::new(height as usize, width as usize, pixels)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<ImageGray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn save_pgm(img: &ImageGray, path: impl AsRef<Path>, depth: PgmDepth) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img, depth)).map_err(|e| Error::io(path, e))
}

pub fn encode_rawf64(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 32 + 8 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    for e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_rawf64(bytes: &[u8], path: &Path) -> Result<Tensor<f64>> {
    if bytes.len() < 7 || &bytes[..7] != RAW_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 7 + 32 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            what: "extent header".into(),
        });
    }
    let mut shape = [0usize; 4];
    for (i, e) in shape.iter_mut().enumerate() {
        let o = 7 + 8 * i;
        *e = u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "extent product overflows".into(),
        })?;
    let payload = &bytes[39..];
    if payload.len() < 8 * n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            what: format!("payload needs {} bytes, found {}", 8 * n, payload.len()),
        });
    }
    if payload.len() > 8 * n {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "trailing bytes after payload".into(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn load_rawf64(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rawf64(&bytes, path)
}

pub fn save_rawf64(t: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_rawf64(t)).map_err(|e| Error::io(path, e))
}
