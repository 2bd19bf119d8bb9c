//! Binary PGM (P5) reading and writing.
//!
//! Samples wider than 8 bits are stored big-endian as the format requires.
//! `maxval` maps to bit depth: 255 -> 8, 4095 -> 12, 65535 -> 16.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{load_mask, load_raw_image, BinaryMask, ByteOrder, ImageGrid, RawLayout};

pub fn encode_pgm(image: &ImageGrid) -> Vec<u8> {
    let header = format!("P5\n{} {}\n{}\n", image.width(), image.height(), image.max_value());
    let mut out = header.into_bytes();
    if image.bit_depth() == 8 {
        out.extend(image.pixels().iter().map(|&p| p as u8));
    } else {
        for &p in image.pixels() {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::malformed("pgm", "missing P5 magic"));
    }
    let width = parse_num(next_token(bytes, &mut pos)?)?;
    let height = parse_num(next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(next_token(bytes, &mut pos)?)?;
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bit_depth = match maxval {
        255 => 8,
        4095 => 12,
        65535 => 16,
        other => return Err(Error::malformed("pgm", format!("unsupported maxval {other}"))),
    };
    let data = bytes.get(pos..).unwrap_or_default();
    if bit_depth == 8 {
        if data.len() != width * height {
            return Err(Error::RawSizeMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        return ImageGrid::new(width, height, 8, data.iter().map(|&b| u16::from(b)).collect());
    }
    let layout = RawLayout {
        width,
        height,
        byte_order: ByteOrder::BigEndian,
        bit_depth,
    };
    load_raw_image(data, &layout)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::malformed("pgm", "truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_num(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::malformed("pgm", format!("bad header field {:?}", String::from_utf8_lossy(tok))))
}

pub fn write_pgm(path: &Path, image: &ImageGrid) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Reads `.pgm` files as PGM and anything else as headerless raw with `layout`.
pub fn read_image(path: &Path, layout: &RawLayout) -> Result<ImageGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        decode_pgm(&bytes)
    } else {
        load_raw_image(&bytes, layout)
    }
}

/// Reads an 8-bit mask image and binarizes it at `threshold`.
pub fn read_mask(path: &Path, threshold: u16) -> Result<BinaryMask> {
    load_mask(&read_pgm(path)?, threshold)
}
