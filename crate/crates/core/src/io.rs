//! File formats: FGRD float grids, binary PGM (P5) images and masks, P6 PPM
//! output.
//!
//! FGRD layout: `b"FGRD"`, version byte `0x01`, height and width as u32
//! little-endian, then `height * width` f32 little-endian values in row-major
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::Grid;

pub const FGRD_MAGIC: &[u8; 4] = b"FGRD";
pub const FGRD_VERSION: u8 = 0x01;
const FGRD_HEADER: usize = 13;

pub fn encode_fgrd(g: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(FGRD_HEADER + 4 * g.len());
    write_fgrd_to(&mut out, g).expect("writing to a Vec cannot fail");
    out
}

pub fn write_fgrd_to<W: Write>(w: &mut W, g: &Grid) -> Result<()> {
    w.write_all(FGRD_MAGIC)?;
    w.write_all(&[FGRD_VERSION])?;
    w.write_all(&(g.height() as u32).to_le_bytes())?;
    w.write_all(&(g.width() as u32).to_le_bytes())?;
    for &v in g.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Decodes one FGRD block from the front of `bytes`, returning the grid and
/// the number of bytes consumed.
pub fn decode_fgrd_prefix(bytes: &[u8]) -> Result<(Grid, usize)> {
    if bytes.len() < FGRD_HEADER || &bytes[..4] != FGRD_MAGIC {
        return Err(Error::Format("missing FGRD magic".into()));
    }
    if bytes[4] != FGRD_VERSION {
        return Err(Error::Format(format!(
            "unsupported FGRD version {}",
            bytes[4]
        )));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::Format("FGRD dimensions overflow".into()))?;
    let end = FGRD_HEADER + 4 * n;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated FGRD: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let values = bytes[FGRD_HEADER..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Grid::new(h, w, values)?, end))
}

pub fn decode_fgrd(bytes: &[u8]) -> Result<Grid> {
    let (g, used) = decode_fgrd_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after FGRD payload",
            bytes.len() - used
        )));
    }
    Ok(g)
}

pub fn write_fgrd(path: impl AsRef<Path>, g: &Grid) -> Result<()> {
    fs::write(path, encode_fgrd(g))?;
    Ok(())
}

pub fn read_fgrd(path: impl AsRef<Path>) -> Result<Grid> {
    decode_fgrd(&fs::read(path)?)
}

/// Parses a binary P5 PGM with maxval ≤ 255. Values are scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0;
    let mut header = [0usize; 3];
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    for slot in header.iter_mut() {
        let tok = next_token(bytes, &mut pos)?;
        *slot = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PGM header field".into()))?;
    }
    let [w, h, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h;
    if bytes.len() < pos + n {
        return Err(Error::Format("truncated PGM raster".into()));
    }
    let values = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Grid::new(h, w, values)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("unexpected end of PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

/// Encodes values in `[0, 1]` (clamped) as an 8-bit P5 PGM.
pub fn encode_pgm(g: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(g.values().iter().map(|&v| to_byte(v)));
    out
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: impl AsRef<Path>, g: &Grid) -> Result<()> {
    fs::write(path, encode_pgm(g))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Grid> {
    decode_pgm(&fs::read(path)?)
}

/// Reads an image as either FGRD or PGM, detected from the leading bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<Grid> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(FGRD_MAGIC) {
        decode_fgrd(&bytes)
    } else {
        decode_pgm(&bytes)
    }
}

/// Reads a binary mask. PGM pixels binarize at > 127, FGRD values at > 0.5.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Grid> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(FGRD_MAGIC) {
        Ok(decode_fgrd(&bytes)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
    } else {
        let g = decode_pgm(&bytes)?;
        Ok(g.map(|v| if v * 255.0 > 127.5 { 1.0 } else { 0.0 }))
    }
}

/// Binary P6 PPM from per-pixel RGB triples in `[0, 1]`.
pub fn encode_ppm(height: usize, width: usize, rgb: &[[f64; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend(px.iter().map(|&c| to_byte(c)));
    }
    out
}
