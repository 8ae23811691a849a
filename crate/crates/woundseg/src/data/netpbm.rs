//! Binary netpbm codecs: P6 (8-bit RGB) for images, P5 (8-bit gray)
//! for class masks. Headers accept arbitrary whitespace and `#`
//! comments between tokens; only maxval 255 is supported.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

fn codec_err(detail: impl Into<String>) -> Error {
    Error::Codec(detail.into())
}

/// Pulls the next whitespace-delimited header token, skipping `#`
/// comments that run to end of line.
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
        return Err(codec_err("truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_dim(token: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| codec_err(format!("bad {what} {:?}", String::from_utf8_lossy(token))))
}

fn decode(bytes: &[u8], magic: &[u8], samples_per_pixel: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != magic {
        return Err(codec_err(format!("expected {} file", String::from_utf8_lossy(magic))));
    }
    let w = parse_dim(next_token(bytes, &mut pos)?, "width")?;
    let h = parse_dim(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(next_token(bytes, &mut pos)?, "maxval")?;
    if maxval != 255 {
        return Err(codec_err(format!("maxval {maxval} unsupported, need 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(codec_err("missing raster separator"));
    }
    pos += 1;
    let need = w * h * samples_per_pixel;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(codec_err(format!("raster holds {} bytes, need {need}", raster.len())));
    }
    Ok((w, h, raster[..need].to_vec()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_file(path: &Path, magic: &str, w: usize, h: usize, raster: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(raster)?;
    Ok(())
}

/// Reads a P6 image; returns `(width, height, rgb)` with `rgb` in
/// row-major interleaved order, `3 * width * height` bytes.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode(&read_file(path)?, b"P6", 3)
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(codec_err(format!("rgb length {} != 3*{w}*{h}", rgb.len())));
    }
    write_file(path, "P6", w, h, rgb)
}

/// Reads a P5 mask; returns `(width, height, gray)` with one byte per
/// pixel.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode(&read_file(path)?, b"P5", 1)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(codec_err(format!("gray length {} != {w}*{h}", gray.len())));
    }
    write_file(path, "P5", w, h, gray)
}
