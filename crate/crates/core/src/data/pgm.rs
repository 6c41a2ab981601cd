//! Binary greyscale PGM (`P5`) with 8-bit samples.

use std::path::Path;

use crate::error::{DataError, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    DataError::MalformedPgm {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
    .into()
}

/// Parses a `P5` image. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "header ended early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed(path, "non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(malformed(path, format!("magic `{}`, expected `P5`", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| malformed(path, format!("bad {what} `{s}`")))
    };
    let (width, height, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(path, format!("maxval {maxval} is not an 8-bit depth")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        malformed(path, format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos)))
    })?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster.iter().map(|&p| ((p as usize * 255 + maxval / 2) / maxval).min(255) as u8).collect()
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn encode(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, image: &GrayImage) -> Result<()> {
    std::fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 32, 128, 200, 255],
        };
        let bytes = encode(&img);
        assert_eq!(decode(&bytes, Path::new("x.pgm")).unwrap(), img);
    }

    #[test]
    fn header_comments_and_low_maxval() {
        let mut bytes = b"P5 # comment\n2 1\n# another\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 15]);
        let img = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.pixels, vec![0, 255]);
    }

    #[test]
    fn malformed_headers() {
        for bad in [&b"P2\n1 1\n255\n\0"[..], b"P5\n1 1\n", b"P5\n2 2\n255\n\0\0", b"P5\n1 1\n65535\n\0\0", b"P5\n0 1\n255\n"] {
            assert!(matches!(
                decode(bad, Path::new("bad.pgm")),
                Err(Error::Data(DataError::MalformedPgm { .. }))
            ));
        }
    }
}
