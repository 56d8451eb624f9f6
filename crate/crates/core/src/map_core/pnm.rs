//! Binary PGM (P5) and PPM (P6) codecs, 8-bit only.

use crate::error::{Error, Result};

pub fn encode_pgm(rows: usize, cols: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), rows * cols);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn encode_ppm(rows: usize, cols: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), rows * cols * 3);
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Returns `(rows, cols, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P5", 1)
}

/// Returns `(rows, cols, interleaved rgb)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P6", 3)
}

fn decode(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
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
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(&bytes[start..pos]);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != magic {
        return Err(Error::Format(format!(
            "expected {} image, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(fields[0])
        )));
    }
    let number = |f: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PNM {what}")))
    };
    let cols = number(fields[1], "width")?;
    let rows = number(fields[2], "height")?;
    if number(fields[3], "maxval")? != 255 {
        return Err(Error::Format("only 8-bit PNM is supported".into()));
    }
    let len = rows * cols * channels;
    let raster = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
    Ok((rows, cols, raster.to_vec()))
}
