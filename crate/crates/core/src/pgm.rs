//! Minimal binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patching::Image;

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes pixels in `[0, 1]` as 8-bit gray levels.
pub fn write_pgm8(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path, &bytes)
}

/// Min–max rescales `values` to 16-bit gray levels (big-endian samples).
pub fn write_pgm16(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = (((v - lo) / span) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_bytes(path, &bytes)
}

fn next_token(data: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

/// Reads an 8- or 16-bit P5 file into `[0, 1]` pixel values.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Input(format!("{}: {m}", path.display()));
    let mut pos = 0;
    if next_token(&data, &mut pos).as_deref() != Some("P5") {
        return Err(bad("not a binary PGM"));
    }
    let mut num = || -> Result<usize> {
        next_token(&data, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header"))
    };
    let width = num()?;
    let height = num()?;
    let maxval = num()?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("unsupported maxval"));
    }
    pos += 1;
    let n = width * height;
    let body = &data[pos.min(data.len())..];
    let pixels: Vec<f64> = if maxval < 256 {
        if body.len() < n {
            return Err(bad("truncated pixel data"));
        }
        body[..n].iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        if body.len() < 2 * n {
            return Err(bad("truncated pixel data"));
        }
        body[..2 * n]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    Image::new(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip() {
        let path = std::env::temp_dir().join(format!("maco-pgm8-{}.pgm", std::process::id()));
        let img = Image::new(2, 3, vec![0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0, 0.5 + 0.5 / 255.0, 1.0]).unwrap();
        write_pgm8(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        assert_eq!(back.pixels[..4], img.pixels[..4]);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn sixteen_bit_dims() {
        let path = std::env::temp_dir().join(format!("maco-pgm16-{}.pgm", std::process::id()));
        write_pgm16(&path, 4, 5, &(0..20).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.height, back.width), (4, 5));
        assert_eq!(back.pixels[0], 0.0);
        assert_eq!(back.pixels[19], 1.0);
        fs::remove_file(&path).ok();
    }
}
