//! Portable float map (PFM), color variant: `PF`, dimensions, scale line
//! (negative = little endian), then rows bottom-to-top as f32 triples.

use super::IoError;
use crate::img::Image;
use std::io::{Read, Write};
use std::path::Path;

pub fn save_pfm(img: &Image, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "PF\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            for c in 0..3 {
                f.write_all(&(p[c] as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Image, IoError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    // header: four whitespace-separated tokens, one whitespace byte after
    // the last one
    fn token(raw: &[u8], pos: &mut usize) -> Result<String, IoError> {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(IoError::Pfm("truncated header".into()));
        }
        let t = String::from_utf8_lossy(&raw[start..*pos]).into_owned();
        *pos += 1;
        Ok(t)
    }
    let mut pos = 0usize;
    let magic = token(&raw, &mut pos)?;
    if magic != "PF" {
        return Err(IoError::Pfm(format!("unsupported magic {magic:?}")));
    }
    let width: usize = token(&raw, &mut pos)?
        .parse()
        .map_err(|_| IoError::Pfm("bad width".into()))?;
    let height: usize = token(&raw, &mut pos)?
        .parse()
        .map_err(|_| IoError::Pfm("bad height".into()))?;
    let scale: f64 = token(&raw, &mut pos)?
        .parse()
        .map_err(|_| IoError::Pfm("bad scale".into()))?;
    let little_endian = scale < 0.0;
    let expected = width * height * 3 * 4;
    if raw.len() < pos + expected {
        return Err(IoError::Pfm("truncated pixel data".into()));
    }
    let mut img = Image::new(width, height);
    let mut off = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            let mut rgb = [0.0f64; 3];
            for c in rgb.iter_mut() {
                let b: [u8; 4] = raw[off..off + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                *c = v as f64 * scale.abs();
                off += 4;
            }
            img.set_pixel(x, y, rgb);
        }
    }
    Ok(img)
}
