//! 8-bit PNG in sRGB; decoded to linear on load, encoded from linear on
//! save.

use super::IoError;
use crate::img::Image;
use std::path::Path;

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn save_png_srgb(img: &Image, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let to8 = |v: f64| (linear_to_srgb(v) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([to8(p[0]), to8(p[1]), to8(p[2])]));
        }
    }
    buf.save(path).map_err(|e| IoError::Png(e.to_string()))
}

pub fn load_png_linear(path: impl AsRef<Path>) -> Result<Image, IoError> {
    let img = image::open(path).map_err(|e| IoError::Png(e.to_string()))?;
    let rgb = img.to_rgb8();
    let mut out = Image::new(rgb.width() as usize, rgb.height() as usize);
    for (x, y, p) in rgb.enumerate_pixels() {
        out.set_pixel(
            x as usize,
            y as usize,
            [
                srgb_to_linear(p[0] as f64 / 255.0),
                srgb_to_linear(p[1] as f64 / 255.0),
                srgb_to_linear(p[2] as f64 / 255.0),
            ],
        );
    }
    Ok(out)
}
