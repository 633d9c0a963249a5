//! Linear-light RGB float image.

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// row-major RGB, `3 * width * height` values, linear radiance
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for p in 0..width * height {
            img.data[3 * p..3 * p + 3].copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn scaled(&self, s: f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Mean over pixels of the summed squared per-channel difference.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        let n = (self.width * self.height) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Bilinear sample with clamp-to-edge; `u, v` in [0,1] map to texel
    /// centers at the corners. Returns the color and the four
    /// (pixel index, weight) taps.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> ([f64; 3], [(usize, f64); 4]) {
        let x = (u.clamp(0.0, 1.0)) * (self.width - 1) as f64;
        let y = (v.clamp(0.0, 1.0)) * (self.height - 1) as f64;
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let taps = [
            (y0 * self.width + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.width + x1, fx * (1.0 - fy)),
            (y1 * self.width + x0, (1.0 - fx) * fy),
            (y1 * self.width + x1, fx * fy),
        ];
        let mut rgb = [0.0; 3];
        for (idx, w) in taps {
            for c in 0..3 {
                rgb[c] += self.data[3 * idx + c] * w;
            }
        }
        (rgb, taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_uniform_offset() {
        let a = Image::filled(4, 4, [0.2, 0.2, 0.2]);
        let b = Image::filled(4, 4, [0.3, 0.3, 0.3]);
        approx::assert_relative_eq!(a.mse(&b), 0.03, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_corners_hit_texels() {
        let mut img = Image::new(3, 2);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        img.set_pixel(2, 1, [0.0, 1.0, 0.0]);
        let (c00, _) = img.sample_bilinear(0.0, 0.0);
        assert_eq!(c00, [1.0, 0.0, 0.0]);
        let (c11, _) = img.sample_bilinear(1.0, 1.0);
        assert_eq!(c11, [0.0, 1.0, 0.0]);
        let (mid, taps) = img.sample_bilinear(0.25, 0.5);
        let wsum: f64 = taps.iter().map(|(_, w)| w).sum();
        approx::assert_relative_eq!(wsum, 1.0, epsilon = 1e-12);
        assert!(mid[0] > 0.0);
    }
}
