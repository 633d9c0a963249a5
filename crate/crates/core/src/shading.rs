//! Diffuse SH shading: `B = a * (L . (V * H))` per color channel, with the
//! clamped-cosine lobe `H` re-oriented to the surface normal.

use crate::img::Image;
use crate::math::Direction;
use crate::sh::{
    rotate_zonal, sh_dot, sh_product, zonal_clamped_cosine, SHVector, ShError,
    TripleProductTensor,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShadingError {
    #[error("environment map must be 2:1 lat-long, got {0}x{1}")]
    BadAspect(usize, usize),
    #[error(transparent)]
    Sh(#[from] ShError),
}

/// Environment light as one SH vector per color channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvironmentLight {
    pub channels: [SHVector; 3],
}

impl EnvironmentLight {
    pub fn zeros(band_count: usize) -> Self {
        EnvironmentLight {
            channels: std::array::from_fn(|_| SHVector::zeros(band_count)),
        }
    }

    /// Uniform sky of the given per-channel radiance (DC-only light).
    pub fn ambient(rgb: [f64; 3], band_count: usize) -> Self {
        let mut light = Self::zeros(band_count);
        for c in 0..3 {
            light.channels[c].coeffs[0] = rgb[c] * 2.0 * std::f64::consts::PI.sqrt();
        }
        light
    }

    pub fn band_count(&self) -> usize {
        self.channels[0].band_count
    }

    /// Band-limited radiance arriving from `dir`.
    pub fn radiance(&self, dir: Direction) -> [f64; 3] {
        std::array::from_fn(|c| crate::sh::reconstruct(&self.channels[c], dir))
    }

    pub fn scaled(&self, s: f64) -> Self {
        EnvironmentLight {
            channels: std::array::from_fn(|c| self.channels[c].scaled(s)),
        }
    }

    /// Zero-pads or truncates to `band_count` bands.
    pub fn resized(&self, band_count: usize) -> Self {
        let mut out = Self::zeros(band_count);
        for c in 0..3 {
            let n = self.channels[c].coeffs.len().min(band_count * band_count);
            out.channels[c].coeffs[..n].copy_from_slice(&self.channels[c].coeffs[..n]);
        }
        out
    }
}

/// Projects a lat-long radiance map into SH with a solid-angle-weighted
/// Riemann sum (`weight = sin(theta) dtheta dphi` per pixel). Initialization
/// only; not differentiable by design.
pub fn project_envmap(envmap: &Image, band_count: usize) -> Result<EnvironmentLight, ShadingError> {
    if envmap.width != 2 * envmap.height {
        return Err(ShadingError::BadAspect(envmap.width, envmap.height));
    }
    let (w, h) = (envmap.width, envmap.height);
    let d_theta = std::f64::consts::PI / h as f64;
    let d_phi = 2.0 * std::f64::consts::PI / w as f64;
    let n2 = band_count * band_count;
    let mut coeffs = [vec![0.0; n2], vec![0.0; n2], vec![0.0; n2]];
    let mut basis = vec![0.0; n2];
    for y in 0..h {
        let theta = std::f64::consts::PI * (y as f64 + 0.5) / h as f64;
        let weight = theta.sin() * d_theta * d_phi;
        for x in 0..w {
            let phi = 2.0 * std::f64::consts::PI * (x as f64 + 0.5) / w as f64;
            let dir = crate::math::Vec3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            );
            crate::sh::eval_basis(dir, band_count, &mut basis);
            let p = envmap.pixel(x, y);
            for c in 0..3 {
                let s = p[c] * weight;
                for i in 0..n2 {
                    coeffs[c][i] += s * basis[i];
                }
            }
        }
    }
    Ok(EnvironmentLight {
        channels: coeffs.map(|c| SHVector {
            band_count,
            coeffs: c,
        }),
    })
}

/// Renders an SH light back into a lat-long map (for inspection and for
/// tracing against band-limited lights).
pub fn envmap_from_light(light: &EnvironmentLight, height: usize) -> Image {
    let (w, h) = (2 * height, height);
    let mut img = Image::new(w, h);
    for y in 0..h {
        let theta = std::f64::consts::PI * (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let phi = 2.0 * std::f64::consts::PI * (x as f64 + 0.5) / w as f64;
            let dir = Direction::from_xyz(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            );
            img.set_pixel(x, y, light.radiance(dir));
        }
    }
    img
}

/// The clamped-cosine (Lambertian transfer) lobe about `normal`.
pub fn cosine_lobe_sh(normal: Direction, band_count: usize) -> SHVector {
    rotate_zonal(&zonal_clamped_cosine(band_count), normal)
}

/// Outgoing radiance at a surface point:
/// per channel `albedo_c * (L_c . (V * H))`, clamped at zero.
pub fn radiance(
    albedo: [f64; 3],
    light: &EnvironmentLight,
    visibility: &SHVector,
    normal: Direction,
    tensor: &TripleProductTensor,
) -> Result<[f64; 3], ShError> {
    let h = cosine_lobe_sh(normal, visibility.band_count);
    let vh = sh_product(visibility, &h, tensor)?;
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (albedo[c] * sh_dot(&light.channels[c], &vh)?).max(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::fibonacci_sphere;
    use approx::assert_relative_eq;

    const TWO_SQRT_PI: f64 = 3.5449077018110318;

    #[test]
    fn constant_envmap_projects_to_dc() {
        let img = Image::filled(256, 128, [1.0, 1.0, 1.0]);
        let light = project_envmap(&img, 8).unwrap();
        for c in 0..3 {
            assert_relative_eq!(light.channels[c].coeffs[0], TWO_SQRT_PI, epsilon = 1e-3);
            for i in 1..64 {
                assert!(light.channels[c].coeffs[i].abs() < 1e-3);
            }
        }
    }

    #[test]
    fn cosine_envmap_matches_analytic_zonal() {
        let h = 128;
        let mut img = Image::new(2 * h, h);
        for y in 0..h {
            let theta = std::f64::consts::PI * (y as f64 + 0.5) / h as f64;
            let v = theta.cos().max(0.0);
            for x in 0..2 * h {
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let light = project_envmap(&img, 8).unwrap();
        let z = zonal_clamped_cosine(8);
        for l in 0..8 {
            assert_relative_eq!(
                light.channels[0].coeffs[l * l + l],
                z.coeffs[l],
                epsilon = 1e-3
            );
        }
        // non-zonal entries vanish
        for i in 0..64 {
            let l = (i as f64).sqrt().floor() as usize;
            if i != l * l + l {
                assert!(light.channels[0].coeffs[i].abs() < 1e-3);
            }
        }
    }

    #[test]
    fn envmap_projection_is_linear() {
        let mut img = Image::new(32, 16);
        for y in 0..16 {
            for x in 0..32 {
                img.set_pixel(x, y, [0.1 + x as f64 * 0.01, 0.3, y as f64 * 0.05]);
            }
        }
        let l1 = project_envmap(&img, 6).unwrap();
        let l2 = project_envmap(&img.scaled(2.0), 6).unwrap();
        for c in 0..3 {
            for i in 0..36 {
                assert_eq!(l2.channels[c].coeffs[i], 2.0 * l1.channels[c].coeffs[i]);
            }
        }
    }

    #[test]
    fn bad_aspect_errors() {
        let img = Image::new(10, 10);
        assert!(matches!(
            project_envmap(&img, 4),
            Err(ShadingError::BadAspect(10, 10))
        ));
    }

    #[test]
    fn cosine_lobe_at_pole_is_zonal() {
        let h = cosine_lobe_sh(Direction::Z, 8);
        let z = zonal_clamped_cosine(8).embed();
        for i in 0..64 {
            assert_relative_eq!(h.coeffs[i], z.coeffs[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn cosine_lobe_integral_is_pi() {
        let one = SHVector::one(8);
        for d in fibonacci_sphere(17) {
            let h = cosine_lobe_sh(Direction::from_unit(d), 8);
            assert_relative_eq!(
                sh_dot(&h, &one).unwrap(),
                std::f64::consts::PI,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn cosine_lobe_backside_ringing_is_bounded() {
        let h = cosine_lobe_sh(Direction::Z, 8);
        let v = crate::sh::reconstruct(&h, Direction::from_xyz(0.0, 0.0, -1.0));
        assert!(v.abs() < 0.06, "backside value {v}");
        // and the peak is close to 1
        let peak = crate::sh::reconstruct(&h, Direction::Z);
        assert!((peak - 1.0).abs() < 0.05, "peak {peak}");
    }

    #[test]
    fn radiance_examples() {
        let t = crate::sh::triple_product_tensor(8).unwrap();
        let light = EnvironmentLight::ambient([1.0, 1.0, 1.0], 8);
        let v = SHVector::one(8);
        // zero albedo -> black
        let b = radiance([0.0; 3], &light, &v, Direction::Z, &t).unwrap();
        assert_eq!(b, [0.0; 3]);
        // unit albedo, uniform sky of radiance 1 -> pi per channel
        let b = radiance([1.0; 3], &light, &v, Direction::from_xyz(0.3, -0.5, 0.8), &t).unwrap();
        for c in 0..3 {
            assert_relative_eq!(b[c], std::f64::consts::PI, epsilon = 1e-3);
        }
    }

    #[test]
    fn radiance_is_linear_in_light_and_albedo() {
        let t = crate::sh::triple_product_tensor(8).unwrap();
        let mut light = EnvironmentLight::ambient([0.8, 0.6, 0.4], 8);
        // add some structure
        light.channels[0].coeffs[3] = 0.2;
        light.channels[1].coeffs[6] = -0.1;
        let v = SHVector::one(8);
        let n = Direction::from_xyz(0.1, 0.2, 0.97);
        let b1 = radiance([0.5, 0.5, 0.5], &light, &v, n, &t).unwrap();
        let b2 = radiance([0.5, 0.5, 0.5], &light.scaled(2.0), &v, n, &t).unwrap();
        for c in 0..3 {
            assert_eq!(b2[c], 2.0 * b1[c]);
        }
        let b3 = radiance([1.0, 1.0, 1.0], &light, &v, n, &t).unwrap();
        for c in 0..3 {
            assert_eq!(b3[c], 2.0 * b1[c]);
        }
    }

    #[test]
    fn large_blocker_darkens_heavily() {
        let t = crate::sh::triple_product_tensor(8).unwrap();
        let light = EnvironmentLight::ambient([1.0; 3], 8);
        let n = Direction::Z;
        let unshadowed = radiance([1.0; 3], &light, &SHVector::one(8), n, &t).unwrap();
        // sphere just above the point, covering almost the whole upper
        // hemisphere
        let (v, _) = crate::visibility::visibility_sh_at(
            crate::math::Vec3::zeros(),
            crate::visibility::Blockers {
                centers: &[crate::math::Vec3::new(0.0, 0.0, 1.02)],
                radii: &[1.0],
            },
            &[],
            3.0,
            &t,
        )
        .unwrap();
        let shadowed = radiance([1.0; 3], &light, &v, n, &t).unwrap();
        assert!(
            shadowed[0] < 0.15 * unshadowed[0],
            "shadowed {} vs unshadowed {}",
            shadowed[0],
            unshadowed[0]
        );
    }

    #[test]
    fn di_mode_matches_classic_irradiance() {
        // V = 1: L . (1 * H) equals L . H to band-limit precision
        let t = crate::sh::triple_product_tensor(8).unwrap();
        let mut light = EnvironmentLight::ambient([0.7, 0.7, 0.7], 8);
        light.channels[2].coeffs[5] = 0.3;
        let v = SHVector::one(8);
        for d in fibonacci_sphere(9) {
            let n = Direction::from_unit(d);
            let h = cosine_lobe_sh(n, 8);
            let b = radiance([1.0; 3], &light, &v, n, &t).unwrap();
            for c in 0..3 {
                let classic = sh_dot(&light.channels[c], &h).unwrap().max(0.0);
                assert_relative_eq!(b[c], classic, epsilon = 1e-6);
            }
        }
    }
}
