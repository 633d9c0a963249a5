//! Zonal-function machinery: re-orienting a zonal profile to an arbitrary
//! axis, the clamped-cosine lobe, and the log-blocker cap profile with its
//! analytic derivatives.

use super::basis::{eval_basis, eval_basis_grad};
use super::vector::{SHVector, ZonalVector};
use crate::math::{legendre_all, legendre_cap_integrals, Direction, Vec3};

/// Cap half-angle clamp for points on or inside a blocker sphere, degrees.
pub const THETA_MAX_DEG: f64 = 89.5;

fn band_scale(l: usize) -> f64 {
    (4.0 * std::f64::consts::PI / (2 * l + 1) as f64).sqrt()
}

/// Re-orients a zonal profile from +z to `dir`:
/// `out[l,m] = sqrt(4 pi / (2l+1)) * z_l * y_{l,m}(dir)`.
///
/// This is the only SH rotation the renderer needs; per-band norms are
/// preserved exactly.
pub fn rotate_zonal(z: &ZonalVector, dir: Direction) -> SHVector {
    let n = z.band_count();
    let mut out = SHVector::zeros(n);
    rotate_zonal_into(&z.coeffs, dir, &mut out.coeffs);
    out
}

/// Slice-level variant for hot loops; `out` must have length `n^2` where
/// `n = zonal.len()`.
pub fn rotate_zonal_into(zonal: &[f64], dir: Direction, out: &mut [f64]) {
    let n = zonal.len();
    debug_assert_eq!(out.len(), n * n);
    eval_basis(dir.as_vec(), n, out);
    for l in 0..n {
        let s = band_scale(l) * zonal[l];
        for i in (l * l)..((l + 1) * (l + 1)) {
            out[i] *= s;
        }
    }
}

/// Adjoint of [`rotate_zonal`]. Returns the cotangent of the zonal
/// coefficients and the unconstrained Cartesian cotangent of the axis;
/// callers chain the latter through their own normalization.
pub fn rotate_zonal_vjp(zonal: &[f64], dir: Direction, d_out: &[f64]) -> (Vec<f64>, Vec3) {
    let n = zonal.len();
    let n2 = n * n;
    debug_assert_eq!(d_out.len(), n2);
    let mut vals = vec![0.0; n2];
    let mut grads = vec![[0.0; 3]; n2];
    eval_basis_grad(dir.as_vec(), n, &mut vals, &mut grads);
    let mut d_zonal = vec![0.0; n];
    let mut d_dir = Vec3::zeros();
    for l in 0..n {
        let a = band_scale(l);
        let mut acc = 0.0;
        for i in (l * l)..((l + 1) * (l + 1)) {
            acc += vals[i] * d_out[i];
            let g = grads[i];
            let w = a * zonal[l] * d_out[i];
            d_dir.x += w * g[0];
            d_dir.y += w * g[1];
            d_dir.z += w * g[2];
        }
        d_zonal[l] = a * acc;
    }
    (d_zonal, d_dir)
}

/// Analytic zonal coefficients of `max(cos theta, 0)`.
///
/// `z_l = 2 pi K_l T_l` with `T_l = int_0^1 t P_l(t) dt`, evaluated from
/// the Legendre integral recurrence; odd bands >= 3 vanish identically.
pub fn zonal_clamped_cosine(band_count: usize) -> ZonalVector {
    let mut z = ZonalVector::zeros(band_count);
    // I_k(0) = int_0^1 P_k dt
    let mut cap0 = vec![0.0; band_count + 2];
    legendre_cap_integrals(band_count + 1, 0.0, &mut cap0);
    for l in 0..band_count {
        let t_l = match l {
            0 => 0.5,
            1 => 1.0 / 3.0,
            _ => -(cap0[l + 1] - cap0[l - 1]) / (2.0 * l as f64 + 1.0),
        };
        let k_l = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)).sqrt();
        z.coeffs[l] = 2.0 * std::f64::consts::PI * k_l * t_l;
    }
    z
}

/// Zonal coefficients of `log V'` for a sphere blocker seen from distance
/// `distance` with radius `radius`: the profile equal to `-epsilon` inside
/// the cap of half-angle `asin(radius/distance)` and 0 outside.
///
/// Returns the coefficients and whether the cap angle had to be clamped
/// (point on or inside the sphere, or within the arcsin singularity).
pub fn zonal_log_blocker(
    distance: f64,
    radius: f64,
    epsilon: f64,
    band_count: usize,
) -> (ZonalVector, bool) {
    let (z, _, _, clamped) = log_blocker_impl(distance, radius, epsilon, band_count, false);
    (z, clamped)
}

/// Derivatives of the log-blocker coefficients with respect to distance
/// and radius. Zero in the clamped branch.
pub struct LogBlockerGrad {
    pub d_distance: Vec<f64>,
    pub d_radius: Vec<f64>,
}

/// [`zonal_log_blocker`] plus its analytic derivatives.
pub fn zonal_log_blocker_grad(
    distance: f64,
    radius: f64,
    epsilon: f64,
    band_count: usize,
) -> (ZonalVector, LogBlockerGrad, bool) {
    let (z, dd, dr, clamped) = log_blocker_impl(distance, radius, epsilon, band_count, true);
    (
        z,
        LogBlockerGrad {
            d_distance: dd,
            d_radius: dr,
        },
        clamped,
    )
}

fn log_blocker_impl(
    distance: f64,
    radius: f64,
    epsilon: f64,
    band_count: usize,
    with_grad: bool,
) -> (ZonalVector, Vec<f64>, Vec<f64>, bool) {
    assert!(radius > 0.0, "blocker radius must be positive");
    let sin_max = (THETA_MAX_DEG.to_radians()).sin();
    let ratio = radius / distance;
    let clamped = !(ratio < sin_max) || distance <= 0.0;
    // a = cos(theta_c)
    let (a, da_dd, da_dr) = if clamped {
        ((THETA_MAX_DEG.to_radians()).cos(), 0.0, 0.0)
    } else {
        let a = (1.0 - ratio * ratio).sqrt();
        // a^2 = 1 - r^2/d^2  =>  da/dd = r^2/(a d^3), da/dr = -r/(a d^2)
        (
            a,
            radius * radius / (a * distance * distance * distance),
            -radius / (a * distance * distance),
        )
    };

    let n = band_count;
    let mut caps = vec![0.0; n + 1];
    legendre_cap_integrals(n, a, &mut caps);
    let mut z = ZonalVector::zeros(n);
    let mut dd = Vec::new();
    let mut dr = Vec::new();
    if with_grad {
        dd = vec![0.0; n];
        dr = vec![0.0; n];
    }
    let mut p = vec![0.0; n];
    if with_grad {
        legendre_all(n - 1, a, &mut p);
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    for l in 0..n {
        let k_l = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)).sqrt();
        z.coeffs[l] = -epsilon * two_pi * k_l * caps[l];
        if with_grad {
            // d/da int_a^1 P_l = -P_l(a)
            let dz_da = epsilon * two_pi * k_l * p[l];
            dd[l] = dz_da * da_dd;
            dr[l] = dz_da * da_dr;
        }
    }
    (z, dd, dr, clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{fibonacci_sphere, quat_from_axis_angle, quat_rotate};
    use crate::sh::vector::{project, reconstruct};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn clamped_cosine_low_bands() {
        let z = zonal_clamped_cosine(8);
        assert_relative_eq!(z.coeffs[0], std::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-12);
        assert_relative_eq!(
            z.coeffs[1],
            (std::f64::consts::PI / 3.0).sqrt(),
            epsilon = 1e-12
        );
        // odd bands >= 3 vanish
        for l in (3..8).step_by(2) {
            assert!(z.coeffs[l].abs() < 1e-10, "band {l}: {}", z.coeffs[l]);
        }
    }

    #[test]
    fn clamped_cosine_matches_quadrature() {
        let z = zonal_clamped_cosine(8);
        let samples: Vec<_> = fibonacci_sphere(400_000)
            .into_iter()
            .map(|d| (Direction::from_unit(d), d.z.max(0.0)))
            .collect();
        let projected = project(&samples, 8).unwrap();
        for l in 0..8 {
            assert_relative_eq!(z.coeffs[l], projected.coeffs[l * l + l], epsilon = 2e-3);
        }
    }

    #[test]
    fn rotate_zonal_identity_at_pole() {
        let z = zonal_clamped_cosine(8);
        let v = rotate_zonal(&z, Direction::Z);
        for l in 0..8usize {
            for m in -(l as i64)..=(l as i64) {
                let i = (l * l + l) as i64 + m;
                if m == 0 {
                    assert_relative_eq!(v.coeffs[i as usize], z.coeffs[l], epsilon = 1e-12);
                } else {
                    assert_relative_eq!(v.coeffs[i as usize], 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotate_zonal_preserves_band_norms() {
        let z = zonal_clamped_cosine(8);
        let dirs = fibonacci_sphere(100);
        for d in dirs {
            let v = rotate_zonal(&z, Direction::from_unit(d));
            for l in 0..8 {
                assert_relative_eq!(v.band_norm(l), z.coeffs[l].abs(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rotate_zonal_evaluates_profile_at_angle() {
        // f_rot(w) must equal the zonal profile at the angle between w and
        // the axis; equivalently reconstruct(rot, w) == reconstruct(embed,
        // R^-1 w) for the rotation R taking +z to the axis.
        let z = zonal_clamped_cosine(6);
        let axis = Direction::from_xyz(0.3, -0.5, 0.8);
        let v = rotate_zonal(&z, axis);
        let q = {
            // rotation taking +z to axis
            let zv = Vector3::new(0.0, 0.0, 1.0);
            let a = zv.cross(&axis.as_vec());
            let angle = zv.dot(&axis.as_vec()).clamp(-1.0, 1.0).acos();
            quat_from_axis_angle(a, angle)
        };
        let embedded = z.embed();
        for d in fibonacci_sphere(64) {
            let w = Direction::from_unit(d);
            let got = reconstruct(&v, w);
            // R^-1 w: rotate by conjugate
            let back = quat_rotate(crate::math::quat_conjugate(q), d);
            let expect = reconstruct(&embedded, Direction::new(back));
            assert_relative_eq!(got, expect, epsilon = 1e-6);
            // and against the 1-D profile directly
            let cos_angle = axis.as_vec().dot(&w.as_vec());
            assert_relative_eq!(got, z.eval_at_cos(cos_angle), epsilon = 1e-9);
        }
    }

    #[test]
    fn log_blocker_dc_matches_cap_area() {
        // d = 2r: theta_c = 30 deg; coeff0 = -eps * 2pi (1 - cos 30) * Y00
        let (z, clamped) = zonal_log_blocker(2.0, 1.0, 3.0, 8);
        assert!(!clamped);
        let expect = -3.0
            * 2.0
            * std::f64::consts::PI
            * (1.0 - (30.0f64).to_radians().cos())
            * super::super::Y00;
        assert_relative_eq!(z.coeffs[0], expect, epsilon = 1e-12);
        assert_relative_eq!(z.coeffs[0], -0.7124, epsilon = 2e-3);
    }

    #[test]
    fn log_blocker_vanishes_for_tiny_radius() {
        let (z, clamped) = zonal_log_blocker(1.0, 1e-9, 3.0, 8);
        assert!(!clamped);
        for c in &z.coeffs {
            assert!(c.abs() < 1e-8);
        }
    }

    #[test]
    fn log_blocker_inside_sphere_is_clamped() {
        let (_, clamped) = zonal_log_blocker(0.5, 1.0, 3.0, 8);
        assert!(clamped);
        let (_, g, clamped) = zonal_log_blocker_grad(0.5, 1.0, 3.0, 8);
        assert!(clamped);
        assert!(g.d_distance.iter().all(|d| *d == 0.0));
        assert!(g.d_radius.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn log_blocker_matches_sampled_projection() {
        // exact log V': -eps inside the cap about +z, 0 outside
        let (d, r, eps) = (2.0, 1.0, 3.0);
        let cos_c = (1.0f64 - (r / d) * (r / d)).sqrt();
        let samples: Vec<_> = fibonacci_sphere(1_000_000)
            .into_iter()
            .map(|w| {
                let v = if w.z >= cos_c { -eps } else { 0.0 };
                (Direction::from_unit(w), v)
            })
            .collect();
        let projected = project(&samples, 8).unwrap();
        let (z, _) = zonal_log_blocker(d, r, eps, 8);
        let full = rotate_zonal(&z, Direction::Z);
        for i in 0..64 {
            assert!(
                (full.coeffs[i] - projected.coeffs[i]).abs() < 5e-3,
                "coeff {i}: analytic {} vs sampled {}",
                full.coeffs[i],
                projected.coeffs[i]
            );
        }
    }

    #[test]
    fn log_blocker_grads_match_fd() {
        let (d0, r0, eps) = (2.3, 0.7, 3.0);
        let (_, g, _) = zonal_log_blocker_grad(d0, r0, eps, 8);
        let h = 1e-5;
        let (zp, _) = zonal_log_blocker(d0 + h, r0, eps, 8);
        let (zm, _) = zonal_log_blocker(d0 - h, r0, eps, 8);
        for l in 0..8 {
            let fd = (zp.coeffs[l] - zm.coeffs[l]) / (2.0 * h);
            assert_relative_eq!(g.d_distance[l], fd, epsilon = 1e-8, max_relative = 1e-4);
        }
        let (zp, _) = zonal_log_blocker(d0, r0 + h, eps, 8);
        let (zm, _) = zonal_log_blocker(d0, r0 - h, eps, 8);
        for l in 0..8 {
            let fd = (zp.coeffs[l] - zm.coeffs[l]) / (2.0 * h);
            assert_relative_eq!(g.d_radius[l], fd, epsilon = 1e-8, max_relative = 1e-4);
        }
    }

    #[test]
    fn rotate_zonal_vjp_matches_fd() {
        let z = zonal_clamped_cosine(6);
        let axis_raw = Vector3::new(0.4, -0.2, 0.9);
        let d_out: Vec<f64> = (0..36).map(|i| ((i * 13 + 5) % 7) as f64 / 7.0 - 0.4).collect();
        let (d_zonal, d_dir) = rotate_zonal_vjp(&z.coeffs, Direction::new(axis_raw), &d_out);
        // chain through normalization for the axis gradient
        let d_raw = crate::math::normalize_vjp(axis_raw, d_dir);
        let h = 1e-6;
        let f = |axis: Vector3<f64>, zc: &[f64]| -> f64 {
            let zv = ZonalVector { coeffs: zc.to_vec() };
            let v = rotate_zonal(&zv, Direction::new(axis));
            v.coeffs.iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        for i in 0..3 {
            let mut ap = axis_raw;
            let mut am = axis_raw;
            ap[i] += h;
            am[i] -= h;
            let fd = (f(ap, &z.coeffs) - f(am, &z.coeffs)) / (2.0 * h);
            assert_relative_eq!(d_raw[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
        for l in 0..6 {
            let mut zp = z.coeffs.clone();
            let mut zm = z.coeffs.clone();
            zp[l] += h;
            zm[l] -= h;
            let fd = (f(axis_raw, &zp) - f(axis_raw, &zm)) / (2.0 * h);
            assert_relative_eq!(d_zonal[l], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}
