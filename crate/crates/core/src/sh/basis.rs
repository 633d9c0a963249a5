//! Real SH basis evaluation with analytic Cartesian gradients.
//!
//! Values are computed from the semi-normalized associated Legendre
//! recurrence with the `sin^m(theta)` factor folded into the azimuthal
//! polynomials `C_m = Re[(x+iy)^m]`, `S_m = Im[(x+iy)^m]`, so everything is
//! a polynomial in (x, y, z) and well behaved at the poles. Gradients are
//! gradients of that polynomial extension; callers restrict to the sphere
//! by chaining through `normalize`.

use crate::math::Vec3;
use std::sync::OnceLock;

/// `y_0 = 1 / (2 sqrt(pi))`, the constant basis function.
pub const Y00: f64 = 0.28209479177387814;

const LMAX: usize = 16;

/// `scale[l][m] = K(l,m) * (sqrt(2) for m > 0)`, with
/// `K(l,m) = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!)`.
fn scales() -> &'static Vec<Vec<f64>> {
    static SCALES: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    SCALES.get_or_init(|| {
        let mut table = Vec::with_capacity(LMAX);
        for l in 0..LMAX {
            let mut row = Vec::with_capacity(l + 1);
            for m in 0..=l {
                // (l-m)!/(l+m)! = 1 / prod_{k=l-m+1}^{l+m} k
                let mut ratio = 1.0f64;
                for k in (l - m + 1)..=(l + m) {
                    ratio /= k as f64;
                }
                let k2 = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)) * ratio;
                let mut s = k2.sqrt();
                if m > 0 {
                    s *= std::f64::consts::SQRT_2;
                }
                row.push(s);
            }
            table.push(row);
        }
        table
    })
}

/// Evaluates all `bands^2` basis functions at `dir` into `out`.
/// `dir` must be unit length.
pub fn eval_basis(dir: Vec3, bands: usize, out: &mut [f64]) {
    basis_impl(dir, bands, out, None);
}

/// Evaluates basis values and their (unconstrained) Cartesian gradients.
pub fn eval_basis_grad(dir: Vec3, bands: usize, out: &mut [f64], grads: &mut [[f64; 3]]) {
    basis_impl(dir, bands, out, Some(grads));
}

fn basis_impl(dir: Vec3, bands: usize, out: &mut [f64], mut grads: Option<&mut [[f64; 3]]>) {
    assert!(bands >= 1 && bands <= LMAX);
    let n2 = bands * bands;
    assert!(out.len() >= n2);
    if let Some(g) = grads.as_deref() {
        assert!(g.len() >= n2);
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let scale = scales();

    // Azimuthal polynomials C_m, S_m and their holomorphic derivative data.
    let mut c = [0.0f64; LMAX];
    let mut s = [0.0f64; LMAX];
    c[0] = 1.0;
    s[0] = 0.0;
    for m in 1..bands {
        c[m] = x * c[m - 1] - y * s[m - 1];
        s[m] = x * s[m - 1] + y * c[m - 1];
    }

    let mut pmm = 1.0f64; // (2m-1)!!
    for m in 0..bands {
        if m > 0 {
            pmm *= (2 * m - 1) as f64;
        }
        // Walk l = m .. bands-1 with the two-term recurrence, carrying the
        // z-derivative alongside.
        let mut p_prev2 = 0.0; // P^m_{l-2}
        let mut dp_prev2 = 0.0;
        let mut p_prev = pmm; // P^m_l at l = m
        let mut dp_prev = 0.0;
        for l in m..bands {
            let (p, dp) = if l == m {
                (p_prev, dp_prev)
            } else if l == m + 1 {
                let f = (2 * m + 1) as f64;
                (f * z * pmm, f * pmm)
            } else {
                let a = (2 * l - 1) as f64;
                let b = (l + m - 1) as f64;
                let inv = 1.0 / (l - m) as f64;
                (
                    (a * z * p_prev - b * p_prev2) * inv,
                    (a * (p_prev + z * dp_prev) - b * dp_prev2) * inv,
                )
            };
            if l > m {
                p_prev2 = p_prev;
                dp_prev2 = dp_prev;
                p_prev = p;
                dp_prev = dp;
            }

            let sc = scale[l][m];
            let base = l * l + l;
            if m == 0 {
                out[base] = sc * p;
                if let Some(g) = grads.as_deref_mut() {
                    g[base] = [0.0, 0.0, sc * dp];
                }
            } else {
                let mf = m as f64;
                out[base + m] = sc * p * c[m];
                out[base - m] = sc * p * s[m];
                if let Some(g) = grads.as_deref_mut() {
                    g[base + m] = [
                        sc * p * mf * c[m - 1],
                        sc * p * (-mf) * s[m - 1],
                        sc * dp * c[m],
                    ];
                    g[base - m] = [
                        sc * p * mf * s[m - 1],
                        sc * p * mf * c[m - 1],
                        sc * dp * s[m],
                    ];
                }
            }
        }
    }
}
