//! SH exponentiation by scaling and squaring with an optimal-linear base
//! approximation.
//!
//! `sh_exp(v)` approximates the projection of `exp(v~(w))`. The DC part is
//! factored out exactly (it is a constant on the sphere); the residual is
//! halved until its L2 norm drops under a threshold, approximated linearly
//! as `exp(s~) ~= a * 1 + b * s~` with `(a, b)` looked up from a table fit
//! against cap-profile exponentials, then squared back up with SH products.
//! The whole pipeline is differentiable; the table uses linear
//! interpolation so the lookup has a well-defined derivative.

use super::basis::Y00;
use super::product::sh_product_into;
use super::triple::TripleProductTensor;
use super::vector::SHVector;
use super::zonal::zonal_log_blocker;
use super::ShError;
use crate::math::gauss_legendre;
use rand::Rng;
use rand::SeedableRng;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Scale the non-DC residual until its norm is below this.
const NORM_THRESHOLD: f64 = 1.0;
/// Cap on the number of squarings.
const MAX_SQUARINGS: u32 = 8;
const TABLE_KNOTS: usize = 1024;

/// Lookup table for the optimal-linear coefficients `(a, b)` as a function
/// of the (scaled) non-DC norm, with linear interpolation.
pub struct ExpTable {
    max_norm: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl ExpTable {
    /// `(a, b, da/dt, db/dt)` at norm `t`.
    pub fn lookup(&self, t: f64) -> (f64, f64, f64, f64) {
        let knots = self.a.len();
        let step = self.max_norm / (knots - 1) as f64;
        let x = (t / step).clamp(0.0, (knots - 1) as f64);
        let i0 = (x.floor() as usize).min(knots - 2);
        let frac = x - i0 as f64;
        let (a0, a1) = (self.a[i0], self.a[i0 + 1]);
        let (b0, b1) = (self.b[i0], self.b[i0 + 1]);
        (
            a0 + (a1 - a0) * frac,
            b0 + (b1 - b0) * frac,
            (a1 - a0) / step,
            (b1 - b0) / step,
        )
    }

    /// Fits the table for `band_count` bands.
    ///
    /// Training functions are zero-DC log-cap profiles (single caps and
    /// small sums), which is the family `sh_exp` sees in practice. For each
    /// knot norm `t`, `(a, b)` minimize the spherical L2 error of
    /// `a + b*g - exp(g)` over the training set scaled to norm `t`; the
    /// integrals are rotation invariant, so zonal profiles suffice and a 1-D
    /// Gauss-Legendre rule in cos(theta) evaluates them.
    fn build(band_count: usize) -> ExpTable {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed_ea11);
        let quad_n = 128;
        let (nodes, weights) = gauss_legendre(quad_n);

        // zonal profiles, zero DC, unit L2 coefficient norm
        let mut profiles: Vec<Vec<f64>> = Vec::new();
        let push_profile = |coeffs: Vec<f64>, profiles: &mut Vec<Vec<f64>>| {
            let mut c = coeffs;
            c[0] = 0.0;
            let n: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                for x in c.iter_mut() {
                    *x /= n;
                }
                profiles.push(c);
            }
        };
        for _ in 0..24 {
            let theta_c: f64 = rng.random_range(2.0f64..88.0).to_radians();
            let d = 1.0 / theta_c.sin();
            let (z, _) = zonal_log_blocker(d, 1.0, 3.0, band_count);
            push_profile(z.coeffs, &mut profiles);
        }
        for _ in 0..8 {
            // sums of two caps at different depths mimic multi-blocker sums
            let t1: f64 = rng.random_range(5.0f64..80.0).to_radians();
            let t2: f64 = rng.random_range(5.0f64..80.0).to_radians();
            let (z1, _) = zonal_log_blocker(1.0 / t1.sin(), 1.0, 3.0, band_count);
            let (z2, _) = zonal_log_blocker(1.0 / t2.sin(), 1.0, 3.0, band_count);
            let sum: Vec<f64> = z1.coeffs.iter().zip(&z2.coeffs).map(|(a, b)| a + b).collect();
            push_profile(sum, &mut profiles);
        }

        // Evaluate each unit profile on the quadrature grid once.
        // zonal reconstruction: f(t) = sum_l z_l K_l P_l(t)
        let evals: Vec<Vec<f64>> = profiles
            .iter()
            .map(|z| {
                nodes
                    .iter()
                    .map(|t| {
                        let mut p = vec![0.0; band_count];
                        crate::math::legendre_all(band_count - 1, *t, &mut p);
                        (0..band_count)
                            .map(|l| {
                                let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)).sqrt();
                                z[l] * k * p[l]
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect();

        let mut a = vec![0.0; TABLE_KNOTS];
        let mut b = vec![0.0; TABLE_KNOTS];
        let step = NORM_THRESHOLD / (TABLE_KNOTS - 1) as f64;
        for knot in 0..TABLE_KNOTS {
            let t = knot as f64 * step;
            if t < 1e-9 {
                a[knot] = 1.0;
                b[knot] = 1.0;
                continue;
            }
            // normal equations for min_{a,b} sum w (a + b g - e^g)^2
            let (mut sw, mut swg, mut swgg, mut swe, mut sweg) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ev in &evals {
                for (q, wq) in ev.iter().zip(&weights) {
                    let g = t * q;
                    let e = g.exp();
                    sw += wq;
                    swg += wq * g;
                    swgg += wq * g * g;
                    swe += wq * e;
                    sweg += wq * e * g;
                }
            }
            let det = sw * swgg - swg * swg;
            a[knot] = (swe * swgg - sweg * swg) / det;
            b[knot] = (sw * sweg - swg * swe) / det;
        }
        ExpTable {
            max_norm: NORM_THRESHOLD,
            a,
            b,
        }
    }
}

/// Shared table per band count.
pub fn exp_table(band_count: usize) -> Arc<ExpTable> {
    static REGISTRY: OnceLock<Mutex<HashMap<usize, Arc<ExpTable>>>> = OnceLock::new();
    let registry = REGISTRY.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = registry.lock().unwrap();
    map.entry(band_count)
        .or_insert_with(|| Arc::new(ExpTable::build(band_count)))
        .clone()
}

/// Forward context saved for [`sh_exp_vjp`].
pub struct SavedExp {
    k: u32,
    dc_factor: f64,
    norm: f64,
    b: f64,
    da_dt: f64,
    db_dt: f64,
    /// scaled zero-DC residual
    s: Vec<f64>,
    /// squaring chain q_0 .. q_k (q_0 is the linear base, q_k the result
    /// before the DC factor)
    chain: Vec<Vec<f64>>,
}

/// Band-limited approximation of `exp(v~)`. Returns the result and the
/// context needed for the adjoint.
pub fn sh_exp(v: &SHVector, tensor: &TripleProductTensor) -> Result<(SHVector, SavedExp), ShError> {
    if v.band_count != tensor.band_count {
        return Err(ShError::BandMismatch(v.band_count, tensor.band_count));
    }
    let table = exp_table(v.band_count);
    let n2 = v.len();
    let dc_factor = (v.coeffs[0] * Y00).exp();
    let mut s: Vec<f64> = v.coeffs.clone();
    s[0] = 0.0;
    let norm: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut k = 0u32;
    while norm / (1u64 << k) as f64 > NORM_THRESHOLD && k < MAX_SQUARINGS {
        k += 1;
    }
    let scale = 1.0 / (1u64 << k) as f64;
    for x in s.iter_mut() {
        *x *= scale;
    }
    let ts = norm * scale;
    let (a, b, da_dt, db_dt) = table.lookup(ts);

    let mut q = vec![0.0; n2];
    q[0] = a * 2.0 * std::f64::consts::PI.sqrt();
    for i in 1..n2 {
        q[i] = b * s[i];
    }
    let mut chain = Vec::with_capacity(k as usize + 1);
    chain.push(q.clone());
    let mut next = vec![0.0; n2];
    for _ in 0..k {
        sh_product_into(&q, &q, tensor, &mut next);
        std::mem::swap(&mut q, &mut next);
        chain.push(q.clone());
    }
    let out = SHVector {
        band_count: v.band_count,
        coeffs: q.iter().map(|x| x * dc_factor).collect(),
    };
    Ok((
        out,
        SavedExp {
            k,
            dc_factor,
            norm,
            b,
            da_dt,
            db_dt,
            s,
            chain,
        },
    ))
}

/// Adjoint of [`sh_exp`]: cotangent of the input given the cotangent of the
/// output. The integer scaling exponent is treated as locally constant.
pub fn sh_exp_vjp(saved: &SavedExp, tensor: &TripleProductTensor, d_out: &[f64]) -> Vec<f64> {
    let n2 = d_out.len();
    let q_final = saved.chain.last().unwrap();
    let d_dc: f64 = q_final.iter().zip(d_out).map(|(q, d)| q * d).sum();
    let mut dq: Vec<f64> = d_out.iter().map(|d| d * saved.dc_factor).collect();
    // back through the squarings: q_{i+1} = q_i * q_i
    let mut buf = vec![0.0; n2];
    for i in (0..saved.k as usize).rev() {
        sh_product_into(&dq, &saved.chain[i], tensor, &mut buf);
        for (d, b) in dq.iter_mut().zip(&buf) {
            *d = 2.0 * b;
        }
    }
    // base: q0 = a * ONE + b * s
    let d_a = dq[0] * 2.0 * std::f64::consts::PI.sqrt();
    let d_b: f64 = dq[1..]
        .iter()
        .zip(&saved.s[1..])
        .map(|(d, s)| d * s)
        .sum();
    let d_ts = d_a * saved.da_dt + d_b * saved.db_dt;

    let scale = 1.0 / (1u64 << saved.k) as f64;
    let mut d_v = vec![0.0; n2];
    // s_i = scale * vhat_i, ts = scale * |vhat|
    let norm_grad_scale = if saved.norm > 1e-12 {
        d_ts * scale / saved.norm
    } else {
        0.0
    };
    for i in 1..n2 {
        // d_vhat from the linear term plus from the norm in the lookup;
        // saved.s[i] = scale * vhat_i, so vhat_i = s_i / scale.
        d_v[i] = saved.b * dq[i] * scale + norm_grad_scale * (saved.s[i] / scale);
    }
    // DC path: out = exp(v0 * Y00) * q_k
    d_v[0] = d_dc * Y00 * saved.dc_factor;
    d_v
}
