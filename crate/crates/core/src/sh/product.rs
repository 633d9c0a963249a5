//! Band-limited SH products via the precomputed triple-product tensor.

use super::triple::TripleProductTensor;
use super::vector::SHVector;
use super::ShError;

/// Band-limited projection of the pointwise product of two SH functions:
/// `(a * b)_i = sum_jk C_ijk a_j b_k`.
pub fn sh_product(
    a: &SHVector,
    b: &SHVector,
    tensor: &TripleProductTensor,
) -> Result<SHVector, ShError> {
    if a.band_count != b.band_count {
        return Err(ShError::BandMismatch(a.band_count, b.band_count));
    }
    if a.band_count != tensor.band_count {
        return Err(ShError::BandMismatch(a.band_count, tensor.band_count));
    }
    let mut out = SHVector::zeros(a.band_count);
    sh_product_into(&a.coeffs, &b.coeffs, tensor, &mut out.coeffs);
    Ok(out)
}

/// Slice-level product for hot loops. All slices must have length
/// `tensor.band_count^2`. The VJP of the product with respect to either
/// argument is this same contraction against the other argument (the
/// tensor is fully symmetric).
pub fn sh_product_into(a: &[f64], b: &[f64], tensor: &TripleProductTensor, out: &mut [f64]) {
    let n2 = tensor.band_count * tensor.band_count;
    debug_assert_eq!(a.len(), n2);
    debug_assert_eq!(b.len(), n2);
    debug_assert_eq!(out.len(), n2);
    for (i, plan) in tensor.plan.iter().enumerate() {
        let mut acc = 0.0;
        for e in plan {
            let (j, k) = (e.j as usize, e.k as usize);
            if j == k {
                // parenthesized so a*b == b*a holds bitwise
                acc += e.c * (a[j] * b[j]);
            } else {
                acc += e.c * (a[j] * b[k] + a[k] * b[j]);
            }
        }
        out[i] = acc;
    }
}

#[cfg(test)]
mod tests {
    use super::super::triple::triple_product_tensor;
    use super::super::vector::{reconstruct, SHVector};
    use super::*;
    use crate::math::{fibonacci_sphere, Direction};
    use approx::assert_relative_eq;

    #[test]
    fn product_with_one_is_identity() {
        let t = triple_product_tensor(8).unwrap();
        let one = SHVector::one(8);
        let mut b = SHVector::zeros(8);
        for i in 0..64 {
            b.coeffs[i] = ((i * 11 + 5) % 17) as f64 / 17.0 - 0.3;
        }
        let p = sh_product(&one, &b, &t).unwrap();
        for i in 0..64 {
            assert_relative_eq!(p.coeffs[i], b.coeffs[i], epsilon = 1e-9);
        }
        let p2 = sh_product(&one, &one, &t).unwrap();
        for i in 0..64 {
            assert_relative_eq!(p2.coeffs[i], one.coeffs[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn product_commutes_exactly() {
        let t = triple_product_tensor(6).unwrap();
        let mut a = SHVector::zeros(6);
        let mut b = SHVector::zeros(6);
        for i in 0..36 {
            a.coeffs[i] = ((i * 3 + 7) % 23) as f64 / 23.0 - 0.5;
            b.coeffs[i] = ((i * 19 + 2) % 29) as f64 / 29.0 - 0.5;
        }
        let ab = sh_product(&a, &b, &t).unwrap();
        let ba = sh_product(&b, &a, &t).unwrap();
        assert_eq!(ab.coeffs, ba.coeffs);
    }

    #[test]
    fn band_mismatch_errors() {
        let t = triple_product_tensor(4).unwrap();
        let a = SHVector::one(4);
        let b = SHVector::one(6);
        assert!(sh_product(&a, &b, &t).is_err());
    }

    #[test]
    fn product_matches_quadrature_projection() {
        // reconstruct(a*b, w) vs the pointwise product projected back to
        // band 4 by quadrature
        let bands = 4;
        let t = triple_product_tensor(bands).unwrap();
        let mut a = SHVector::zeros(bands);
        let mut b = SHVector::zeros(bands);
        for i in 0..16 {
            a.coeffs[i] = ((i * 13 + 1) % 9) as f64 / 9.0 - 0.4;
            b.coeffs[i] = ((i * 5 + 4) % 11) as f64 / 11.0 - 0.5;
        }
        let ab = sh_product(&a, &b, &t).unwrap();

        let dirs = fibonacci_sphere(400_000);
        let samples: Vec<_> = dirs
            .into_iter()
            .map(|d| {
                let w = Direction::from_unit(d);
                (w, reconstruct(&a, w) * reconstruct(&b, w))
            })
            .collect();
        let projected = crate::sh::project(&samples, bands).unwrap();
        for d in fibonacci_sphere(50) {
            let w = Direction::from_unit(d);
            let diff = (reconstruct(&ab, w) - reconstruct(&projected, w)).abs();
            assert!(diff < 1e-3, "diff {diff}");
        }
    }
}
