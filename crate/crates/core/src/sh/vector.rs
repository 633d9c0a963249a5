//! Coefficient vectors and the projection / reconstruction / inner-product
//! operations over them.

use super::basis::eval_basis;
use super::ShError;
use crate::math::Direction;
use serde::{Deserialize, Serialize};

/// Coefficients of a spherical function in the real orthonormal SH basis,
/// bands `0..band_count`, flat index `i = l^2 + l + m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SHVector {
    pub band_count: usize,
    pub coeffs: Vec<f64>,
}

impl SHVector {
    pub fn zeros(band_count: usize) -> Self {
        SHVector {
            band_count,
            coeffs: vec![0.0; band_count * band_count],
        }
    }

    /// SH vector of the constant function 1 (DC = `2 sqrt(pi)`).
    pub fn one(band_count: usize) -> Self {
        let mut v = Self::zeros(band_count);
        v.coeffs[0] = 2.0 * std::f64::consts::PI.sqrt();
        v
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self, ShError> {
        let band_count = (coeffs.len() as f64).sqrt().round() as usize;
        if band_count * band_count != coeffs.len() || band_count == 0 {
            return Err(ShError::BandRange(band_count));
        }
        Ok(SHVector { band_count, coeffs })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> SHVector {
        SHVector {
            band_count: self.band_count,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &SHVector) -> Result<SHVector, ShError> {
        if self.band_count != other.band_count {
            return Err(ShError::BandMismatch(self.band_count, other.band_count));
        }
        Ok(SHVector {
            band_count: self.band_count,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Euclidean norm of the band-`l` slice.
    pub fn band_norm(&self, l: usize) -> f64 {
        let lo = l * l;
        let hi = (l + 1) * (l + 1);
        self.coeffs[lo..hi].iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Coefficients of a function symmetric about +z: one entry per band
/// (the m = 0 slot).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZonalVector {
    pub coeffs: Vec<f64>,
}

impl ZonalVector {
    pub fn zeros(band_count: usize) -> Self {
        ZonalVector {
            coeffs: vec![0.0; band_count],
        }
    }

    pub fn band_count(&self) -> usize {
        self.coeffs.len()
    }

    /// Embeds into a full SH vector (m = 0 slots).
    pub fn embed(&self) -> SHVector {
        let n = self.coeffs.len();
        let mut v = SHVector::zeros(n);
        for (l, c) in self.coeffs.iter().enumerate() {
            v.coeffs[l * l + l] = *c;
        }
        v
    }

    /// Evaluates the zonal profile at polar angle `theta` from its axis.
    pub fn eval_at_cos(&self, cos_theta: f64) -> f64 {
        let n = self.coeffs.len();
        let mut p = vec![0.0; n];
        crate::math::legendre_all(n - 1, cos_theta, &mut p);
        let mut acc = 0.0;
        for l in 0..n {
            let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)).sqrt();
            acc += self.coeffs[l] * k * p[l];
        }
        acc
    }
}

/// Monte Carlo projection from samples drawn uniformly on the sphere:
/// `f_i ~= (4 pi / N) sum f(w_s) y_i(w_s)`.
pub fn project(samples: &[(Direction, f64)], band_count: usize) -> Result<SHVector, ShError> {
    if samples.is_empty() {
        return Err(ShError::EmptySamples);
    }
    let n2 = band_count * band_count;
    let mut acc = vec![0.0; n2];
    let mut basis = vec![0.0; n2];
    for (dir, value) in samples {
        eval_basis(dir.as_vec(), band_count, &mut basis);
        for i in 0..n2 {
            acc[i] += value * basis[i];
        }
    }
    let w = 4.0 * std::f64::consts::PI / samples.len() as f64;
    for a in acc.iter_mut() {
        *a *= w;
    }
    Ok(SHVector {
        band_count,
        coeffs: acc,
    })
}

/// Projection from a weighted quadrature grid; weights must already carry
/// the solid-angle measure.
pub fn project_weighted(
    samples: &[(Direction, f64, f64)],
    band_count: usize,
) -> Result<SHVector, ShError> {
    if samples.is_empty() {
        return Err(ShError::EmptySamples);
    }
    let n2 = band_count * band_count;
    let mut acc = vec![0.0; n2];
    let mut basis = vec![0.0; n2];
    for (dir, value, weight) in samples {
        eval_basis(dir.as_vec(), band_count, &mut basis);
        for i in 0..n2 {
            acc[i] += value * weight * basis[i];
        }
    }
    Ok(SHVector {
        band_count,
        coeffs: acc,
    })
}

/// `f~(w) = sum_i f_i y_i(w)`.
pub fn reconstruct(v: &SHVector, dir: Direction) -> f64 {
    let n2 = v.len();
    let mut basis = vec![0.0; n2];
    eval_basis(dir.as_vec(), v.band_count, &mut basis);
    v.coeffs.iter().zip(&basis).map(|(c, y)| c * y).sum()
}

/// Integral of the product of two band-limited functions: the coefficient
/// dot product.
pub fn sh_dot(a: &SHVector, b: &SHVector) -> Result<f64, ShError> {
    if a.band_count != b.band_count {
        return Err(ShError::BandMismatch(a.band_count, b.band_count));
    }
    Ok(a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x * y).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::fibonacci_sphere;
    use approx::assert_relative_eq;

    const TWO_SQRT_PI: f64 = 3.5449077018110318;

    fn uniform_samples(n: usize, f: impl Fn(Direction) -> f64) -> Vec<(Direction, f64)> {
        fibonacci_sphere(n)
            .into_iter()
            .map(|d| {
                let dir = Direction::from_unit(d);
                (dir, f(dir))
            })
            .collect()
    }

    #[test]
    fn project_constant_one() {
        let samples = uniform_samples(20_000, |_| 1.0);
        let v = project(&samples, 4).unwrap();
        assert_relative_eq!(v.coeffs[0], TWO_SQRT_PI, epsilon = 1e-9);
        for c in &v.coeffs[1..] {
            assert!(c.abs() < 1e-3, "residual {c}");
        }
    }

    #[test]
    fn project_upper_hemisphere_indicator() {
        // coeff 0 = 2 pi * Y00 = sqrt(pi)
        let samples = uniform_samples(200_000, |d| if d.z() > 0.0 { 1.0 } else { 0.0 });
        let v = project(&samples, 4).unwrap();
        assert_relative_eq!(v.coeffs[0], std::f64::consts::PI.sqrt(), epsilon = 2e-3);
    }

    #[test]
    fn project_empty_errors() {
        assert!(matches!(project(&[], 4), Err(ShError::EmptySamples)));
    }

    #[test]
    fn reconstruct_constant() {
        let samples = uniform_samples(10_000, |_| 1.0);
        let v = project(&samples, 6).unwrap();
        for d in fibonacci_sphere(17) {
            assert_relative_eq!(
                reconstruct(&v, Direction::from_unit(d)),
                1.0,
                epsilon = 1e-3
            );
        }
    }

    #[test]
    fn reconstruct_dc_only() {
        let mut v = SHVector::zeros(8);
        v.coeffs[0] = 2.5;
        for d in fibonacci_sphere(9) {
            assert_relative_eq!(
                reconstruct(&v, Direction::from_unit(d)),
                2.5 * super::super::Y00,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn dot_of_ones_is_4pi() {
        let one = SHVector::one(8);
        assert_relative_eq!(
            sh_dot(&one, &one).unwrap(),
            4.0 * std::f64::consts::PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dot_with_zero_is_zero() {
        let one = SHVector::one(8);
        let zero = SHVector::zeros(8);
        assert_eq!(sh_dot(&one, &zero).unwrap(), 0.0);
    }

    #[test]
    fn dot_band_mismatch_errors() {
        let a = SHVector::one(8);
        let b = SHVector::one(4);
        assert!(matches!(sh_dot(&a, &b), Err(ShError::BandMismatch(8, 4))));
    }

    #[test]
    fn dot_matches_quadrature_of_product() {
        // random-ish vectors at n = 4, quadrature over the lattice
        let mut a = SHVector::zeros(4);
        let mut b = SHVector::zeros(4);
        for i in 0..16 {
            a.coeffs[i] = ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4;
            b.coeffs[i] = ((i * 5 + 1) % 13) as f64 / 13.0 - 0.5;
        }
        let dirs = fibonacci_sphere(200_000);
        let w = 4.0 * std::f64::consts::PI / dirs.len() as f64;
        let mut quad = 0.0;
        for d in dirs {
            let dir = Direction::from_unit(d);
            quad += w * reconstruct(&a, dir) * reconstruct(&b, dir);
        }
        let dot = sh_dot(&a, &b).unwrap();
        assert_relative_eq!(dot, quad, max_relative = 1e-2);
    }
}
