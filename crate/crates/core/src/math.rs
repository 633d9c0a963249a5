//! Small numeric helpers shared across the crate: unit directions,
//! quaternions with adjoints, Legendre recurrences, and quadrature rules.

use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

/// Unit vector on the sphere. Constructors normalize, so downstream code
/// can rely on `|d| == 1` to within 1e-9.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction(Vec3);

impl Direction {
    /// Normalizes `v`. Panics (debug builds only) on a near-zero vector.
    pub fn new(v: Vec3) -> Self {
        let n = v.norm();
        debug_assert!(n > 1e-12, "cannot normalize near-zero vector");
        Direction(v / n)
    }

    /// Wraps a vector that is already unit length. In debug builds a
    /// non-unit input is flagged; release builds normalize silently.
    pub fn from_unit(v: Vec3) -> Self {
        debug_assert!(
            (v.norm() - 1.0).abs() < 1e-9,
            "Direction::from_unit got non-unit vector (|v| = {})",
            v.norm()
        );
        Direction(v / v.norm())
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z))
    }

    pub const Z: Direction = Direction(Vector3::new(0.0, 0.0, 1.0));

    #[inline]
    pub fn as_vec(&self) -> Vec3 {
        self.0
    }
    #[inline]
    pub fn x(&self) -> f64 {
        self.0.x
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.0.y
    }
    #[inline]
    pub fn z(&self) -> f64 {
        self.0.z
    }
}

/// Jacobian-transpose of `v -> v/|v|` applied to a cotangent `d_unit`.
///
/// Returns the cotangent with respect to the unnormalized vector. The
/// radial component of `d_unit` is projected out, so callers may pass an
/// unconstrained gradient.
pub fn normalize_vjp(v: Vec3, d_unit: Vec3) -> Vec3 {
    let n = v.norm();
    let u = v / n;
    (d_unit - u * u.dot(&d_unit)) / n
}

// ---------------------------------------------------------------------------
// Quaternions. Layout [w, x, y, z]; rotation helpers carry hand-written
// adjoints because pose and deformation gradients flow through them.
// ---------------------------------------------------------------------------

pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (angle / 2.0).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conjugate(q: Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Angle of the relative rotation between two unit quaternions, in radians.
pub fn quat_angle_between(a: Quat, b: Quat) -> f64 {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]).abs();
    2.0 * dot.clamp(-1.0, 1.0).acos()
}

/// Rotates `v` by the unit quaternion `q`: `v + 2w(u x v) + 2 u x (u x v)`.
pub fn quat_rotate(q: Quat, v: Vec3) -> Vec3 {
    let u = Vector3::new(q[1], q[2], q[3]);
    let uv = u.cross(&v);
    v + (uv * q[0] + u.cross(&uv)) * 2.0
}

/// Adjoint of [`quat_rotate`] assuming `q` is unit length. Returns
/// cotangents `(d_q, d_v)` for the upstream cotangent `d_out`.
pub fn quat_rotate_vjp(q: Quat, v: Vec3, d_out: Vec3) -> (Quat, Vec3) {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    let uv = u.cross(&v);

    // d_w: out depends on w only through 2 w (u x v).
    let d_w = 2.0 * uv.dot(&d_out);
    // d_u from 2w(u x v): <d, du x v> = <v x d, du>
    let mut d_u = (v.cross(&d_out)) * (2.0 * w);
    // d_u from 2 u x (u x v): differential du -> du x (u x v) + u x (du x v);
    // <d, du x (u x v)> = <(u x v) x d, du> and
    // <d, u x (du x v)> = <du x v, d x u> = <du, v x (d x u)>.
    d_u += uv.cross(&d_out) * 2.0;
    d_u += v.cross(&(d_out.cross(&u))) * 2.0;

    // d_v: identity term plus <d, u x dv> = <dv, d x u> from 2w(u x v) and
    // <d, u x (u x dv)> = <dv, (d x u) x u> from the double cross.
    let dxu = d_out.cross(&u);
    let d_v = d_out + dxu * (2.0 * w) + dxu.cross(&u) * 2.0;

    ([d_w, d_u.x, d_u.y, d_u.z], d_v)
}

/// Adjoint of quaternion normalization: maps a cotangent with respect to
/// the unit quaternion back to the raw (unnormalized) one.
pub fn quat_normalize_vjp(q_raw: Quat, d_unit: Quat) -> Quat {
    let n = quat_norm(q_raw);
    let u = [q_raw[0] / n, q_raw[1] / n, q_raw[2] / n, q_raw[3] / n];
    let dot = u[0] * d_unit[0] + u[1] * d_unit[1] + u[2] * d_unit[2] + u[3] * d_unit[3];
    [
        (d_unit[0] - u[0] * dot) / n,
        (d_unit[1] - u[1] * dot) / n,
        (d_unit[2] - u[2] * dot) / n,
        (d_unit[3] - u[3] * dot) / n,
    ]
}

// ---------------------------------------------------------------------------
// Legendre polynomials
// ---------------------------------------------------------------------------

/// Evaluates P_0..P_lmax at `x` via the three-term recurrence.
pub fn legendre_all(lmax: usize, x: f64, out: &mut [f64]) {
    assert!(out.len() >= lmax + 1);
    out[0] = 1.0;
    if lmax == 0 {
        return;
    }
    out[1] = x;
    for l in 2..=lmax {
        let lf = l as f64;
        out[l] = ((2.0 * lf - 1.0) * x * out[l - 1] - (lf - 1.0) * out[l - 2]) / lf;
    }
}

/// `I_l(a) = \int_a^1 P_l(t) dt` for l = 0..lmax.
///
/// Uses `I_0 = 1 - a` and `I_l = (P_{l-1}(a) - P_{l+1}(a)) / (2l + 1)`.
pub fn legendre_cap_integrals(lmax: usize, a: f64, out: &mut [f64]) {
    assert!(out.len() >= lmax + 1);
    let mut p = vec![0.0; lmax + 2];
    legendre_all(lmax + 1, a, &mut p);
    out[0] = 1.0 - a;
    for l in 1..=lmax {
        out[l] = (p[l - 1] - p[l + 1]) / (2.0 * l as f64 + 1.0);
    }
}

// ---------------------------------------------------------------------------
// Quadrature rules
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n {
        // Chebyshev-like initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n and its derivative.
            let mut p0 = 1.0;
            let mut p1 = x;
            for l in 2..=n {
                let lf = l as f64;
                let p2 = ((2.0 * lf - 1.0) * x * p1 - (lf - 1.0) * p0) / lf;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(x), p0 = P_{n-1}(x)
            let dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let mut p0 = 1.0;
        let mut p1 = x;
        for l in 2..=n {
            let lf = l as f64;
            let p2 = ((2.0 * lf - 1.0) * x * p1 - (lf - 1.0) * p0) / lf;
            p0 = p1;
            p1 = p2;
        }
        let dp = nf * (x * p1 - p0) / (x * x - 1.0);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Deterministic, near-uniform point set on the sphere (Fibonacci lattice).
/// Suitable as an equal-weight quadrature rule with weight `4 pi / n`.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}
