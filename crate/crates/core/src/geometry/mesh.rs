//! Triangle mesh storage and the differentiable vertex-normal computation.

use super::GeomError;
use crate::math::{normalize_vjp, Vec3};
use rand::Rng;

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex unit normals; kept in sync by [`TriangleMesh::recompute_normals`].
    pub normals: Vec<Vec3>,
    pub uvs: Option<Vec<[f64; 2]>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        let mut m = TriangleMesh {
            vertices,
            triangles,
            normals: Vec::new(),
            uvs: None,
        };
        m.recompute_normals();
        m
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn recompute_normals(&mut self) {
        self.normals = vertex_normals(&self.vertices, &self.triangles);
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Checks the structural invariants: indices in range, unit normals,
    /// no degenerate triangles.
    pub fn validate(&self) -> Result<(), GeomError> {
        if self.triangles.is_empty() {
            return Err(GeomError::EmptyMesh);
        }
        let n = self.vertices.len() as u32;
        for (ti, t) in self.triangles.iter().enumerate() {
            for &i in t {
                assert!(i < n, "triangle {ti} index {i} out of range");
            }
            assert!(
                self.triangle_area(ti) > 1e-12,
                "triangle {ti} is degenerate"
            );
        }
        for (i, nv) in self.normals.iter().enumerate() {
            assert!(
                (nv.norm() - 1.0).abs() < 1e-6,
                "normal {i} is not unit length"
            );
        }
        Ok(())
    }

    /// Area-weighted surface samples `(point, face normal)`, deterministic
    /// for a given RNG state.
    pub fn sample_surface<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<(Vec3, Vec3)> {
        let areas: Vec<f64> = (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .collect();
        let total: f64 = areas.iter().sum();
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a / total;
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let u: f64 = rng.random();
                let t = cdf.partition_point(|c| *c < u).min(self.triangles.len() - 1);
                let [i0, i1, i2] = self.triangles[t];
                let (a, b, c) = (
                    self.vertices[i0 as usize],
                    self.vertices[i1 as usize],
                    self.vertices[i2 as usize],
                );
                let (mut r1, r2): (f64, f64) = (rng.random(), rng.random());
                r1 = r1.sqrt();
                let p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
                let n = (b - a).cross(&(c - a)).normalize();
                (p, n)
            })
            .collect()
    }
}

/// Area-weighted per-vertex unit normals.
pub fn vertex_normals(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let (a, b, c) = (
            vertices[t[0] as usize],
            vertices[t[1] as usize],
            vertices[t[2] as usize],
        );
        let cross = (b - a).cross(&(c - a));
        acc[t[0] as usize] += cross;
        acc[t[1] as usize] += cross;
        acc[t[2] as usize] += cross;
    }
    acc.into_iter()
        .map(|v| {
            let n = v.norm();
            if n > 1e-16 {
                v / n
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            }
        })
        .collect()
}

/// Adjoint of [`vertex_normals`]: cotangent of the vertex positions given
/// the cotangent of the unit normals.
pub fn vertex_normals_vjp(
    vertices: &[Vec3],
    triangles: &[[u32; 3]],
    d_normals: &[Vec3],
) -> Vec<Vec3> {
    // recompute the unnormalized accumulators
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let (a, b, c) = (
            vertices[t[0] as usize],
            vertices[t[1] as usize],
            vertices[t[2] as usize],
        );
        let cross = (b - a).cross(&(c - a));
        for &i in t {
            acc[i as usize] += cross;
        }
    }
    let d_acc: Vec<Vec3> = acc
        .iter()
        .zip(d_normals)
        .map(|(a, d)| {
            if a.norm() > 1e-16 {
                normalize_vjp(*a, *d)
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let mut d_verts = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let (a, b, c) = (
            vertices[t[0] as usize],
            vertices[t[1] as usize],
            vertices[t[2] as usize],
        );
        let e1 = b - a;
        let e2 = c - a;
        let d_cross = d_acc[t[0] as usize] + d_acc[t[1] as usize] + d_acc[t[2] as usize];
        // <d, de1 x e2> = <de1, e2 x d>;  <d, e1 x de2> = <de2, d x e1>
        let d_e1 = e2.cross(&d_cross);
        let d_e2 = d_cross.cross(&e1);
        d_verts[t[0] as usize] -= d_e1 + d_e2;
        d_verts[t[1] as usize] += d_e1;
        d_verts[t[2] as usize] += d_e2;
    }
    d_verts
}
