//! Median-split BVH over triangles: ray intersection for the reference
//! tracer and closest-point / signed-distance queries for sphere fitting.

use super::TriangleMesh;
use crate::math::Vec3;

#[derive(Clone, Copy, Debug)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: `start..start+count` in `order`. Inner: `count == 0`, children
    /// at `left` and `left + 1`.
    left: u32,
    start: u32,
    count: u32,
}

pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    verts: Vec<Vec3>,
    tris: Vec<[u32; 3]>,
}

#[derive(Clone, Copy, Debug)]
pub struct RayHit {
    pub t: f64,
    pub triangle: u32,
    /// barycentrics of the two non-anchor corners
    pub u: f64,
    pub v: f64,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let tris = mesh.triangles.clone();
        let verts = mesh.vertices.clone();
        let centroids: Vec<Vec3> = tris
            .iter()
            .map(|t| {
                (verts[t[0] as usize] + verts[t[1] as usize] + verts[t[2] as usize]) / 3.0
            })
            .collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        nodes.push(Node {
            lo: Vec3::zeros(),
            hi: Vec3::zeros(),
            left: 0,
            start: 0,
            count: 0,
        });
        let mut bvh = Bvh {
            nodes,
            order: Vec::new(),
            verts,
            tris,
        };
        bvh.build_node(0, &mut order[..], 0, &centroids);
        bvh.order = order;
        bvh
    }

    fn tri_bounds(&self, ti: u32) -> (Vec3, Vec3) {
        let t = self.tris[ti as usize];
        let (a, b, c) = (
            self.verts[t[0] as usize],
            self.verts[t[1] as usize],
            self.verts[t[2] as usize],
        );
        (a.inf(&b).inf(&c), a.sup(&b).sup(&c))
    }

    fn build_node(&mut self, node: usize, order: &mut [u32], offset: usize, centroids: &[Vec3]) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &ti in order.iter() {
            let (tlo, thi) = self.tri_bounds(ti);
            lo = lo.inf(&tlo);
            hi = hi.sup(&thi);
        }
        self.nodes[node].lo = lo;
        self.nodes[node].hi = hi;
        if order.len() <= LEAF_SIZE {
            self.nodes[node].start = offset as u32;
            self.nodes[node].count = order.len() as u32;
            return;
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        order.sort_unstable_by(|a, b| {
            centroids[*a as usize][axis]
                .partial_cmp(&centroids[*b as usize][axis])
                .unwrap()
        });
        let mid = order.len() / 2;
        let left = self.nodes.len() as u32;
        self.nodes.push(Node {
            lo: Vec3::zeros(),
            hi: Vec3::zeros(),
            left: 0,
            start: 0,
            count: 0,
        });
        self.nodes.push(Node {
            lo: Vec3::zeros(),
            hi: Vec3::zeros(),
            left: 0,
            start: 0,
            count: 0,
        });
        self.nodes[node].left = left;
        self.nodes[node].count = 0;
        let (l, r) = order.split_at_mut(mid);
        self.build_node(left as usize, l, offset, centroids);
        self.build_node(left as usize + 1, r, offset + mid, centroids);
    }

    fn ray_box(lo: Vec3, hi: Vec3, origin: Vec3, inv_dir: Vec3, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let ta = (lo[a] - origin[a]) * inv_dir[a];
            let tb = (hi[a] - origin[a]) * inv_dir[a];
            let (near, far) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    fn ray_tri(&self, ti: u32, origin: Vec3, dir: Vec3) -> Option<(f64, f64, f64)> {
        let t = self.tris[ti as usize];
        let (a, b, c) = (
            self.verts[t[0] as usize],
            self.verts[t[1] as usize],
            self.verts[t[2] as usize],
        );
        let e1 = b - a;
        let e2 = c - a;
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let s = origin - a;
        let u = s.dot(&p) * inv;
        if !(-1e-9..=1.0 + 1e-9).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) * inv;
        if v < -1e-9 || u + v > 1.0 + 1e-9 {
            return None;
        }
        let t = e2.dot(&q) * inv;
        if t <= 1e-12 {
            return None;
        }
        Some((t, u, v))
    }

    /// Nearest intersection along `origin + t*dir` with `t` in
    /// `(0, t_max)`.
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<RayHit> {
        if self.tris.is_empty() {
            return None;
        }
        let inv_dir = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<RayHit> = None;
        let mut t_best = t_max;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = self.nodes[n];
            if !Self::ray_box(node.lo, node.hi, origin, inv_dir, t_best) {
                continue;
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    let ti = self.order[i as usize];
                    if let Some((t, u, v)) = self.ray_tri(ti, origin, dir) {
                        if t < t_best {
                            t_best = t;
                            best = Some(RayHit {
                                t,
                                triangle: ti,
                                u,
                                v,
                            });
                        }
                    }
                }
            } else {
                stack.push(node.left as usize);
                stack.push(node.left as usize + 1);
            }
        }
        best
    }

    /// Whether anything blocks the segment `(0, t_max)` along the ray.
    pub fn any_hit(&self, origin: Vec3, dir: Vec3, t_max: f64) -> bool {
        if self.tris.is_empty() {
            return false;
        }
        let inv_dir = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = self.nodes[n];
            if !Self::ray_box(node.lo, node.hi, origin, inv_dir, t_max) {
                continue;
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    if self
                        .ray_tri(self.order[i as usize], origin, dir)
                        .map(|(t, _, _)| t < t_max)
                        .unwrap_or(false)
                    {
                        return true;
                    }
                }
            } else {
                stack.push(node.left as usize);
                stack.push(node.left as usize + 1);
            }
        }
        false
    }

    fn closest_on_tri(&self, ti: u32, p: Vec3) -> Vec3 {
        let t = self.tris[ti as usize];
        closest_point_on_triangle(
            p,
            self.verts[t[0] as usize],
            self.verts[t[1] as usize],
            self.verts[t[2] as usize],
        )
    }

    fn box_dist2(lo: Vec3, hi: Vec3, p: Vec3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = (lo[a] - p[a]).max(0.0).max(p[a] - hi[a]);
            d2 += d * d;
        }
        d2
    }

    /// Closest surface point and owning triangle.
    pub fn closest_point(&self, p: Vec3) -> (Vec3, u32) {
        let mut best_d2 = f64::INFINITY;
        let mut best = (Vec3::zeros(), 0u32);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = self.nodes[n];
            if Self::box_dist2(node.lo, node.hi, p) >= best_d2 {
                continue;
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    let ti = self.order[i as usize];
                    let q = self.closest_on_tri(ti, p);
                    let d2 = (q - p).norm_squared();
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = (q, ti);
                    }
                }
            } else {
                // visit the nearer child last so it pops first
                let l = node.left as usize;
                let dl = Self::box_dist2(self.nodes[l].lo, self.nodes[l].hi, p);
                let dr = Self::box_dist2(self.nodes[l + 1].lo, self.nodes[l + 1].hi, p);
                if dl < dr {
                    stack.push(l + 1);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(l + 1);
                }
            }
        }
        best
    }

    /// Signed distance with the sign taken from the face normal of the
    /// closest triangle (positive outside).
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let (q, ti) = self.closest_point(p);
        let t = self.tris[ti as usize];
        let (a, b, c) = (
            self.verts[t[0] as usize],
            self.verts[t[1] as usize],
            self.verts[t[2] as usize],
        );
        let n = (b - a).cross(&(c - a));
        let d = (p - q).norm();
        if (p - q).dot(&n) >= 0.0 {
            d
        } else {
            -d
        }
    }
}

/// Standard closest-point-on-triangle via barycentric region tests.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives;
    use approx::assert_relative_eq;

    #[test]
    fn ray_hits_sphere_front() {
        let m = primitives::uv_sphere(1.0, 32, 24);
        let bvh = Bvh::build(&m);
        let hit = bvh
            .ray_hit(Vec3::new(0.0, -5.0, 0.0), Vec3::new(0.0, 1.0, 0.0), 100.0)
            .unwrap();
        assert_relative_eq!(hit.t, 4.0, epsilon = 0.02);
        assert!(bvh.any_hit(Vec3::new(0.0, -5.0, 0.0), Vec3::new(0.0, 1.0, 0.0), 100.0));
        assert!(!bvh.any_hit(Vec3::new(0.0, -5.0, 0.0), Vec3::new(0.0, -1.0, 0.0), 100.0));
    }

    #[test]
    fn signed_distance_sign_and_magnitude() {
        let m = primitives::uv_sphere(1.0, 48, 32);
        let bvh = Bvh::build(&m);
        let outside = bvh.signed_distance(Vec3::new(0.0, 0.0, 2.0));
        assert_relative_eq!(outside, 1.0, epsilon = 0.01);
        let inside = bvh.signed_distance(Vec3::new(0.0, 0.0, 0.5));
        assert_relative_eq!(inside, -0.5, epsilon = 0.01);
    }

    #[test]
    fn closest_point_on_triangle_regions() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        // interior projects straight down
        let q = closest_point_on_triangle(Vec3::new(0.25, 0.25, 1.0), a, b, c);
        assert_relative_eq!((q - Vec3::new(0.25, 0.25, 0.0)).norm(), 0.0, epsilon = 1e-12);
        // corner region
        let q = closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), a, b, c);
        assert_relative_eq!((q - a).norm(), 0.0, epsilon = 1e-12);
        // edge region
        let q = closest_point_on_triangle(Vec3::new(0.5, -1.0, 0.0), a, b, c);
        assert_relative_eq!((q - Vec3::new(0.5, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
    }
}
