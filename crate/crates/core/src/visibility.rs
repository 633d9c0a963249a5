//! Per-point illumination visibility from the sphere set: each blocker's
//! softened indicator `V'` (e^-eps inside its cap, 1 outside) is projected
//! to SH in log space, the logs are summed, and the sum is exponentiated
//! back with [`crate::sh::sh_exp`].

use crate::geometry::{EmbeddedGraph, SphereSet, TriangleMesh};
use crate::math::{normalize_vjp, Direction, Vec3};
use crate::sh::{
    rotate_zonal_into, rotate_zonal_vjp, sh_exp, sh_exp_vjp, zonal_log_blocker,
    zonal_log_blocker_grad, SHVector, SavedExp, ShError, TripleProductTensor,
};

#[derive(Clone, Copy, Debug)]
pub struct VisibilityConfig {
    /// blocked directions carry `e^-epsilon` instead of 0 so the log stays
    /// finite; e^-3 ~= 0.05
    pub epsilon: f64,
    /// self-blocking suppression: spheres whose surface lies within
    /// `tau * radius` of a vertex are excluded at that vertex
    pub tau: f64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        VisibilityConfig {
            epsilon: 3.0,
            tau: 0.3,
        }
    }
}

/// Blocker geometry referenced by the visibility queries.
#[derive(Clone, Copy)]
pub struct Blockers<'a> {
    pub centers: &'a [Vec3],
    pub radii: &'a [f64],
}

impl<'a> Blockers<'a> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }
    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Log-space SH vector of one sphere blocker seen from `x`:
/// the zonal cap profile rotated toward the sphere center.
pub fn log_blocker_sh(
    x: Vec3,
    center: Vec3,
    radius: f64,
    epsilon: f64,
    bands: usize,
) -> (SHVector, bool) {
    let delta = center - x;
    let (zl, clamped) = zonal_log_blocker(delta.norm(), radius, epsilon, bands);
    let mut out = SHVector::zeros(bands);
    rotate_zonal_into(&zl.coeffs, Direction::new(delta), &mut out.coeffs);
    (out, clamped)
}

/// Context saved by [`visibility_sh_at`] for the adjoint pass.
pub struct SavedVisibility {
    exp: SavedExp,
    /// spheres whose caps were angle-clamped (point inside or grazing)
    pub clamped: usize,
}

/// Visibility SH vector at point `x` against all non-excluded blockers:
/// `sh_exp( sum_i log_blocker_i )`.
///
/// Per-sphere log vectors are summed by pairwise tree reduction over a
/// canonical (value-sorted) order, so the result is exactly invariant to
/// blocker permutation and deterministic under any parallel schedule.
pub fn visibility_sh_at(
    x: Vec3,
    blockers: Blockers,
    excluded: &[u32],
    epsilon: f64,
    tensor: &TripleProductTensor,
) -> Result<(SHVector, SavedVisibility), ShError> {
    let bands = tensor.band_count;
    let n2 = bands * bands;
    let mut logs: Vec<(SortKey, Vec<f64>)> = Vec::with_capacity(blockers.len());
    let mut clamped = 0usize;
    let mut buf = vec![0.0; n2];
    for i in 0..blockers.len() {
        if excluded.binary_search(&(i as u32)).is_ok() {
            continue;
        }
        let center = blockers.centers[i];
        let radius = blockers.radii[i];
        let delta = center - x;
        let (zl, was_clamped) = zonal_log_blocker(delta.norm(), radius, epsilon, bands);
        if was_clamped {
            clamped += 1;
        }
        rotate_zonal_into(&zl.coeffs, Direction::new(delta), &mut buf);
        logs.push((SortKey::new(center, radius), buf.clone()));
    }
    logs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut vectors: Vec<Vec<f64>> = logs.into_iter().map(|(_, v)| v).collect();
    // pairwise tree reduction
    while vectors.len() > 1 {
        let mut next = Vec::with_capacity(vectors.len().div_ceil(2));
        let mut it = vectors.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        vectors = next;
    }
    let sum = SHVector {
        band_count: bands,
        coeffs: vectors.pop().unwrap_or_else(|| vec![0.0; n2]),
    };
    let (v, exp) = sh_exp(&sum, tensor)?;
    Ok((v, SavedVisibility { exp, clamped }))
}

/// Total-order sort key making the reduction order a function of blocker
/// values, not array position.
#[derive(Clone, Copy, PartialEq)]
struct SortKey([f64; 4]);

impl SortKey {
    fn new(c: Vec3, r: f64) -> Self {
        SortKey([c.x, c.y, c.z, r])
    }
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.partial_cmp(b).unwrap() {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    }
}

/// Adjoint of [`visibility_sh_at`]. Accumulates into the caller's per-
/// sphere gradient buffers (full blocker indexing) and returns the point
/// cotangent.
pub fn visibility_vjp_at(
    x: Vec3,
    blockers: Blockers,
    excluded: &[u32],
    epsilon: f64,
    saved: &SavedVisibility,
    tensor: &TripleProductTensor,
    d_out: &[f64],
    d_centers: &mut [Vec3],
    d_radii: &mut [f64],
) -> Vec3 {
    let bands = tensor.band_count;
    let d_sum = sh_exp_vjp(&saved.exp, tensor, d_out);
    let mut d_x = Vec3::zeros();
    for i in 0..blockers.len() {
        if excluded.binary_search(&(i as u32)).is_ok() {
            continue;
        }
        let center = blockers.centers[i];
        let radius = blockers.radii[i];
        let delta = center - x;
        let dist = delta.norm();
        let (zl, grad, _) = zonal_log_blocker_grad(dist, radius, epsilon, bands);
        let dir = Direction::new(delta);
        let (d_zonal, d_dir) = rotate_zonal_vjp(&zl.coeffs, dir, &d_sum);
        let mut d_dist = 0.0;
        let mut d_rad = 0.0;
        for l in 0..bands {
            d_dist += d_zonal[l] * grad.d_distance[l];
            d_rad += d_zonal[l] * grad.d_radius[l];
        }
        let d_delta = normalize_vjp(delta, d_dir) + dir.as_vec() * d_dist;
        d_centers[i] += d_delta;
        d_x -= d_delta;
        d_radii[i] += d_rad;
    }
    d_x
}

/// Per-vertex sets of spheres suppressed for self-shadowing: a sphere is
/// excluded at a vertex when the vertex is inside it or its surface lies
/// within `tau * radius`. The graph argument pins the sphere set as this
/// mesh's rig.
pub fn attached_sphere_mask(
    mesh: &TriangleMesh,
    graph: &EmbeddedGraph,
    spheres: &SphereSet,
    tau: f64,
) -> Vec<Vec<u32>> {
    debug_assert_eq!(graph.node_count(), spheres.len());
    mesh.vertices
        .iter()
        .map(|v| {
            let mut set = Vec::new();
            for (i, n) in spheres.nodes.iter().enumerate() {
                let d = (v - n.center).norm();
                if d <= n.radius || (d - n.radius).abs() <= tau * n.radius {
                    set.push(i as u32);
                }
            }
            set
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_graph, primitives, Sphere};
    use crate::math::{fibonacci_sphere, quat_from_axis_angle, quat_rotate};
    use crate::sh::{sh_dot, triple_product_tensor, SHVector};
    use approx::assert_relative_eq;

    fn tensor8() -> std::sync::Arc<TripleProductTensor> {
        triple_product_tensor(8).unwrap()
    }

    #[test]
    fn empty_blockers_give_unit_visibility() {
        let t = tensor8();
        let (v, saved) = visibility_sh_at(
            Vec3::zeros(),
            Blockers {
                centers: &[],
                radii: &[],
            },
            &[],
            3.0,
            &t,
        )
        .unwrap();
        assert_eq!(saved.clamped, 0);
        let one = SHVector::one(8);
        for i in 0..64 {
            assert_relative_eq!(v.coeffs[i], one.coeffs[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn far_sphere_is_negligible() {
        let (v, clamped) = log_blocker_sh(Vec3::zeros(), Vec3::new(0.0, 0.0, 1000.0), 1.0, 3.0, 8);
        assert!(!clamped);
        assert!(v.norm() < 1e-3, "norm {}", v.norm());
    }

    #[test]
    fn axis_aligned_blocker_matches_zonal() {
        let (v, _) = log_blocker_sh(Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0), 1.0, 3.0, 8);
        let (z, _) = zonal_log_blocker(2.0, 1.0, 3.0, 8);
        let embedded = z.embed();
        for i in 0..64 {
            assert_relative_eq!(
                v.coeffs[i],
                embedded.coeffs[i],
                epsilon = 1e-15,
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn joint_rotation_preserves_band_norms() {
        let x = Vec3::new(0.2, -0.1, 0.4);
        let c = Vec3::new(1.0, 0.5, 1.5);
        let (v, _) = log_blocker_sh(x, c, 0.4, 3.0, 8);
        let q = quat_from_axis_angle(Vec3::new(0.3, 1.0, 0.2), 1.1);
        let (v2, _) = log_blocker_sh(quat_rotate(q, x), quat_rotate(q, c), 0.4, 3.0, 8);
        for l in 0..8 {
            assert_relative_eq!(v.band_norm(l), v2.band_norm(l), epsilon = 1e-9);
        }
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let t = tensor8();
        let centers = [
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(1.0, 0.3, 1.0),
            Vec3::new(-0.5, 0.8, 1.5),
        ];
        let radii = [0.5, 0.3, 0.4];
        let (v1, _) = visibility_sh_at(
            Vec3::zeros(),
            Blockers {
                centers: &centers,
                radii: &radii,
            },
            &[],
            3.0,
            &t,
        )
        .unwrap();
        let centers_p = [centers[2], centers[0], centers[1]];
        let radii_p = [radii[2], radii[0], radii[1]];
        let (v2, _) = visibility_sh_at(
            Vec3::zeros(),
            Blockers {
                centers: &centers_p,
                radii: &radii_p,
            },
            &[],
            3.0,
            &t,
        )
        .unwrap();
        assert_eq!(v1.coeffs, v2.coeffs);
    }

    #[test]
    fn single_blocker_matches_ray_sampled_projection() {
        // d = 2r: compare against the projected exact V' on 200k rays
        let t = tensor8();
        let x = Vec3::zeros();
        let center = Vec3::new(0.0, 0.6, 1.2);
        let d = center.norm();
        let r = d / 2.0;
        let (v, _) = visibility_sh_at(
            x,
            Blockers {
                centers: &[center],
                radii: &[r],
            },
            &[],
            3.0,
            &t,
        )
        .unwrap();
        let cos_c = (1.0f64 - 0.25).sqrt();
        let axis = center / d;
        let samples: Vec<_> = fibonacci_sphere(200_000)
            .into_iter()
            .map(|w| {
                let value = if w.dot(&axis) >= cos_c {
                    (-3.0f64).exp()
                } else {
                    1.0
                };
                (Direction::from_unit(w), value)
            })
            .collect();
        let reference = crate::sh::project(&samples, 8).unwrap();
        let diff: f64 = v
            .coeffs
            .iter()
            .zip(&reference.coeffs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rel = diff / reference.norm();
        assert!(rel < 0.1, "relative L2 error {rel}");
    }

    #[test]
    fn extra_blocker_never_brightens_dc_light() {
        let t = tensor8();
        let x = Vec3::zeros();
        let h = crate::sh::rotate_zonal(&crate::sh::zonal_clamped_cosine(8), Direction::Z);
        let l = SHVector::one(8);
        let centers1 = [Vec3::new(0.3, 0.2, 1.5)];
        let radii1 = [0.5];
        let centers2 = [Vec3::new(0.3, 0.2, 1.5), Vec3::new(-0.6, 0.1, 1.0)];
        let radii2 = [0.5, 0.4];
        let go = |cs: &[Vec3], rs: &[f64]| -> f64 {
            let (v, _) = visibility_sh_at(
                x,
                Blockers {
                    centers: cs,
                    radii: rs,
                },
                &[],
                3.0,
                &t,
            )
            .unwrap();
            let vh = crate::sh::sh_product(&v, &h, &t).unwrap();
            sh_dot(&l, &vh).unwrap()
        };
        let one = go(&centers1, &radii1);
        let two = go(&centers2, &radii2);
        assert!(two <= one + 1e-3, "brightened: {one} -> {two}");
    }

    #[test]
    fn visibility_gradient_wrt_point_matches_fd() {
        let t = tensor8();
        let centers = [Vec3::new(0.2, 0.1, 1.4), Vec3::new(-0.8, 0.4, 0.9)];
        let radii = [0.4, 0.3];
        let blockers = Blockers {
            centers: &centers,
            radii: &radii,
        };
        let d_out: Vec<f64> = (0..64).map(|i| ((i * 5 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let x = Vec3::new(0.05, -0.1, 0.0);
        let (_, saved) = visibility_sh_at(x, blockers, &[], 3.0, &t).unwrap();
        let mut d_centers = vec![Vec3::zeros(); 2];
        let mut d_radii = vec![0.0; 2];
        let d_x = visibility_vjp_at(
            x, blockers, &[], 3.0, &saved, &t, &d_out, &mut d_centers, &mut d_radii,
        );
        let f = |x: Vec3| -> f64 {
            let (v, _) = visibility_sh_at(x, blockers, &[], 3.0, &t).unwrap();
            v.coeffs.iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for axis in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let fd = (f(xp) - f(xm)) / (2.0 * h);
            assert_relative_eq!(d_x[axis], fd, epsilon = 1e-6, max_relative = 1e-3);
        }
        // sphere parameter gradients against FD as well
        let g = |cs: [Vec3; 2], rs: [f64; 2]| -> f64 {
            let (v, _) = visibility_sh_at(
                x,
                Blockers {
                    centers: &cs,
                    radii: &rs,
                },
                &[],
                3.0,
                &t,
            )
            .unwrap();
            v.coeffs.iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        for i in 0..2 {
            for axis in 0..3 {
                let mut cp = centers;
                let mut cm = centers;
                cp[i][axis] += h;
                cm[i][axis] -= h;
                let fd = (g(cp, radii) - g(cm, radii)) / (2.0 * h);
                assert_relative_eq!(d_centers[i][axis], fd, epsilon = 1e-6, max_relative = 1e-3);
            }
            let mut rp = radii;
            let mut rm = radii;
            rp[i] += h;
            rm[i] -= h;
            let fd = (g(centers, rp) - g(centers, rm)) / (2.0 * h);
            assert_relative_eq!(d_radii[i], fd, epsilon = 1e-6, max_relative = 1e-3);
        }
    }

    #[test]
    fn mask_far_vertex_is_empty_and_surface_vertex_excluded() {
        let mesh = primitives::uv_sphere(1.0, 12, 8);
        let spheres = SphereSet::from_spheres([
            Sphere {
                center: Vec3::zeros(),
                radius: 1.0,
            },
            Sphere {
                center: Vec3::new(10.0, 0.0, 0.0),
                radius: 0.1,
            },
        ]);
        let graph = build_graph(&mesh, &spheres, 1).unwrap();
        let mask = attached_sphere_mask(&mesh, &graph, &spheres, 0.3);
        for set in &mask {
            // every vertex sits on sphere 0's surface
            assert!(set.contains(&0));
            // and far from sphere 1
            assert!(!set.contains(&1));
        }
    }

    #[test]
    fn mask_grows_with_tau() {
        let mesh = primitives::box_mesh(Vec3::new(2.0, 1.0, 1.0));
        let spheres = SphereSet::from_spheres((0..4).map(|i| Sphere {
            center: Vec3::new(i as f64 * 0.5 - 0.75, 0.0, 0.0),
            radius: 0.45,
        }));
        let graph = build_graph(&mesh, &spheres, 2).unwrap();
        let small = attached_sphere_mask(&mesh, &graph, &spheres, 0.1);
        let large = attached_sphere_mask(&mesh, &graph, &spheres, 0.6);
        for (s, l) in small.iter().zip(&large) {
            for i in s {
                assert!(l.contains(i), "tau growth dropped sphere {i}");
            }
        }
    }
}
