//! Embedded deformation graph: sphere centers act as nodes, each mesh
//! vertex blends the rigid transforms of its K nearest nodes.

use super::{GeomError, SphereSet, TriangleMesh};
use crate::math::{quat_normalize, quat_normalize_vjp, quat_rotate, quat_rotate_vjp, Quat, Vec3};

/// Values per node in a flat deformation parameter vector:
/// quaternion (w,x,y,z) then translation (x,y,z).
pub const NODE_PARAMS: usize = 7;

#[derive(Clone, Debug)]
pub struct EmbeddedGraph {
    /// rest-pose node positions `g_j` (sphere centers at build time)
    pub node_positions: Vec<Vec3>,
    /// neighbors per vertex
    pub k: usize,
    /// flat `vertex_count * k` node indices
    pub indices: Vec<u32>,
    /// flat `vertex_count * k` blend weights, each row sums to 1
    pub weights: Vec<f64>,
}

impl EmbeddedGraph {
    pub fn vertex_count(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn node_count(&self) -> usize {
        self.node_positions.len()
    }

    /// Identity deformation parameters for this graph.
    pub fn identity_params(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.node_count() * NODE_PARAMS];
        for j in 0..self.node_count() {
            p[j * NODE_PARAMS] = 1.0;
        }
        p
    }
}

/// Connects each vertex to its K nearest sphere centers with the standard
/// embedded-deformation falloff `w ~ (1 - d/d_{K+1})^2`, normalized per
/// vertex. Ties break toward the lower node index; when only K nodes exist
/// the cutoff falls back to twice the K-th distance.
pub fn build_graph(
    mesh: &TriangleMesh,
    spheres: &SphereSet,
    k: usize,
) -> Result<EmbeddedGraph, GeomError> {
    let node_positions = spheres.centers();
    let n = node_positions.len();
    if k == 0 || k > n {
        return Err(GeomError::BadNeighborhood(k, n));
    }
    let vcount = mesh.vertex_count();
    let mut indices = Vec::with_capacity(vcount * k);
    let mut weights = Vec::with_capacity(vcount * k);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n);
    for v in &mesh.vertices {
        scratch.clear();
        for (j, g) in node_positions.iter().enumerate() {
            scratch.push(((v - g).norm(), j as u32));
        }
        scratch.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d_cut = if n > k {
            scratch[k].0
        } else {
            2.0 * scratch[k - 1].0
        };
        let mut raw = [0.0; 64];
        debug_assert!(k <= 64);
        let mut sum = 0.0;
        for i in 0..k {
            let w = if d_cut > 1e-12 {
                let f = (1.0 - scratch[i].0 / d_cut).max(0.0);
                f * f
            } else {
                // all candidate nodes coincide with the vertex
                1.0
            };
            raw[i] = w;
            sum += w;
        }
        if sum < 1e-12 {
            for r in raw.iter_mut().take(k) {
                *r = 1.0;
            }
            sum = k as f64;
        }
        for i in 0..k {
            indices.push(scratch[i].1);
            weights.push(raw[i] / sum);
        }
    }
    Ok(EmbeddedGraph {
        node_positions,
        k,
        indices,
        weights,
    })
}

/// Applies embedded deformation with per-node parameters taken from the
/// sphere set's stored rotations/translations:
/// `v' = sum_j w_j [R_j (v - g_j) + g_j + t_j]`.
///
/// Normals are recomputed from the deformed faces. Sphere centers move to
/// `g_j + t_j` (use [`SphereSet::deformed_centers`]); radii are unchanged.
pub fn deform(
    mesh: &TriangleMesh,
    graph: &EmbeddedGraph,
    spheres: &SphereSet,
) -> Result<TriangleMesh, GeomError> {
    if graph.vertex_count() != mesh.vertex_count() {
        return Err(GeomError::GraphMeshMismatch(
            graph.vertex_count(),
            mesh.vertex_count(),
        ));
    }
    let mut params = vec![0.0; spheres.len() * NODE_PARAMS];
    for (j, node) in spheres.nodes.iter().enumerate() {
        params[j * NODE_PARAMS..j * NODE_PARAMS + 4].copy_from_slice(&node.rotation);
        params[j * NODE_PARAMS + 4] = node.translation.x;
        params[j * NODE_PARAMS + 5] = node.translation.y;
        params[j * NODE_PARAMS + 6] = node.translation.z;
    }
    let vertices = deform_apply(&mesh.vertices, graph, &params);
    let mut out = TriangleMesh {
        vertices,
        triangles: mesh.triangles.clone(),
        normals: Vec::new(),
        uvs: mesh.uvs.clone(),
    };
    out.recompute_normals();
    Ok(out)
}

/// Flat-parameter deformation used by the differentiation engine.
/// `params` holds [`NODE_PARAMS`] values per node; quaternions are
/// normalized inside (differentiably).
pub fn deform_apply(rest: &[Vec3], graph: &EmbeddedGraph, params: &[f64]) -> Vec<Vec3> {
    debug_assert_eq!(params.len(), graph.node_count() * NODE_PARAMS);
    let nodes: Vec<(Quat, Vec3)> = (0..graph.node_count())
        .map(|j| {
            let p = &params[j * NODE_PARAMS..(j + 1) * NODE_PARAMS];
            (
                quat_normalize([p[0], p[1], p[2], p[3]]),
                Vec3::new(p[4], p[5], p[6]),
            )
        })
        .collect();
    // computed as v + sum w_j (R_j(v-g_j) - (v-g_j) + t_j): algebraically
    // identical (weights sum to 1) and bitwise the identity map when all
    // transforms are identity
    rest.iter()
        .enumerate()
        .map(|(vi, v)| {
            let mut delta = Vec3::zeros();
            for s in 0..graph.k {
                let j = graph.indices[vi * graph.k + s] as usize;
                let w = graph.weights[vi * graph.k + s];
                let g = graph.node_positions[j];
                let (q, t) = nodes[j];
                let local = v - g;
                delta += (quat_rotate(q, local) - local + t) * w;
            }
            v + delta
        })
        .collect()
}

/// Adjoint of [`deform_apply`] with respect to the node parameters.
/// Accumulation runs in vertex order, so results are deterministic.
pub fn deform_vjp(
    rest: &[Vec3],
    graph: &EmbeddedGraph,
    params: &[f64],
    d_out: &[Vec3],
) -> Vec<f64> {
    debug_assert_eq!(d_out.len(), rest.len());
    let nodes: Vec<(Quat, Quat)> = (0..graph.node_count())
        .map(|j| {
            let p = &params[j * NODE_PARAMS..(j + 1) * NODE_PARAMS];
            let raw = [p[0], p[1], p[2], p[3]];
            (quat_normalize(raw), raw)
        })
        .collect();
    let mut d_params = vec![0.0; params.len()];
    for (vi, v) in rest.iter().enumerate() {
        for s in 0..graph.k {
            let j = graph.indices[vi * graph.k + s] as usize;
            let w = graph.weights[vi * graph.k + s];
            let g = graph.node_positions[j];
            let (q, raw) = nodes[j];
            let d_local = d_out[vi] * w;
            // translation
            d_params[j * NODE_PARAMS + 4] += d_local.x;
            d_params[j * NODE_PARAMS + 5] += d_local.y;
            d_params[j * NODE_PARAMS + 6] += d_local.z;
            // rotation through normalization
            let (d_q_unit, _) = quat_rotate_vjp(q, v - g, d_local);
            let d_q_raw = quat_normalize_vjp(raw, d_q_unit);
            for c in 0..4 {
                d_params[j * NODE_PARAMS + c] += d_q_raw[c];
            }
        }
    }
    d_params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{primitives, Sphere};
    use crate::math::quat_from_axis_angle;
    use approx::assert_relative_eq;

    fn simple_setup(node_count: usize) -> (TriangleMesh, SphereSet) {
        let mesh = primitives::uv_sphere(1.0, 12, 8);
        let spheres = SphereSet::from_spheres((0..node_count).map(|i| Sphere {
            center: Vec3::new(i as f64 * 0.8 - 0.4, 0.0, 0.0),
            radius: 0.3,
        }));
        (mesh, spheres)
    }

    #[test]
    fn single_node_gets_full_weight() {
        let (mesh, spheres) = simple_setup(1);
        let g = build_graph(&mesh, &spheres, 1).unwrap();
        for w in &g.weights {
            assert_relative_eq!(*w, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let mesh = primitives::uv_sphere(1.0, 48, 32);
        let spheres = SphereSet::from_spheres((0..9).map(|i| Sphere {
            center: Vec3::new(
                (i % 3) as f64 * 0.5 - 0.5,
                (i / 3) as f64 * 0.5 - 0.5,
                0.1 * i as f64,
            ),
            radius: 0.2,
        }));
        let g = build_graph(&mesh, &spheres, 4).unwrap();
        for vi in 0..g.vertex_count() {
            let sum: f64 = g.weights[vi * 4..(vi + 1) * 4].iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn coincident_vertex_dominates() {
        let mesh = primitives::box_mesh(Vec3::new(1.0, 1.0, 1.0));
        let target = mesh.vertices[3];
        let spheres = SphereSet::from_spheres([
            Sphere {
                center: target,
                radius: 0.1,
            },
            Sphere {
                center: Vec3::new(3.0, 3.0, 3.0),
                radius: 0.1,
            },
            Sphere {
                center: Vec3::new(-2.0, 1.0, 0.0),
                radius: 0.1,
            },
        ]);
        let g = build_graph(&mesh, &spheres, 2).unwrap();
        // vertex 3 coincides with node 0: its weight must dominate
        let row = 3 * 2;
        let (idx0, w0) = (g.indices[row], g.weights[row]);
        assert_eq!(idx0, 0);
        assert!(w0 >= g.weights[row + 1]);
    }

    #[test]
    fn k_exceeding_nodes_errors() {
        let (mesh, spheres) = simple_setup(2);
        assert!(matches!(
            build_graph(&mesh, &spheres, 3),
            Err(GeomError::BadNeighborhood(3, 2))
        ));
    }

    #[test]
    fn identity_transforms_are_identity_map() {
        let (mesh, spheres) = simple_setup(2);
        let g = build_graph(&mesh, &spheres, 2).unwrap();
        let out = deform(&mesh, &g, &spheres).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&out.vertices) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shared_translation_shifts_everything() {
        let (mesh, mut spheres) = simple_setup(3);
        let t = Vec3::new(0.3, -0.2, 0.7);
        for n in spheres.nodes.iter_mut() {
            n.translation = t;
        }
        let g = build_graph(&mesh, &spheres, 3).unwrap();
        let out = deform(&mesh, &g, &spheres).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&out.vertices) {
            assert_relative_eq!((a + t - b).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_node_rotation_matches_rigid() {
        let (mesh, mut spheres) = simple_setup(1);
        let q = quat_from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        spheres.nodes[0].rotation = q;
        let g = build_graph(&mesh, &spheres, 1).unwrap();
        let out = deform(&mesh, &g, &spheres).unwrap();
        let c = spheres.nodes[0].center;
        for (v, v2) in mesh.vertices.iter().zip(&out.vertices) {
            let expect = quat_rotate(q, v - c) + c;
            assert_relative_eq!((expect - v2).norm(), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn translation_jacobian_equals_weights() {
        let (mesh, spheres) = simple_setup(3);
        let g = build_graph(&mesh, &spheres, 2).unwrap();
        let params = g.identity_params();
        // pick a vertex, pull back a unit cotangent on x; the translation
        // gradient of node j must equal the blend weight exactly
        let vi = 5;
        let mut d_out = vec![Vec3::zeros(); mesh.vertex_count()];
        d_out[vi] = Vec3::new(1.0, 0.0, 0.0);
        let d_params = deform_vjp(&mesh.vertices, &g, &params, &d_out);
        for s in 0..g.k {
            let j = g.indices[vi * g.k + s] as usize;
            let w = g.weights[vi * g.k + s];
            assert_eq!(d_params[j * NODE_PARAMS + 4], w);
        }
    }

    #[test]
    fn deform_vjp_matches_fd() {
        let (mesh, spheres) = simple_setup(3);
        let g = build_graph(&mesh, &spheres, 2).unwrap();
        let mut params = g.identity_params();
        // a non-identity starting point
        params[0] = 0.95;
        params[1] = 0.2;
        params[4] = 0.1;
        params[NODE_PARAMS + 2] = -0.15;
        params[2 * NODE_PARAMS + 6] = 0.25;
        let d_out: Vec<Vec3> = (0..mesh.vertex_count())
            .map(|i| {
                Vec3::new(
                    ((i * 7 + 1) % 5) as f64 / 5.0 - 0.3,
                    ((i * 3 + 2) % 9) as f64 / 9.0 - 0.5,
                    ((i * 11 + 4) % 4) as f64 / 4.0 - 0.4,
                )
            })
            .collect();
        let grad = deform_vjp(&mesh.vertices, &g, &params, &d_out);
        let f = |p: &[f64]| -> f64 {
            deform_apply(&mesh.vertices, &g, p)
                .iter()
                .zip(&d_out)
                .map(|(v, d)| v.dot(d))
                .sum()
        };
        let h = 1e-6;
        for i in 0..params.len() {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp[i] += h;
            pm[i] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn deform_is_rigid_equivariant() {
        // rigidly pre-transforming rest pose, nodes, and parameters
        // transforms the output rigidly
        let (mesh, mut spheres) = simple_setup(2);
        spheres.nodes[0].translation = Vec3::new(0.05, 0.1, 0.0);
        spheres.nodes[1].rotation =
            quat_from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.4);
        let g = build_graph(&mesh, &spheres, 2).unwrap();
        let out = deform(&mesh, &g, &spheres).unwrap();

        // apply a rigid transform S to everything
        let s_q = quat_from_axis_angle(Vec3::new(0.3, 1.0, -0.2), 0.8);
        let s_t = Vec3::new(1.0, -2.0, 0.5);
        let mesh2 = TriangleMesh::new(
            mesh.vertices
                .iter()
                .map(|v| quat_rotate(s_q, *v) + s_t)
                .collect(),
            mesh.triangles.clone(),
        );
        let mut spheres2 = spheres.clone();
        for n in spheres2.nodes.iter_mut() {
            n.center = quat_rotate(s_q, n.center) + s_t;
            // conjugate the node transforms: R' = S R S^-1, and the
            // translation in node-local form stays S t because the node
            // origin moves with S.
            n.rotation = crate::math::quat_mul(
                s_q,
                crate::math::quat_mul(n.rotation, crate::math::quat_conjugate(s_q)),
            );
            n.translation = quat_rotate(s_q, n.translation);
        }
        let g2 = build_graph(&mesh2, &spheres2, 2).unwrap();
        let out2 = deform(&mesh2, &g2, &spheres2).unwrap();
        for (v, v2) in out.vertices.iter().zip(&out2.vertices) {
            let expect = quat_rotate(s_q, *v) + s_t;
            assert_relative_eq!((expect - v2).norm(), 0.0, epsilon = 1e-9);
        }
    }
}
