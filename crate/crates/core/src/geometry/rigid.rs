//! Global rigid pose applied to a mesh and its sphere set.

use super::{SphereSet, TriangleMesh};
use crate::math::{
    quat_normalize, quat_normalize_vjp, quat_rotate, quat_rotate_vjp, Quat, Vec3, QUAT_IDENTITY,
};

/// Values in a flat rigid-pose parameter vector: quaternion then translation.
pub const POSE_PARAMS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: QUAT_IDENTITY,
            translation: Vec3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let qi = crate::math::quat_conjugate(self.rotation);
        RigidPose {
            rotation: qi,
            translation: -quat_rotate(qi, self.translation),
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        quat_rotate(self.rotation, p) + self.translation
    }

    pub fn to_params(&self) -> [f64; POSE_PARAMS] {
        [
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.rotation[3],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_params(p: &[f64]) -> Self {
        RigidPose {
            rotation: quat_normalize([p[0], p[1], p[2], p[3]]),
            translation: Vec3::new(p[4], p[5], p[6]),
        }
    }
}

/// Transforms mesh vertices, normals (rotation only) and sphere centers;
/// radii are unchanged.
pub fn apply_rigid(
    mesh: &TriangleMesh,
    spheres: &SphereSet,
    pose: &RigidPose,
) -> (TriangleMesh, SphereSet) {
    let vertices = mesh.vertices.iter().map(|v| pose.apply(*v)).collect();
    let normals = mesh
        .normals
        .iter()
        .map(|n| quat_rotate(pose.rotation, *n))
        .collect();
    let out_mesh = TriangleMesh {
        vertices,
        triangles: mesh.triangles.clone(),
        normals,
        uvs: mesh.uvs.clone(),
    };
    let mut out_spheres = spheres.clone();
    for n in out_spheres.nodes.iter_mut() {
        n.center = pose.apply(n.center);
    }
    (out_mesh, out_spheres)
}

/// Applies a flat 7-parameter pose to a point list; the quaternion part is
/// normalized inside (differentiably).
pub fn rigid_points(points: &[Vec3], params: &[f64]) -> Vec<Vec3> {
    let pose = RigidPose::from_params(params);
    points.iter().map(|p| pose.apply(*p)).collect()
}

/// Adjoint of [`rigid_points`]: returns (d_params, d_points).
pub fn rigid_points_vjp(points: &[Vec3], params: &[f64], d_out: &[Vec3]) -> ([f64; 7], Vec<Vec3>) {
    let raw = [params[0], params[1], params[2], params[3]];
    let q = quat_normalize(raw);
    let mut d_q_unit = [0.0; 4];
    let mut d_t = Vec3::zeros();
    let mut d_points = vec![Vec3::zeros(); points.len()];
    for (i, p) in points.iter().enumerate() {
        let d = d_out[i];
        let (dq, dp) = quat_rotate_vjp(q, *p, d);
        for c in 0..4 {
            d_q_unit[c] += dq[c];
        }
        d_points[i] = dp;
        d_t += d;
    }
    let d_q_raw = quat_normalize_vjp(raw, d_q_unit);
    (
        [
            d_q_raw[0], d_q_raw[1], d_q_raw[2], d_q_raw[3], d_t.x, d_t.y, d_t.z,
        ],
        d_points,
    )
}
