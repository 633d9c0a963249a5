//! Triangle meshes, sphere-set approximations, and the embedded
//! deformation graph whose nodes are the sphere centers.

mod accel;
mod graph;
mod mesh;
mod obj;
pub mod primitives;
mod rigid;
mod spheres;

pub use accel::{Bvh, RayHit};
pub use graph::{build_graph, deform, deform_apply, deform_vjp, EmbeddedGraph, NODE_PARAMS};
pub use mesh::{vertex_normals, vertex_normals_vjp, TriangleMesh};
pub use obj::{load_obj, save_obj};
pub use rigid::{apply_rigid, rigid_points, rigid_points_vjp, RigidPose};
pub use spheres::{
    fit_spheres, fit_spheres_with, load_sphere_set, refine_spheres, save_sphere_set, FitConfig,
    Sphere, SphereNode, SphereSet,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("sphere count {0} exceeds vertex count {1}")]
    TooManySpheres(usize, usize),
    #[error("graph neighborhood K={0} exceeds sphere count {1}")]
    BadNeighborhood(usize, usize),
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("graph was built for a different mesh ({0} vertices, mesh has {1})")]
    GraphMeshMismatch(usize, usize),
    #[error("obj parse error at line {line}: {message}")]
    ObjParse { line: usize, message: String },
    #[error("sphere file parse error at line {line}: {message}")]
    SphereParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
