//! Soft-shadow rendering in spherical-harmonics space with sphere-set
//! occluders, and analysis-by-synthesis solvers built on top of it.
//!
//! The renderer approximates an occluder mesh with spheres, accumulates
//! per-sphere blocker functions in log-SH space, exponentiates the sum to
//! get an illumination-visibility vector per surface point, and shades
//! diffuse surfaces as `a * (L . (V * H))`. Everything in the forward pass
//! has a hand-written adjoint, so a scalar image loss can be pulled back to
//! texture, lighting, rigid pose, or embedded-graph deformation parameters.

pub mod diff;
pub mod geometry;
pub mod img;
pub mod io;
pub mod math;
pub mod optimize;
pub mod oracle;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod shading;
pub mod visibility;

pub use geometry::{EmbeddedGraph, RigidPose, SphereSet, TriangleMesh};
pub use img::Image;
pub use math::Direction;
pub use raster::{Camera, Framebuffer};
pub use scene::Scene;
pub use sh::{SHVector, TripleProductTensor, ZonalVector};
pub use shading::EnvironmentLight;
