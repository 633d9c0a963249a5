//! Procedural test meshes. Scenes reference these by name so the examples
//! and test suites run without external assets.

use super::TriangleMesh;
use crate::math::Vec3;

/// Lat-long sphere. `segments` around the equator, `rings` from pole to
/// pole; poles are shared vertices.
pub fn uv_sphere(radius: f64, segments: usize, rings: usize) -> TriangleMesh {
    assert!(segments >= 3 && rings >= 3);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    vertices.push(Vec3::new(0.0, 0.0, radius));
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Vec3::new(
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ));
        }
    }
    vertices.push(Vec3::new(0.0, 0.0, -radius));
    let ring = |r: usize, s: usize| -> u32 { (1 + (r - 1) * segments + (s % segments)) as u32 };
    for s in 0..segments {
        triangles.push([0, ring(1, s), ring(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r + 1, s), ring(r + 1, s + 1), ring(r, s + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let south = (vertices.len() - 1) as u32;
    for s in 0..segments {
        triangles.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    TriangleMesh::new(vertices, triangles)
}

/// Axis-aligned box centered at the origin with the given full extents.
/// Faces do not share vertices, so normals stay flat.
pub fn box_mesh(extents: Vec3) -> TriangleMesh {
    let h = extents * 0.5;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    // (axis, sign) faces
    for axis in 0..3usize {
        for sign in [-1.0f64, 1.0] {
            let u = (axis + 1) % 3;
            let v = (axis + 2) % 3;
            let base = vertices.len() as u32;
            for (du, dv) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                let mut p = Vec3::zeros();
                p[axis] = sign * h[axis];
                p[u] = du * h[u];
                p[v] = dv * h[v];
                vertices.push(p);
            }
            if sign > 0.0 {
                triangles.push([base, base + 1, base + 2]);
                triangles.push([base, base + 2, base + 3]);
            } else {
                triangles.push([base, base + 2, base + 1]);
                triangles.push([base, base + 3, base + 2]);
            }
        }
    }
    TriangleMesh::new(vertices, triangles)
}

/// Torus around the z axis. `major` is the center-line radius, `minor` the
/// tube radius.
pub fn torus(major: f64, minor: f64, major_segments: usize, minor_segments: usize) -> TriangleMesh {
    assert!(major_segments >= 3 && minor_segments >= 3);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for i in 0..major_segments {
        let u = 2.0 * std::f64::consts::PI * i as f64 / major_segments as f64;
        for j in 0..minor_segments {
            let v = 2.0 * std::f64::consts::PI * j as f64 / minor_segments as f64;
            let r = major + minor * v.cos();
            vertices.push(Vec3::new(r * u.cos(), r * u.sin(), minor * v.sin()));
        }
    }
    let at = |i: usize, j: usize| -> u32 {
        ((i % major_segments) * minor_segments + (j % minor_segments)) as u32
    };
    for i in 0..major_segments {
        for j in 0..minor_segments {
            let (a, b, c, d) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    TriangleMesh::new(vertices, triangles)
}

/// Grid plane in the z = 0 plane spanning [-sx/2, sx/2] x [-sy/2, sy/2],
/// with UVs covering [0,1]^2. `nx`/`ny` are quad counts per side.
pub fn plane(sx: f64, sy: f64, nx: usize, ny: usize) -> TriangleMesh {
    assert!(nx >= 1 && ny >= 1);
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            let u = i as f64 / nx as f64;
            let v = j as f64 / ny as f64;
            vertices.push(Vec3::new((u - 0.5) * sx, (v - 0.5) * sy, 0.0));
            uvs.push([u, v]);
        }
    }
    let at = |i: usize, j: usize| -> u32 { (j * (nx + 1) + i) as u32 };
    let mut triangles = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let mut m = TriangleMesh::new(vertices, triangles);
    m.uvs = Some(uvs);
    m
}

/// Two fused balls of different radii; deliberately asymmetric so rigid
/// rotations are observable from its shadow.
pub fn dumbbell(r1: f64, r2: f64, separation: f64, detail: usize) -> TriangleMesh {
    let a = uv_sphere(r1, detail, detail.max(4) / 2 + 2);
    let b = uv_sphere(r2, detail, detail.max(4) / 2 + 2);
    let mut vertices = a.vertices.clone();
    let mut triangles = a.triangles.clone();
    for v in vertices.iter_mut() {
        v.x -= separation / 2.0;
    }
    let offset = vertices.len() as u32;
    vertices.extend(b.vertices.iter().map(|v| Vec3::new(v.x + separation / 2.0, v.y, v.z)));
    triangles.extend(b.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
    TriangleMesh::new(vertices, triangles)
}

/// Looks up a primitive by name with a parameter list; used by scene files.
pub fn by_name(kind: &str, params: &std::collections::HashMap<String, f64>) -> Option<TriangleMesh> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    match kind {
        "uv_sphere" => Some(uv_sphere(
            get("radius", 0.5),
            get("segments", 24.0) as usize,
            get("rings", 16.0) as usize,
        )),
        "box" => Some(box_mesh(Vec3::new(
            get("sx", 1.0),
            get("sy", 1.0),
            get("sz", 1.0),
        ))),
        "torus" => Some(torus(
            get("major", 0.5),
            get("minor", 0.2),
            get("major_segments", 32.0) as usize,
            get("minor_segments", 16.0) as usize,
        )),
        "plane" => Some(plane(
            get("sx", 2.0),
            get("sy", 2.0),
            get("nx", 32.0) as usize,
            get("ny", 32.0) as usize,
        )),
        "dumbbell" => Some(dumbbell(
            get("r1", 0.3),
            get("r2", 0.2),
            get("separation", 0.7),
            get("detail", 16.0) as usize,
        )),
        _ => None,
    }
}
