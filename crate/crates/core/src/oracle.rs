//! Monte Carlo ray-traced reference renderer. Non-differentiable by
//! design; it generates ground-truth images and validates the SH
//! approximation. Single bounce, Lambertian only: per camera sample one
//! cosine-weighted hemisphere direction and one binary shadow ray.

use crate::geometry::{Bvh, Sphere, TriangleMesh};
use crate::img::Image;
use crate::math::{Direction, Vec3};
use crate::raster::Camera;
use crate::shading::EnvironmentLight;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Radiance source for the tracer.
pub enum OracleLight {
    /// band-limited SH light (matches what the SH renderer sees)
    Sh(EnvironmentLight),
    /// raw lat-long map, bilinear lookup
    Map(Image),
}

impl OracleLight {
    fn radiance(&self, dir: Vec3) -> [f64; 3] {
        match self {
            OracleLight::Sh(light) => light.radiance(Direction::from_unit(dir)),
            OracleLight::Map(img) => {
                let theta = dir.z.clamp(-1.0, 1.0).acos();
                let phi = dir.y.atan2(dir.x).rem_euclid(2.0 * std::f64::consts::PI);
                let u = phi / (2.0 * std::f64::consts::PI);
                let v = theta / std::f64::consts::PI;
                img.sample_bilinear(u, v).0
            }
        }
    }
}

pub struct RayMesh {
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
    /// resolved per-vertex albedo
    pub albedo: Vec<[f64; 3]>,
}

impl RayMesh {
    pub fn new(mesh: TriangleMesh, albedo: Vec<[f64; 3]>) -> Self {
        assert_eq!(albedo.len(), mesh.vertex_count());
        let bvh = Bvh::build(&mesh);
        RayMesh { mesh, bvh, albedo }
    }
}

pub struct RayScene {
    pub meshes: Vec<RayMesh>,
    /// analytic occluder spheres (also visible to primary rays)
    pub spheres: Vec<(Sphere, [f64; 3])>,
    pub light: OracleLight,
    pub camera: Camera,
    pub background: [f64; 3],
    /// shadow-ray origin offset along the normal
    pub bias: f64,
}

struct Hit {
    point: Vec3,
    normal: Vec3,
    albedo: [f64; 3],
}

impl RayScene {
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut t_best = f64::INFINITY;
        for m in &self.meshes {
            if let Some(h) = m.bvh.ray_hit(origin, dir, t_best) {
                if h.t < t_best {
                    t_best = h.t;
                    let tri = m.mesh.triangles[h.triangle as usize];
                    let (w0, w1, w2) = (1.0 - h.u - h.v, h.u, h.v);
                    let mut nrm = m.mesh.normals[tri[0] as usize] * w0
                        + m.mesh.normals[tri[1] as usize] * w1
                        + m.mesh.normals[tri[2] as usize] * w2;
                    // double-sided diffuse: shade with the side facing the ray
                    if nrm.dot(&dir) > 0.0 {
                        nrm = -nrm;
                    }
                    let alb = [
                        m.albedo[tri[0] as usize][0] * w0
                            + m.albedo[tri[1] as usize][0] * w1
                            + m.albedo[tri[2] as usize][0] * w2,
                        m.albedo[tri[0] as usize][1] * w0
                            + m.albedo[tri[1] as usize][1] * w1
                            + m.albedo[tri[2] as usize][1] * w2,
                        m.albedo[tri[0] as usize][2] * w0
                            + m.albedo[tri[1] as usize][2] * w1
                            + m.albedo[tri[2] as usize][2] * w2,
                    ];
                    best = Some(Hit {
                        point: origin + dir * h.t,
                        normal: nrm.normalize(),
                        albedo: alb,
                    });
                }
            }
        }
        for (s, albedo) in &self.spheres {
            if let Some(t) = ray_sphere(origin, dir, s.center, s.radius) {
                if t < t_best {
                    t_best = t;
                    let p = origin + dir * t;
                    best = Some(Hit {
                        point: p,
                        normal: (p - s.center).normalize(),
                        albedo: *albedo,
                    });
                }
            }
        }
        best
    }

    fn occluded(&self, origin: Vec3, dir: Vec3) -> bool {
        for m in &self.meshes {
            if m.bvh.any_hit(origin, dir, f64::INFINITY) {
                return true;
            }
        }
        for (s, _) in &self.spheres {
            if ray_sphere(origin, dir, s.center, s.radius).is_some() {
                return true;
            }
        }
        false
    }
}

fn ray_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(&dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    if t0 > 1e-9 {
        return Some(t0);
    }
    let t1 = -b + sq;
    if t1 > 1e-9 {
        return Some(t1);
    }
    None
}

fn onb(n: Vec3) -> (Vec3, Vec3) {
    let a = if n.x.abs() > 0.9 {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let t = n.cross(&a).normalize();
    (t, n.cross(&t))
}

fn cosine_sample(n: Vec3, u1: f64, u2: f64) -> Vec3 {
    let r = u1.sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    let (t, b) = onb(n);
    let z = (1.0 - u1).max(0.0).sqrt();
    t * (r * phi.cos()) + b * (r * phi.sin()) + n * z
}

/// Traces the scene at `spp` samples per pixel. Per-pixel RNG streams are
/// derived from `(seed, pixel index)`, so output is independent of thread
/// count. Pixel values estimate `albedo/pi * integral(L * V * cos)`.
pub fn trace(scene: &RayScene, spp: usize, seed: u64) -> Image {
    assert!(spp >= 1);
    let (w, h) = (scene.camera.width, scene.camera.height);
    let mut img = Image::new(w, h);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; 3 * w];
            let grid = (spp as f64).sqrt().ceil() as usize;
            for x in 0..w {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((y * w + x) as u64 + 1);
                let mut acc = [0.0f64; 3];
                for s in 0..spp {
                    // stratified jitter over a grid cell
                    let (sx, sy) = (s % grid, (s / grid) % grid);
                    let jx = (sx as f64 + rng.random::<f64>()) / grid as f64;
                    let jy = (sy as f64 + rng.random::<f64>()) / grid as f64;
                    let dir = scene.camera.ray_dir(x as f64 + jx, y as f64 + jy);
                    match scene.intersect(scene.camera.position, dir) {
                        None => {
                            for c in 0..3 {
                                acc[c] += scene.background[c];
                            }
                        }
                        Some(hit) => {
                            let wi = cosine_sample(hit.normal, rng.random(), rng.random());
                            let origin = hit.point + hit.normal * scene.bias;
                            if !scene.occluded(origin, wi) {
                                let li = scene.light.radiance(wi);
                                for c in 0..3 {
                                    acc[c] += hit.albedo[c] * li[c];
                                }
                            }
                        }
                    }
                }
                for c in 0..3 {
                    row[3 * x + c] = acc[c] / spp as f64;
                }
            }
            row
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        img.data[3 * y * w..3 * (y + 1) * w].copy_from_slice(&row);
    }
    img
}

/// Exact-visibility samples for projection oracles: uniform directions
/// with the true blocker value at each.
pub enum BlockerGeometry<'a> {
    Spheres(&'a [(Vec3, f64)]),
    Mesh(&'a Bvh),
}

/// `epsilon = None` gives binary V (0 blocked / 1 visible); `Some(eps)`
/// gives the softened V' (e^-eps blocked).
pub fn sampled_visibility(
    point: Vec3,
    blockers: &BlockerGeometry,
    n_samples: usize,
    seed: u64,
    epsilon: Option<f64>,
) -> Vec<(Direction, f64)> {
    assert!(n_samples >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocked_value = epsilon.map(|e| (-e).exp()).unwrap_or(0.0);
    (0..n_samples)
        .map(|_| {
            let dir = loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-9 && n <= 1.0 {
                    break v / n;
                }
            };
            let blocked = match blockers {
                BlockerGeometry::Spheres(spheres) => spheres.iter().any(|(c, r)| {
                    let delta = c - point;
                    let d = delta.norm();
                    if d <= *r {
                        true
                    } else {
                        let cos_c = (1.0 - (r / d) * (r / d)).sqrt();
                        dir.dot(&(delta / d)) >= cos_c
                    }
                }),
                BlockerGeometry::Mesh(bvh) => bvh.any_hit(point, dir, f64::INFINITY),
            };
            (
                Direction::from_unit(dir),
                if blocked { blocked_value } else { 1.0 },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives;

    fn plane_scene(spheres: Vec<(Sphere, [f64; 3])>) -> RayScene {
        let mesh = primitives::plane(8.0, 8.0, 4, 4);
        let albedo = vec![[1.0; 3]; mesh.vertex_count()];
        RayScene {
            meshes: vec![RayMesh::new(mesh, albedo)],
            spheres,
            light: OracleLight::Sh(EnvironmentLight::ambient([1.0; 3], 8)),
            camera: Camera::look_at(
                Vec3::new(0.0, 0.0, 3.0),
                Vec3::zeros(),
                Vec3::new(0.0, 1.0, 0.0),
                24.0,
                24.0,
                16,
                16,
            ),
            background: [0.0; 3],
            bias: 1e-5,
        }
    }

    #[test]
    fn uniform_sky_gives_unit_reflectance() {
        let scene = plane_scene(vec![]);
        let img = trace(&scene, 16, 1);
        // no occlusion and L = 1: every sample contributes exactly 1
        for y in 0..16 {
            for x in 0..16 {
                let p = img.pixel(x, y);
                for c in 0..3 {
                    approx::assert_relative_eq!(p[c], 1.0, epsilon = 1e-3);
                }
            }
        }
    }

    #[test]
    fn enclosed_point_is_black() {
        // camera inside a closed box: every shadow ray hits the box
        let mesh = primitives::box_mesh(Vec3::new(2.0, 2.0, 2.0));
        let albedo = vec![[1.0; 3]; mesh.vertex_count()];
        let scene = RayScene {
            meshes: vec![RayMesh::new(mesh, albedo)],
            spheres: vec![],
            light: OracleLight::Sh(EnvironmentLight::ambient([1.0; 3], 8)),
            camera: Camera::look_at(
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                12.0,
                12.0,
                8,
                8,
            ),
            background: [0.5; 3],
            bias: 1e-5,
        };
        let img = trace(&scene, 8, 3);
        for v in &img.data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn noise_std_halves_when_spp_quadruples() {
        // scene with genuine visibility variance
        let scene = plane_scene(vec![(
            Sphere {
                center: Vec3::new(0.0, 0.0, 1.0),
                radius: 0.5,
            },
            [0.5; 3],
        )]);
        let pixel_std = |spp: usize| -> f64 {
            let runs = 24;
            let images: Vec<Image> = (0..runs)
                .map(|seed| trace(&scene, spp, 1000 + seed as u64))
                .collect();
            // mean per-pixel variance across runs, summed over the image
            let n = images[0].data.len();
            let mut total = 0.0;
            for i in 0..n {
                let mean = images.iter().map(|img| img.data[i]).sum::<f64>() / runs as f64;
                total += images
                    .iter()
                    .map(|img| (img.data[i] - mean) * (img.data[i] - mean))
                    .sum::<f64>()
                    / (runs - 1) as f64;
            }
            total.sqrt()
        };
        let s1 = pixel_std(32);
        let s4 = pixel_std(128);
        let ratio = s1 / s4;
        assert!(
            (1.6..=2.4).contains(&ratio),
            "noise ratio {ratio} (std {s1} vs {s4})"
        );
    }

    #[test]
    fn sampled_visibility_no_blockers_is_one() {
        let s = sampled_visibility(Vec3::zeros(), &BlockerGeometry::Spheres(&[]), 100, 0, None);
        assert!(s.iter().all(|(_, v)| *v == 1.0));
    }

    #[test]
    fn sampled_visibility_cap_fraction() {
        // d = 2r: cap solid-angle fraction = (1 - cos 30 deg) / 2
        let blockers = [(Vec3::new(0.0, 0.0, 2.0), 1.0)];
        let s = sampled_visibility(
            Vec3::zeros(),
            &BlockerGeometry::Spheres(&blockers),
            200_000,
            7,
            None,
        );
        let blocked = s.iter().filter(|(_, v)| *v == 0.0).count() as f64 / s.len() as f64;
        let expect = (1.0 - (30.0f64).to_radians().cos()) / 2.0;
        assert!(
            (blocked - expect).abs() < 3e-3,
            "blocked fraction {blocked} vs {expect}"
        );
    }

    #[test]
    fn sampled_visibility_softened_value() {
        let blockers = [(Vec3::new(0.0, 0.0, 1.5), 1.0)];
        let s = sampled_visibility(
            Vec3::zeros(),
            &BlockerGeometry::Spheres(&blockers),
            10_000,
            11,
            Some(3.0),
        );
        let e3 = (-3.0f64).exp();
        assert!(s.iter().any(|(_, v)| *v == e3));
        for (_, v) in &s {
            assert!(*v == 1.0 || *v == e3);
        }
    }

    #[test]
    fn trace_is_deterministic_across_runs() {
        let scene = plane_scene(vec![(
            Sphere {
                center: Vec3::new(0.3, 0.2, 1.2),
                radius: 0.4,
            },
            [0.5; 3],
        )]);
        let a = trace(&scene, 8, 42);
        let b = trace(&scene, 8, 42);
        assert_eq!(a.data, b.data);
    }
}
