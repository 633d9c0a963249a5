//! Shared scene builders for the integration suites.

use shseed_core::geometry::{build_graph, primitives, Sphere, SphereSet};
use shseed_core::math::Vec3;
use shseed_core::raster::{Camera, RasterParams};
use shseed_core::scene::{AlbedoSource, Scene, SceneObject};
use shseed_core::shading::EnvironmentLight;
use shseed_core::visibility::{attached_sphere_mask, VisibilityConfig};

/// Gently structured light: ambient plus low-band variation, positive
/// everywhere.
pub fn soft_light(bands: usize) -> EnvironmentLight {
    let mut light = EnvironmentLight::ambient([1.0, 0.95, 0.9], bands);
    // low bands give the scene some directionality
    let tweaks = [
        (0usize, 1, 0.35),
        (0, 2, 0.55),
        (0, 3, -0.2),
        (1, 2, 0.45),
        (1, 6, 0.12),
        (2, 2, 0.5),
        (2, 5, -0.1),
    ];
    for (c, i, v) in tweaks {
        light.channels[c].coeffs[i] += v;
    }
    light
}

/// A blob object floating above a ground plane, rigged with a few spheres,
/// shadow cast downward. Small enough for finite-difference suites.
pub fn blob_over_plane(detail: usize, image: usize, di_mode: bool) -> Scene {
    let bands = 8;
    let plane = primitives::plane(4.0, 4.0, 7, 7);
    let mut blob = primitives::uv_sphere(0.45, detail, detail.max(6) - 2);
    for v in blob.vertices.iter_mut() {
        v.z += 0.9;
        v.x += 0.1;
    }
    blob.recompute_normals();

    let spheres = SphereSet::from_spheres([
        Sphere {
            center: Vec3::new(0.1, 0.0, 0.9),
            radius: 0.42,
        },
        Sphere {
            center: Vec3::new(0.35, 0.1, 1.0),
            radius: 0.25,
        },
        Sphere {
            center: Vec3::new(-0.15, -0.1, 0.78),
            radius: 0.28,
        },
    ]);
    let graph = build_graph(&blob, &spheres, 2).unwrap();
    let exclusions = attached_sphere_mask(&blob, &graph, &spheres, 0.3);

    let camera = Camera::look_at(
        Vec3::new(0.4, -2.6, 2.2),
        Vec3::new(0.0, 0.0, 0.45),
        Vec3::new(0.0, 0.0, 1.0),
        image as f64 * 0.9,
        image as f64 * 0.9,
        image,
        image,
    );

    Scene {
        bands,
        background: [0.02, 0.02, 0.03],
        light: soft_light(bands),
        camera,
        objects: vec![
            SceneObject {
                name: "blob".into(),
                mesh: blob,
                albedo: AlbedoSource::Constant([0.75, 0.45, 0.3]),
                spheres: Some(spheres),
                graph: Some(graph),
                exclusions,
                cast_shadows: true,
            },
            SceneObject {
                name: "ground".into(),
                mesh: plane.clone(),
                albedo: AlbedoSource::Constant([0.7, 0.7, 0.65]),
                spheres: None,
                graph: None,
                exclusions: vec![Vec::new(); plane.vertex_count()],
                cast_shadows: false,
            },
        ],
        extra_blockers: Vec::new(),
        visibility: VisibilityConfig::default(),
        raster: RasterParams::default(),
        di_mode,
        static_cache: None,
    }
}

/// Shadow-only layout: the occluder sits outside the camera frustum, but
/// its shadow falls across the visible plane.
pub fn out_of_frame_caster(image: usize, di_mode: bool) -> Scene {
    let mut scene = blob_over_plane(10, image, di_mode);
    // move the blob (and its rig) out of view toward the camera's top edge
    let shift = Vec3::new(-0.9, 0.6, 0.9);
    let obj = &mut scene.objects[0];
    for v in obj.mesh.vertices.iter_mut() {
        *v += shift;
    }
    obj.mesh.recompute_normals();
    if let Some(s) = obj.spheres.as_mut() {
        for n in s.nodes.iter_mut() {
            n.center += shift;
        }
    }
    let spheres = obj.spheres.clone().unwrap();
    let graph = build_graph(&obj.mesh, &spheres, 2).unwrap();
    obj.exclusions = attached_sphere_mask(&obj.mesh, &graph, &spheres, 0.3);
    obj.graph = Some(graph);
    // look steeply down at the plane so the blob leaves the frustum while
    // its shadow stays in frame
    scene.camera = Camera::look_at(
        Vec3::new(0.4, -1.4, 2.8),
        Vec3::new(0.0, 0.3, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
        image as f64 * 1.1,
        image as f64 * 1.1,
        image,
        image,
    );
    scene
}
