//! Scene assembly and persistence: the in-memory [`Scene`] the renderer
//! and solvers consume, the TOML scene-file format, result persistence,
//! and the reproducibility manifest.

use crate::geometry::{
    build_graph, fit_spheres_with, load_obj, load_sphere_set, primitives, EmbeddedGraph, FitConfig,
    Sphere, SphereSet, TriangleMesh,
};
use crate::img::Image;
use crate::io::{load_pfm, load_png_linear, save_pfm, save_png_srgb};
use crate::math::{quat_from_axis_angle, Vec3};
use crate::raster::{Camera, RasterParams};
use crate::shading::{project_envmap, EnvironmentLight};
use crate::visibility::{attached_sphere_mask, VisibilityConfig};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing asset: {0}")]
    MissingAsset(PathBuf),
    #[error("scene parse: {0}")]
    Parse(String),
    #[error("malformed camera: {0}")]
    BadCamera(String),
    #[error("object {object}: {message}")]
    BadObject { object: String, message: String },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeomError),
    #[error(transparent)]
    Shading(#[from] crate::shading::ShadingError),
    #[error(transparent)]
    ImageIo(#[from] crate::io::IoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// In-memory scene
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum AlbedoSource {
    Constant([f64; 3]),
    PerVertex(Vec<[f64; 3]>),
    /// texture sampled at the mesh UVs
    Texture(Image),
}

impl AlbedoSource {
    /// Resolves to per-vertex RGB for a given mesh.
    pub fn per_vertex(&self, mesh: &TriangleMesh) -> Vec<[f64; 3]> {
        match self {
            AlbedoSource::Constant(rgb) => vec![*rgb; mesh.vertex_count()],
            AlbedoSource::PerVertex(v) => v.clone(),
            AlbedoSource::Texture(tex) => {
                let uvs = mesh
                    .uvs
                    .as_ref()
                    .expect("texture albedo requires mesh UVs");
                uvs.iter().map(|uv| tex.sample_bilinear(uv[0], uv[1]).0).collect()
            }
        }
    }
}

#[derive(Clone)]
pub struct SceneObject {
    pub name: String,
    /// rest-pose mesh with any load-time placement already applied
    pub mesh: TriangleMesh,
    pub albedo: AlbedoSource,
    pub spheres: Option<SphereSet>,
    pub graph: Option<EmbeddedGraph>,
    /// per-vertex local sphere indices suppressed for self-shadowing
    pub exclusions: Vec<Vec<u32>>,
    pub cast_shadows: bool,
}

/// Per-object transfer vectors `T = V * H` (n^2 per vertex), fixed while
/// no geometry block is free; computed once per solve so texture and
/// lighting iterations skip the visibility recomputation entirely.
pub struct StaticCache {
    pub transfer: Vec<std::sync::Arc<Vec<f64>>>,
}

pub struct Scene {
    pub bands: usize,
    pub background: [f64; 3],
    pub light: EnvironmentLight,
    pub camera: Camera,
    pub objects: Vec<SceneObject>,
    /// standalone occluder spheres (also primary geometry for the oracle)
    pub extra_blockers: Vec<(Sphere, [f64; 3])>,
    pub visibility: VisibilityConfig,
    pub raster: RasterParams,
    /// direct-illumination baseline: visibility forced to 1
    pub di_mode: bool,
    pub static_cache: Option<StaticCache>,
}

impl Scene {
    /// All blocker spheres in global order: casting objects first (in
    /// object order), then the standalone blockers. Returns per-object
    /// global offsets alongside.
    pub fn blocker_layout(&self) -> (Vec<Option<usize>>, usize) {
        let mut offsets = Vec::with_capacity(self.objects.len());
        let mut next = 0usize;
        for o in &self.objects {
            if o.cast_shadows {
                if let Some(s) = &o.spheres {
                    offsets.push(Some(next));
                    next += s.len();
                    continue;
                }
            }
            offsets.push(None);
        }
        (offsets, next + self.extra_blockers.len())
    }

    pub fn total_vertices(&self) -> usize {
        self.objects.iter().map(|o| o.mesh.vertex_count()).sum()
    }
}

// ---------------------------------------------------------------------------
// Scene file (TOML)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default = "default_bands")]
    pub bands: usize,
    #[serde(default)]
    pub background: [f64; 3],
    pub camera: CameraSpec,
    pub light: LightSpec,
    #[serde(default, rename = "object")]
    pub objects: Vec<ObjectSpec>,
    #[serde(default, rename = "blocker")]
    pub blockers: Vec<BlockerSpec>,
    #[serde(default)]
    pub visibility: VisibilitySpec,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
}

fn default_bands() -> usize {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    /// focal length in pixels (fx = fy); overridden by `fx`/`fy`
    #[serde(default)]
    pub focal: Option<f64>,
    #[serde(default)]
    pub fx: Option<f64>,
    #[serde(default)]
    pub fy: Option<f64>,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl CameraSpec {
    pub fn build(&self) -> Result<Camera, SceneError> {
        let fx = self
            .fx
            .or(self.focal)
            .ok_or_else(|| SceneError::BadCamera("focal or fx required".into()))?;
        let fy = self.fy.or(self.focal).unwrap_or(fx);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(SceneError::BadCamera(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::BadCamera("zero image dimensions".into()));
        }
        let pos = Vec3::from(self.position);
        let target = Vec3::from(self.look_at);
        if (target - pos).norm() < 1e-12 {
            return Err(SceneError::BadCamera("look_at coincides with position".into()));
        }
        Ok(Camera::look_at(
            pos,
            target,
            Vec3::from(self.up),
            fx,
            fy,
            self.width,
            self.height,
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    /// lat-long PFM path
    #[serde(default)]
    pub envmap: Option<String>,
    /// TOML file with saved SH coefficients
    #[serde(default)]
    pub sh_file: Option<String>,
    /// uniform sky radiance
    #[serde(default)]
    pub ambient: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    #[serde(default)]
    pub mesh: Option<String>,
    /// built-in mesh: `{ kind = "torus", major = 0.5, ... }`
    #[serde(default)]
    pub primitive: Option<PrimitiveSpec>,
    #[serde(default)]
    pub albedo: Option<[f64; 3]>,
    #[serde(default)]
    pub texture: Option<String>,
    /// sphere-set file
    #[serde(default)]
    pub spheres: Option<String>,
    /// or fit one at load time
    #[serde(default)]
    pub fit: Option<FitSpec>,
    #[serde(default = "default_graph_k")]
    pub graph_k: usize,
    #[serde(default = "default_true")]
    pub cast_shadows: bool,
    #[serde(default)]
    pub translate: [f64; 3],
    /// axis-angle load-time rotation, degrees
    #[serde(default)]
    pub rotate_axis: Option<[f64; 3]>,
    #[serde(default)]
    pub rotate_degrees: f64,
}

fn default_graph_k() -> usize {
    4
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: HashMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub count: usize,
    #[serde(default = "default_fit_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda_coverage: f64,
}

fn default_fit_iterations() -> usize {
    60
}
fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockerSpec {
    pub center: [f64; 3],
    pub radius: f64,
    #[serde(default = "default_blocker_albedo")]
    pub albedo: [f64; 3],
}

fn default_blocker_albedo() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct VisibilitySpec {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub di_mode: bool,
}

fn default_epsilon() -> f64 {
    3.0
}
fn default_tau() -> f64 {
    0.3
}

/// Optional dataset matrix: meshes x envmaps enumerate task instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub meshes: Vec<String>,
    pub envmaps: Vec<String>,
}

/// One (mesh, envmap) combination from a dataset matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub mesh: String,
    pub envmap: String,
}

pub fn enumerate_instances(file: &SceneFile) -> Vec<TaskInstance> {
    match &file.dataset {
        None => Vec::new(),
        Some(d) => d
            .meshes
            .iter()
            .flat_map(|m| {
                d.envmaps.iter().map(move |e| TaskInstance {
                    mesh: m.clone(),
                    envmap: e.clone(),
                })
            })
            .collect(),
    }
}

pub fn parse_scene_file(text: &str) -> Result<SceneFile, SceneError> {
    toml::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))
}

/// Loads and fully resolves a scene: referenced assets are read, sphere
/// sets fitted if requested, graphs and exclusion masks built.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| SceneError::MissingAsset(path.to_path_buf()))?;
    let file = parse_scene_file(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    build_scene(&file, base)
}

pub fn build_scene(file: &SceneFile, base: &Path) -> Result<Scene, SceneError> {
    let camera = file.camera.build()?;
    let bands = file.bands;

    let resolve = |rel: &str| -> Result<PathBuf, SceneError> {
        let p = base.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(SceneError::MissingAsset(p))
        }
    };

    // light
    let light = match (&file.light.envmap, &file.light.sh_file, &file.light.ambient) {
        (Some(rel), _, _) => {
            let img = load_pfm(resolve(rel)?)?;
            project_envmap(&img, bands)?
        }
        (None, Some(rel), _) => {
            let text = std::fs::read_to_string(resolve(rel)?)?;
            let light: EnvironmentLight =
                toml::from_str(&text).map_err(|e| SceneError::Parse(e.to_string()))?;
            light.resized(bands)
        }
        (None, None, Some(rgb)) => EnvironmentLight::ambient(*rgb, bands),
        (None, None, None) => {
            return Err(SceneError::Parse(
                "light requires one of envmap, sh_file, ambient".into(),
            ))
        }
    };

    let mut objects = Vec::new();
    for spec in &file.objects {
        let bad = |message: &str| SceneError::BadObject {
            object: spec.name.clone(),
            message: message.to_string(),
        };
        let mut mesh = match (&spec.mesh, &spec.primitive) {
            (Some(rel), None) => load_obj(resolve(rel)?)?,
            (None, Some(p)) => primitives::by_name(&p.kind, &p.params)
                .ok_or_else(|| bad(&format!("unknown primitive kind {:?}", p.kind)))?,
            _ => return Err(bad("exactly one of mesh or primitive required")),
        };
        // load-time placement
        if let Some(axis) = spec.rotate_axis {
            let q = quat_from_axis_angle(Vec3::from(axis), spec.rotate_degrees.to_radians());
            for v in mesh.vertices.iter_mut() {
                *v = crate::math::quat_rotate(q, *v);
            }
        }
        let t = Vec3::from(spec.translate);
        for v in mesh.vertices.iter_mut() {
            *v += t;
        }
        mesh.recompute_normals();

        let albedo = match (&spec.albedo, &spec.texture) {
            (Some(rgb), None) => AlbedoSource::Constant(*rgb),
            (None, Some(rel)) => {
                if mesh.uvs.is_none() {
                    return Err(bad("texture albedo requires mesh UVs"));
                }
                let p = resolve(rel)?;
                let img = if p.extension().and_then(|e| e.to_str()) == Some("pfm") {
                    load_pfm(p)?
                } else {
                    load_png_linear(p)?
                };
                AlbedoSource::Texture(img)
            }
            (None, None) => AlbedoSource::Constant([0.8, 0.8, 0.8]),
            _ => return Err(bad("albedo and texture are mutually exclusive")),
        };

        let spheres = match (&spec.spheres, &spec.fit) {
            (Some(rel), None) => Some(load_sphere_set(resolve(rel)?)?),
            (None, Some(fit)) => Some(fit_spheres_with(
                &mesh,
                fit.count,
                fit.iterations,
                fit.seed,
                &FitConfig {
                    lambda_coverage: fit.lambda_coverage,
                    ..Default::default()
                },
            )?),
            (None, None) => None,
            _ => return Err(bad("spheres and fit are mutually exclusive")),
        };

        let graph = match &spheres {
            Some(s) => Some(build_graph(&mesh, s, spec.graph_k.min(s.len()))?),
            None => None,
        };
        let exclusions = match (&spheres, &graph) {
            (Some(s), Some(g)) => attached_sphere_mask(&mesh, g, s, file.visibility.tau),
            _ => vec![Vec::new(); mesh.vertex_count()],
        };

        objects.push(SceneObject {
            name: spec.name.clone(),
            mesh,
            albedo,
            spheres,
            graph,
            exclusions,
            cast_shadows: spec.cast_shadows,
        });
    }

    let extra_blockers = file
        .blockers
        .iter()
        .map(|b| {
            (
                Sphere {
                    center: Vec3::from(b.center),
                    radius: b.radius,
                },
                b.albedo,
            )
        })
        .collect();

    Ok(Scene {
        bands,
        background: file.background,
        light,
        camera,
        objects,
        extra_blockers,
        visibility: VisibilityConfig {
            epsilon: file.visibility.epsilon,
            tau: file.visibility.tau,
        },
        raster: RasterParams::default(),
        di_mode: file.visibility.di_mode,
        static_cache: None,
    })
}

// ---------------------------------------------------------------------------
// Results and manifest
// ---------------------------------------------------------------------------

/// Writes final renders (PNG + PFM side by side), the loss log, and any
/// parameter files into `dir`. Overwrites on rerun.
pub fn save_results(
    dir: impl AsRef<Path>,
    params: &[(&str, String)],
    renders: &[(&str, &Image)],
    loss_log: &[f64],
) -> Result<(), SceneError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (name, img) in renders {
        save_png_srgb(img, dir.join(format!("{name}.png")))?;
        save_pfm(img, dir.join(format!("{name}.pfm")))?;
    }
    if !loss_log.is_empty() {
        let mut text = String::from("iteration,loss\n");
        for (i, l) in loss_log.iter().enumerate() {
            text.push_str(&format!("{i},{l:.17e}\n"));
        }
        std::fs::write(dir.join("loss.csv"), text)?;
    }
    for (name, body) in params {
        std::fs::write(dir.join(format!("{name}.toml")), body)?;
    }
    Ok(())
}

/// Reproducibility manifest: seed, full config echo, and content hashes of
/// every referenced asset.
pub fn write_manifest(
    dir: impl AsRef<Path>,
    seed: u64,
    config_echo: &str,
    assets: &[PathBuf],
) -> Result<(), SceneError> {
    use sha2::Digest;
    let mut text = String::new();
    text.push_str(&format!("seed = {seed}\n"));
    text.push_str("[assets]\n");
    for a in assets {
        let bytes = std::fs::read(a)?;
        let mut hasher = sha2::Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        text.push_str(&format!("\"{}\" = \"{hex}\"\n", a.display()));
    }
    text.push_str("\n[config]\ntext = '''\n");
    text.push_str(config_echo);
    text.push_str("\n'''\n");
    std::fs::write(dir.as_ref().join("manifest.toml"), text)?;
    Ok(())
}
