//! Analysis-by-synthesis drivers: plain gradient descent on the L2 image
//! loss, one parameter block free per task, plus the recovery metrics.

use crate::diff::{backward, forward, precompute_static, DiffError, ParamBlock};
use crate::geometry::{RigidPose, TriangleMesh};
use crate::img::Image;
use crate::math::{quat_angle_between, Vec3};
use crate::scene::Scene;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("loss became non-finite at iteration {iteration}; diagnostic dump: {dump}")]
    NumericalFailure { iteration: usize, dump: String },
    #[error("loss diverged at iteration {iteration} ({loss:.3e} from initial {initial:.3e})")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("metric inputs mismatched: {0}")]
    MetricMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Texture,
    Lighting,
    Pose,
    Geometry,
    ShadowOnly,
}

#[derive(Clone, Debug)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// gradient-descent step size
    pub step: f64,
    pub iterations: usize,
    pub band_count: usize,
    /// optional per-pixel loss mask (shadow-region fitting)
    pub mask: Option<Vec<bool>>,
    /// object whose pose / deformation / texture is free
    pub target_object: usize,
    /// texture resolution when the albedo is 2D-parameterized
    pub texture_size: usize,
    /// initial values for the free block (task-specific default if none)
    pub init_values: Option<Vec<f64>>,
}

impl TaskConfig {
    pub fn new(kind: TaskKind) -> Self {
        TaskConfig {
            kind,
            step: 1e-2,
            iterations: 500,
            band_count: 8,
            mask: None,
            target_object: 0,
            texture_size: 256,
            init_values: None,
        }
    }
}

/// Masked mean of summed squared per-pixel differences: the sum over
/// channels of (a-b)^2, averaged over masked pixels.
pub fn l2_loss(rendered: &Image, reference: &Image, mask: Option<&[bool]>) -> f64 {
    assert_eq!(rendered.width, reference.width);
    assert_eq!(rendered.height, reference.height);
    let np = rendered.width * rendered.height;
    let count = mask.map(|m| m.iter().filter(|x| **x).count()).unwrap_or(np);
    if count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for p in 0..np {
        if mask.map(|m| m[p]).unwrap_or(true) {
            for c in 0..3 {
                let d = rendered.data[3 * p + c] - reference.data[3 * p + c];
                acc += d * d;
            }
        }
    }
    acc / count as f64
}

/// Loss and its gradient with respect to the rendered image.
pub fn l2_loss_gradient(
    rendered: &Image,
    reference: &Image,
    mask: Option<&[bool]>,
) -> (f64, Vec<f64>) {
    let np = rendered.width * rendered.height;
    let count = mask.map(|m| m.iter().filter(|x| **x).count()).unwrap_or(np);
    let mut grad = vec![0.0; 3 * np];
    let mut acc = 0.0;
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    for p in 0..np {
        if mask.map(|m| m[p]).unwrap_or(true) {
            for c in 0..3 {
                let d = rendered.data[3 * p + c] - reference.data[3 * p + c];
                acc += d * d;
                grad[3 * p + c] = 2.0 * d * inv;
            }
        }
    }
    (acc * inv, grad)
}

pub struct SolveResult {
    pub blocks: Vec<ParamBlock>,
    pub loss_history: Vec<f64>,
    pub final_render: Image,
}

/// Builds the free parameter block for a task. Fixed quantities stay in
/// the scene.
pub fn init_block(scene: &Scene, config: &TaskConfig) -> Result<ParamBlock, SolveError> {
    let o = config.target_object;
    let block = match config.kind {
        TaskKind::Texture => {
            ParamBlock::albedo_white_texture(o, config.texture_size, config.texture_size)
        }
        TaskKind::Lighting => ParamBlock::lighting_zeros(scene.bands),
        TaskKind::Pose => ParamBlock::pose_identity(o),
        TaskKind::Geometry | TaskKind::ShadowOnly => {
            ParamBlock::deformation_identity(scene, o)?
        }
    };
    Ok(match &config.init_values {
        Some(v) => {
            assert_eq!(v.len(), block.values.len(), "init_values shape mismatch");
            ParamBlock::new(block.kind, v.clone())
        }
        None => block,
    })
}

/// Plain gradient descent with a fixed step over a fixed iteration count.
/// Deterministic; aborts on non-finite loss with a diagnostic dump and on
/// gross divergence.
pub fn solve(
    scene: &mut Scene,
    reference: &Image,
    config: &TaskConfig,
) -> Result<SolveResult, SolveError> {
    if reference.width != scene.camera.width || reference.height != scene.camera.height {
        return Err(SolveError::DimensionMismatch(
            scene.camera.width,
            scene.camera.height,
            reference.width,
            reference.height,
        ));
    }
    let geometry_static = matches!(config.kind, TaskKind::Texture | TaskKind::Lighting);
    if geometry_static && scene.static_cache.is_none() {
        precompute_static(scene)?;
    }
    let mut blocks = vec![init_block(scene, config)?];
    let mask = config.mask.as_deref();
    let mut history = Vec::with_capacity(config.iterations);
    let mut final_render = None;
    let mut initial_loss = f64::NAN;
    for it in 0..config.iterations {
        for b in blocks.iter_mut() {
            b.zero_grad();
        }
        let (image, tape) = forward(scene, &blocks)?;
        let (loss, d_image) = l2_loss_gradient(&image, reference, mask);
        if !loss.is_finite() {
            let dump = dump_block(&blocks[0]);
            return Err(SolveError::NumericalFailure {
                iteration: it,
                dump,
            });
        }
        if it == 0 {
            initial_loss = loss;
        } else if loss > 100.0 * initial_loss.max(1e-12) && it > 10 {
            return Err(SolveError::Diverged {
                iteration: it,
                loss,
                initial: initial_loss,
            });
        }
        history.push(loss);
        final_render = Some(image);
        backward(&tape, scene, &d_image, &mut blocks)?;
        for b in blocks.iter_mut() {
            for (v, g) in b.values.iter_mut().zip(&b.grad) {
                *v -= config.step * g;
            }
            b.project();
        }
    }
    Ok(SolveResult {
        blocks,
        loss_history: history,
        final_render: final_render.expect("at least one iteration"),
    })
}

fn dump_block(block: &ParamBlock) -> String {
    let bad: Vec<usize> = block
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .take(8)
        .collect();
    format!(
        "block {:?}: {} values, non-finite at {:?}, grad norm {:.3e}",
        block.kind,
        block.values.len(),
        bad,
        block.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    )
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    /// masked texture MSE (texture task)
    pub texture_mse: Option<f64>,
    /// mean vertex distance error as % of the bbox diagonal
    pub mde_percent: Option<f64>,
    /// rotation error, radians
    pub rotation_error: Option<f64>,
    /// squared translation distance
    pub translation_error: Option<f64>,
    /// relit-probe MSE (lighting task)
    pub relight_mse: Option<f64>,
}

/// Texture recovery error over the texels marked visible.
pub fn texture_mse(
    recovered: &Image,
    ground_truth: &Image,
    visible: &[bool],
) -> Result<f64, SolveError> {
    if recovered.width != ground_truth.width || recovered.height != ground_truth.height {
        return Err(SolveError::MetricMismatch(format!(
            "texture sizes {}x{} vs {}x{}",
            recovered.width, recovered.height, ground_truth.width, ground_truth.height
        )));
    }
    let count = visible.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(SolveError::MetricMismatch("empty visibility mask".into()));
    }
    let mut acc = 0.0;
    for p in 0..recovered.width * recovered.height {
        if visible[p] {
            for c in 0..3 {
                let d = recovered.data[3 * p + c] - ground_truth.data[3 * p + c];
                acc += d * d;
            }
        }
    }
    Ok(acc / (3 * count) as f64)
}

/// Texels that actually influence the rendered image: those with bilinear
/// support from a vertex referenced by a covered pixel.
pub fn visible_texels(
    scene: &Scene,
    object: usize,
    tex_w: usize,
    tex_h: usize,
    fb_triangle_id: &[i32],
) -> Vec<bool> {
    let mesh = &scene.objects[object].mesh;
    let uvs = mesh.uvs.as_ref().expect("texture metric requires UVs");
    // vertex offset of the object in the concatenated raster stream
    let offset: usize = scene.objects[..object]
        .iter()
        .map(|o| o.mesh.vertex_count())
        .sum();
    let mut vertex_visible = vec![false; mesh.vertex_count()];
    let tri_offset: usize = scene.objects[..object]
        .iter()
        .map(|o| o.mesh.triangle_count())
        .sum();
    for ti in fb_triangle_id.iter().filter(|t| **t >= 0) {
        let ti = *ti as usize;
        if ti >= tri_offset && ti < tri_offset + mesh.triangle_count() {
            for &v in &mesh.triangles[ti - tri_offset] {
                vertex_visible[v as usize] = true;
            }
        }
    }
    let _ = offset;
    let probe = Image::new(tex_w, tex_h);
    let mut mask = vec![false; tex_w * tex_h];
    for (v, uv) in uvs.iter().enumerate() {
        if vertex_visible[v] {
            let (_, taps) = probe.sample_bilinear(uv[0], uv[1]);
            for (idx, w) in taps {
                if w > 1e-9 {
                    mask[idx] = true;
                }
            }
        }
    }
    mask
}

/// Pose metrics: MDE as % of the ground-truth bbox diagonal, rotation
/// angle error, squared translation distance.
pub fn pose_metrics(
    mesh: &TriangleMesh,
    recovered: &RigidPose,
    ground_truth: &RigidPose,
) -> MetricsReport {
    let diag = mesh.bbox_diagonal();
    let mut acc = 0.0;
    for v in &mesh.vertices {
        acc += (recovered.apply(*v) - ground_truth.apply(*v)).norm();
    }
    let mde = acc / mesh.vertex_count() as f64 / diag * 100.0;
    MetricsReport {
        mde_percent: Some(mde),
        rotation_error: Some(quat_angle_between(
            recovered.rotation,
            ground_truth.rotation,
        )),
        translation_error: Some((recovered.translation - ground_truth.translation).norm_squared()),
        ..Default::default()
    }
}

/// Geometry metric: MDE between two vertex sets, % of bbox diagonal.
pub fn geometry_mde(
    recovered: &[Vec3],
    ground_truth: &[Vec3],
    bbox_diagonal: f64,
) -> Result<f64, SolveError> {
    if recovered.len() != ground_truth.len() {
        return Err(SolveError::MetricMismatch(format!(
            "vertex counts {} vs {}",
            recovered.len(),
            ground_truth.len()
        )));
    }
    let acc: f64 = recovered
        .iter()
        .zip(ground_truth)
        .map(|(a, b)| (a - b).norm())
        .sum();
    Ok(acc / recovered.len() as f64 / bbox_diagonal * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_examples() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(l2_loss(&a, &a, None), 0.0);
        let b = Image::filled(4, 4, [0.6; 3]);
        approx::assert_relative_eq!(l2_loss(&a, &b, None), 0.03, epsilon = 1e-12);
        // mask covering half equals the unmasked loss of that half
        let mut c = b.clone();
        for y in 0..4 {
            for x in 0..2 {
                c.set_pixel(x, y, [0.9, 0.9, 0.9]);
            }
        }
        let mask: Vec<bool> = (0..16).map(|p| p % 4 < 2).collect();
        let masked = l2_loss(&a, &c, Some(&mask));
        approx::assert_relative_eq!(masked, 3.0 * 0.16, epsilon = 1e-12);
    }

    #[test]
    fn l2_gradient_matches_fd() {
        let mut a = Image::filled(3, 2, [0.5; 3]);
        let b = Image::filled(3, 2, [0.3; 3]);
        let (_, grad) = l2_loss_gradient(&a, &b, None);
        let h = 1e-6;
        for i in [0usize, 5, 17] {
            let orig = a.data[i];
            a.data[i] = orig + h;
            let lp = l2_loss(&a, &b, None);
            a.data[i] = orig - h;
            let lm = l2_loss(&a, &b, None);
            a.data[i] = orig;
            approx::assert_relative_eq!(grad[i], (lp - lm) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn pose_metric_examples() {
        let mesh = crate::geometry::primitives::box_mesh(Vec3::new(1.0, 1.0, 1.0));
        let id = RigidPose::identity();
        let m = pose_metrics(&mesh, &id, &id);
        assert_eq!(m.mde_percent.unwrap(), 0.0);
        assert_eq!(m.rotation_error.unwrap(), 0.0);
        assert_eq!(m.translation_error.unwrap(), 0.0);
        // pure translation: TE = |t|^2, RE = 0
        let t = Vec3::new(0.3, -0.4, 0.0);
        let moved = RigidPose {
            rotation: crate::math::QUAT_IDENTITY,
            translation: t,
        };
        let m = pose_metrics(&mesh, &moved, &id);
        approx::assert_relative_eq!(m.translation_error.unwrap(), 0.25, epsilon = 1e-12);
        assert_eq!(m.rotation_error.unwrap(), 0.0);
    }

    #[test]
    fn mde_of_uniform_translation_is_percent_of_diagonal() {
        let mesh = crate::geometry::primitives::box_mesh(Vec3::new(1.0, 1.0, 1.0));
        let diag = mesh.bbox_diagonal();
        let shift = Vec3::new(diag * 0.01, 0.0, 0.0);
        let moved: Vec<Vec3> = mesh.vertices.iter().map(|v| v + shift).collect();
        let mde = geometry_mde(&moved, &mesh.vertices, diag).unwrap();
        approx::assert_relative_eq!(mde, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_mismatch_errors() {
        let a = vec![Vec3::zeros(); 3];
        let b = vec![Vec3::zeros(); 4];
        assert!(geometry_mde(&a, &b, 1.0).is_err());
    }
}
