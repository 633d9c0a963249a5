//! Reverse-mode differentiation over the full render. The forward pass
//! records pipeline-stage operations (deform, rigid pose, normals,
//! visibility, shading, rasterize) on a tape; the backward pass walks them
//! in reverse, pulling an image cotangent back into parameter blocks.
//!
//! Image radiance carries the Lambertian `1/pi`, so a unit-albedo surface
//! under a uniform unit sky renders as 1.0 (matching the reference
//! tracer's convention).

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};

use crate::geometry::{
    deform_apply, deform_vjp, rigid_points, rigid_points_vjp, vertex_normals, vertex_normals_vjp,
    NODE_PARAMS,
};
use crate::img::Image;
use crate::math::{Direction, Vec3};
use crate::raster::{rasterize, rasterize_vjp, Framebuffer, RasterCtx};
use crate::scene::{Scene, StaticCache};
use crate::sh::{
    rotate_zonal_into, rotate_zonal_vjp, sh_product_into, triple_product_tensor, zonal_clamped_cosine,
    ShError, TripleProductTensor,
};
use crate::visibility::{visibility_sh_at, visibility_vjp_at, Blockers, SavedVisibility};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value in parameter block {0}")]
    NonFinite(usize),
    #[error("block {block}: expected {expected} values, got {got}")]
    BadBlockShape {
        block: usize,
        expected: usize,
        got: usize,
    },
    #[error("duplicate parameter block for the same target")]
    DuplicateBlock,
    #[error("object {0} has no deformation graph")]
    MissingGraph(usize),
    #[error("object {0} has no UVs for a texture albedo block")]
    MissingUvs(usize),
    #[error("gradient image shape mismatch: expected {expected}, got {got}")]
    BadImageShape { expected: usize, got: usize },
    #[error("parameter list does not match the tape ({expected} blocks, got {got})")]
    BadParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Sh(#[from] ShError),
}

/// How an albedo block maps onto values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AlbedoLayout {
    /// 3 values per mesh vertex
    PerVertex,
    /// texture image, 3 * width * height values, sampled at mesh UVs
    Texture { width: usize, height: usize },
}

/// One optimizable quantity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Albedo { object: usize, layout: AlbedoLayout },
    Lighting,
    RigidPose { object: usize },
    Deformation { object: usize },
}

#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub kind: BlockKind,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamBlock {
    pub fn new(kind: BlockKind, values: Vec<f64>) -> Self {
        let grad = vec![0.0; values.len()];
        ParamBlock { kind, values, grad }
    }

    pub fn lighting_zeros(bands: usize) -> Self {
        Self::new(BlockKind::Lighting, vec![0.0; 3 * bands * bands])
    }

    pub fn lighting_from_scene(scene: &Scene) -> Self {
        let n2 = scene.bands * scene.bands;
        let mut values = Vec::with_capacity(3 * n2);
        for c in 0..3 {
            values.extend_from_slice(&scene.light.channels[c].coeffs);
        }
        Self::new(BlockKind::Lighting, values)
    }

    pub fn albedo_per_vertex(object: usize, rgb: &[[f64; 3]]) -> Self {
        let values = rgb.iter().flat_map(|c| c.iter().copied()).collect();
        Self::new(
            BlockKind::Albedo {
                object,
                layout: AlbedoLayout::PerVertex,
            },
            values,
        )
    }

    /// Pure-white texture block (the texture task's initialization).
    pub fn albedo_white_texture(object: usize, width: usize, height: usize) -> Self {
        Self::new(
            BlockKind::Albedo {
                object,
                layout: AlbedoLayout::Texture { width, height },
            },
            vec![1.0; 3 * width * height],
        )
    }

    pub fn pose(object: usize, pose: &crate::geometry::RigidPose) -> Self {
        Self::new(BlockKind::RigidPose { object }, pose.to_params().to_vec())
    }

    pub fn pose_identity(object: usize) -> Self {
        Self::pose(object, &crate::geometry::RigidPose::identity())
    }

    pub fn deformation_identity(scene: &Scene, object: usize) -> Result<Self, DiffError> {
        let graph = scene.objects[object]
            .graph
            .as_ref()
            .ok_or(DiffError::MissingGraph(object))?;
        Ok(Self::new(
            BlockKind::Deformation { object },
            graph.identity_params(),
        ))
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Post-step projection: albedo to [0,1], unit quaternions for pose
    /// and deformation blocks.
    pub fn project(&mut self) {
        match &self.kind {
            BlockKind::Albedo { .. } => {
                for v in self.values.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            BlockKind::RigidPose { .. } => renorm_quats(&mut self.values, 7),
            BlockKind::Deformation { .. } => renorm_quats(&mut self.values, NODE_PARAMS),
            BlockKind::Lighting => {}
        }
    }
}

fn renorm_quats(values: &mut [f64], stride: usize) {
    for chunk in values.chunks_mut(stride) {
        let n = (chunk[0] * chunk[0] + chunk[1] * chunk[1] + chunk[2] * chunk[2]
            + chunk[3] * chunk[3])
            .sqrt();
        if n > 1e-12 {
            for c in chunk.iter_mut().take(4) {
                *c /= n;
            }
        } else {
            chunk[0] = 1.0;
            chunk[1] = 0.0;
            chunk[2] = 0.0;
            chunk[3] = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum VisMode {
    Slot(usize),
    CachedT(Arc<Vec<f64>>),
    One,
}

enum BlockerPart {
    Dynamic { slot: usize, object: usize },
    StaticObject { object: usize },
    Extras,
}

struct ShadingSaved {
    dots: Vec<[f64; 3]>,
    /// flat per-vertex cosine-lobe vectors (empty in cached mode)
    h: Vec<f64>,
    /// flat per-vertex transfer vectors (empty unless VisMode::Slot)
    t: Vec<f64>,
}

enum Op {
    /// binds parameter block values to a slot
    Input { block: usize, out: usize },
    ConstantLight { out: usize },
    ConstantVerts { object: usize, out: usize },
    ConstantCenters { object: usize, out: usize },
    ConstantAlbedo { object: usize, out: usize },
    Deform { object: usize, params: usize, out: usize },
    /// deformed node centers `g_j + t_j`
    NodeCenters { object: usize, params: usize, out: usize },
    Rigid { params: usize, input: usize, out: usize },
    Normals { object: usize, verts: usize, out: usize },
    GatherBlockers {
        parts: Vec<BlockerPart>,
        out_centers: usize,
        out_radii: usize,
    },
    Visibility {
        object: usize,
        verts: usize,
        centers: usize,
        radii: usize,
        out: usize,
        saved: Vec<SavedVisibility>,
    },
    TextureAlbedo {
        object: usize,
        tex: usize,
        width: usize,
        height: usize,
        out: usize,
    },
    Shading {
        object: usize,
        normals: usize,
        albedo: usize,
        light: usize,
        vis: VisMode,
        out: usize,
        saved: ShadingSaved,
    },
    Concat { inputs: Vec<usize>, out: usize },
    Rasterize {
        verts: usize,
        radiance: usize,
        triangles: Arc<Vec<[u32; 3]>>,
        saved: Option<(Framebuffer, RasterCtx)>,
    },
}

/// Recorded forward computation. Slots are write-once value vectors; ops
/// reference them by index.
pub struct Tape {
    ops: Vec<Op>,
    slots: Vec<Vec<f64>>,
    image: Image,
    n_params: usize,
    bands: usize,
}

impl Tape {
    pub fn image(&self) -> &Image {
        &self.image
    }

    /// Hard framebuffer of the recorded render.
    pub fn framebuffer(&self) -> &Framebuffer {
        for op in self.ops.iter().rev() {
            if let Op::Rasterize { saved: Some((fb, _)), .. } = op {
                return fb;
            }
        }
        unreachable!("tape always ends in a rasterize op")
    }

    /// Spheres whose cap angle had to be clamped during the forward pass.
    pub fn clamped_caps(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                Op::Visibility { saved, .. } => saved.iter().map(|s| s.clamped).sum(),
                _ => 0,
            })
            .sum()
    }

    /// Re-executes every recorded operation from the stored input slots.
    pub fn replay(&mut self, scene: &Scene) -> Result<Image, DiffError> {
        let tensor = triple_product_tensor(self.bands)?;
        for i in 0..self.ops.len() {
            execute_op(i, &mut self.ops, &mut self.slots, scene, &tensor, &mut self.image)?;
        }
        Ok(self.image.clone())
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

fn flatten_vec3(v: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * v.len());
    for p in v {
        out.extend_from_slice(&[p.x, p.y, p.z]);
    }
    out
}

fn unflatten_vec3(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

/// Computes the per-object static transfer vectors `T = V * H` for scenes
/// whose geometry will not move during a solve.
pub fn precompute_static(scene: &mut Scene) -> Result<(), DiffError> {
    let tensor = triple_product_tensor(scene.bands)?;
    let (offsets, total) = scene.blocker_layout();
    let mut centers = Vec::with_capacity(total);
    let mut radii = Vec::with_capacity(total);
    for o in &scene.objects {
        if o.cast_shadows {
            if let Some(s) = &o.spheres {
                centers.extend(s.deformed_centers());
                radii.extend(s.radii());
            }
        }
    }
    for (b, _) in &scene.extra_blockers {
        centers.push(b.center);
        radii.push(b.radius);
    }
    let eps = scene.visibility.epsilon;
    let di = scene.di_mode || total == 0;
    let zcc = zonal_clamped_cosine(scene.bands);
    let n2 = scene.bands * scene.bands;
    let mut transfer = Vec::with_capacity(scene.objects.len());
    for (oi, obj) in scene.objects.iter().enumerate() {
        let nv = obj.mesh.vertex_count();
        let mut t_flat = vec![0.0; nv * n2];
        let offset = offsets[oi];
        t_flat
            .par_chunks_mut(n2)
            .enumerate()
            .for_each(|(v, t_out)| {
                let mut h = vec![0.0; n2];
                let normal = obj.mesh.normals[v];
                rotate_zonal_into(&zcc.coeffs, Direction::from_unit(normal), &mut h);
                if di {
                    t_out.copy_from_slice(&h);
                } else {
                    let excl: Vec<u32> = match offset {
                        Some(off) => obj.exclusions[v].iter().map(|i| i + off as u32).collect(),
                        None => Vec::new(),
                    };
                    let (vis, _) = visibility_sh_at(
                        obj.mesh.vertices[v],
                        Blockers {
                            centers: &centers,
                            radii: &radii,
                        },
                        &excl,
                        eps,
                        &tensor,
                    )
                    .expect("band counts agree by construction");
                    sh_product_into(&vis.coeffs, &h, &tensor, t_out);
                }
            });
        transfer.push(Arc::new(t_flat));
    }
    scene.static_cache = Some(StaticCache { transfer });
    Ok(())
}

/// Records and executes the full differentiable render.
pub fn forward(scene: &Scene, params: &[ParamBlock]) -> Result<(Image, Tape), DiffError> {
    // validation
    for (bi, p) in params.iter().enumerate() {
        if p.values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite(bi));
        }
        let expected = match &p.kind {
            BlockKind::Lighting => 3 * scene.bands * scene.bands,
            BlockKind::RigidPose { .. } => 7,
            BlockKind::Deformation { object } => {
                let graph = scene.objects[*object]
                    .graph
                    .as_ref()
                    .ok_or(DiffError::MissingGraph(*object))?;
                graph.node_count() * NODE_PARAMS
            }
            BlockKind::Albedo { object, layout } => match layout {
                AlbedoLayout::PerVertex => 3 * scene.objects[*object].mesh.vertex_count(),
                AlbedoLayout::Texture { width, height } => {
                    if scene.objects[*object].mesh.uvs.is_none() {
                        return Err(DiffError::MissingUvs(*object));
                    }
                    3 * width * height
                }
            },
        };
        if p.values.len() != expected {
            return Err(DiffError::BadBlockShape {
                block: bi,
                expected,
                got: p.values.len(),
            });
        }
        for (bj, q) in params.iter().enumerate() {
            if bj > bi && same_target(&p.kind, &q.kind) {
                return Err(DiffError::DuplicateBlock);
            }
        }
    }

    let tensor = triple_product_tensor(scene.bands)?;
    let mut slots: Vec<Vec<f64>> = Vec::new();
    let mut ops: Vec<Op> = Vec::new();
    let alloc = |slots: &mut Vec<Vec<f64>>| -> usize {
        slots.push(Vec::new());
        slots.len() - 1
    };

    let find = |pred: &dyn Fn(&BlockKind) -> bool| -> Option<usize> {
        params.iter().position(|p| pred(&p.kind))
    };
    let geometry_dynamic = params
        .iter()
        .any(|p| matches!(p.kind, BlockKind::RigidPose { .. } | BlockKind::Deformation { .. }));
    let cache = if geometry_dynamic {
        None
    } else {
        scene.static_cache.as_ref()
    };

    // light slot
    let light_slot = alloc(&mut slots);
    match find(&|k| matches!(k, BlockKind::Lighting)) {
        Some(block) => ops.push(Op::Input {
            block,
            out: light_slot,
        }),
        None => ops.push(Op::ConstantLight { out: light_slot }),
    }

    // geometry chains per object
    let mut verts_slots = Vec::with_capacity(scene.objects.len());
    let mut centers_slots: Vec<Option<usize>> = Vec::with_capacity(scene.objects.len());
    let mut dynamic_centers = vec![false; scene.objects.len()];
    for (oi, obj) in scene.objects.iter().enumerate() {
        let deform_block = find(&|k| matches!(k, BlockKind::Deformation { object } if *object == oi));
        let pose_block = find(&|k| matches!(k, BlockKind::RigidPose { object } if *object == oi));

        let mut verts = alloc(&mut slots);
        match deform_block {
            Some(block) => {
                let p = alloc(&mut slots);
                ops.push(Op::Input { block, out: p });
                ops.push(Op::Deform {
                    object: oi,
                    params: p,
                    out: verts,
                });
                // centers move with the node translations
                if obj.spheres.is_some() {
                    let c = alloc(&mut slots);
                    ops.push(Op::NodeCenters {
                        object: oi,
                        params: p,
                        out: c,
                    });
                    centers_slots.push(Some(c));
                    dynamic_centers[oi] = true;
                } else {
                    centers_slots.push(None);
                }
            }
            None => {
                ops.push(Op::ConstantVerts {
                    object: oi,
                    out: verts,
                });
                if obj.spheres.is_some() {
                    let c = alloc(&mut slots);
                    ops.push(Op::ConstantCenters {
                        object: oi,
                        out: c,
                    });
                    centers_slots.push(Some(c));
                } else {
                    centers_slots.push(None);
                }
            }
        }
        if let Some(block) = pose_block {
            let p = alloc(&mut slots);
            ops.push(Op::Input { block, out: p });
            let posed = alloc(&mut slots);
            ops.push(Op::Rigid {
                params: p,
                input: verts,
                out: posed,
            });
            verts = posed;
            if let Some(c) = centers_slots[oi] {
                let posed_c = alloc(&mut slots);
                ops.push(Op::Rigid {
                    params: p,
                    input: c,
                    out: posed_c,
                });
                centers_slots[oi] = Some(posed_c);
                dynamic_centers[oi] = true;
            }
        }
        verts_slots.push(verts);
    }

    // blocker gathering (skipped entirely in DI mode)
    let (offsets, total_blockers) = scene.blocker_layout();
    let blocker_slots = if scene.di_mode || total_blockers == 0 || cache.is_some() {
        None
    } else {
        let parts: Vec<BlockerPart> = scene
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.cast_shadows && o.spheres.is_some())
            .map(|(oi, _)| {
                if dynamic_centers[oi] {
                    BlockerPart::Dynamic {
                        slot: centers_slots[oi].unwrap(),
                        object: oi,
                    }
                } else {
                    BlockerPart::StaticObject { object: oi }
                }
            })
            .chain(if scene.extra_blockers.is_empty() {
                None
            } else {
                Some(BlockerPart::Extras)
            })
            .collect();
        let out_centers = alloc(&mut slots);
        let out_radii = alloc(&mut slots);
        ops.push(Op::GatherBlockers {
            parts,
            out_centers,
            out_radii,
        });
        Some((out_centers, out_radii))
    };

    // shading chains per object
    let mut radiance_slots = Vec::with_capacity(scene.objects.len());
    for oi in 0..scene.objects.len() {
        let normals = alloc(&mut slots);
        ops.push(Op::Normals {
            object: oi,
            verts: verts_slots[oi],
            out: normals,
        });

        let albedo_slot = match find(&|k| matches!(k, BlockKind::Albedo { object, .. } if *object == oi))
        {
            Some(block) => {
                let input = alloc(&mut slots);
                ops.push(Op::Input {
                    block,
                    out: input,
                });
                match &params[block].kind {
                    BlockKind::Albedo {
                        layout: AlbedoLayout::Texture { width, height },
                        ..
                    } => {
                        let out = alloc(&mut slots);
                        ops.push(Op::TextureAlbedo {
                            object: oi,
                            tex: input,
                            width: *width,
                            height: *height,
                            out,
                        });
                        out
                    }
                    _ => input,
                }
            }
            None => {
                let out = alloc(&mut slots);
                ops.push(Op::ConstantAlbedo {
                    object: oi,
                    out,
                });
                out
            }
        };

        let vis = if let Some(cache) = cache {
            VisMode::CachedT(cache.transfer[oi].clone())
        } else if scene.di_mode || total_blockers == 0 {
            VisMode::One
        } else {
            let (bc, br) = blocker_slots.unwrap();
            let out = alloc(&mut slots);
            ops.push(Op::Visibility {
                object: oi,
                verts: verts_slots[oi],
                centers: bc,
                radii: br,
                out,
                saved: Vec::new(),
            });
            let _ = offsets; // exclusion offsets resolved during execution
            VisMode::Slot(out)
        };

        let out = alloc(&mut slots);
        ops.push(Op::Shading {
            object: oi,
            normals,
            albedo: albedo_slot,
            light: light_slot,
            vis,
            out,
            saved: ShadingSaved {
                dots: Vec::new(),
                h: Vec::new(),
                t: Vec::new(),
            },
        });
        radiance_slots.push(out);
    }

    // concatenate and rasterize
    let all_verts = alloc(&mut slots);
    ops.push(Op::Concat {
        inputs: verts_slots.clone(),
        out: all_verts,
    });
    let all_radiance = alloc(&mut slots);
    ops.push(Op::Concat {
        inputs: radiance_slots,
        out: all_radiance,
    });
    let mut triangles = Vec::new();
    let mut voffset = 0u32;
    for obj in &scene.objects {
        triangles.extend(
            obj.mesh
                .triangles
                .iter()
                .map(|t| [t[0] + voffset, t[1] + voffset, t[2] + voffset]),
        );
        voffset += obj.mesh.vertex_count() as u32;
    }
    ops.push(Op::Rasterize {
        verts: all_verts,
        radiance: all_radiance,
        triangles: Arc::new(triangles),
        saved: None,
    });

    let mut tape = Tape {
        ops,
        slots,
        image: Image::new(scene.camera.width, scene.camera.height),
        n_params: params.len(),
        bands: scene.bands,
    };

    // bind inputs and execute
    for op in &tape.ops {
        if let Op::Input { block, out } = op {
            tape.slots[*out] = params[*block].values.clone();
        }
    }
    for i in 0..tape.ops.len() {
        execute_op(i, &mut tape.ops, &mut tape.slots, scene, &tensor, &mut tape.image)?;
    }
    Ok((tape.image.clone(), tape))
}

fn same_target(a: &BlockKind, b: &BlockKind) -> bool {
    use BlockKind::*;
    match (a, b) {
        (Lighting, Lighting) => true,
        (Albedo { object: x, .. }, Albedo { object: y, .. }) => x == y,
        (RigidPose { object: x }, RigidPose { object: y }) => x == y,
        (Deformation { object: x }, Deformation { object: y }) => x == y,
        _ => false,
    }
}

fn execute_op(
    index: usize,
    ops: &mut [Op],
    slots: &mut [Vec<f64>],
    scene: &Scene,
    tensor: &TripleProductTensor,
    image: &mut Image,
) -> Result<(), DiffError> {
    let n2 = scene.bands * scene.bands;
    // split so we can mutate the current op while reading slots
    let (op, _) = {
        let (head, tail) = ops.split_at_mut(index);
        let _ = head;
        (&mut tail[0], ())
    };
    match op {
        Op::Input { .. } => {} // bound before execution
        Op::ConstantLight { out } => {
            let mut v = Vec::with_capacity(3 * n2);
            for c in 0..3 {
                v.extend_from_slice(&scene.light.channels[c].coeffs);
            }
            slots[*out] = v;
        }
        Op::ConstantVerts { object, out } => {
            slots[*out] = flatten_vec3(&scene.objects[*object].mesh.vertices);
        }
        Op::ConstantCenters { object, out } => {
            let s = scene.objects[*object].spheres.as_ref().unwrap();
            slots[*out] = flatten_vec3(&s.deformed_centers());
        }
        Op::ConstantAlbedo { object, out } => {
            let obj = &scene.objects[*object];
            let rgb = obj.albedo.per_vertex(&obj.mesh);
            slots[*out] = rgb.iter().flatten().copied().collect();
        }
        Op::Deform { object, params, out } => {
            let obj = &scene.objects[*object];
            let graph = obj.graph.as_ref().unwrap();
            let verts = deform_apply(&obj.mesh.vertices, graph, &slots[*params]);
            slots[*out] = flatten_vec3(&verts);
        }
        Op::NodeCenters { object, params, out } => {
            let graph = scene.objects[*object].graph.as_ref().unwrap();
            let p = &slots[*params];
            let mut v = Vec::with_capacity(3 * graph.node_count());
            for (j, g) in graph.node_positions.iter().enumerate() {
                v.push(g.x + p[j * NODE_PARAMS + 4]);
                v.push(g.y + p[j * NODE_PARAMS + 5]);
                v.push(g.z + p[j * NODE_PARAMS + 6]);
            }
            slots[*out] = v;
        }
        Op::Rigid { params, input, out } => {
            let points = unflatten_vec3(&slots[*input]);
            let moved = rigid_points(&points, &slots[*params]);
            slots[*out] = flatten_vec3(&moved);
        }
        Op::Normals { object, verts, out } => {
            let tris = &scene.objects[*object].mesh.triangles;
            let v = unflatten_vec3(&slots[*verts]);
            slots[*out] = flatten_vec3(&vertex_normals(&v, tris));
        }
        Op::GatherBlockers {
            parts,
            out_centers,
            out_radii,
        } => {
            let mut centers = Vec::new();
            let mut radii = Vec::new();
            for part in parts.iter() {
                match part {
                    BlockerPart::Dynamic { slot, object } => {
                        centers.extend_from_slice(&slots[*slot]);
                        radii.extend(scene.objects[*object].spheres.as_ref().unwrap().radii());
                    }
                    BlockerPart::StaticObject { object } => {
                        let s = scene.objects[*object].spheres.as_ref().unwrap();
                        centers.extend(flatten_vec3(&s.deformed_centers()));
                        radii.extend(s.radii());
                    }
                    BlockerPart::Extras => {
                        for (b, _) in &scene.extra_blockers {
                            centers.extend_from_slice(&[b.center.x, b.center.y, b.center.z]);
                            radii.push(b.radius);
                        }
                    }
                }
            }
            slots[*out_centers] = centers;
            slots[*out_radii] = radii;
        }
        Op::Visibility {
            object,
            verts,
            centers,
            radii,
            out,
            saved,
        } => {
            let obj = &scene.objects[*object];
            let points = unflatten_vec3(&slots[*verts]);
            let blockers = Blockers {
                centers: &unflatten_vec3(&slots[*centers]),
                radii: &slots[*radii],
            };
            let eps = scene.visibility.epsilon;
            let offset = global_exclusion_offset(scene, *object);
            let nv = points.len();
            let mut out_data = vec![0.0; nv * n2];
            let results: Vec<(Vec<f64>, SavedVisibility)> = points
                .par_iter()
                .enumerate()
                .map(|(v, p)| {
                    let excl: Vec<u32> = match offset {
                        Some(off) => obj.exclusions[v].iter().map(|i| i + off as u32).collect(),
                        None => Vec::new(),
                    };
                    let (vis, sv) = visibility_sh_at(*p, blockers, &excl, eps, tensor)
                        .expect("band counts agree");
                    (vis.coeffs, sv)
                })
                .collect();
            let mut new_saved = Vec::with_capacity(nv);
            for (v, (coeffs, sv)) in results.into_iter().enumerate() {
                out_data[v * n2..(v + 1) * n2].copy_from_slice(&coeffs);
                new_saved.push(sv);
            }
            slots[*out] = out_data;
            *saved = new_saved;
        }
        Op::TextureAlbedo {
            object,
            tex,
            width,
            height,
            out,
        } => {
            let obj = &scene.objects[*object];
            let uvs = obj.mesh.uvs.as_ref().unwrap();
            let img = Image {
                width: *width,
                height: *height,
                data: slots[*tex].clone(),
            };
            let mut rgbs = Vec::with_capacity(3 * uvs.len());
            for uv in uvs {
                let (rgb, _) = img.sample_bilinear(uv[0], uv[1]);
                rgbs.extend_from_slice(&rgb);
            }
            slots[*out] = rgbs;
        }
        Op::Shading {
            object,
            normals,
            albedo,
            light,
            vis,
            out,
            saved,
        } => {
            let obj = &scene.objects[*object];
            let nv = obj.mesh.vertex_count();
            let zcc = zonal_clamped_cosine(scene.bands);
            let light_data = &slots[*light];
            let normals_data = &slots[*normals];
            let albedo_data = &slots[*albedo];
            let inv_pi = 1.0 / std::f64::consts::PI;
            let mut out_data = vec![0.0; 3 * nv];
            let mut dots = vec![[0.0; 3]; nv];

            let shade = |v: usize, t_ref: &[f64], pix: &mut [f64], dot: &mut [f64; 3]| {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..n2 {
                        acc += light_data[c * n2 + i] * t_ref[i];
                    }
                    dot[c] = acc;
                    pix[c] = (albedo_data[3 * v + c] * acc * inv_pi).max(0.0);
                }
            };
            let normal_at = |v: usize| {
                Direction::from_unit(Vec3::new(
                    normals_data[3 * v],
                    normals_data[3 * v + 1],
                    normals_data[3 * v + 2],
                ))
            };

            let mut h_save = Vec::new();
            let mut t_save = Vec::new();
            match vis {
                VisMode::CachedT(c) => {
                    let c = c.clone();
                    out_data
                        .par_chunks_mut(3)
                        .zip(dots.par_iter_mut())
                        .enumerate()
                        .for_each(|(v, (pix, dot))| {
                            shade(v, &c[v * n2..(v + 1) * n2], pix, dot);
                        });
                }
                VisMode::Slot(s) => {
                    let vd = &slots[*s];
                    h_save = vec![0.0; nv * n2];
                    t_save = vec![0.0; nv * n2];
                    out_data
                        .par_chunks_mut(3)
                        .zip(dots.par_iter_mut())
                        .zip(h_save.par_chunks_mut(n2))
                        .zip(t_save.par_chunks_mut(n2))
                        .enumerate()
                        .for_each(|(v, (((pix, dot), h), t))| {
                            rotate_zonal_into(&zcc.coeffs, normal_at(v), h);
                            sh_product_into(&vd[v * n2..(v + 1) * n2], h, tensor, t);
                            shade(v, t, pix, dot);
                        });
                }
                VisMode::One => {
                    h_save = vec![0.0; nv * n2];
                    out_data
                        .par_chunks_mut(3)
                        .zip(dots.par_iter_mut())
                        .zip(h_save.par_chunks_mut(n2))
                        .enumerate()
                        .for_each(|(v, ((pix, dot), h))| {
                            rotate_zonal_into(&zcc.coeffs, normal_at(v), h);
                            shade(v, h, pix, dot);
                        });
                }
            }
            slots[*out] = out_data;
            *saved = ShadingSaved {
                dots,
                h: h_save,
                t: t_save,
            };
        }
        Op::Concat { inputs, out } => {
            let mut v = Vec::new();
            for i in inputs.iter() {
                v.extend_from_slice(&slots[*i]);
            }
            slots[*out] = v;
        }
        Op::Rasterize {
            verts,
            radiance,
            triangles,
            saved,
        } => {
            let positions = unflatten_vec3(&slots[*verts]);
            let rad: Vec<[f64; 3]> = slots[*radiance]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let (fb, ctx) = rasterize(
                &positions,
                triangles,
                &rad,
                &scene.camera,
                scene.background,
                &scene.raster,
            );
            *image = fb.color.clone();
            *saved = Some((fb, ctx));
        }
    }
    Ok(())
}

fn global_exclusion_offset(scene: &Scene, object: usize) -> Option<usize> {
    let (offsets, _) = scene.blocker_layout();
    offsets[object]
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Pulls the image cotangent back into the parameter blocks' `grad`
/// fields (accumulating; call [`ParamBlock::zero_grad`] first if needed).
pub fn backward(
    tape: &Tape,
    scene: &Scene,
    d_image: &[f64],
    params: &mut [ParamBlock],
) -> Result<(), DiffError> {
    if params.len() != tape.n_params {
        return Err(DiffError::BadParamCount {
            expected: tape.n_params,
            got: params.len(),
        });
    }
    let expected = 3 * tape.image.width * tape.image.height;
    if d_image.len() != expected {
        return Err(DiffError::BadImageShape {
            expected,
            got: d_image.len(),
        });
    }
    let tensor = triple_product_tensor(tape.bands)?;
    let n2 = tape.bands * tape.bands;
    let mut adj: Vec<Vec<f64>> = tape.slots.iter().map(|s| vec![0.0; s.len()]).collect();

    for op in tape.ops.iter().rev() {
        match op {
            Op::Input { block, out } => {
                for (g, a) in params[*block].grad.iter_mut().zip(&adj[*out]) {
                    *g += a;
                }
            }
            Op::ConstantLight { .. }
            | Op::ConstantVerts { .. }
            | Op::ConstantCenters { .. }
            | Op::ConstantAlbedo { .. } => {}
            Op::Deform { object, params: p, out } => {
                let obj = &scene.objects[*object];
                let graph = obj.graph.as_ref().unwrap();
                let d_out = unflatten_vec3(&adj[*out]);
                let d_params = deform_vjp(&obj.mesh.vertices, graph, &tape.slots[*p], &d_out);
                for (a, d) in adj[*p].iter_mut().zip(&d_params) {
                    *a += d;
                }
            }
            Op::NodeCenters { params: p, out, .. } => {
                let d_out = &adj[*out];
                let n = d_out.len() / 3;
                let mut add = vec![0.0; adj[*p].len()];
                for j in 0..n {
                    add[j * NODE_PARAMS + 4] += d_out[3 * j];
                    add[j * NODE_PARAMS + 5] += d_out[3 * j + 1];
                    add[j * NODE_PARAMS + 6] += d_out[3 * j + 2];
                }
                for (a, d) in adj[*p].iter_mut().zip(&add) {
                    *a += d;
                }
            }
            Op::Rigid { params: p, input, out } => {
                let points = unflatten_vec3(&tape.slots[*input]);
                let d_out = unflatten_vec3(&adj[*out]);
                let (d_params, d_points) = rigid_points_vjp(&points, &tape.slots[*p], &d_out);
                for (a, d) in adj[*p].iter_mut().zip(&d_params) {
                    *a += d;
                }
                let flat = flatten_vec3(&d_points);
                for (a, d) in adj[*input].iter_mut().zip(&flat) {
                    *a += d;
                }
            }
            Op::Normals { object, verts, out } => {
                let tris = &scene.objects[*object].mesh.triangles;
                let v = unflatten_vec3(&tape.slots[*verts]);
                let d_n = unflatten_vec3(&adj[*out]);
                let d_v = vertex_normals_vjp(&v, tris, &d_n);
                let flat = flatten_vec3(&d_v);
                for (a, d) in adj[*verts].iter_mut().zip(&flat) {
                    *a += d;
                }
            }
            Op::GatherBlockers {
                parts,
                out_centers,
                ..
            } => {
                let d_centers = &adj[*out_centers];
                let mut off = 0usize;
                let mut writes: Vec<(usize, Vec<f64>)> = Vec::new();
                for part in parts {
                    match part {
                        BlockerPart::Dynamic { slot, object } => {
                            let count = scene.objects[*object].spheres.as_ref().unwrap().len();
                            writes.push((*slot, d_centers[off..off + 3 * count].to_vec()));
                            off += 3 * count;
                        }
                        BlockerPart::StaticObject { object } => {
                            off += 3 * scene.objects[*object].spheres.as_ref().unwrap().len();
                        }
                        BlockerPart::Extras => {
                            off += 3 * scene.extra_blockers.len();
                        }
                    }
                }
                for (slot, d) in writes {
                    for (a, x) in adj[slot].iter_mut().zip(&d) {
                        *a += x;
                    }
                }
            }
            Op::Visibility {
                object,
                verts,
                centers,
                radii,
                out,
                saved,
            } => {
                let obj = &scene.objects[*object];
                let points = unflatten_vec3(&tape.slots[*verts]);
                let centers_v = unflatten_vec3(&tape.slots[*centers]);
                let blockers = Blockers {
                    centers: &centers_v,
                    radii: &tape.slots[*radii],
                };
                let eps = scene.visibility.epsilon;
                let offset = global_exclusion_offset(scene, *object);
                let d_out = &adj[*out];
                let nb = blockers.len();
                // chunked fold keeps sphere-gradient accumulation
                // deterministic under any thread schedule
                const CHUNK: usize = 256;
                let chunk_results: Vec<(Vec<Vec3>, Vec<Vec3>, Vec<f64>)> = (0..points.len())
                    .collect::<Vec<_>>()
                    .par_chunks(CHUNK)
                    .map(|chunk| {
                        let mut d_centers = vec![Vec3::zeros(); nb];
                        let mut d_radii = vec![0.0; nb];
                        let mut d_points = vec![Vec3::zeros(); chunk.len()];
                        for (ci, &v) in chunk.iter().enumerate() {
                            let excl: Vec<u32> = match offset {
                                Some(off) => {
                                    obj.exclusions[v].iter().map(|i| i + off as u32).collect()
                                }
                                None => Vec::new(),
                            };
                            d_points[ci] = visibility_vjp_at(
                                points[v],
                                blockers,
                                &excl,
                                eps,
                                &saved[v],
                                &tensor,
                                &d_out[v * n2..(v + 1) * n2],
                                &mut d_centers,
                                &mut d_radii,
                            );
                        }
                        (d_points, d_centers, d_radii)
                    })
                    .collect();
                let mut d_centers_total = vec![Vec3::zeros(); nb];
                let mut d_radii_total = vec![0.0; nb];
                for (chunk_idx, (d_points, d_c, d_r)) in chunk_results.iter().enumerate() {
                    let base = chunk_idx * CHUNK;
                    for (ci, dp) in d_points.iter().enumerate() {
                        let v = base + ci;
                        adj[*verts][3 * v] += dp.x;
                        adj[*verts][3 * v + 1] += dp.y;
                        adj[*verts][3 * v + 2] += dp.z;
                    }
                    for i in 0..nb {
                        d_centers_total[i] += d_c[i];
                        d_radii_total[i] += d_r[i];
                    }
                }
                for i in 0..nb {
                    adj[*centers][3 * i] += d_centers_total[i].x;
                    adj[*centers][3 * i + 1] += d_centers_total[i].y;
                    adj[*centers][3 * i + 2] += d_centers_total[i].z;
                    adj[*radii][i] += d_radii_total[i];
                }
            }
            Op::TextureAlbedo {
                object,
                tex,
                width,
                height,
                out,
            } => {
                let obj = &scene.objects[*object];
                let uvs = obj.mesh.uvs.as_ref().unwrap();
                let img = Image {
                    width: *width,
                    height: *height,
                    data: tape.slots[*tex].clone(),
                };
                let d_out = &adj[*out];
                let mut d_tex = vec![0.0; tape.slots[*tex].len()];
                for (v, uv) in uvs.iter().enumerate() {
                    let (_, taps) = img.sample_bilinear(uv[0], uv[1]);
                    for (idx, w) in taps {
                        for c in 0..3 {
                            d_tex[3 * idx + c] += w * d_out[3 * v + c];
                        }
                    }
                }
                for (a, d) in adj[*tex].iter_mut().zip(&d_tex) {
                    *a += d;
                }
            }
            Op::Shading {
                object: _,
                normals,
                albedo,
                light,
                vis,
                out,
                saved,
            } => {
                let nv = saved.dots.len();
                let d_out = &adj[*out];
                let albedo_data = &tape.slots[*albedo];
                let light_data = &tape.slots[*light];
                let inv_pi = 1.0 / std::f64::consts::PI;
                let is_slot = matches!(vis, VisMode::Slot(_));
                let vis_data: Option<&[f64]> = match vis {
                    VisMode::Slot(s) => Some(&tape.slots[*s]),
                    _ => None,
                };
                let cached: Option<&Arc<Vec<f64>>> = match vis {
                    VisMode::CachedT(t) => Some(t),
                    _ => None,
                };
                struct VertexOut {
                    d_albedo: [f64; 3],
                    d_vis: Option<Vec<f64>>,
                    d_normal: Option<Vec3>,
                }
                const CHUNK: usize = 256;
                let zcc = zonal_clamped_cosine(tape.bands);
                let normals_data = &tape.slots[*normals];
                let chunk_out: Vec<(Vec<f64>, Vec<VertexOut>)> = (0..nv)
                    .collect::<Vec<_>>()
                    .par_chunks(CHUNK)
                    .map(|chunk| {
                        let mut d_light_local = vec![0.0; 3 * n2];
                        let mut vouts = Vec::with_capacity(chunk.len());
                        for &v in chunk {
                            let dots = saved.dots[v];
                            let t_ref: &[f64] = if let Some(c) = cached {
                                &c[v * n2..(v + 1) * n2]
                            } else if is_slot {
                                &saved.t[v * n2..(v + 1) * n2]
                            } else {
                                &saved.h[v * n2..(v + 1) * n2]
                            };
                            let mut d_albedo = [0.0; 3];
                            let mut d_dot = [0.0; 3];
                            for c in 0..3 {
                                let pre = albedo_data[3 * v + c] * dots[c];
                                let mask = if pre >= 0.0 { 1.0 } else { 0.0 };
                                let d_pre = d_out[3 * v + c] * mask * inv_pi;
                                d_albedo[c] = d_pre * dots[c];
                                d_dot[c] = d_pre * albedo_data[3 * v + c];
                            }
                            for c in 0..3 {
                                if d_dot[c] != 0.0 {
                                    for i in 0..n2 {
                                        d_light_local[c * n2 + i] += d_dot[c] * t_ref[i];
                                    }
                                }
                            }
                            let (d_vis, d_normal) = if cached.is_some() {
                                (None, None)
                            } else {
                                // d_t = sum_c d_dot_c * L_c
                                let mut d_t = vec![0.0; n2];
                                for c in 0..3 {
                                    if d_dot[c] != 0.0 {
                                        for i in 0..n2 {
                                            d_t[i] += d_dot[c] * light_data[c * n2 + i];
                                        }
                                    }
                                }
                                let h_v = &saved.h[v * n2..(v + 1) * n2];
                                let (d_vis, d_h) = if let Some(vd) = vis_data {
                                    let mut dv = vec![0.0; n2];
                                    sh_product_into(&d_t, h_v, &tensor, &mut dv);
                                    let mut dh = vec![0.0; n2];
                                    sh_product_into(&d_t, &vd[v * n2..(v + 1) * n2], &tensor, &mut dh);
                                    (Some(dv), dh)
                                } else {
                                    (None, d_t)
                                };
                                let nrm = Vec3::new(
                                    normals_data[3 * v],
                                    normals_data[3 * v + 1],
                                    normals_data[3 * v + 2],
                                );
                                let (_, d_n) =
                                    rotate_zonal_vjp(&zcc.coeffs, Direction::from_unit(nrm), &d_h);
                                (d_vis, Some(d_n))
                            };
                            vouts.push(VertexOut {
                                d_albedo,
                                d_vis,
                                d_normal,
                            });
                        }
                        (d_light_local, vouts)
                    })
                    .collect();
                // sequential merge in chunk order (deterministic)
                let mut d_light_total = vec![0.0; 3 * n2];
                for (chunk_idx, (d_light_local, vouts)) in chunk_out.iter().enumerate() {
                    for (a, d) in d_light_total.iter_mut().zip(d_light_local) {
                        *a += d;
                    }
                    let base = chunk_idx * CHUNK;
                    for (ci, vout) in vouts.iter().enumerate() {
                        let v = base + ci;
                        for c in 0..3 {
                            adj[*albedo][3 * v + c] += vout.d_albedo[c];
                        }
                        if let Some(dv) = &vout.d_vis {
                            if let VisMode::Slot(s) = vis {
                                for i in 0..n2 {
                                    adj[*s][v * n2 + i] += dv[i];
                                }
                            }
                        }
                        if let Some(dn) = vout.d_normal {
                            adj[*normals][3 * v] += dn.x;
                            adj[*normals][3 * v + 1] += dn.y;
                            adj[*normals][3 * v + 2] += dn.z;
                        }
                    }
                }
                for (a, d) in adj[*light].iter_mut().zip(&d_light_total) {
                    *a += d;
                }
            }
            Op::Concat { inputs, out } => {
                let d = &adj[*out];
                let mut off = 0usize;
                let mut writes = Vec::new();
                for i in inputs {
                    let len = tape.slots[*i].len();
                    writes.push((*i, d[off..off + len].to_vec()));
                    off += len;
                }
                for (slot, dv) in writes {
                    for (a, x) in adj[slot].iter_mut().zip(&dv) {
                        *a += x;
                    }
                }
            }
            Op::Rasterize {
                verts,
                radiance,
                triangles,
                saved,
            } => {
                let (fb, ctx) = saved.as_ref().expect("rasterize executed");
                let rad: Vec<[f64; 3]> = tape.slots[*radiance]
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect();
                let (d_rad, d_pos) =
                    rasterize_vjp(ctx, fb, triangles, &rad, &scene.camera, d_image);
                for (v, d) in d_rad.iter().enumerate() {
                    for c in 0..3 {
                        adj[*radiance][3 * v + c] += d[c];
                    }
                }
                for (v, d) in d_pos.iter().enumerate() {
                    adj[*verts][3 * v] += d.x;
                    adj[*verts][3 * v + 1] += d.y;
                    adj[*verts][3 * v + 2] += d.z;
                }
            }
        }
    }
    Ok(())
}
