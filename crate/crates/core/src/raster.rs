//! Differentiable rasterization: perspective projection, hard z-buffer
//! fill with perspective-correct interpolation, and a sigmoid soft-coverage
//! band along silhouettes that gives screen-space occupancy a derivative
//! with respect to vertex positions.
//!
//! Color gradients flow through the (fixed) barycentric weights; position
//! gradients flow only through the soft band's signed edge distance.

use crate::img::Image;
use crate::math::{Vec3};
use nalgebra::Matrix3;

#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// world-to-camera rotation (camera space: x right, y down, z forward)
    pub rotation: Matrix3<f64>,
    pub position: Vec3,
}

impl Camera {
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - position).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            position,
        }
    }

    #[inline]
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation * (p - self.position)
    }

    /// Screen coordinates and camera-space depth.
    #[inline]
    pub fn project(&self, p: Vec3) -> ([f64; 2], f64) {
        let c = self.to_camera(p);
        (
            [
                self.fx * c.x / c.z + self.cx,
                self.fy * c.y / c.z + self.cy,
            ],
            c.z,
        )
    }

    /// World-space ray direction through pixel coordinates (u, v).
    pub fn ray_dir(&self, u: f64, v: f64) -> Vec3 {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RasterParams {
    /// soft-coverage width in pixels
    pub sigma_px: f64,
    /// half-width of the silhouette band, pixels
    pub band_px: i32,
    pub znear: f64,
}

impl Default for RasterParams {
    fn default() -> Self {
        RasterParams {
            sigma_px: 1.0,
            band_px: 2,
            znear: 1e-4,
        }
    }
}

/// Hard rasterization output, plus the composited (soft-band) color image.
pub struct Framebuffer {
    pub color: Image,
    pub depth: Vec<f64>,
    /// covering triangle per pixel, -1 for background
    pub triangle_id: Vec<i32>,
    /// perspective-correct interpolation weights of the covering triangle
    pub barycentric: Vec<[f64; 3]>,
}

impl Framebuffer {
    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.triangle_id[y * self.color.width + x] >= 0
    }
}

/// Sigmoid soft-coverage weight for a signed pixel-to-silhouette distance
/// (positive inside coverage).
pub fn soft_coverage(signed_distance_px: f64, sigma: f64) -> f64 {
    assert!(sigma > 0.0);
    1.0 / (1.0 + (-signed_distance_px / sigma).exp())
}

struct BandPixel {
    pixel: usize,
    covered: bool,
    /// silhouette edge endpoints (vertex ids)
    edge: [u32; 2],
    /// clamped closest-point parameter along the edge
    t: f64,
    /// signed distance in pixels
    dist: f64,
    /// unit vector from closest edge point toward the pixel (screen space)
    normal: [f64; 2],
    /// perspective-correct endpoint weights for the edge color
    edge_w: [f64; 2],
}

/// Context for [`rasterize_vjp`].
pub struct RasterCtx {
    screen: Vec<[f64; 2]>,
    z: Vec<f64>,
    valid: Vec<bool>,
    band: Vec<BandPixel>,
    background: [f64; 3],
    params: RasterParams,
}

/// Rasterizes per-vertex radiance into an image.
pub fn rasterize(
    positions: &[Vec3],
    triangles: &[[u32; 3]],
    radiance: &[[f64; 3]],
    camera: &Camera,
    background: [f64; 3],
    params: &RasterParams,
) -> (Framebuffer, RasterCtx) {
    assert_eq!(positions.len(), radiance.len());
    let (w, h) = (camera.width, camera.height);
    let mut fb = Framebuffer {
        color: Image::filled(w, h, background),
        depth: vec![f64::INFINITY; w * h],
        triangle_id: vec![-1; w * h],
        barycentric: vec![[0.0; 3]; w * h],
    };

    let mut screen = vec![[0.0f64; 2]; positions.len()];
    let mut z = vec![0.0f64; positions.len()];
    let mut valid = vec![false; positions.len()];
    for (i, p) in positions.iter().enumerate() {
        let (s, depth) = camera.project(*p);
        screen[i] = s;
        z[i] = depth;
        valid[i] = depth > params.znear && s[0].is_finite() && s[1].is_finite();
    }

    // hard pass; the (depth, triangle-id) tie-break makes the result
    // independent of triangle order
    for (ti, tri) in triangles.iter().enumerate() {
        let (i0, i1, i2) = (tri[0] as usize, tri[1] as usize, tri[2] as usize);
        if !(valid[i0] && valid[i1] && valid[i2]) {
            continue;
        }
        let (s0, s1, s2) = (screen[i0], screen[i1], screen[i2]);
        let area = edge_fn(s0, s1, s2);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = s0[0].min(s1[0]).min(s2[0]).floor().max(0.0) as usize;
        let max_x = (s0[0].max(s1[0]).max(s2[0]).ceil() as isize).min(w as isize - 1);
        let min_y = s0[1].min(s1[1]).min(s2[1]).floor().max(0.0) as usize;
        let max_y = (s0[1].max(s1[1]).max(s2[1]).ceil() as isize).min(h as isize - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }
        let inv_area = 1.0 / area;
        for py in min_y..=(max_y as usize) {
            for px in min_x..=(max_x as usize) {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let l0 = edge_fn(s1, s2, p) * inv_area;
                let l1 = edge_fn(s2, s0, p) * inv_area;
                let l2 = edge_fn(s0, s1, p) * inv_area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // perspective-correct interpolation
                let a0 = l0 / z[i0];
                let a1 = l1 / z[i1];
                let a2 = l2 / z[i2];
                let inv_sum = 1.0 / (a0 + a1 + a2);
                let depth = inv_sum;
                let idx = py * w + px;
                let better = depth < fb.depth[idx]
                    || (depth == fb.depth[idx] && (ti as i32) < fb.triangle_id[idx]);
                if better {
                    let (w0, w1, w2) = (a0 * inv_sum, a1 * inv_sum, a2 * inv_sum);
                    fb.depth[idx] = depth;
                    fb.triangle_id[idx] = ti as i32;
                    fb.barycentric[idx] = [w0, w1, w2];
                    let mut rgb = [0.0; 3];
                    for c in 0..3 {
                        rgb[c] = w0 * radiance[i0][c] + w1 * radiance[i1][c] + w2 * radiance[i2][c];
                    }
                    fb.color.set_pixel(px, py, rgb);
                }
            }
        }
    }

    // silhouette edges among drawn-eligible triangles
    let silhouette = silhouette_edges(&screen, &valid, triangles);

    // band: pixels within band_px (Chebyshev) of a coverage transition
    let mut band_mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = fb.triangle_id[y * w + x] >= 0;
            let mut transition = false;
            for (dx, dy) in [(1i64, 0i64), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < w as i64 && ny < h as i64 {
                    let nc = fb.triangle_id[ny as usize * w + nx as usize] >= 0;
                    if nc != c {
                        transition = true;
                    }
                }
            }
            if transition {
                let r = params.band_px as i64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (bx, by) = (x as i64 + dx, y as i64 + dy);
                        if bx >= 0 && by >= 0 && bx < w as i64 && by < h as i64 {
                            band_mask[by as usize * w + bx as usize] = true;
                        }
                    }
                }
            }
        }
    }

    // soft compositing over the band
    let mut band = Vec::new();
    if !silhouette.is_empty() {
        for idx in 0..w * h {
            if !band_mask[idx] {
                continue;
            }
            let (px, py) = (idx % w, idx / w);
            let p = [px as f64 + 0.5, py as f64 + 0.5];
            // nearest silhouette segment
            let mut best_d2 = f64::INFINITY;
            let mut best: Option<([u32; 2], f64, [f64; 2])> = None;
            for e in &silhouette {
                let (a, b) = (screen[e[0] as usize], screen[e[1] as usize]);
                let (d2, t, q) = point_segment(p, a, b);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = Some((*e, t, q));
                }
            }
            let (edge, t, q) = best.unwrap();
            let dist = best_d2.sqrt();
            if dist < 1e-12 {
                continue; // exactly on the edge: no usable normal
            }
            let normal = [(p[0] - q[0]) / dist, (p[1] - q[1]) / dist];
            let covered = fb.triangle_id[idx] >= 0;
            let signed = if covered { dist } else { -dist };
            let wgt = soft_coverage(signed, params.sigma_px);
            let (e0, e1) = (edge[0] as usize, edge[1] as usize);
            let a0 = (1.0 - t) / z[e0];
            let a1 = t / z[e1];
            let inv = 1.0 / (a0 + a1);
            let edge_w = [a0 * inv, a1 * inv];
            let fg = if covered {
                fb.color.pixel(px, py)
            } else {
                let mut fg = [0.0; 3];
                for c in 0..3 {
                    fg[c] = edge_w[0] * radiance[e0][c] + edge_w[1] * radiance[e1][c];
                }
                fg
            };
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = wgt * fg[c] + (1.0 - wgt) * background[c];
            }
            fb.color.set_pixel(px, py, rgb);
            band.push(BandPixel {
                pixel: idx,
                covered,
                edge,
                t,
                dist: signed,
                normal,
                edge_w,
            });
        }
    }

    let ctx = RasterCtx {
        screen,
        z,
        valid,
        band,
        background,
        params: *params,
    };
    (fb, ctx)
}

fn edge_fn(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// distance^2, clamped parameter, and closest point from p to segment ab
fn point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64, [f64; 2]) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 1e-18 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let d = [p[0] - q[0], p[1] - q[1]];
    (d[0] * d[0] + d[1] * d[1], t, q)
}

/// Edges on the coverage boundary: boundary edges of the drawn mesh and
/// edges between front- and back-facing (or culled) triangles.
fn silhouette_edges(screen: &[[f64; 2]], valid: &[bool], triangles: &[[u32; 3]]) -> Vec<[u32; 2]> {
    use std::collections::HashMap;
    // edge -> (count, orientation product accumulator)
    let mut edges: HashMap<(u32, u32), (u32, f64, bool)> = HashMap::new();
    for tri in triangles {
        let ok = valid[tri[0] as usize] && valid[tri[1] as usize] && valid[tri[2] as usize];
        let area = if ok {
            edge_fn(
                screen[tri[0] as usize],
                screen[tri[1] as usize],
                screen[tri[2] as usize],
            )
        } else {
            0.0
        };
        for e in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            let key = (e.0.min(e.1), e.0.max(e.1));
            let entry = edges.entry(key).or_insert((0, 1.0, false));
            if ok {
                entry.0 += 1;
                entry.1 *= area.signum();
            } else {
                entry.2 = true; // adjacent to a culled triangle
            }
        }
    }
    let mut out: Vec<[u32; 2]> = edges
        .into_iter()
        .filter_map(|((a, b), (count, orient, has_culled))| {
            let silhouette = match count {
                0 => false,
                1 => true, // boundary (or neighbor culled entirely)
                2 => orient < 0.0 || has_culled,
                _ => false, // non-manifold: ignore
            };
            if silhouette && valid[a as usize] && valid[b as usize] {
                Some([a, b])
            } else {
                None
            }
        })
        .collect();
    out.sort_unstable();
    out
}

/// Adjoint of [`rasterize`]: pulls the image cotangent back to per-vertex
/// radiance and world positions.
pub fn rasterize_vjp(
    ctx: &RasterCtx,
    fb: &Framebuffer,
    triangles: &[[u32; 3]],
    radiance: &[[f64; 3]],
    camera: &Camera,
    d_image: &[f64],
) -> (Vec<[f64; 3]>, Vec<Vec3>) {
    let w = fb.color.width;
    let n_verts = ctx.screen.len();
    let mut d_radiance = vec![[0.0; 3]; n_verts];
    let mut d_screen = vec![[0.0; 2]; n_verts];

    let mut band_at = vec![usize::MAX; fb.triangle_id.len()];
    for (bi, b) in ctx.band.iter().enumerate() {
        band_at[b.pixel] = bi;
    }

    // hard-coverage color gradients
    for idx in 0..fb.triangle_id.len() {
        let ti = fb.triangle_id[idx];
        if ti < 0 {
            continue;
        }
        let scale = if band_at[idx] != usize::MAX {
            let b = &ctx.band[band_at[idx]];
            if !b.covered {
                continue; // covered flag and tri id disagree only off-band
            }
            soft_coverage(b.dist, ctx.params.sigma_px)
        } else {
            1.0
        };
        let tri = triangles[ti as usize];
        let bary = fb.barycentric[idx];
        for c in 0..3 {
            let d = d_image[3 * idx + c] * scale;
            for k in 0..3 {
                d_radiance[tri[k] as usize][c] += bary[k] * d;
            }
        }
    }

    // soft-band gradients
    for b in &ctx.band {
        let idx = b.pixel;
        let wgt = soft_coverage(b.dist, ctx.params.sigma_px);
        let dw_dd = wgt * (1.0 - wgt) / ctx.params.sigma_px;
        // foreground color at this pixel
        let fg: [f64; 3] = if b.covered {
            let ti = fb.triangle_id[idx] as usize;
            let tri = triangles[ti];
            let bary = fb.barycentric[idx];
            std::array::from_fn(|c| {
                bary[0] * radiance[tri[0] as usize][c]
                    + bary[1] * radiance[tri[1] as usize][c]
                    + bary[2] * radiance[tri[2] as usize][c]
            })
        } else {
            let (e0, e1) = (b.edge[0] as usize, b.edge[1] as usize);
            std::array::from_fn(|c| {
                b.edge_w[0] * radiance[e0][c] + b.edge_w[1] * radiance[e1][c]
            })
        };
        let mut d_dist = 0.0;
        for c in 0..3 {
            let d = d_image[3 * idx + c];
            d_dist += d * dw_dd * (fg[c] - ctx.background[c]);
            if !b.covered {
                // color path for uncovered band pixels
                let (e0, e1) = (b.edge[0] as usize, b.edge[1] as usize);
                d_radiance[e0][c] += wgt * b.edge_w[0] * d;
                d_radiance[e1][c] += wgt * b.edge_w[1] * d;
            }
        }
        // signed distance -> screen endpoints (envelope form)
        let s = if b.covered { 1.0 } else { -1.0 };
        let n = b.normal;
        let (e0, e1) = (b.edge[0] as usize, b.edge[1] as usize);
        let g0 = -s * (1.0 - b.t) * d_dist;
        let g1 = -s * b.t * d_dist;
        d_screen[e0][0] += g0 * n[0];
        d_screen[e0][1] += g0 * n[1];
        d_screen[e1][0] += g1 * n[0];
        d_screen[e1][1] += g1 * n[1];
    }

    // screen -> world positions through the projection
    let mut d_positions = vec![Vec3::zeros(); n_verts];
    let rt = camera.rotation.transpose();
    for i in 0..n_verts {
        if !ctx.valid[i] || (d_screen[i][0] == 0.0 && d_screen[i][1] == 0.0) {
            continue;
        }
        let zc = ctx.z[i];
        let u = ctx.screen[i][0];
        let v = ctx.screen[i][1];
        // camera-space coordinates recovered from the projection
        let xc = (u - camera.cx) * zc / camera.fx;
        let yc = (v - camera.cy) * zc / camera.fy;
        let du = d_screen[i][0];
        let dv = d_screen[i][1];
        let d_cam = Vec3::new(
            camera.fx / zc * du,
            camera.fy / zc * dv,
            -(camera.fx * xc / (zc * zc)) * du - (camera.fy * yc / (zc * zc)) * dv,
        );
        d_positions[i] = rt * d_cam;
    }
    let _ = w;
    (d_radiance, d_positions)
}
