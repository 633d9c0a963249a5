//! Sphere-set approximation of a mesh and its gradient-descent fitter.
//!
//! The fit minimizes `E = SOV + lambda_cov * Coverage`, both estimated on
//! fixed quasi-random sample sets: SOV penalizes sphere volume poking
//! outside the mesh, Coverage pulls sphere surfaces toward mesh surface
//! samples. Deterministic for a given seed; objective is non-increasing
//! across accepted steps (backtracking on increase).

use super::accel::Bvh;
use super::{GeomError, TriangleMesh};
use crate::math::{Quat, Vec3, QUAT_IDENTITY};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

/// One occluder sphere rigged as an embedded-graph node.
#[derive(Clone, Debug)]
pub struct SphereNode {
    pub center: Vec3,
    pub radius: f64,
    pub rotation: Quat,
    pub translation: Vec3,
}

#[derive(Clone, Debug, Default)]
pub struct SphereSet {
    pub nodes: Vec<SphereNode>,
}

impl SphereSet {
    pub fn from_spheres(spheres: impl IntoIterator<Item = Sphere>) -> Self {
        SphereSet {
            nodes: spheres
                .into_iter()
                .map(|s| SphereNode {
                    center: s.center,
                    radius: s.radius,
                    rotation: QUAT_IDENTITY,
                    translation: Vec3::zeros(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.nodes.iter().map(|n| n.center).collect()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.radius).collect()
    }

    /// Centers after applying the per-node translations (`g_j + t_j`).
    pub fn deformed_centers(&self) -> Vec<Vec3> {
        self.nodes.iter().map(|n| n.center + n.translation).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub lambda_coverage: f64,
    /// surface samples used for coverage and seeding
    pub surface_samples: usize,
    /// volume samples per sphere for the SOV term
    pub volume_samples: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda_coverage: 1.0,
            surface_samples: 4000,
            volume_samples: 32,
        }
    }
}

pub fn fit_spheres(
    mesh: &TriangleMesh,
    sphere_count: usize,
    iterations: usize,
    seed: u64,
) -> Result<SphereSet, GeomError> {
    fit_spheres_with(mesh, sphere_count, iterations, seed, &FitConfig::default())
}

pub fn fit_spheres_with(
    mesh: &TriangleMesh,
    sphere_count: usize,
    iterations: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<SphereSet, GeomError> {
    assert!(sphere_count >= 1);
    if sphere_count > mesh.vertex_count() {
        return Err(GeomError::TooManySpheres(sphere_count, mesh.vertex_count()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface: Vec<Vec3> = mesh
        .sample_surface(config.surface_samples.max(sphere_count * 8), &mut rng)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let diag = mesh.bbox_diagonal();
    let (centers, radii) = kmeans_init(&surface, sphere_count, &mut rng, diag);
    let ball = ball_offsets(config.volume_samples, &mut rng);
    Ok(descend(mesh, surface, ball, centers, radii, iterations, config))
}

/// Runs the descent from a caller-provided initial sphere set.
pub fn refine_spheres(
    mesh: &TriangleMesh,
    init: &SphereSet,
    iterations: usize,
    seed: u64,
    config: &FitConfig,
) -> SphereSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface: Vec<Vec3> = mesh
        .sample_surface(config.surface_samples.max(init.len() * 8), &mut rng)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let ball = ball_offsets(config.volume_samples, &mut rng);
    descend(
        mesh,
        surface,
        ball,
        init.centers(),
        init.radii(),
        iterations,
        config,
    )
}

fn ball_offsets<R: Rng>(count: usize, rng: &mut R) -> Vec<Vec3> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let d = sample_unit_dir(rng);
            d * u.cbrt()
        })
        .collect()
}

fn descend(
    mesh: &TriangleMesh,
    surface: Vec<Vec3>,
    ball: Vec<Vec3>,
    mut centers: Vec<Vec3>,
    mut radii: Vec<f64>,
    iterations: usize,
    config: &FitConfig,
) -> SphereSet {
    let bvh = Bvh::build(mesh);
    let diag = mesh.bbox_diagonal();

    let energy_grad = |centers: &[Vec3], radii: &[f64], want_grad: bool| {
        let n = centers.len();
        let mut g_c = vec![Vec3::zeros(); n];
        let mut g_r = vec![0.0; n];
        // SOV
        let mut sov = 0.0;
        let m = (n * ball.len()) as f64;
        for i in 0..n {
            for u in &ball {
                let p = centers[i] + u * radii[i];
                let sd = bvh.signed_distance(p);
                if sd > 0.0 {
                    sov += sd * sd / m;
                    if want_grad {
                        let (q, _) = bvh.closest_point(p);
                        let dirv = p - q;
                        let nrm = dirv.norm();
                        if nrm > 1e-12 {
                            let grad_p = dirv * (2.0 * sd / (nrm * m));
                            g_c[i] += grad_p;
                            g_r[i] += grad_p.dot(u);
                        }
                    }
                }
            }
        }
        // Coverage
        let mut cov = 0.0;
        let ms = surface.len() as f64;
        for p in &surface {
            let mut best = f64::INFINITY;
            let mut best_i = 0usize;
            for i in 0..n {
                let d = ((p - centers[i]).norm() - radii[i]).abs();
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
            cov += best * best / ms;
            if want_grad && best > 1e-12 {
                let i = best_i;
                let dc = p - centers[i];
                let dist = dc.norm();
                if dist > 1e-12 {
                    let sgn = (dist - radii[i]).signum();
                    let w = 2.0 * best * config.lambda_coverage / ms;
                    g_c[i] += dc * (-sgn / dist) * w;
                    g_r[i] += -sgn * w;
                }
            }
        }
        (sov + config.lambda_coverage * cov, g_c, g_r)
    };

    let (mut energy, _, _) = energy_grad(&centers, &radii, false);
    let mut step = 0.05 * diag;
    let min_radius = 1e-4 * diag;
    for _ in 0..iterations {
        let (_, g_c, g_r) = energy_grad(&centers, &radii, true);
        let gnorm: f64 = (g_c.iter().map(|g| g.norm_squared()).sum::<f64>()
            + g_r.iter().map(|g| g * g).sum::<f64>())
        .sqrt();
        if gnorm < 1e-14 {
            break;
        }
        // backtracking: accepted steps never increase the objective
        let mut accepted = false;
        for _ in 0..24 {
            let trial_c: Vec<Vec3> = centers
                .iter()
                .zip(&g_c)
                .map(|(c, g)| c - g * (step / gnorm))
                .collect();
            let trial_r: Vec<f64> = radii
                .iter()
                .zip(&g_r)
                .map(|(r, g)| (r - g * (step / gnorm)).max(min_radius))
                .collect();
            let (e_new, _, _) = energy_grad(&trial_c, &trial_r, false);
            if e_new <= energy {
                centers = trial_c;
                radii = trial_r;
                energy = e_new;
                step = (step * 1.3).min(0.1 * diag);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    SphereSet::from_spheres(
        centers
            .into_iter()
            .zip(radii)
            .map(|(center, radius)| Sphere { center, radius }),
    )
}

fn sample_unit_dir<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

fn kmeans_init<R: Rng>(
    samples: &[Vec3],
    k: usize,
    rng: &mut R,
    diag: f64,
) -> (Vec<Vec3>, Vec<f64>) {
    // k-means++ seeding
    let mut centers = Vec::with_capacity(k);
    centers.push(samples[rng.random_range(0..samples.len())]);
    let mut d2: Vec<f64> = samples
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut idx = 0;
        for (i, d) in d2.iter().enumerate() {
            pick -= d;
            if pick <= 0.0 {
                idx = i;
                break;
            }
        }
        centers.push(samples[idx]);
        for (i, p) in samples.iter().enumerate() {
            d2[i] = d2[i].min((p - centers.last().unwrap()).norm_squared());
        }
    }
    // a few Lloyd rounds to stabilize
    let mut assign = vec![0usize; samples.len()];
    for _ in 0..8 {
        for (i, p) in samples.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = (p - c).norm_squared();
                if d < best {
                    best = d;
                    assign[i] = j;
                }
            }
        }
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, p) in samples.iter().enumerate() {
            sums[assign[i]] += p;
            counts[assign[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
    }
    // radius = median distance to assigned samples
    let mut radii = vec![0.02 * diag; k];
    for j in 0..k {
        let mut dists: Vec<f64> = samples
            .iter()
            .zip(&assign)
            .filter(|(_, a)| **a == j)
            .map(|(p, _)| (p - centers[j]).norm())
            .collect();
        if !dists.is_empty() {
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            radii[j] = dists[dists.len() / 2].max(1e-4 * diag);
        }
    }
    (centers, radii)
}

/// Text format: one `x y z radius` record per line.
pub fn save_sphere_set(set: &SphereSet, path: impl AsRef<Path>) -> Result<(), GeomError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for n in &set.nodes {
        writeln!(
            f,
            "{:.17e} {:.17e} {:.17e} {:.17e}",
            n.center.x, n.center.y, n.center.z, n.radius
        )?;
    }
    Ok(())
}

pub fn load_sphere_set(path: impl AsRef<Path>) -> Result<SphereSet, GeomError> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut spheres = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = t
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeomError::SphereParse {
                line: ln + 1,
                message: e.to_string(),
            })?;
        if nums.len() != 4 {
            return Err(GeomError::SphereParse {
                line: ln + 1,
                message: format!("expected 4 fields, got {}", nums.len()),
            });
        }
        if nums[3] <= 0.0 {
            return Err(GeomError::SphereParse {
                line: ln + 1,
                message: "radius must be positive".to_string(),
            });
        }
        spheres.push(Sphere {
            center: Vec3::new(nums[0], nums[1], nums[2]),
            radius: nums[3],
        });
    }
    Ok(SphereSet::from_spheres(spheres))
}
