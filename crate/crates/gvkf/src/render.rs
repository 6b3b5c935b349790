//! Per-pixel CPU renderer.
//!
//! Each pixel builds its own kernel field: cull primitives by a 3-sigma
//! sphere-of-influence test against the ray, transform survivors into 1D
//! kernels, sort, composite. Rows render independently (in parallel with the
//! `parallel` feature) and are collected in order, so output bytes never
//! depend on the thread schedule.

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::error::Result;
use crate::field::{render_depth, render_ray, RayField, ALPHA_CULL};
use crate::gaussian::{ray_gaussian_transform, GaussianPrimitive, Ray};
use crate::image::{ColorImage, ScalarImage};
use crate::par;
use crate::scene::Scene;

/// Candidate-set strategy for per-ray culling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accel {
    /// Test every primitive against every ray.
    #[default]
    BruteForce,
    /// Bin primitives into a coarse world grid walked by 3D-DDA. Exact
    /// per-candidate tests run afterwards, so images are bit-identical to
    /// brute force.
    CoarseGrid,
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub accel: Accel,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0, 0.0, 0.0],
            accel: Accel::BruteForce,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Planar depth (distance along the optical axis); infinity where the
    /// ray hit nothing.
    pub depth: ScalarImage,
    /// Normals from central differences of the depth buffer, encoded as
    /// (n+1)/2; flat 0.5 gray where no surface was hit.
    pub normal: ColorImage,
}

/// Renders a scene (neural scenes decode with this camera).
pub fn render_scene(scene: &Scene, camera: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    let primitives = scene.primitives(Some(&camera.position))?;
    render_primitives(&primitives, camera, opts)
}

/// Renders an explicit primitive list.
pub fn render_primitives(
    primitives: &[GaussianPrimitive],
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let grid = match opts.accel {
        Accel::CoarseGrid => CullGrid::build(primitives),
        Accel::BruteForce => None,
    };
    let rows = par::map_indexed(camera.height, |py| -> Result<RowResult> {
        let mut colors = Vec::with_capacity(camera.width);
        let mut depths = Vec::with_capacity(camera.width);
        let mut scratch = Vec::new();
        for px in 0..camera.width {
            let ray = camera.generate_ray(px, py)?;
            let field = match &grid {
                Some(g) => {
                    g.candidates(&ray, &mut scratch);
                    build_field(primitives, scratch.iter().copied(), &ray, camera.near, opts)?
                }
                None => build_field(primitives, 0..primitives.len(), &ray, camera.near, opts)?,
            };
            let shaded = render_ray(&field);
            colors.push(shaded.color);
            depths.push(render_depth(&field));
        }
        Ok(RowResult { colors, depths })
    });

    let (forward, ..) = camera.basis();
    let mut color = ColorImage::filled(camera.width, camera.height, opts.background);
    let mut depth = ScalarImage::filled(camera.width, camera.height, f64::INFINITY);
    let mut ray_t = ScalarImage::filled(camera.width, camera.height, f64::INFINITY);
    for (py, row) in rows.into_iter().enumerate() {
        let row = row?;
        for px in 0..camera.width {
            color.set(px, py, row.colors[px]);
            let t = row.depths[px];
            ray_t.set(px, py, t);
            if t.is_finite() {
                let dir = camera.generate_ray(px, py)?.direction;
                depth.set(px, py, t * dir.dot(&forward));
            }
        }
    }
    let normal = normals_from_depth(camera, &ray_t)?;
    Ok(RenderOutput { color, depth, normal })
}

struct RowResult {
    colors: Vec<[f64; 3]>,
    depths: Vec<f64>,
}

/// Assembles the kernel field for one ray from candidate indices.
pub(crate) fn build_field(
    primitives: &[GaussianPrimitive],
    candidates: impl Iterator<Item = usize>,
    ray: &Ray,
    near: f64,
    opts: &RenderOptions,
) -> Result<RayField> {
    let mut kernels = Vec::new();
    for i in candidates {
        let g = &primitives[i];
        if !sphere_hits_ray(g, ray) {
            continue;
        }
        let mut k = ray_gaussian_transform(g, ray)?;
        k.source = i;
        if k.t_peak <= near || k.alpha < ALPHA_CULL {
            continue;
        }
        kernels.push(k);
    }
    Ok(RayField::new(kernels, opts.background))
}

/// 3-sigma sphere-of-influence test against the ray line segment.
pub(crate) fn sphere_hits_ray(g: &GaussianPrimitive, ray: &Ray) -> bool {
    let r = g.influence_radius();
    let to_center = g.position - ray.origin;
    let t = to_center.dot(&ray.direction);
    if t < -r || t > ray.t_max + r {
        return false;
    }
    let closest = ray.origin + ray.direction * t.clamp(0.0, ray.t_max);
    (g.position - closest).norm_squared() <= r * r
}

/// World positions from the blended ray parameters, then central-difference
/// cross products; zero normal (0.5 gray) where depth is missing.
fn normals_from_depth(camera: &Camera, ray_t: &ScalarImage) -> Result<ColorImage> {
    let (w, h) = (camera.width, camera.height);
    let position = |px: usize, py: usize| -> Result<Option<Vector3<f64>>> {
        let t = ray_t.get(px, py);
        if !t.is_finite() {
            return Ok(None);
        }
        Ok(Some(camera.generate_ray(px, py)?.point_at(t)))
    };
    let mut out = ColorImage::filled(w, h, [0.5; 3]);
    for py in 0..h {
        for px in 0..w {
            if !ray_t.get(px, py).is_finite() || px == 0 || py == 0 || px + 1 >= w || py + 1 >= h {
                continue;
            }
            let (l, r) = (position(px - 1, py)?, position(px + 1, py)?);
            let (u, d) = (position(px, py - 1)?, position(px, py + 1)?);
            if let (Some(l), Some(r), Some(u), Some(d)) = (l, r, u, d) {
                let n = (r - l).cross(&(d - u));
                if n.norm() > 1e-18 {
                    let mut n = n.normalize();
                    // Face the camera.
                    if n.dot(&camera.generate_ray(px, py)?.direction) > 0.0 {
                        n = -n;
                    }
                    out.set(px, py, [0.5 * (n.x + 1.0), 0.5 * (n.y + 1.0), 0.5 * (n.z + 1.0)]);
                }
            }
        }
    }
    Ok(out)
}

// -- Coarse-grid culling -------------------------------------------------------

/// Uniform world grid over the scene bounds; each primitive is splatted into
/// every cell its influence sphere overlaps, so a DDA walk of the cells a ray
/// passes through yields a superset of the exact candidate set.
struct CullGrid {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    bins: Vec<Vec<u32>>,
}

impl CullGrid {
    fn build(primitives: &[GaussianPrimitive]) -> Option<CullGrid> {
        if primitives.is_empty() {
            return None;
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        let mut max_radius: f64 = 0.0;
        for g in primitives {
            let r = g.influence_radius();
            max_radius = max_radius.max(r);
            min = min.inf(&g.position.add_scalar(-r));
            max = max.sup(&g.position.add_scalar(r));
        }
        let span = max - min;
        let cell = max_radius.max(span.max() / 128.0).max(1e-9);
        let dims = [
            ((span.x / cell).ceil() as usize).clamp(1, 128),
            ((span.y / cell).ceil() as usize).clamp(1, 128),
            ((span.z / cell).ceil() as usize).clamp(1, 128),
        ];
        let mut grid = CullGrid {
            origin: min,
            cell,
            dims,
            bins: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        for (i, g) in primitives.iter().enumerate() {
            let r = g.influence_radius();
            let lo = grid.clamp_cell(&g.position.add_scalar(-r));
            let hi = grid.clamp_cell(&g.position.add_scalar(r));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let idx = grid.bin_index([x, y, z]);
                        grid.bins[idx].push(i as u32);
                    }
                }
            }
        }
        Some(grid)
    }

    fn clamp_cell(&self, p: &Vector3<f64>) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = (v.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn bin_index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Collects the deduplicated candidate indices for a ray via 3D-DDA.
    fn candidates(&self, ray: &Ray, out: &mut Vec<usize>) {
        out.clear();
        // Clip the ray to the grid bounds (slab test).
        let (mut t0, mut t1) = (0.0f64, ray.t_max);
        for a in 0..3 {
            let inv = 1.0 / ray.direction[a];
            let lo = (self.origin[a] - ray.origin[a]) * inv;
            let hi = (self.origin[a] + self.dims[a] as f64 * self.cell - ray.origin[a]) * inv;
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        if t0 > t1 {
            return;
        }
        let start = ray.point_at(t0 + 1e-12 * self.cell.max(1.0));
        let mut cell = self.clamp_cell(&start);
        let mut t_next = [0.0f64; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0isize; 3];
        for a in 0..3 {
            if ray.direction[a] > 1e-300 {
                step[a] = 1;
                let edge = self.origin[a] + (cell[a] as f64 + 1.0) * self.cell;
                t_next[a] = (edge - ray.origin[a]) / ray.direction[a];
                t_delta[a] = self.cell / ray.direction[a];
            } else if ray.direction[a] < -1e-300 {
                step[a] = -1;
                let edge = self.origin[a] + cell[a] as f64 * self.cell;
                t_next[a] = (edge - ray.origin[a]) / ray.direction[a];
                t_delta[a] = -self.cell / ray.direction[a];
            } else {
                t_next[a] = f64::INFINITY;
            }
        }
        loop {
            out.extend(self.bins[self.bin_index(cell)].iter().map(|&i| i as usize));
            let axis = (0..3).min_by(|&a, &b| t_next[a].partial_cmp(&t_next[b]).unwrap()).unwrap();
            if t_next[axis] > t1 {
                break;
            }
            t_next[axis] += t_delta[axis];
            let next = cell[axis] as isize + step[axis];
            if next < 0 || next >= self.dims[axis] as isize {
                break;
            }
            cell[axis] = next as usize;
        }
        out.sort_unstable();
        out.dedup();
    }
}
