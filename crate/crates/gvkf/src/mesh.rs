//! SDF grid sampling, marching cubes, and mesh export.
//!
//! Sampling casts six axis-aligned probe rays through every grid line (one
//! per direction), solves each ray's surface model, and evaluates the mapped
//! signed distance at every sample on the line. Per sample, probes near
//! their own primary crossing are authoritative; the rest vote on
//! containment by the opacity already passed along their ray. Empty space
//! gets a positive sentinel, a short median filter removes speckle from
//! porous shells, and the outer sample layer is forced outside so regions
//! truncated by the bounds close cleanly.
//!
//! Marching cubes runs on a 256-case table generated at startup by walking
//! oriented iso-segments across cube faces: on each face, segments start at
//! inside-to-outside crossings and end at the preceding outside-to-inside
//! crossing (isolating inside corners on ambiguous faces). Because the rule
//! depends only on face corner signs, adjacent cells always agree, which
//! makes extracted surfaces watertight. Chaining segments yields oriented
//! loops; fanning them gives triangles that wind counterclockwise seen from
//! the positive side.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{cdf_phi, RayField, ALPHA_CULL};
use crate::gaussian::{ray_gaussian_transform, GaussianPrimitive, Ray};
use crate::par;
use crate::scene::Scene;
use crate::surface::{sdf_from_cdf, sigma_sq, solve_u0, surface_kernels, SurfaceSolve};

pub const MIN_RESOLUTION: usize = 2;
pub const MAX_RESOLUTION: usize = 1024;
/// Median-of-seven denoising passes applied to the sampled field.
const MEDIAN_PASSES: usize = 3;

/// Which sigma^2 feeds the per-ray surface solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// Each probe ray solves its own u0.
    #[default]
    PerRay,
    /// One u0 from the median sigma^2 over all probe rays.
    Global,
}

/// Dense SDF samples on a regular grid.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub origin: Vector3<f64>,
    pub spacing: f64,
    pub dims: [usize; 3],
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(origin: Vector3<f64>, spacing: f64, dims: [usize; 3], fill: f64) -> Self {
        assert!(dims.iter().all(|&d| d >= 2), "need at least 2 samples per axis");
        ScalarGrid {
            origin,
            spacing,
            dims,
            values: vec![fill; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn position(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.spacing
    }

    /// Sentinel magnitude for empty space; values are clamped inside it.
    pub fn sentinel(&self) -> f64 {
        10.0 * self.spacing * *self.dims.iter().max().unwrap() as f64
    }

    /// Samples an analytic SDF on the grid (used by tests and the property
    /// suite).
    pub fn from_fn(
        origin: Vector3<f64>,
        spacing: f64,
        dims: [usize; 3],
        f: impl Fn(Vector3<f64>) -> f64,
    ) -> Self {
        let mut grid = ScalarGrid::new(origin, spacing, dims, 0.0);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let v = f(grid.position(x, y, z));
                    grid.set(x, y, z, v);
                }
            }
        }
        grid
    }
}

// -- SDF sampling --------------------------------------------------------------

/// Samples the scene's ray-local SDF on a cubic grid inside `bounds`.
///
/// `camera_position` is only needed for neural scenes (the decoders are view
/// conditioned). Bounds must be non-degenerate; resolution is clamped to
/// `[MIN_RESOLUTION, MAX_RESOLUTION]` by validation, not silently.
pub fn sample_sdf_grid(
    scene: &Scene,
    bounds: Option<(Vector3<f64>, Vector3<f64>)>,
    resolution: usize,
    mu: f64,
    sigma_mode: SigmaMode,
    camera_position: Option<&Vector3<f64>>,
) -> Result<ScalarGrid> {
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
        return Err(Error::InvalidParameter(format!(
            "resolution must be in [{MIN_RESOLUTION}, {MAX_RESOLUTION}], got {resolution}"
        )));
    }
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    let primitives = scene.primitives(camera_position)?;
    let bounds = match bounds {
        Some(b) => Some(b),
        None => scene.bounds(camera_position)?,
    };
    let (min, max) = match bounds {
        Some(b) => b,
        None => (Vector3::repeat(-1.0), Vector3::repeat(1.0)),
    };
    let span = max - min;
    if !(span.min() > 0.0 && span.iter().all(|s| s.is_finite())) {
        return Err(Error::InvalidBounds(format!(
            "bounds must have positive extent, got {min:?}..{max:?}"
        )));
    }
    // Cubic cells over the bounding cube centered on the input bounds.
    let edge = span.max();
    let center = 0.5 * (min + max);
    let origin = center.add_scalar(-0.5 * edge);
    let spacing = edge / (resolution - 1) as f64;
    let dims = [resolution; 3];
    let mut grid = ScalarGrid::new(origin, spacing, dims, 0.0);
    let sentinel = grid.sentinel();

    if primitives.is_empty() {
        for v in grid.values.iter_mut() {
            *v = sentinel;
        }
        return Ok(grid);
    }

    // Six probe directions: +/- each axis. For every lattice line we build
    // the two directional fields once and evaluate all samples on the line.
    let global_u0 = match sigma_mode {
        SigmaMode::PerRay => None,
        SigmaMode::Global => median_sigma_u0(&primitives, &grid)?,
    };

    // Aggregation. A probe's mapped distance is authoritative only near its
    // own primary crossing. Elsewhere it contributes a containment vote:
    // inside once substantial opacity has accumulated before the sample.
    // Far past a crossing the ray is occluded (it cannot see free space
    // behind a wall), and through a porous patch the mapped sign alone would
    // read "outside" deep inside an object, so neither is trusted for
    // values. Majority vote, ties outside; probes with no kernels at all
    // abstain.
    let margin = spacing;
    let length = edge + 2.0 * margin;
    let near_window = 2.0 * spacing;
    let mut evidence = vec![ProbeEvidence::default(); dims[0] * dims[1] * dims[2]];
    for axis in 0..3usize {
        let (pa, pb) = perpendicular_axes(axis);
        let lines = resolution * resolution;
        let computed: Vec<Result<Vec<ProbeEvidence>>> = par::map_indexed(lines, |li| {
            let i = li % resolution;
            let j = li / resolution;
            let mut base = origin;
            base[pa] += i as f64 * spacing;
            base[pb] += j as f64 * spacing;
            let mut fwd_origin = base;
            fwd_origin[axis] -= margin;
            let mut bwd_origin = base;
            bwd_origin[axis] += edge + margin;
            let mut fwd_dir = Vector3::zeros();
            fwd_dir[axis] = 1.0;
            let fwd = probe(&primitives, fwd_origin, fwd_dir, length, mu, near_window, global_u0)?;
            let bwd = probe(&primitives, bwd_origin, -fwd_dir, length, mu, near_window, global_u0)?;
            let mut line = Vec::with_capacity(resolution);
            for s in 0..resolution {
                let t_fwd = margin + s as f64 * spacing;
                let t_bwd = length - t_fwd;
                let mut ev = ProbeEvidence::default();
                ev.add(probe_value(&fwd, t_fwd, near_window, sentinel));
                ev.add(probe_value(&bwd, t_bwd, near_window, sentinel));
                line.push(ev);
            }
            Ok(line)
        });
        for (li, line) in computed.into_iter().enumerate() {
            let line = line?;
            let i = li % resolution;
            let j = li / resolution;
            for (s, ev) in line.into_iter().enumerate() {
                let mut idx = [0usize; 3];
                idx[axis] = s;
                idx[pa] = i;
                idx[pb] = j;
                let cell = (idx[2] * dims[1] + idx[1]) * dims[0] + idx[0];
                evidence[cell].merge(&ev);
            }
        }
    }
    for (v, ev) in grid.values.iter_mut().zip(&evidence) {
        *v = ev.resolve(spacing, sentinel);
    }
    // Porous scenes leave salt-and-pepper disagreement between probe
    // directions; a short median filter removes isolated sign flips and
    // saddle configurations (which would pinch the extracted surface) while
    // moving the zero crossing by at most a cell per pass.
    for _ in 0..MEDIAN_PASSES {
        median_filter(&mut grid);
    }

    // Force the outer layer outside so bounded regions close.
    let r = resolution - 1;
    for a in 0..resolution {
        for b in 0..resolution {
            for (x, y, z) in [
                (0, a, b),
                (r, a, b),
                (a, 0, b),
                (a, r, b),
                (a, b, 0),
                (a, b, r),
            ] {
                grid.set(x, y, z, sentinel);
            }
        }
    }
    Ok(grid)
}

fn perpendicular_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// One median-of-seven pass (the sample and its six face neighbors).
fn median_filter(grid: &mut ScalarGrid) {
    let [nx, ny, nz] = grid.dims;
    let src = grid.values.clone();
    let at = |x: usize, y: usize, z: usize| src[(z * ny + y) * nx + x];
    let out: Vec<Vec<f64>> = par::map_indexed(nz, |z| {
        let mut plane = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                if x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz {
                    plane.push(at(x, y, z));
                    continue;
                }
                let mut vals = [
                    at(x, y, z),
                    at(x - 1, y, z),
                    at(x + 1, y, z),
                    at(x, y - 1, z),
                    at(x, y + 1, z),
                    at(x, y, z - 1),
                    at(x, y, z + 1),
                ];
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                plane.push(vals[3]);
            }
        }
        plane
    });
    for (z, plane) in out.into_iter().enumerate() {
        for (i, v) in plane.into_iter().enumerate() {
            grid.values[z * ny * nx + i] = v;
        }
    }
}

/// One directional probe: the kernel field plus its solved surface model.
///
/// A probe is `primary` when its surface crossing is a clean first contact,
/// i.e. little opacity accumulated before the crossing neighborhood. A
/// porous chord that only reaches the iso level at its exit wall has its
/// solid side pointing the wrong way for envelope extraction, so such
/// crossings are demoted to containment votes.
struct Probe {
    field: RayField,
    solve: Option<SurfaceSolve>,
    primary: bool,
}

fn probe(
    primitives: &[GaussianPrimitive],
    origin: Vector3<f64>,
    direction: Vector3<f64>,
    length: f64,
    mu: f64,
    near_window: f64,
    global_u0: Option<f64>,
) -> Result<Probe> {
    let ray = Ray::new(origin, direction, length)?;
    let field = gather_field(primitives, &ray)?;
    let solve = if field.is_empty() {
        None
    } else {
        match global_u0 {
            Some(u0) => SurfaceSolve::with_u0(&field, mu, u0),
            None => SurfaceSolve::from_field(&field, mu),
        }
    };
    let primary = match &solve {
        Some(s) if s.t_star.is_finite() => {
            let level = crate::surface::iso_level(s.mu, s.u0);
            cdf_phi(&field, s.t_star - near_window) <= 0.5 * level
        }
        _ => false,
    };
    Ok(Probe { field, solve, primary })
}

fn gather_field(primitives: &[GaussianPrimitive], ray: &Ray) -> Result<RayField> {
    let mut kernels = Vec::new();
    for (i, g) in primitives.iter().enumerate() {
        let r = g.influence_radius();
        let to_center = g.position - ray.origin;
        let t = to_center.dot(&ray.direction);
        if t < -r || t > ray.t_max + r {
            continue;
        }
        let closest = ray.origin + ray.direction * t.clamp(0.0, ray.t_max);
        if (g.position - closest).norm_squared() > r * r {
            continue;
        }
        let mut k = ray_gaussian_transform(g, ray)?;
        k.source = i;
        if k.t_peak <= 0.0 || k.alpha < ALPHA_CULL {
            continue;
        }
        kernels.push(k);
    }
    Ok(RayField::new(kernels, [0.0; 3]))
}

/// Fraction of a probe's own iso level above which it votes a sample inside.
const VOTE_LEVEL_FRACTION: f64 = 0.3;

/// One probe's verdict at a sample: mapped signed distance, a containment
/// vote (has the ray already passed substantial opacity), and whether the
/// sample lies near the probe's own primary crossing. `None` for probes with
/// no kernels at all.
fn probe_value(
    p: &Probe,
    t: f64,
    near_window: f64,
    sentinel: f64,
) -> Option<(f64, bool, bool)> {
    let solve = p.solve.as_ref()?;
    let phi = cdf_phi(&p.field, t);
    let (d, _) = sdf_from_cdf(phi, solve.mu, solve.u0);
    let level = crate::surface::iso_level(solve.mu, solve.u0);
    let near =
        p.primary && solve.t_star.is_finite() && (t - solve.t_star).abs() <= near_window;
    Some((
        d.clamp(-sentinel, sentinel),
        phi >= VOTE_LEVEL_FRACTION * level,
        near,
    ))
}

/// Accumulated per-sample probe verdicts.
#[derive(Debug, Clone, Copy)]
struct ProbeEvidence {
    near_max: f64,
    has_near: bool,
    votes_in: u32,
    votes_out: u32,
    pos_min: f64,
    neg_max: f64,
}

impl Default for ProbeEvidence {
    fn default() -> Self {
        ProbeEvidence {
            near_max: f64::NEG_INFINITY,
            has_near: false,
            votes_in: 0,
            votes_out: 0,
            pos_min: f64::INFINITY,
            neg_max: f64::NEG_INFINITY,
        }
    }
}

impl ProbeEvidence {
    fn add(&mut self, verdict: Option<(f64, bool, bool)>) {
        let Some((d, vote_in, near)) = verdict else { return };
        if near {
            self.has_near = true;
            self.near_max = self.near_max.max(d);
        } else if vote_in {
            self.votes_in += 1;
        } else {
            self.votes_out += 1;
        }
        if d > 0.0 {
            self.pos_min = self.pos_min.min(d);
        } else {
            self.neg_max = self.neg_max.max(d);
        }
    }

    fn merge(&mut self, other: &ProbeEvidence) {
        if other.has_near {
            self.has_near = true;
            self.near_max = self.near_max.max(other.near_max);
        }
        self.votes_in += other.votes_in;
        self.votes_out += other.votes_out;
        self.pos_min = self.pos_min.min(other.pos_min);
        self.neg_max = self.neg_max.max(other.neg_max);
    }

    fn resolve(&self, spacing: f64, sentinel: f64) -> f64 {
        if self.has_near {
            return self.near_max;
        }
        if self.votes_in + self.votes_out == 0 {
            return sentinel;
        }
        if self.votes_in > self.votes_out {
            if self.neg_max.is_finite() {
                self.neg_max
            } else {
                -0.5 * spacing
            }
        } else if self.pos_min.is_finite() {
            self.pos_min
        } else {
            0.5 * spacing
        }
    }
}

/// Median sigma^2 over all probe lines with surface kernels, solved once.
fn median_sigma_u0(primitives: &[GaussianPrimitive], grid: &ScalarGrid) -> Result<Option<f64>> {
    let resolution = grid.dims[0];
    let edge = grid.spacing * (resolution - 1) as f64;
    let margin = grid.spacing;
    let length = edge + 2.0 * margin;
    let mut sigmas = Vec::new();
    for axis in 0..3usize {
        let (pa, pb) = perpendicular_axes(axis);
        for j in 0..resolution {
            for i in 0..resolution {
                let mut base = grid.origin;
                base[pa] += i as f64 * grid.spacing;
                base[pb] += j as f64 * grid.spacing;
                for sign in [1.0, -1.0] {
                    let mut o = base;
                    let mut dir = Vector3::zeros();
                    if sign > 0.0 {
                        o[axis] -= margin;
                    } else {
                        o[axis] += edge + margin;
                    }
                    dir[axis] = sign;
                    let ray = Ray::new(o, dir, length)?;
                    let field = gather_field(primitives, &ray)?;
                    if let Some((alphas, _)) = surface_kernels(&field) {
                        if let Ok(s) = sigma_sq(&alphas) {
                            sigmas.push(s);
                        }
                    }
                }
            }
        }
    }
    if sigmas.is_empty() {
        return Ok(None);
    }
    sigmas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sigmas[sigmas.len() / 2];
    Ok(Some(solve_u0(median, 1e-10)?))
}

// -- Marching cubes -------------------------------------------------------------

/// Indexed triangle mesh with counterclockwise-outward faces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Area-weighted per-vertex normals.
    pub fn compute_vertex_normals(&mut self) {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in f {
                normals[i as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-18 {
                *n /= len;
            }
        }
        self.normals = Some(normals);
    }

    /// Number of edges not shared by exactly two faces (0 for a closed
    /// manifold surface).
    pub fn edge_manifold_violations(&self) -> usize {
        let mut counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }
}

const CUBE_CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const CUBE_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Face corner cycles, counterclockwise seen from outside the cube.
const FACE_CYCLES: [[usize; 4]; 6] = [
    [0, 3, 2, 1], // z = 0
    [4, 5, 6, 7], // z = 1
    [0, 1, 5, 4], // y = 0
    [1, 2, 6, 5], // x = 1
    [2, 3, 7, 6], // y = 1
    [3, 0, 4, 7], // x = 0
];

fn edge_between(a: usize, b: usize) -> usize {
    CUBE_EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a))
        .expect("corner pair is a cube edge")
}

/// Oriented edge loops for one corner-sign configuration.
fn loops_for_config(config: u8) -> Vec<Vec<u8>> {
    let inside = |c: usize| config >> c & 1 == 1;
    // Directed segments between crossings, keyed by their starting cube edge.
    let mut next: [Option<u8>; 12] = [None; 12];
    for cycle in FACE_CYCLES {
        for i in 0..4 {
            let a = cycle[i];
            let b = cycle[(i + 1) % 4];
            if inside(a) && !inside(b) {
                // Segment starts here; ends at the previous out-to-in
                // crossing, walking backward around the face.
                let mut j = (i + 3) % 4;
                loop {
                    let p = cycle[j];
                    let q = cycle[(j + 1) % 4];
                    if !inside(p) && inside(q) {
                        next[edge_between(a, b)] = Some(edge_between(p, q) as u8);
                        break;
                    }
                    j = (j + 3) % 4;
                }
            }
        }
    }
    let mut loops = Vec::new();
    let mut visited = [false; 12];
    for start in 0..12 {
        if visited[start] || next[start].is_none() {
            continue;
        }
        let mut loop_edges = Vec::new();
        let mut e = start;
        loop {
            visited[e] = true;
            loop_edges.push(e as u8);
            e = next[e].expect("crossed edges chain") as usize;
            if e == start {
                break;
            }
        }
        // Segment chaining runs clockwise seen from the positive side;
        // reverse so faces wind counterclockwise outward.
        loop_edges.reverse();
        loops.push(loop_edges);
    }
    loops
}

fn mc_table() -> &'static [Vec<Vec<u8>>; 256] {
    static TABLE: OnceLock<[Vec<Vec<u8>>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|c| loops_for_config(c as u8)))
}

/// Extracts the `iso` level set with marching cubes.
///
/// Vertices are deduplicated across cells by grid-edge key; no sign change
/// produces an empty mesh. Faces wind counterclockwise seen from the
/// positive side.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = grid.dims;
    let table = mc_table();

    // Cells are processed in parallel slabs; each triangle carries its
    // vertices as (grid corner a, grid corner b, position) so the merge can
    // dedup deterministically.
    type EdgeVertex = (u64, u64, [f64; 3]);
    let slabs: Vec<Vec<[EdgeVertex; 3]>> = par::map_indexed(nz - 1, |z| {
        let mut triangles = Vec::new();
        let corner_id =
            |x: usize, y: usize, z: usize| -> u64 { ((z * ny + y) * nx + x) as u64 };
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut values = [0.0f64; 8];
                let mut ids = [0u64; 8];
                let mut config = 0usize;
                for (c, off) in CUBE_CORNERS.iter().enumerate() {
                    let (cx, cy, cz) = (x + off[0], y + off[1], z + off[2]);
                    values[c] = grid.get(cx, cy, cz);
                    ids[c] = corner_id(cx, cy, cz);
                    if values[c] < iso {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                let vertex_on = |edge: u8| -> EdgeVertex {
                    let (a, b) = CUBE_EDGES[edge as usize];
                    let (va, vb) = (values[a], values[b]);
                    let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                    let pa = grid.position(x + CUBE_CORNERS[a][0], y + CUBE_CORNERS[a][1], z + CUBE_CORNERS[a][2]);
                    let pb = grid.position(x + CUBE_CORNERS[b][0], y + CUBE_CORNERS[b][1], z + CUBE_CORNERS[b][2]);
                    let p = pa + (pb - pa) * t;
                    let key = (ids[a].min(ids[b]), ids[a].max(ids[b]));
                    (key.0, key.1, [p.x, p.y, p.z])
                };
                for loop_edges in &table[config] {
                    let verts: Vec<EdgeVertex> =
                        loop_edges.iter().map(|&e| vertex_on(e)).collect();
                    for i in 1..verts.len() - 1 {
                        triangles.push([verts[0], verts[i], verts[i + 1]]);
                    }
                }
            }
        }
        triangles
    });

    let mut mesh = TriangleMesh::default();
    let mut vertex_ids: BTreeMap<(u64, u64), u32> = BTreeMap::new();
    for slab in slabs {
        for tri in slab {
            let mut face = [0u32; 3];
            for (i, (ka, kb, pos)) in tri.iter().enumerate() {
                let id = *vertex_ids.entry((*ka, *kb)).or_insert_with(|| {
                    mesh.vertices.push(Vector3::new(pos[0], pos[1], pos[2]));
                    (mesh.vertices.len() - 1) as u32
                });
                face[i] = id;
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                continue;
            }
            let [a, b, c] = face.map(|i| mesh.vertices[i as usize]);
            if 0.5 * (b - a).cross(&(c - a)).norm() <= 1e-12 {
                continue;
            }
            mesh.faces.push(face);
        }
    }
    mesh
}

// -- Export / import -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    PlyAscii,
    PlyBinaryLe,
    Obj,
}

impl MeshFormat {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ply_ascii" => Ok(MeshFormat::PlyAscii),
            "ply_binary_le" => Ok(MeshFormat::PlyBinaryLe),
            "obj" => Ok(MeshFormat::Obj),
            other => Err(Error::InvalidParameter(format!(
                "unknown mesh format {other:?} (expected ply_ascii, ply_binary_le, or obj)"
            ))),
        }
    }
}

pub fn write_mesh(mesh: &TriangleMesh, format: MeshFormat, w: &mut impl Write) -> Result<()> {
    match format {
        MeshFormat::PlyAscii | MeshFormat::PlyBinaryLe => write_ply(mesh, format, w),
        MeshFormat::Obj => write_obj(mesh, w),
    }
}

pub fn export_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_mesh(mesh, format, &mut w)
}

fn write_ply(mesh: &TriangleMesh, format: MeshFormat, w: &mut impl Write) -> Result<()> {
    let fmt_line = match format {
        MeshFormat::PlyAscii => "format ascii 1.0",
        _ => "format binary_little_endian 1.0",
    };
    write!(
        w,
        "ply\n{fmt_line}\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    match format {
        MeshFormat::PlyAscii => {
            for v in &mesh.vertices {
                writeln!(w, "{} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
            }
            for f in &mesh.faces {
                writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
            }
        }
        _ => {
            for v in &mesh.vertices {
                for c in [v.x, v.y, v.z] {
                    w.write_all(&(c as f32).to_le_bytes())?;
                }
            }
            for f in &mesh.faces {
                w.write_all(&[3u8])?;
                for &i in f {
                    w.write_all(&(i as i32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn write_obj(mesh: &TriangleMesh, w: &mut impl Write) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Reads back meshes written by [`write_mesh`] (round-trip oracle and the
/// `verify` subcommand use this).
pub fn import_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let bytes = std::fs::read(path)?;
    parse_mesh(&bytes)
}

pub fn parse_mesh(bytes: &[u8]) -> Result<TriangleMesh> {
    if bytes.starts_with(b"ply") {
        parse_ply(bytes)
    } else {
        parse_obj(bytes)
    }
}

fn parse_ply(bytes: &[u8]) -> Result<TriangleMesh> {
    let header_end = find_header_end(bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::parse("ply.header", "not utf-8"))?;
    let mut binary = false;
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    for line in header.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", other, _] => {
                return Err(Error::parse("ply.format", format!("unsupported {other}")))
            }
            ["element", "vertex", n] => {
                n_vertices = n.parse().map_err(|_| Error::parse("ply.vertex", "bad count"))?
            }
            ["element", "face", n] => {
                n_faces = n.parse().map_err(|_| Error::parse("ply.face", "bad count"))?
            }
            _ => {}
        }
    }
    let mut mesh = TriangleMesh::default();
    if binary {
        let mut at = header_end;
        let need = n_vertices * 12;
        if bytes.len() < at + need {
            return Err(Error::parse("ply.vertices", "truncated vertex data"));
        }
        for _ in 0..n_vertices {
            let mut c = [0f64; 3];
            for v in c.iter_mut() {
                *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
                at += 4;
            }
            mesh.vertices.push(Vector3::new(c[0], c[1], c[2]));
        }
        for _ in 0..n_faces {
            if bytes.len() < at + 1 {
                return Err(Error::parse("ply.faces", "truncated face data"));
            }
            let count = bytes[at] as usize;
            at += 1;
            if count != 3 || bytes.len() < at + 12 {
                return Err(Error::parse("ply.faces", "only triangles supported"));
            }
            let mut f = [0u32; 3];
            for v in f.iter_mut() {
                *v = i32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as u32;
                at += 4;
            }
            mesh.faces.push(f);
        }
    } else {
        let body = std::str::from_utf8(&bytes[header_end..])
            .map_err(|_| Error::parse("ply.body", "not utf-8"))?;
        let mut lines = body.lines();
        for _ in 0..n_vertices {
            let line = lines.next().ok_or_else(|| Error::parse("ply.vertices", "missing line"))?;
            let c: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f32>().map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse("ply.vertices", format!("bad line {line:?}")))?;
            if c.len() != 3 {
                return Err(Error::parse("ply.vertices", "expected 3 coordinates"));
            }
            mesh.vertices.push(Vector3::new(c[0], c[1], c[2]));
        }
        for _ in 0..n_faces {
            let line = lines.next().ok_or_else(|| Error::parse("ply.faces", "missing line"))?;
            let t: Vec<u32> = line
                .split_whitespace()
                .map(|x| x.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse("ply.faces", format!("bad line {line:?}")))?;
            if t.len() != 4 || t[0] != 3 {
                return Err(Error::parse("ply.faces", "only triangles supported"));
            }
            mesh.faces.push([t[1], t[2], t[3]]);
        }
    }
    validate_indices(&mesh)?;
    Ok(mesh)
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
        .ok_or_else(|| Error::parse("ply.header", "missing end_header"))
}

fn parse_obj(bytes: &[u8]) -> Result<TriangleMesh> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::parse("obj", "not utf-8"))?;
    let mut mesh = TriangleMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["v", x, y, z] => {
                let p = [x, y, z]
                    .map(|t| t.parse::<f32>().map(|v| v as f64))
                    .into_iter()
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::parse("obj.v", format!("line {}", ln + 1)))?;
                mesh.vertices.push(Vector3::new(p[0], p[1], p[2]));
            }
            ["f", a, b, c] => {
                let f = [a, b, c]
                    .map(|t| t.split('/').next().unwrap_or(t).parse::<u32>())
                    .into_iter()
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::parse("obj.f", format!("line {}", ln + 1)))?;
                mesh.faces.push([f[0] - 1, f[1] - 1, f[2] - 1]);
            }
            _ => {}
        }
    }
    validate_indices(&mesh)?;
    Ok(mesh)
}

fn validate_indices(mesh: &TriangleMesh) -> Result<()> {
    let n = mesh.vertices.len() as u32;
    if mesh.faces.iter().flatten().any(|&i| i >= n) {
        return Err(Error::parse("faces", "vertex index out of range"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(n: usize, radius: f64) -> ScalarGrid {
        let edge = 2.0 * radius * 1.3;
        ScalarGrid::from_fn(
            Vector3::repeat(-0.5 * edge),
            edge / (n - 1) as f64,
            [n; 3],
            |p| p.norm() - radius,
        )
    }

    #[test]
    fn table_structure_is_sound() {
        let table = mc_table();
        assert!(table[0].is_empty() && table[255].is_empty());
        for config in 1..255usize {
            let crossed: Vec<usize> = (0..12)
                .filter(|&e| {
                    let (a, b) = CUBE_EDGES[e];
                    (config >> a & 1) != (config >> b & 1)
                })
                .collect();
            let mut used: Vec<usize> = table[config]
                .iter()
                .flat_map(|l| l.iter().map(|&e| e as usize))
                .collect();
            used.sort_unstable();
            assert_eq!(used, crossed, "config {config:#04x} must use each crossed edge once");
            for l in &table[config] {
                assert!(l.len() >= 3, "config {config:#04x} has a degenerate loop");
            }
        }
    }

    #[test]
    fn single_corner_config_is_one_triangle() {
        let loops = &mc_table()[0b0000_0001];
        assert_eq!(loops.len(), 1);
        let mut edges: Vec<u8> = loops[0].clone();
        edges.sort_unstable();
        assert_eq!(edges, vec![0, 3, 8]);
    }

    #[test]
    fn complementary_configs_reverse_orientation() {
        for config in 1..255u16 {
            let a = &mc_table()[config as usize];
            let b = &mc_table()[(!config as u8) as usize & 0xff];
            let mut ea: Vec<u8> = a.iter().flatten().copied().collect();
            let mut eb: Vec<u8> = b.iter().flatten().copied().collect();
            ea.sort_unstable();
            eb.sort_unstable();
            assert_eq!(ea, eb, "config {config:#04x}: same crossed edges");
        }
    }

    #[test]
    fn constant_grid_gives_empty_mesh() {
        let grid = ScalarGrid::new(Vector3::zeros(), 0.1, [8, 8, 8], 1.0);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(mesh.is_empty());
        assert_eq!(mesh.vertices.len(), 0);
    }

    #[test]
    fn sphere_mesh_is_closed_manifold_and_accurate() {
        let grid = sphere_grid(32, 1.0);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        assert_eq!(mesh.edge_manifold_violations(), 0);
        // Vertices near the analytic zero set: within one cell diagonal.
        let diag = grid.spacing * 3f64.sqrt();
        for v in &mesh.vertices {
            assert!((v.norm() - 1.0).abs() <= diag);
        }
        // Faces wind outward: normals point away from the center.
        for f in &mesh.faces {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            assert!(n.dot(&centroid) > 0.0, "face normal should point outward");
        }
    }

    #[test]
    fn plane_mesh_vertices_lie_on_plane() {
        // Tilted plane: edge interpolation of a linear field is exact.
        let n_axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let d = 0.13;
        let grid = ScalarGrid::from_fn(
            Vector3::repeat(-1.0),
            2.0 / 15.0,
            [16, 16, 16],
            |p| p.dot(&n_axis) - d,
        );
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v.dot(&n_axis) - d).abs() < 1e-9);
        }
    }

    #[test]
    fn marching_cubes_counts_shared_vertices_once() {
        let grid = sphere_grid(16, 1.0);
        let mesh = marching_cubes(&grid, 0.0);
        // Closed manifold triangle mesh: E = 3F/2, V - E + F = 2 (genus 0).
        let f = mesh.faces.len() as i64;
        let v = mesh.vertices.len() as i64;
        assert_eq!(v - 3 * f / 2 + f, 2, "Euler characteristic of a sphere");
    }

    #[test]
    fn export_import_round_trips() {
        let grid = sphere_grid(12, 1.0);
        let mut mesh = marching_cubes(&grid, 0.0);
        // Snap to f32 so the round trip is exact.
        for v in mesh.vertices.iter_mut() {
            *v = Vector3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64);
        }
        for format in [MeshFormat::PlyAscii, MeshFormat::PlyBinaryLe, MeshFormat::Obj] {
            let mut bytes = Vec::new();
            write_mesh(&mesh, format, &mut bytes).unwrap();
            let back = parse_mesh(&bytes).unwrap();
            assert_eq!(back.vertices.len(), mesh.vertices.len());
            assert_eq!(back.faces, mesh.faces);
            for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
                assert_eq!(a, b, "{format:?} must be lossless for f32 coordinates");
            }
            // A second write of the parsed mesh is byte-identical.
            let mut again = Vec::new();
            write_mesh(&back, format, &mut again).unwrap();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn empty_mesh_exports_valid_files() {
        let mesh = TriangleMesh::default();
        let mut bytes = Vec::new();
        write_mesh(&mesh, MeshFormat::PlyAscii, &mut bytes).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("element vertex 0"));
        assert!(text.contains("element face 0"));
        let back = parse_mesh(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn ply_header_is_exact() {
        let mesh = TriangleMesh {
            vertices: vec![Vector3::new(0.0, 0.0, 0.0); 3],
            faces: vec![[0, 1, 2]],
            normals: None,
        };
        let mut bytes = Vec::new();
        write_mesh(&mesh, MeshFormat::PlyAscii, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with(
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
        ));
    }

    #[test]
    fn sampling_empty_scene_gives_sentinels() {
        let scene = Scene::direct(vec![], 0.01).unwrap();
        let grid = sample_sdf_grid(
            &scene,
            Some((Vector3::repeat(-1.0), Vector3::repeat(1.0))),
            8,
            8.0,
            SigmaMode::PerRay,
            None,
        )
        .unwrap();
        let s = grid.sentinel();
        assert!(grid.values().iter().all(|&v| v == s));
        assert!(marching_cubes(&grid, 0.0).is_empty());
    }

    #[test]
    fn sampling_rejects_bad_inputs() {
        let scene = Scene::direct(vec![], 0.01).unwrap();
        assert!(matches!(
            sample_sdf_grid(&scene, None, 1, 8.0, SigmaMode::PerRay, None),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            sample_sdf_grid(
                &scene,
                Some((Vector3::repeat(1.0), Vector3::repeat(1.0))),
                16,
                8.0,
                SigmaMode::PerRay,
                None
            ),
            Err(Error::InvalidBounds(_))
        ));
    }

    #[test]
    fn sampling_wall_changes_sign_across_plane() {
        // Bidirectional probes turn a thin sheet into a closed slab: outside
        // in front, a negative band around the plane, outside again behind.
        let scene = crate::scene::make_wall_scene(0.5, 0.02, 0.0, 0.02, 0.95, 0.02).unwrap();
        let grid = sample_sdf_grid(
            &scene,
            Some((Vector3::new(-0.4, -0.4, -0.4), Vector3::new(0.4, 0.4, 0.4))),
            24,
            8.0,
            SigmaMode::PerRay,
            None,
        )
        .unwrap();
        // Walk the z axis through the middle of the wall.
        let mid = 12usize;
        assert!(grid.get(mid, mid, 2) > 0.0, "front of wall should be outside");
        assert!(
            grid.get(mid, mid, grid.dims[2] - 3) > 0.0,
            "far behind the sheet should be outside again"
        );
        let line: Vec<f64> = (0..grid.dims[2]).map(|z| grid.get(mid, mid, z)).collect();
        assert!(
            line.iter().any(|&d| d < 0.0),
            "the sheet interior must go negative"
        );
        let mut crossings = Vec::new();
        for z in 1..grid.dims[2] {
            if (line[z - 1] > 0.0) != (line[z] > 0.0) {
                crossings.push(grid.position(mid, mid, z).z);
            }
        }
        assert_eq!(crossings.len(), 2, "one slab: {crossings:?}");
        for zc in crossings {
            assert!(zc.abs() < 3.0 * grid.spacing, "crossing at z = {zc}");
        }
    }

    #[test]
    fn sphere_scene_meshes_near_unit_radius() {
        let scene = crate::scene::make_sphere_scene(2000, 1.0, 0.02, 0.95, 0.02).unwrap();
        let grid = sample_sdf_grid(&scene, None, 48, 8.0, SigmaMode::PerRay, None).unwrap();
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        assert_eq!(mesh.edge_manifold_violations(), 0);
        let errors: Vec<f64> = mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).collect();
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let max = errors.iter().cloned().fold(0.0, f64::max);
        assert!(mean <= 0.05, "mean radial error {mean}");
        assert!(max <= 0.15, "max radial error {max}");
    }

    #[test]
    fn sphere_scene_global_sigma_also_meshes() {
        let scene = crate::scene::make_sphere_scene(2000, 1.0, 0.02, 0.95, 0.02).unwrap();
        let grid = sample_sdf_grid(&scene, None, 40, 8.0, SigmaMode::Global, None).unwrap();
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        let errors: Vec<f64> = mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).collect();
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        assert!(mean <= 0.05, "mean radial error {mean}");
    }
}
