//! Named property suite behind the `verify` subcommand.
//!
//! Each check is a fast, self-contained invariant run; the CLI prints one
//! pass/fail line per property. The heavyweight acceptance corpus lives in
//! the integration tests; these are the same properties at smoke scale.

use nalgebra::{UnitQuaternion, Vector3};

use crate::camera::Camera;
use crate::field::{cdf_phi, kernel_value, render_depth, render_ray_with, RayField};
use crate::gaussian::{ray_gaussian_transform, GaussianPrimitive, Ray, RayKernel};
use crate::image::ColorImage;
use crate::mesh::{marching_cubes, parse_mesh, write_mesh, MeshFormat, ScalarGrid};
use crate::oracle;
use crate::render::{render_scene, RenderOptions};
use crate::rng::SplitMix64;
use crate::scene::{make_single_scene, make_sphere_scene, Scene};
use crate::surface::{
    h_diagnostic, iso_level, logistic_cdf, normal_density, sdf_from_cdf, solve_u0,
};
use crate::train::analytic_color_gradient_l1;
use crate::volume::{cdf_with, render_volume, KernelModel, QuadratureConfig, Scheme};
use crate::voxel::{GridMode, SparseVoxelGrid, VoxelKey, MAX_DEPTH};

pub type CheckResult = std::result::Result<(), String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

/// The full property list, in report order.
pub fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "sum-product-identity", run: sum_product_identity },
        Check { name: "cdf-monotone-bounded", run: cdf_monotone_bounded },
        Check { name: "cdf-order-invariance", run: cdf_order_invariance },
        Check { name: "ray-transform-argmax", run: ray_transform_argmax },
        Check { name: "ray-transform-peak-consistency", run: ray_transform_peak },
        Check { name: "sharpness-scaling-law", run: sharpness_scaling },
        Check { name: "u0-grid-agreement", run: u0_grid_agreement },
        Check { name: "peak-before-surface", run: peak_before_surface },
        Check { name: "sdf-mapping-identities", run: sdf_identities },
        Check { name: "volume-quadrature-convergence", run: volume_convergence },
        Check { name: "small-opacity-agreement", run: small_opacity_agreement },
        Check { name: "render-early-termination-bound", run: early_termination_bound },
        Check { name: "depth-blend-oracle", run: depth_blend_oracle },
        Check { name: "voxel-subdivision-coverage", run: voxel_subdivision },
        Check { name: "voxel-pruning", run: voxel_pruning },
        Check { name: "marching-cubes-sphere-manifold", run: mc_sphere_manifold },
        Check { name: "mesh-export-roundtrip", run: mesh_roundtrip },
        Check { name: "render-determinism", run: render_determinism },
        Check { name: "l1-color-gradient-analytic", run: l1_color_gradient },
    ]
}

/// Runs every check, optionally appending a deliberately failing negative
/// control (used to prove that failures propagate to the exit code).
pub fn run_report(negate: bool, mut sink: impl FnMut(&str, &CheckResult)) -> bool {
    let mut all_ok = true;
    for check in all_checks() {
        let outcome = (check.run)();
        all_ok &= outcome.is_ok();
        sink(check.name, &outcome);
    }
    if negate {
        let outcome: CheckResult = Err("negative control requested via --self-test-negate".into());
        all_ok &= outcome.is_ok();
        sink("negative-control", &outcome);
    }
    all_ok
}

fn ensure(cond: bool, msg: impl Into<String>) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_field(rng: &mut SplitMix64, max_kernels: usize) -> RayField {
    let n = 1 + (rng.next_u64() as usize) % max_kernels;
    let kernels = (0..n)
        .map(|i| RayKernel {
            t_peak: rng.uniform(0.5, 20.0),
            sharpness: rng.uniform(0.05, 50.0),
            peak: 1.0,
            alpha: rng.uniform(0.01, 1.0),
            color: [rng.next_f64(), rng.next_f64(), rng.next_f64()],
            source: i,
        })
        .collect();
    RayField::new(kernels, [rng.next_f64(), rng.next_f64(), rng.next_f64()])
}

fn product_form(field: &RayField, t: f64) -> f64 {
    1.0 - field
        .kernels()
        .iter()
        .map(|k| 1.0 - k.alpha * kernel_value(k, t))
        .product::<f64>()
}

fn sum_product_identity() -> CheckResult {
    let mut rng = SplitMix64::new(101);
    for _ in 0..200 {
        let f = random_field(&mut rng, 30);
        for _ in 0..50 {
            let t = rng.uniform(0.0, 25.0);
            let gap = (cdf_phi(&f, t) - product_form(&f, t)).abs();
            ensure(gap <= 1e-12, format!("sum vs product gap {gap:.3e}"))?;
        }
    }
    Ok(())
}

fn cdf_monotone_bounded() -> CheckResult {
    let mut rng = SplitMix64::new(102);
    for _ in 0..100 {
        let f = random_field(&mut rng, 20);
        let cap = 1.0 - f.kernels().iter().map(|k| 1.0 - k.alpha).product::<f64>();
        let mut last = -1.0;
        for i in 0..256 {
            let t = i as f64 * (25.0 / 255.0);
            let phi = cdf_phi(&f, t);
            ensure(phi >= last - 1e-12, format!("phi not monotone at t {t}"))?;
            ensure(
                (-1e-12..=cap + 1e-12).contains(&phi),
                format!("phi {phi} outside [0, {cap}]"),
            )?;
            last = phi;
        }
    }
    Ok(())
}

fn cdf_order_invariance() -> CheckResult {
    let mut rng = SplitMix64::new(103);
    for _ in 0..50 {
        let f = random_field(&mut rng, 15);
        let mut reversed: Vec<RayKernel> = f.kernels().to_vec();
        reversed.reverse();
        let g = RayField::new(reversed, f.background);
        for _ in 0..20 {
            let t = rng.uniform(0.0, 25.0);
            let gap = (cdf_phi(&f, t) - cdf_phi(&g, t)).abs();
            ensure(gap <= 1e-12, format!("order dependence {gap:.3e}"))?;
        }
    }
    Ok(())
}

fn random_primitive(rng: &mut SplitMix64) -> GaussianPrimitive {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
    ));
    GaussianPrimitive::new(
        Vector3::new(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(4.0, 8.0)),
        q,
        Vector3::new(rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5)),
        rng.uniform(0.1, 1.0),
        [0.5; 3],
    )
    .expect("valid primitive")
}

fn ray_transform_argmax() -> CheckResult {
    let mut rng = SplitMix64::new(104);
    for _ in 0..200 {
        let g = random_primitive(&mut rng);
        let ray = Ray::new(
            Vector3::zeros(),
            Vector3::new(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 1.0),
            100.0,
        )
        .map_err(|e| e.to_string())?;
        let k = ray_gaussian_transform(&g, &ray).map_err(|e| e.to_string())?;
        if g.evaluate_3d(&ray.point_at(k.t_peak)) < 1e-9 {
            continue;
        }
        let Some(numeric) =
            oracle::scanned_argmax(|t| g.evaluate_3d(&ray.point_at(t)), 0.0, 20.0, 4000, 1e-8)
        else {
            continue;
        };
        ensure(
            (k.t_peak - numeric).abs() < 1e-4,
            format!("analytic {} vs numeric {}", k.t_peak, numeric),
        )?;
    }
    Ok(())
}

fn ray_transform_peak() -> CheckResult {
    let mut rng = SplitMix64::new(105);
    for _ in 0..200 {
        let g = random_primitive(&mut rng);
        let ray = Ray::new(
            Vector3::zeros(),
            Vector3::new(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 1.0),
            100.0,
        )
        .map_err(|e| e.to_string())?;
        let k = ray_gaussian_transform(&g, &ray).map_err(|e| e.to_string())?;
        let direct = g.evaluate_3d(&ray.point_at(k.t_peak));
        ensure(
            (k.peak * g.opacity - direct).abs() < 1e-12,
            format!("peak {} vs direct {}", k.peak * g.opacity, direct),
        )?;
    }
    Ok(())
}

fn sharpness_scaling() -> CheckResult {
    let mut rng = SplitMix64::new(106);
    for _ in 0..50 {
        let g = random_primitive(&mut rng);
        let lambda = rng.uniform(0.5, 3.0);
        let scaled = GaussianPrimitive::new(
            g.position,
            g.rotation,
            g.scale * lambda,
            g.opacity,
            g.color,
        )
        .map_err(|e| e.to_string())?;
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 100.0)
            .map_err(|e| e.to_string())?;
        let a = ray_gaussian_transform(&g, &ray).map_err(|e| e.to_string())?;
        let b = ray_gaussian_transform(&scaled, &ray).map_err(|e| e.to_string())?;
        let expected = a.sharpness / (lambda * lambda);
        ensure(
            (b.sharpness - expected).abs() < 1e-9 * expected.max(1.0),
            format!("sharpness {} vs expected {}", b.sharpness, expected),
        )?;
    }
    Ok(())
}

fn u0_grid_agreement() -> CheckResult {
    let mut rng = SplitMix64::new(107);
    for _ in 0..20 {
        let s = 10f64.powf(rng.uniform(-4.0, 1.0));
        let sigma = s.sqrt();
        let u0 = solve_u0(s, 1e-10).map_err(|e| e.to_string())?;
        let grid = oracle::grid_sign_change(
            |u| normal_density(u, s) + u / s,
            -10.0 * sigma,
            0.0,
            sigma * 1e-2,
            sigma * 1e-7,
        )
        .ok_or("grid oracle found no sign change")?;
        ensure(u0 < 0.0, format!("u0 {u0} not negative"))?;
        ensure(
            (u0 - grid).abs() <= 1e-6 * sigma.max(1.0),
            format!("solver {u0} vs grid {grid}"),
        )?;
        let residual = (normal_density(u0, s) + u0 / s).abs();
        ensure(residual <= 1e-10, format!("residual {residual:.3e}"))?;
    }
    Ok(())
}

fn peak_before_surface() -> CheckResult {
    for s in [1e-3f64, 1e-1, 1.0, 4.0] {
        let sigma: f64 = s.sqrt();
        let grid: Vec<f64> = (0..4000)
            .map(|i| -6.0 * sigma + i as f64 * (6.0 * sigma / 3999.0))
            .collect();
        let d = h_diagnostic(s, &grid).map_err(|e| e.to_string())?;
        ensure(
            d.sign_changes.len() == 1,
            format!("{} sign changes at sigma_sq {s}", d.sign_changes.len()),
        )?;
        let i = d.sign_changes[0];
        ensure(d.h[i] > 0.0 && d.h[i + 1] < 0.0, "h must cross top to bottom")?;
        let argmax = d
            .phi_prime
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| d.u[i])
            .unwrap();
        ensure(argmax < 0.0, format!("phi' peak at {argmax} >= 0"))?;
    }
    Ok(())
}

fn sdf_identities() -> CheckResult {
    let mut rng = SplitMix64::new(108);
    for mu in [2.0f64, 8.0, 32.0] {
        let u0 = solve_u0(1.0, 1e-10).map_err(|e| e.to_string())?;
        let (d_iso, _) = sdf_from_cdf(iso_level(mu, u0), mu, u0);
        ensure(d_iso.abs() <= 1e-9, format!("D at iso level {d_iso:.3e}"))?;
        let (d_half, _) = sdf_from_cdf(0.5, mu, u0);
        ensure(
            (d_half - (-u0)).abs() <= 1e-12,
            format!("D at phi 0.5: {d_half} vs {}", -u0),
        )?;
        for _ in 0..100 {
            let u = u0 + rng.uniform(-8.0, 8.0) / mu;
            let (d, _) = sdf_from_cdf(logistic_cdf(u, mu, u0), mu, u0);
            ensure(
                (d - (-u)).abs() <= 1e-12,
                format!("round trip gap {:.3e} at mu {mu}", (d + u).abs()),
            )?;
        }
    }
    Ok(())
}

fn volume_convergence() -> CheckResult {
    let mut rng = SplitMix64::new(109);
    let fields: Vec<RayField> = (0..20)
        .map(|_| {
            let kernels = (0..4)
                .map(|i| RayKernel {
                    t_peak: rng.uniform(1.0, 6.0),
                    sharpness: rng.uniform(0.5, 8.0),
                    peak: 1.0,
                    alpha: rng.uniform(0.1, 0.9),
                    color: [rng.next_f64(), rng.next_f64(), rng.next_f64()],
                    source: i,
                })
                .collect();
            RayField::new(kernels, [rng.next_f64(); 3])
        })
        .collect();
    let mean_err = |step: f64| -> f64 {
        fields
            .iter()
            .map(|f| {
                let reference =
                    render_volume(f, &QuadratureConfig::new(step / 16.0, 10.0, Scheme::Midpoint))
                        .color;
                let c = render_volume(f, &QuadratureConfig::new(step, 10.0, Scheme::Midpoint)).color;
                (0..3).map(|i| (c[i] - reference[i]).abs()).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / fields.len() as f64
    };
    let errors = [mean_err(0.16), mean_err(0.08), mean_err(0.04), mean_err(0.02)];
    ensure(
        errors[0] > errors[1] && errors[1] > errors[2] && errors[2] > errors[3],
        format!("non-monotone errors {errors:?}"),
    )
}

fn small_opacity_agreement() -> CheckResult {
    // Unit-mass pre-peak kernels (k = pi/4) make the compositing identity
    // testable: 1 - prod(1-alpha) vs 1 - exp(-sum alpha) to second order.
    let mut rng = SplitMix64::new(110);
    for _ in 0..50 {
        let n = 1 + (rng.next_u64() % 5) as usize;
        let budget = rng.uniform(0.02, 0.2);
        let kernels: Vec<RayKernel> = (0..n)
            .map(|i| RayKernel {
                t_peak: rng.uniform(20.0, 60.0),
                sharpness: std::f64::consts::FRAC_PI_4,
                peak: 1.0,
                alpha: budget / n as f64,
                color: [1.0; 3],
                source: i,
            })
            .collect();
        let f = RayField::new(kernels, [0.0; 3]);
        let sum_alpha: f64 = f.kernels().iter().map(|k| k.alpha).sum();
        let blend = cdf_phi(&f, 1e6);
        let cfg = QuadratureConfig::new(5e-3, 80.0, Scheme::Midpoint);
        let exact = cdf_with(&f, 80.0, &cfg, KernelModel::PrePeak);
        let gap = (blend - exact).abs();
        ensure(
            gap <= sum_alpha * sum_alpha + 1e-4,
            format!("gap {gap:.3e} vs bound {:.3e}", sum_alpha * sum_alpha + 1e-4),
        )?;
    }
    Ok(())
}

fn early_termination_bound() -> CheckResult {
    let mut rng = SplitMix64::new(111);
    for _ in 0..100 {
        let n = 5 + (rng.next_u64() as usize) % 40;
        let kernels = (0..n)
            .map(|i| RayKernel {
                t_peak: rng.uniform(0.5, 20.0),
                sharpness: 1.0,
                peak: 1.0,
                alpha: rng.uniform(0.3, 1.0),
                color: [rng.next_f64(), rng.next_f64(), rng.next_f64()],
                source: i,
            })
            .collect();
        let f = RayField::new(kernels, [rng.next_f64(); 3]);
        let exact = render_ray_with(&f, 0.0);
        for threshold in [1e-6, 1e-4] {
            let fast = render_ray_with(&f, threshold);
            for c in 0..3 {
                ensure(
                    (fast.color[c] - exact.color[c]).abs() <= threshold,
                    format!("termination error above {threshold}"),
                )?;
            }
        }
    }
    Ok(())
}

fn depth_blend_oracle() -> CheckResult {
    let mut rng = SplitMix64::new(112);
    for _ in 0..100 {
        let f = random_field(&mut rng, 15);
        let mut transmittance = 1.0;
        let (mut num, mut den) = (0.0, 0.0);
        for k in f.kernels() {
            num += transmittance * k.alpha * k.t_peak;
            den += transmittance * k.alpha;
            transmittance *= 1.0 - k.alpha;
        }
        let expected = if den > 0.0 { num / den } else { f64::INFINITY };
        let got = render_depth(&f);
        ensure(
            (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            format!("depth {got} vs {expected}"),
        )?;
    }
    Ok(())
}

fn voxel_subdivision() -> CheckResult {
    let mut grid = SparseVoxelGrid::init_from_points(&[Vector3::new(0.5, 0.5, 0.5)], 1.0, 7)
        .map_err(|e| e.to_string())?;
    let key = grid.keys()[0];
    let parent_extent = grid.extent_of(&key);
    grid.register_gradients(&[(key, 3e-4)]).map_err(|e| e.to_string())?;
    let stats = grid.evaluate_voxels();
    ensure(stats.subdivided == 1, format!("{} subdivisions", stats.subdivided))?;
    ensure(grid.len() == 8, format!("{} children", grid.len()))?;
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for (k, _) in grid.voxels() {
        ensure(k.depth == 1, "children must be one level deeper")?;
        let (cmin, cmax) = grid.extent_of(k);
        min = min.inf(&cmin);
        max = max.sup(&cmax);
    }
    ensure(
        min == parent_extent.0 && max == parent_extent.1,
        "children must tile the parent extent exactly",
    )?;
    // Depth cap.
    let mut capped = SparseVoxelGrid::empty(1.0, GridMode::Neural).map_err(|e| e.to_string())?;
    let deep = VoxelKey { cell: [0, 0, 0], depth: MAX_DEPTH };
    let voxel = crate::voxel::FeatureVoxel::new_at(capped.center_of(&deep), MAX_DEPTH);
    capped.insert_voxel(deep, voxel);
    capped.register_gradients(&[(deep, 3e-4)]).map_err(|e| e.to_string())?;
    capped.evaluate_voxels();
    ensure(capped.voxel(&deep).is_some(), "depth-capped voxel must survive")?;
    Ok(())
}

fn voxel_pruning() -> CheckResult {
    let pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64 + 0.5, 0.5, 0.5)).collect();
    let mut grid = SparseVoxelGrid::init_from_points(&pts, 1.0, 7).map_err(|e| e.to_string())?;
    let keys = grid.keys();
    let used: Vec<(VoxelKey, f64)> = keys.iter().step_by(2).map(|k| (*k, 1e-5)).collect();
    grid.register_gradients(&used).map_err(|e| e.to_string())?;
    let stats = grid.evaluate_voxels();
    ensure(stats.pruned == 5, format!("pruned {} of 5", stats.pruned))?;
    for (i, key) in keys.iter().enumerate() {
        ensure(
            grid.voxel(key).is_some() == (i % 2 == 0),
            format!("voxel {i} kept/pruned incorrectly"),
        )?;
    }
    Ok(())
}

fn mc_sphere_manifold() -> CheckResult {
    let n = 24;
    let edge = 2.6;
    let grid = ScalarGrid::from_fn(
        Vector3::repeat(-0.5 * edge),
        edge / (n - 1) as f64,
        [n; 3],
        |p| p.norm() - 1.0,
    );
    let mesh = marching_cubes(&grid, 0.0);
    ensure(!mesh.is_empty(), "sphere mesh is empty")?;
    let violations = mesh.edge_manifold_violations();
    ensure(violations == 0, format!("{violations} non-manifold edges"))?;
    let diag = grid.spacing * 3f64.sqrt();
    for v in &mesh.vertices {
        ensure(
            (v.norm() - 1.0).abs() <= diag,
            format!("vertex {:.4} off the zero set", v.norm()),
        )?;
    }
    Ok(())
}

fn mesh_roundtrip() -> CheckResult {
    let n = 10;
    let grid = ScalarGrid::from_fn(Vector3::repeat(-1.3), 2.6 / (n - 1) as f64, [n; 3], |p| {
        p.norm() - 1.0
    });
    let mut mesh = marching_cubes(&grid, 0.0);
    for v in mesh.vertices.iter_mut() {
        *v = Vector3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64);
    }
    for format in [MeshFormat::PlyAscii, MeshFormat::PlyBinaryLe, MeshFormat::Obj] {
        let mut bytes = Vec::new();
        write_mesh(&mesh, format, &mut bytes).map_err(|e| e.to_string())?;
        let back = parse_mesh(&bytes).map_err(|e| e.to_string())?;
        ensure(back.faces == mesh.faces, format!("{format:?} face mismatch"))?;
        ensure(
            back.vertices == mesh.vertices,
            format!("{format:?} vertex mismatch"),
        )?;
    }
    Ok(())
}

fn render_determinism() -> CheckResult {
    let scene = make_sphere_scene(150, 1.0, 0.06, 0.9, 0.05).map_err(|e| e.to_string())?;
    let cam = Camera::new(
        Vector3::new(0.0, 0.5, -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        50.0,
        24,
        18,
        0.01,
        50.0,
    )
    .map_err(|e| e.to_string())?;
    let opts = RenderOptions::default();
    let a = render_scene(&scene, &cam, &opts).map_err(|e| e.to_string())?;
    let b = render_scene(&scene, &cam, &opts).map_err(|e| e.to_string())?;
    ensure(a.color == b.color && a.depth == b.depth, "renders differ between runs")
}

fn l1_color_gradient() -> CheckResult {
    let scene = make_single_scene(0.4, 0.9, 0.5).map_err(|e| e.to_string())?;
    let prims = scene.primitives(None).map_err(|e| e.to_string())?;
    let cam = Camera::new(
        Vector3::new(0.0, 0.0, -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        45.0,
        12,
        12,
        0.01,
        50.0,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = SplitMix64::new(113);
    let mut target = ColorImage::filled(12, 12, [0.0; 3]);
    for y in 0..12 {
        for x in 0..12 {
            target.set(x, y, [rng.next_f64(), rng.next_f64(), rng.next_f64()]);
        }
    }
    let analytic =
        analytic_color_gradient_l1(&prims, &cam, &target, [0.0; 3]).map_err(|e| e.to_string())?;
    let h = 1e-4;
    for c in 0..3 {
        let perturbed = |delta: f64| -> std::result::Result<f64, String> {
            let g = &prims[0];
            let mut color = g.color;
            color[c] += delta;
            let moved = GaussianPrimitive::new(g.position, g.rotation, g.scale, g.opacity, color)
                .map_err(|e| e.to_string())?;
            let out = crate::render::render_primitives(
                &[moved],
                &cam,
                &RenderOptions::default(),
            )
            .map_err(|e| e.to_string())?;
            crate::train::loss_l1(&out.color, &target).map_err(|e| e.to_string())
        };
        let fd = (perturbed(h)? - perturbed(-h)?) / (2.0 * h);
        let a = analytic[0][c];
        ensure(
            (fd - a).abs() <= 0.05 * a.abs().max(1e-6),
            format!("channel {c}: fd {fd} vs analytic {a}"),
        )?;
    }
    Ok(())
}

// Scene is referenced by the check signatures through make_* constructors.
#[allow(unused)]
fn _scene_type_anchor(s: &Scene) {}
