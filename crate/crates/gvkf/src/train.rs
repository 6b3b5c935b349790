//! Losses and the desk-scale fitting loop.
//!
//! Gradients come from central finite differences over the active parameter
//! groups (explicit primitive attributes in direct mode, features and
//! offsets in neural mode; decoder weights stay at their seeded init).
//! Positional gradient norms feed the voxel registration, and the grid is
//! re-evaluated on the standard 500-iteration cadence.

use std::collections::BTreeMap;

use nalgebra::UnitQuaternion;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::{blend_weights, render_ray, RayField};
use crate::gaussian::GaussianPrimitive;
use crate::image::ColorImage;
use crate::par;
use crate::render::{build_field, RenderOptions};
use crate::scene::Scene;
use crate::voxel::{GridMode, VoxelEvaluation, VoxelKey, EVAL_INTERVAL};

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the D-SSIM term; the color loss is
    /// `(1 - lambda) L1 + lambda D-SSIM`.
    pub lambda_dssim: f64,
    /// Weight of the depth-distortion term (applied to extent-normalized
    /// ray parameters).
    pub lambda_dist: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_dssim: 0.2,
            lambda_dist: 0.1,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
        }
    }
}

/// Mean absolute per-channel difference.
pub fn loss_l1(rendered: &ColorImage, target: &ColorImage) -> Result<f64> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let n = (rendered.width * rendered.height * 3) as f64;
    let sum: f64 = rendered
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>())
        .sum();
    Ok(sum / n)
}

/// Mean SSIM over valid window positions, averaged across channels.
/// Dynamic range is 1 (images live in [0, 1]).
pub fn ssim_mean(a: &ColorImage, b: &ColorImage, cfg: &LossConfig) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let w = cfg.ssim_window;
    if a.width < w || a.height < w {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            a.width, a.height, w, w
        )));
    }
    // Normalized 2D Gaussian window.
    let mut window = vec![0.0; w * w];
    let half = (w - 1) as f64 / 2.0;
    let mut total = 0.0;
    for j in 0..w {
        for i in 0..w {
            let dx = i as f64 - half;
            let dy = j as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma)).exp();
            window[j * w + i] = v;
            total += v;
        }
    }
    for v in &mut window {
        *v /= total;
    }
    let c1 = (cfg.ssim_k1).powi(2);
    let c2 = (cfg.ssim_k2).powi(2);
    let (nx, ny) = (a.width - w + 1, a.height - w + 1);
    let mut acc = 0.0;
    for c in 0..3 {
        for y0 in 0..ny {
            for x0 in 0..nx {
                let (mut m1, mut m2, mut s1, mut s2, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..w {
                    for i in 0..w {
                        let wt = window[j * w + i];
                        let va = a.get(x0 + i, y0 + j)[c];
                        let vb = b.get(x0 + i, y0 + j)[c];
                        m1 += wt * va;
                        m2 += wt * vb;
                        s1 += wt * va * va;
                        s2 += wt * vb * vb;
                        s12 += wt * va * vb;
                    }
                }
                let (v1, v2, cov) = (s1 - m1 * m1, s2 - m2 * m2, s12 - m1 * m2);
                acc += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
                    / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
            }
        }
    }
    Ok(acc / (3 * nx * ny) as f64)
}

/// `(1 - SSIM) / 2`.
pub fn loss_dssim(rendered: &ColorImage, target: &ColorImage, cfg: &LossConfig) -> Result<f64> {
    Ok((1.0 - ssim_mean(rendered, target, cfg)?) / 2.0)
}

/// Depth distortion `sum_{i<j} w_i w_j |t_i - t_j|` with the compositing
/// weights; linear-time over the sorted field.
pub fn loss_depth_distortion(field: &RayField) -> f64 {
    let weights = blend_weights(field);
    let mut acc = 0.0;
    let mut w_prefix = 0.0;
    let mut wt_prefix = 0.0;
    for (k, &w) in field.kernels().iter().zip(&weights) {
        acc += w * (k.t_peak * w_prefix - wt_prefix);
        w_prefix += w;
        wt_prefix += w * k.t_peak;
    }
    acc
}

/// Parameter-group step sizes for the finite-difference descent.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub loss: LossConfig,
    /// Central-difference probe step per parameter.
    pub fd_step: f64,
    pub lr_position: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_rotation: f64,
    pub lr_feature: f64,
    pub lr_offset: f64,
    /// Voxel evaluation cadence in iterations.
    pub eval_interval: usize,
    pub background: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            loss: LossConfig::default(),
            fd_step: 1e-4,
            lr_position: 2e-3,
            lr_scale: 2e-3,
            lr_opacity: 2e-2,
            lr_color: 5e-2,
            lr_rotation: 1e-2,
            lr_feature: 2e-2,
            lr_offset: 5e-3,
            eval_interval: EVAL_INTERVAL,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    /// Total loss per iteration (evaluated on that iteration's view,
    /// before the parameter step).
    pub history: Vec<f64>,
    /// Running minimum of `history` (monotone non-increasing).
    pub smoothed: Vec<f64>,
    /// Voxel evaluation outcomes, as (iteration, stats).
    pub evaluations: Vec<(usize, VoxelEvaluation)>,
}

/// Renders one view and accumulates the mean per-pixel depth distortion.
fn render_view(
    primitives: &[GaussianPrimitive],
    camera: &Camera,
    background: [f64; 3],
) -> Result<(ColorImage, f64)> {
    let opts = RenderOptions {
        background,
        ..Default::default()
    };
    let rows = par::map_indexed(camera.height, |py| -> Result<(Vec<[f64; 3]>, f64)> {
        let mut colors = Vec::with_capacity(camera.width);
        let mut dist = 0.0;
        for px in 0..camera.width {
            let ray = camera.generate_ray(px, py)?;
            let field = build_field(primitives, 0..primitives.len(), &ray, camera.near, &opts)?;
            colors.push(render_ray(&field).color);
            dist += loss_depth_distortion(&field);
        }
        Ok((colors, dist))
    });
    let mut img = ColorImage::filled(camera.width, camera.height, background);
    let mut dist = 0.0;
    for (py, row) in rows.into_iter().enumerate() {
        let (colors, d) = row?;
        dist += d;
        for (px, c) in colors.into_iter().enumerate() {
            img.set(px, py, c);
        }
    }
    Ok((img, dist / (camera.width * camera.height) as f64))
}

/// Total loss for one view:
/// `(1-lambda) L1 + lambda D-SSIM + lambda_dist * distortion / extent`.
fn view_loss(
    primitives: &[GaussianPrimitive],
    camera: &Camera,
    target: &ColorImage,
    cfg: &FitConfig,
    extent: f64,
) -> Result<f64> {
    let (rendered, distortion) = render_view(primitives, camera, cfg.background)?;
    let l1 = loss_l1(&rendered, target)?;
    let lambda = cfg.loss.lambda_dssim;
    let dssim = if lambda > 0.0 {
        loss_dssim(&rendered, target, &cfg.loss)?
    } else {
        0.0
    };
    Ok((1.0 - lambda) * l1 + lambda * dssim + cfg.loss.lambda_dist * distortion / extent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Position,
    Scale,
    Opacity,
    Color,
    Rotation,
    Feature,
    Offset,
}

/// One scalar degree of freedom in the grid.
#[derive(Debug, Clone, Copy)]
struct ParamRef {
    key: VoxelKey,
    /// Primitive index (direct) or offset index (neural offsets); unused for
    /// features.
    item: usize,
    group: Group,
    component: usize,
}

fn collect_params(scene: &Scene) -> Vec<ParamRef> {
    let mut params = Vec::new();
    for (key, voxel) in scene.grid.voxels() {
        match scene.mode() {
            GridMode::Direct => {
                for item in 0..voxel.primitives.len() {
                    for component in 0..3 {
                        params.push(ParamRef { key: *key, item, group: Group::Position, component });
                    }
                    for component in 0..3 {
                        params.push(ParamRef { key: *key, item, group: Group::Scale, component });
                    }
                    params.push(ParamRef { key: *key, item, group: Group::Opacity, component: 0 });
                    for component in 0..3 {
                        params.push(ParamRef { key: *key, item, group: Group::Color, component });
                    }
                    for component in 0..4 {
                        params.push(ParamRef { key: *key, item, group: Group::Rotation, component });
                    }
                }
            }
            GridMode::Neural => {
                for component in 0..voxel.feature.len() {
                    params.push(ParamRef { key: *key, item: 0, group: Group::Feature, component });
                }
                for item in 0..voxel.offsets.len() {
                    for component in 0..3 {
                        params.push(ParamRef { key: *key, item, group: Group::Offset, component });
                    }
                }
            }
        }
    }
    params
}

fn read_param(scene: &Scene, p: &ParamRef) -> f64 {
    let voxel = scene.grid.voxel(&p.key).expect("param voxel exists");
    match p.group {
        Group::Position => voxel.primitives[p.item].position[p.component],
        Group::Scale => voxel.primitives[p.item].scale[p.component],
        Group::Opacity => voxel.primitives[p.item].opacity,
        Group::Color => voxel.primitives[p.item].color[p.component],
        Group::Rotation => {
            let q = voxel.primitives[p.item].rotation;
            [q.w, q.i, q.j, q.k][p.component]
        }
        Group::Feature => voxel.feature[p.component],
        Group::Offset => voxel.offsets[p.item][p.component],
    }
}

/// Writes one parameter, clamping into its valid range and rebuilding the
/// affected primitive. Rotation components renormalize through the
/// constructor.
fn write_param(scene: &mut Scene, p: &ParamRef, value: f64) -> Result<()> {
    let voxel = scene
        .grid
        .voxel_mut(&p.key)
        .ok_or_else(|| Error::InvalidId(p.key.to_string()))?;
    match p.group {
        Group::Feature => {
            voxel.feature[p.component] = value;
            return Ok(());
        }
        Group::Offset => {
            voxel.offsets[p.item][p.component] = value.clamp(-0.5, 0.5);
            return Ok(());
        }
        _ => {}
    }
    let g = &voxel.primitives[p.item];
    let mut position = g.position;
    let mut scale = g.scale;
    let mut opacity = g.opacity;
    let mut color = g.color;
    let mut quat = [g.rotation.w, g.rotation.i, g.rotation.j, g.rotation.k];
    match p.group {
        Group::Position => position[p.component] = value,
        Group::Scale => scale[p.component] = value.max(1e-6),
        Group::Opacity => opacity = value.clamp(1e-4, 1.0),
        Group::Color => color[p.component] = value.clamp(0.0, 1.0),
        Group::Rotation => quat[p.component] = value,
        _ => unreachable!(),
    }
    let q = nalgebra::Quaternion::new(quat[0], quat[1], quat[2], quat[3]);
    let rotation = if q.norm() > 1e-9 {
        UnitQuaternion::from_quaternion(q)
    } else {
        g.rotation
    };
    // Keep the scale ratio inside the covariance condition cap.
    let smax = scale.max();
    let scale = scale.map(|s| s.max(smax * 2e-6));
    voxel.primitives[p.item] = GaussianPrimitive::new(position, rotation, scale, opacity, color)?;
    Ok(())
}

fn learning_rate(cfg: &FitConfig, group: Group) -> f64 {
    match group {
        Group::Position => cfg.lr_position,
        Group::Scale => cfg.lr_scale,
        Group::Opacity => cfg.lr_opacity,
        Group::Color => cfg.lr_color,
        Group::Rotation => cfg.lr_rotation,
        Group::Feature => cfg.lr_feature,
        Group::Offset => cfg.lr_offset,
    }
}

fn scene_extent(scene: &Scene, camera: &Camera) -> f64 {
    scene
        .bounds(Some(&camera.position))
        .ok()
        .flatten()
        .map(|(min, max)| (max - min).norm())
        .filter(|e| *e > 1e-9)
        .unwrap_or(1.0)
}

/// Per-voxel primitive cache for the finite-difference loop: a probed
/// parameter only invalidates its own voxel, so the other voxels' decoded
/// primitives are reused across probes.
struct PrimCache {
    by_voxel: std::collections::BTreeMap<VoxelKey, Vec<GaussianPrimitive>>,
}

impl PrimCache {
    fn full(scene: &Scene, cam_pos: &nalgebra::Vector3<f64>) -> Result<PrimCache> {
        let mut by_voxel = std::collections::BTreeMap::new();
        for key in scene.grid.keys() {
            by_voxel.insert(key, scene.grid.generate_voxel_gaussians(&key, Some(cam_pos))?);
        }
        Ok(PrimCache { by_voxel })
    }

    fn refresh(
        &mut self,
        scene: &Scene,
        key: &VoxelKey,
        cam_pos: &nalgebra::Vector3<f64>,
    ) -> Result<()> {
        self.by_voxel
            .insert(*key, scene.grid.generate_voxel_gaussians(key, Some(cam_pos))?);
        Ok(())
    }

    fn flatten(&self, out: &mut Vec<GaussianPrimitive>) {
        out.clear();
        for prims in self.by_voxel.values() {
            out.extend_from_slice(prims);
        }
    }
}

/// Fits the scene to the target views by round-robin finite-difference
/// descent. Returns the per-iteration loss history and the voxel evaluation
/// log; aborts with [`Error::NanLoss`] if the loss turns NaN.
pub fn fit(
    scene: &mut Scene,
    targets: &[(Camera, ColorImage)],
    iters: usize,
    cfg: &FitConfig,
) -> Result<FitReport> {
    if targets.is_empty() {
        return Err(Error::EmptyInput("fit needs at least one target view".into()));
    }
    let mut report = FitReport::default();
    let mut flat = Vec::new();
    for iter in 1..=iters {
        let (camera, target) = &targets[(iter - 1) % targets.len()];
        let extent = scene_extent(scene, camera);
        let cam_pos = camera.position;
        let mut cache = PrimCache::full(scene, &cam_pos)?;
        cache.flatten(&mut flat);
        let loss = view_loss(&flat, camera, target, cfg, extent)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss(iter));
        }
        report.history.push(loss);
        let best = report.smoothed.last().copied().unwrap_or(f64::INFINITY);
        report.smoothed.push(best.min(loss));

        // Central finite differences over every parameter; each probe
        // re-decodes only the voxel it belongs to.
        let params = collect_params(scene);
        let mut grads = vec![0.0; params.len()];
        for (i, p) in params.iter().enumerate() {
            let original = read_param(scene, p);
            let h = cfg.fd_step;
            write_param(scene, p, original + h)?;
            cache.refresh(scene, &p.key, &cam_pos)?;
            cache.flatten(&mut flat);
            let plus = view_loss(&flat, camera, target, cfg, extent)?;
            write_param(scene, p, original - h)?;
            cache.refresh(scene, &p.key, &cam_pos)?;
            cache.flatten(&mut flat);
            let minus = view_loss(&flat, camera, target, cfg, extent)?;
            write_param(scene, p, original)?;
            cache.refresh(scene, &p.key, &cam_pos)?;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NanLoss(iter));
            }
            grads[i] = (plus - minus) / (2.0 * h);
        }

        // Descent step.
        for (p, g) in params.iter().zip(&grads) {
            let lr = learning_rate(cfg, p.group);
            let v = read_param(scene, p);
            write_param(scene, p, v - lr * g)?;
        }

        // Positional gradient norms per generated primitive, registered to
        // their voxels. Offset gradients convert to world units through the
        // cell edge length.
        let mut norms: BTreeMap<(VoxelKey, usize), f64> = BTreeMap::new();
        for (p, g) in params.iter().zip(&grads) {
            let world = match p.group {
                Group::Position => *g,
                Group::Offset => *g / scene.grid.edge_length(p.key.depth),
                _ => continue,
            };
            *norms.entry((p.key, p.item)).or_insert(0.0) += world * world;
        }
        let visible: BTreeMap<VoxelKey, usize> = scene
            .primitives_with_sources(Some(&cam_pos))?
            .into_iter()
            .fold(BTreeMap::new(), |mut acc, (k, _)| {
                *acc.entry(k).or_insert(0) += 1;
                acc
            });
        let entries: Vec<(VoxelKey, f64)> = norms
            .into_iter()
            .filter(|((key, _), _)| visible.contains_key(key))
            .map(|((key, _), sq)| (key, sq.sqrt()))
            .collect();
        if !entries.is_empty() {
            scene.grid.register_gradients(&entries)?;
        }

        if iter % cfg.eval_interval == 0 {
            let stats = scene.grid.evaluate_voxels();
            report.evaluations.push((iter, stats));
        }
    }
    Ok(report)
}

/// Analytic gradient of the L1 color loss with respect to each primitive's
/// color channels: the blending weight of the primitive at each pixel times
/// the sign of the residual, averaged like the loss.
pub fn analytic_color_gradient_l1(
    primitives: &[GaussianPrimitive],
    camera: &Camera,
    target: &ColorImage,
    background: [f64; 3],
) -> Result<Vec<[f64; 3]>> {
    let opts = RenderOptions {
        background,
        ..Default::default()
    };
    let mut grads = vec![[0.0; 3]; primitives.len()];
    let n = (camera.width * camera.height * 3) as f64;
    for py in 0..camera.height {
        for px in 0..camera.width {
            let ray = camera.generate_ray(px, py)?;
            let field = build_field(primitives, 0..primitives.len(), &ray, camera.near, &opts)?;
            let shaded = render_ray(&field);
            let weights = blend_weights(&field);
            let t = target.get(px, py);
            for (k, &w) in field.kernels().iter().zip(&weights) {
                for c in 0..3 {
                    let sign = (shaded.color[c] - t[c]).signum();
                    grads[k.source][c] += sign * w / n;
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use crate::gaussian::RayKernel;
    use crate::rng::SplitMix64;
    use crate::scene::make_single_scene;

    fn camera(width: usize, height: usize) -> Camera {
        Camera::new(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            45.0,
            width,
            height,
            0.01,
            50.0,
        )
        .unwrap()
    }

    #[test]
    fn l1_basic_cases() {
        let black = ColorImage::filled(4, 4, [0.0; 3]);
        let white = ColorImage::filled(4, 4, [1.0; 3]);
        assert_eq!(loss_l1(&black, &black).unwrap(), 0.0);
        assert_eq!(loss_l1(&black, &white).unwrap(), 1.0);
        assert!(loss_l1(&black, &ColorImage::filled(3, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        let mut rng = SplitMix64::new(61);
        let mut a = ColorImage::filled(6, 5, [0.0; 3]);
        let mut b = ColorImage::filled(6, 5, [0.0; 3]);
        let mut acc = 0.0;
        for y in 0..5 {
            for x in 0..6 {
                let pa = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
                let pb = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
                for c in 0..3 {
                    acc += (pa[c] - pb[c]).abs();
                }
                a.set(x, y, pa);
                b.set(x, y, pb);
            }
        }
        assert!((loss_l1(&a, &b).unwrap() - acc / 90.0).abs() < 1e-12);
    }

    #[test]
    fn dssim_identical_is_zero_and_symmetric() {
        let mut rng = SplitMix64::new(62);
        let mut a = ColorImage::filled(16, 16, [0.0; 3]);
        let mut b = ColorImage::filled(16, 16, [0.0; 3]);
        for y in 0..16 {
            for x in 0..16 {
                a.set(x, y, [rng.next_f64(), rng.next_f64(), rng.next_f64()]);
                b.set(x, y, [rng.next_f64(), rng.next_f64(), rng.next_f64()]);
            }
        }
        let cfg = LossConfig::default();
        assert!(loss_dssim(&a, &a, &cfg).unwrap().abs() < 1e-12);
        let ab = loss_dssim(&a, &b, &cfg).unwrap();
        let ba = loss_dssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let g = 0.25;
        let a = ColorImage::filled(12, 12, [g; 3]);
        let b = ColorImage::filled(12, 12, [g + 0.5; 3]);
        let cfg = LossConfig::default();
        let c1 = cfg.ssim_k1 * cfg.ssim_k1;
        let expected = (2.0 * g * (g + 0.5) + c1) / (g * g + (g + 0.5) * (g + 0.5) + c1);
        assert!((ssim_mean(&a, &b, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ColorImage::filled(8, 8, [0.5; 3]);
        assert!(matches!(
            ssim_mean(&a, &a, &LossConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn kernel(t: f64, alpha: f64) -> RayKernel {
        RayKernel {
            t_peak: t,
            sharpness: 1.0,
            peak: 1.0,
            alpha,
            color: [1.0; 3],
            source: 0,
        }
    }

    #[test]
    fn distortion_cases() {
        let empty = RayField::new(vec![], [0.0; 3]);
        assert_eq!(loss_depth_distortion(&empty), 0.0);
        let single = RayField::new(vec![kernel(5.0, 0.5)], [0.0; 3]);
        assert_eq!(loss_depth_distortion(&single), 0.0);
        let two = RayField::new(vec![kernel(2.0, 0.5), kernel(6.0, 0.5)], [0.0; 3]);
        assert!((loss_depth_distortion(&two) - 0.5 * 0.25 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn distortion_matches_quadratic_oracle_and_collapses() {
        let mut rng = SplitMix64::new(63);
        for _ in 0..50 {
            let n = 2 + (rng.next_u64() % 8) as usize;
            let kernels: Vec<RayKernel> = (0..n)
                .map(|i| {
                    let mut k = kernel(rng.uniform(0.5, 10.0), rng.uniform(0.05, 0.9));
                    k.source = i;
                    k
                })
                .collect();
            let f = RayField::new(kernels, [0.0; 3]);
            let weights = blend_weights(&f);
            let mut oracle = 0.0;
            for i in 0..f.len() {
                for j in 0..i {
                    oracle += weights[i]
                        * weights[j]
                        * (f.kernels()[i].t_peak - f.kernels()[j].t_peak).abs();
                }
            }
            assert!((loss_depth_distortion(&f) - oracle).abs() < 1e-12);

            // Collapsing all peaks to one value drives the loss to zero.
            let collapsed: Vec<RayKernel> = f
                .kernels()
                .iter()
                .map(|k| RayKernel { t_peak: 3.0, ..*k })
                .collect();
            let fc = RayField::new(collapsed, [0.0; 3]);
            assert!(loss_depth_distortion(&fc) < 1e-15);
        }
    }

    #[test]
    fn distortion_is_permutation_invariant_in_input_order() {
        // The field sorts kernels, so any insertion order gives the same loss.
        let a = vec![kernel(2.0, 0.4), kernel(5.0, 0.6), kernel(3.0, 0.2)];
        let mut b = a.clone();
        b.reverse();
        let fa = RayField::new(a, [0.0; 3]);
        let fb = RayField::new(b, [0.0; 3]);
        assert!((loss_depth_distortion(&fa) - loss_depth_distortion(&fb)).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_changes_nothing() {
        let mut scene = make_single_scene(0.3, 0.8, 0.5).unwrap();
        let before = scene.to_json().unwrap();
        let cam = camera(8, 8);
        let target = ColorImage::filled(8, 8, [0.5; 3]);
        let report = fit(&mut scene, &[(cam, target)], 0, &FitConfig::default()).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(scene.to_json().unwrap(), before);
    }

    #[test]
    fn single_gaussian_color_converges_to_target() {
        // Convex single-view problem: fit one gray gaussian to a red target
        // rendering. Color should approach the target within 1e-2.
        let mut scene = make_single_scene(0.4, 1.0, 0.5).unwrap();
        // Neutralize the starting color.
        let key = scene.grid.keys()[0];
        let g = scene.grid.voxel(&key).unwrap().primitives[0].clone();
        scene.grid.voxel_mut(&key).unwrap().primitives[0] = GaussianPrimitive::new(
            g.position,
            g.rotation,
            g.scale,
            g.opacity,
            [0.5, 0.5, 0.5],
        )
        .unwrap();
        let cam = camera(16, 16);
        let reference_scene = {
            let mut s = make_single_scene(0.4, 1.0, 0.5).unwrap();
            let k = s.grid.keys()[0];
            let g = s.grid.voxel(&k).unwrap().primitives[0].clone();
            s.grid.voxel_mut(&k).unwrap().primitives[0] = GaussianPrimitive::new(
                g.position,
                g.rotation,
                g.scale,
                g.opacity,
                [0.9, 0.2, 0.1],
            )
            .unwrap();
            s
        };
        let (target, _) =
            render_view(&reference_scene.primitives(None).unwrap(), &cam, [0.0; 3]).unwrap();
        let mut cfg = FitConfig {
            loss: LossConfig {
                lambda_dssim: 0.0,
                lambda_dist: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        // Only color moves in this test.
        cfg.lr_position = 0.0;
        cfg.lr_scale = 0.0;
        cfg.lr_opacity = 0.0;
        cfg.lr_rotation = 0.0;
        let report = fit(&mut scene, &[(cam, target)], 200, &cfg).unwrap();
        let fitted = &scene.grid.voxel(&key).unwrap().primitives[0];
        for (got, want) in fitted.color.iter().zip([0.9, 0.2, 0.1]) {
            assert!((got - want).abs() < 1e-2, "channel {got} vs {want}");
        }
        assert!(report.smoothed.last().unwrap() < &report.history[0]);
    }

    #[test]
    fn fd_color_gradient_matches_analytic() {
        let scene = crate::scene::make_sphere_scene(5, 0.6, 0.25, 0.8, 0.5).unwrap();
        let prims = scene.primitives(None).unwrap();
        let cam = camera(12, 12);
        let mut rng = SplitMix64::new(64);
        let mut target = ColorImage::filled(12, 12, [0.0; 3]);
        for y in 0..12 {
            for x in 0..12 {
                target.set(x, y, [rng.next_f64(), rng.next_f64(), rng.next_f64()]);
            }
        }
        let analytic = analytic_color_gradient_l1(&prims, &cam, &target, [0.0; 3]).unwrap();
        // Finite differences on a few color channels.
        let h = 1e-4;
        for (gi, c) in [(0usize, 0usize), (1, 1), (2, 2), (4, 0)] {
            let mut plus = prims.clone();
            let mut color = plus[gi].color;
            color[c] += h;
            plus[gi] = GaussianPrimitive::new(
                plus[gi].position,
                plus[gi].rotation,
                plus[gi].scale,
                plus[gi].opacity,
                color,
            )
            .unwrap();
            let mut minus = prims.clone();
            let mut color = minus[gi].color;
            color[c] -= h;
            minus[gi] = GaussianPrimitive::new(
                minus[gi].position,
                minus[gi].rotation,
                minus[gi].scale,
                minus[gi].opacity,
                color,
            )
            .unwrap();
            let (rp, _) = render_view(&plus, &cam, [0.0; 3]).unwrap();
            let (rm, _) = render_view(&minus, &cam, [0.0; 3]).unwrap();
            let fd = (loss_l1(&rp, &target).unwrap() - loss_l1(&rm, &target).unwrap()) / (2.0 * h);
            let a = analytic[gi][c];
            assert!(
                (fd - a).abs() <= 0.05 * a.abs().max(1e-6),
                "gaussian {gi} channel {c}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn nan_loss_aborts() {
        // A target with NaN pixels poisons the L1 loss immediately.
        let mut scene = make_single_scene(0.3, 0.8, 0.5).unwrap();
        let cam = camera(16, 16);
        let target = ColorImage::filled(16, 16, [f64::NAN; 3]);
        let err = fit(&mut scene, &[(cam, target)], 3, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NanLoss(1)), "{err:?}");
    }

    #[test]
    fn voxel_evaluation_fires_on_the_training_cadence() {
        // A mismatched target produces positional gradients well above the
        // subdivision threshold, so the registration pass at iteration 500
        // splits the gaussian's voxel.
        let mut scene = make_single_scene(0.3, 0.9, 2.0).unwrap();
        let cam = camera(8, 8);
        let target = ColorImage::filled(8, 8, [0.0, 0.0, 1.0]);
        let cfg = FitConfig {
            loss: LossConfig {
                lambda_dssim: 0.0,
                lambda_dist: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(scene.grid.keys()[0].depth, 0);
        let report = fit(&mut scene, &[(cam, target)], 500, &cfg).unwrap();
        assert_eq!(report.evaluations.len(), 1);
        let (iter, stats) = report.evaluations[0];
        assert_eq!(iter, 500, "cadence is every 500 iterations");
        assert_eq!(stats.subdivided, 1, "hot voxel must subdivide");
        assert!(scene.grid.keys().iter().all(|k| k.depth == 1));
        // The primitive survived into one child.
        assert_eq!(scene.primitives(None).unwrap().len(), 1);
    }

    #[test]
    fn total_loss_reduces_to_l1_without_weights() {
        let scene = make_single_scene(0.3, 0.8, 0.5).unwrap();
        let prims = scene.primitives(None).unwrap();
        let cam = camera(12, 12);
        let target = ColorImage::filled(12, 12, [0.3; 3]);
        let cfg = FitConfig {
            loss: LossConfig {
                lambda_dssim: 0.0,
                lambda_dist: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let total = view_loss(&prims, &cam, &target, &cfg, 1.0).unwrap();
        let (rendered, _) = render_view(&prims, &cam, [0.0; 3]).unwrap();
        assert!((total - loss_l1(&rendered, &target).unwrap()).abs() < 1e-15);
        assert!(total >= 0.0);
    }
}
