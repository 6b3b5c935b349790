//! Per-ray kernel fields.
//!
//! Each kernel is a 1D Gaussian that saturates at 1 past its peak, modeling a
//! solid interior behind the surface the Gaussian sits on. Summing
//! `alpha_i * K_i(t - t_i)` gives the opacity density along the ray; blending
//! the same terms front to back gives the hit CDF and the rendered color.

use crate::gaussian::{ray_gaussian_transform, GaussianPrimitive, Ray, RayKernel};
use crate::Result;

/// Default transmittance threshold below which compositing stops early.
pub const EARLY_TERMINATION: f64 = 1e-4;

/// Blending coefficients below this are culled when building a field.
pub const ALPHA_CULL: f64 = 1e-4;

/// Ordered kernel set on one ray.
#[derive(Debug, Clone, Default)]
pub struct RayField {
    kernels: Vec<RayKernel>,
    pub background: [f64; 3],
}

impl RayField {
    /// Builds a field from kernels, sorting by peak parameter.
    ///
    /// Ties break on the source index so the composite order is
    /// deterministic.
    pub fn new(mut kernels: Vec<RayKernel>, background: [f64; 3]) -> Self {
        kernels.sort_by(|a, b| {
            a.t_peak
                .partial_cmp(&b.t_peak)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.source.cmp(&b.source))
        });
        RayField { kernels, background }
    }

    /// Transforms primitives onto `ray`, culling kernels behind `near` or
    /// with negligible blending coefficient.
    pub fn from_primitives(
        primitives: &[GaussianPrimitive],
        ray: &Ray,
        near: f64,
        background: [f64; 3],
    ) -> Result<Self> {
        let mut kernels = Vec::new();
        for (i, g) in primitives.iter().enumerate() {
            let mut k = ray_gaussian_transform(g, ray)?;
            k.source = i;
            if k.t_peak <= near || k.alpha < ALPHA_CULL {
                continue;
            }
            kernels.push(k);
        }
        Ok(RayField::new(kernels, background))
    }

    pub fn kernels(&self) -> &[RayKernel] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Evaluates one kernel at absolute ray parameter `t`: a Gaussian rise before
/// the peak, constant 1 after it.
pub fn kernel_value(kernel: &RayKernel, t: f64) -> f64 {
    let dt = t - kernel.t_peak;
    if dt < 0.0 {
        (-kernel.sharpness * dt * dt).exp()
    } else {
        1.0
    }
}

/// Opacity density `rho(t) = sum_i alpha_i K_i(t - t_i)`.
pub fn rho(field: &RayField, t: f64) -> f64 {
    field
        .kernels
        .iter()
        .map(|k| k.alpha * kernel_value(k, t))
        .sum()
}

/// Hit CDF at `t`, blended front to back:
/// `sum_i alpha_i K_i(t - t_i) prod_{j<i} (1 - alpha_j K_j(t - t_j))`.
///
/// Algebraically equal to `1 - prod_i (1 - alpha_i K_i(t - t_i))`.
pub fn cdf_phi(field: &RayField, t: f64) -> f64 {
    let mut transmittance = 1.0;
    let mut phi = 0.0;
    for k in &field.kernels {
        let a = k.alpha * kernel_value(k, t);
        phi += transmittance * a;
        transmittance *= 1.0 - a;
    }
    phi
}

/// Result of compositing one ray.
#[derive(Debug, Clone, Copy)]
pub struct RayColor {
    pub color: [f64; 3],
    /// Accumulated opacity `1 - prod(1 - alpha_i)`.
    pub opacity: f64,
}

/// Front-to-back alpha blending with each kernel at its own peak
/// (`K_i(0) = 1`), plus the background weighted by the final transmittance.
pub fn render_ray(field: &RayField) -> RayColor {
    render_ray_with(field, EARLY_TERMINATION)
}

/// [`render_ray`] with an explicit early-termination threshold.
///
/// Compositing stops once transmittance drops below `termination`; the
/// dropped contribution is bounded by the threshold. Pass 0 for exhaustive
/// compositing.
pub fn render_ray_with(field: &RayField, termination: f64) -> RayColor {
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    for k in &field.kernels {
        if transmittance < termination {
            break;
        }
        let w = transmittance * k.alpha;
        for c in 0..3 {
            color[c] += w * k.color[c];
        }
        transmittance *= 1.0 - k.alpha;
    }
    for c in 0..3 {
        color[c] += transmittance * field.background[c];
    }
    RayColor {
        color,
        opacity: 1.0 - transmittance,
    }
}

/// Blended depth `sum(w_i t_i) / sum(w_i)` with the usual compositing
/// weights. Empty or fully transparent fields return infinity.
pub fn render_depth(field: &RayField) -> f64 {
    let mut transmittance = 1.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in &field.kernels {
        let w = transmittance * k.alpha;
        num += w * k.t_peak;
        den += w;
        transmittance *= 1.0 - k.alpha;
    }
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Compositing weights `w_i = alpha_i prod_{j<i} (1 - alpha_j)` in field
/// order. Shared by the depth blend, the distortion loss, and the surface
/// solve.
pub fn blend_weights(field: &RayField) -> Vec<f64> {
    let mut transmittance = 1.0;
    field
        .kernels
        .iter()
        .map(|k| {
            let w = transmittance * k.alpha;
            transmittance *= 1.0 - k.alpha;
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    pub(crate) fn test_kernel(t_peak: f64, sharpness: f64, alpha: f64, color: [f64; 3]) -> RayKernel {
        RayKernel {
            t_peak,
            sharpness,
            peak: 1.0,
            alpha,
            color,
            source: 0,
        }
    }

    pub(crate) fn random_field(rng: &mut SplitMix64, max_kernels: usize) -> RayField {
        let n = 1 + (rng.next_u64() as usize) % max_kernels;
        let kernels = (0..n)
            .map(|i| {
                let mut k = test_kernel(
                    rng.uniform(0.5, 20.0),
                    rng.uniform(0.05, 50.0),
                    rng.uniform(0.01, 1.0),
                    [rng.next_f64(), rng.next_f64(), rng.next_f64()],
                );
                k.source = i;
                k
            })
            .collect();
        RayField::new(kernels, [rng.next_f64(), rng.next_f64(), rng.next_f64()])
    }

    /// Product-form CDF used as the telescoping-identity oracle.
    pub(crate) fn cdf_product_form(field: &RayField, t: f64) -> f64 {
        1.0 - field
            .kernels()
            .iter()
            .map(|k| 1.0 - k.alpha * kernel_value(k, t))
            .product::<f64>()
    }

    #[test]
    fn kernel_value_branches() {
        let k = test_kernel(5.0, 2.0, 1.0, [1.0; 3]);
        assert_eq!(kernel_value(&k, 5.0), 1.0);
        assert_eq!(kernel_value(&k, 10.0), 1.0);
        assert!((kernel_value(&k, 4.0) - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_value_continuous_at_peak() {
        let k = test_kernel(3.0, 10.0, 1.0, [1.0; 3]);
        let eps = 1e-9;
        assert!((kernel_value(&k, 3.0 - eps) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rho_empty_and_single_peak() {
        let empty = RayField::new(vec![], [0.0; 3]);
        assert_eq!(rho(&empty, 1.0), 0.0);
        let f = RayField::new(vec![test_kernel(2.0, 1.0, 0.5, [1.0; 3])], [0.0; 3]);
        assert!((rho(&f, 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rho_matches_term_by_term_oracle() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..50 {
            let f = random_field(&mut rng, 10);
            for _ in 0..20 {
                let t = rng.uniform(0.0, 25.0);
                let expected: f64 = f
                    .kernels()
                    .iter()
                    .map(|k| {
                        let dt = t - k.t_peak;
                        k.alpha * if dt < 0.0 { (-k.sharpness * dt * dt).exp() } else { 1.0 }
                    })
                    .sum();
                assert!((rho(&f, t) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cdf_single_and_double_kernel_limits() {
        let f = RayField::new(vec![test_kernel(1.0, 1.0, 0.7, [1.0; 3])], [0.0; 3]);
        assert!((cdf_phi(&f, 1e6) - 0.7).abs() < 1e-12);
        let f2 = RayField::new(
            vec![
                test_kernel(1.0, 1.0, 0.5, [1.0; 3]),
                test_kernel(2.0, 1.0, 0.5, [1.0; 3]),
            ],
            [0.0; 3],
        );
        assert!((cdf_phi(&f2, 1e6) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cdf_sum_equals_product_form() {
        let mut rng = SplitMix64::new(22);
        for _ in 0..100 {
            let f = random_field(&mut rng, 20);
            for _ in 0..20 {
                let t = rng.uniform(0.0, 30.0);
                assert!((cdf_phi(&f, t) - cdf_product_form(&f, t)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn render_single_kernel_reduces_to_lerp() {
        let f = RayField::new(
            vec![test_kernel(1.0, 1.0, 0.8, [1.0, 0.0, 0.0])],
            [0.0, 0.0, 0.0],
        );
        let out = render_ray(&f);
        assert_eq!(out.color, [0.8, 0.0, 0.0]);
        assert!((out.opacity - 0.8).abs() < 1e-15);
    }

    #[test]
    fn render_two_kernel_compositing() {
        let bg = [0.2, 0.4, 0.6];
        let f = RayField::new(
            vec![
                test_kernel(1.0, 1.0, 0.5, [1.0, 0.0, 0.0]),
                test_kernel(2.0, 1.0, 0.5, [0.0, 0.0, 1.0]),
            ],
            bg,
        );
        let out = render_ray(&f);
        for c in 0..3 {
            let expected = [0.5, 0.0, 0.25][c] + 0.25 * bg[c];
            assert!((out.color[c] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn early_termination_error_is_bounded() {
        let mut rng = SplitMix64::new(23);
        for _ in 0..100 {
            // Opaque-ish fields so termination actually triggers.
            let n = 5 + (rng.next_u64() as usize) % 40;
            let kernels = (0..n)
                .map(|i| {
                    let mut k = test_kernel(
                        rng.uniform(0.5, 20.0),
                        1.0,
                        rng.uniform(0.3, 1.0),
                        [rng.next_f64(), rng.next_f64(), rng.next_f64()],
                    );
                    k.source = i;
                    k
                })
                .collect();
            let f = RayField::new(kernels, [rng.next_f64(); 3]);
            let exact = render_ray_with(&f, 0.0);
            for threshold in [1e-6, EARLY_TERMINATION] {
                let fast = render_ray_with(&f, threshold);
                for c in 0..3 {
                    assert!(
                        (fast.color[c] - exact.color[c]).abs() <= threshold,
                        "threshold {threshold}"
                    );
                }
            }
        }
    }

    #[test]
    fn depth_single_and_weighted() {
        let f = RayField::new(vec![test_kernel(5.0, 1.0, 0.4, [1.0; 3])], [0.0; 3]);
        assert!((render_depth(&f) - 5.0).abs() < 1e-15);
        let f2 = RayField::new(
            vec![
                test_kernel(2.0, 1.0, 0.5, [1.0; 3]),
                test_kernel(6.0, 1.0, 0.5, [1.0; 3]),
            ],
            [0.0; 3],
        );
        assert!((render_depth(&f2) - 10.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn depth_matches_direct_summation_oracle() {
        let mut rng = SplitMix64::new(24);
        for _ in 0..50 {
            let f = random_field(&mut rng, 15);
            let mut t_acc = 1.0;
            let (mut num, mut den) = (0.0, 0.0);
            for k in f.kernels() {
                num += t_acc * k.alpha * k.t_peak;
                den += t_acc * k.alpha;
                t_acc *= 1.0 - k.alpha;
            }
            assert!((render_depth(&f) - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_empty_is_infinite() {
        assert!(render_depth(&RayField::new(vec![], [0.0; 3])).is_infinite());
    }

    #[test]
    fn field_sorts_and_breaks_ties_by_source() {
        let mut a = test_kernel(2.0, 1.0, 0.5, [1.0; 3]);
        a.source = 4;
        let mut b = test_kernel(2.0, 1.0, 0.5, [0.0; 3]);
        b.source = 1;
        let mut c = test_kernel(1.0, 1.0, 0.5, [0.5; 3]);
        c.source = 9;
        let f = RayField::new(vec![a, b, c], [0.0; 3]);
        let order: Vec<usize> = f.kernels().iter().map(|k| k.source).collect();
        assert_eq!(order, vec![9, 1, 4]);
    }

    #[test]
    fn from_primitives_culls_behind_and_faint() {
        use nalgebra::Vector3;
        let ahead =
            GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 5.0), 0.5, 0.9, [1.0; 3]).unwrap();
        let behind =
            GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -5.0), 0.5, 0.9, [1.0; 3]).unwrap();
        let faint =
            GaussianPrimitive::isotropic(Vector3::new(20.0, 0.0, 5.0), 0.5, 0.9, [1.0; 3]).unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 100.0).unwrap();
        let f = RayField::from_primitives(&[ahead, behind, faint], &ray, 1e-4, [0.0; 3]).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.kernels()[0].source, 0);
    }
}
