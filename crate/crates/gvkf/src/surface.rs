//! Near-surface opacity model and the opacity-to-SDF mapping.
//!
//! When kernels pile up on a surface, the density near it behaves like a
//! zero-mean normal with variance `sigma^2 = sum 1/(2 pi alpha_i^2)`. The
//! derivative of the hit CDF then peaks not at the surface but at the
//! negative root `u0` of `rho(u) + u/sigma^2`. Fitting the CDF with a
//! logistic translated by `u0` and inverting it yields a signed distance
//! along the ray.

use crate::error::{Error, Result};
use crate::field::{blend_weights, cdf_phi, render_depth, RayField};

/// Clamp width for degenerate CDF values fed to the inverse logistic.
pub const PHI_EPSILON: f64 = 1e-7;

/// Aggregate near-surface variance `sum_i 1/(2 pi alpha_i^2)`.
pub fn sigma_sq(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::InvalidParameter(
            "sigma_sq needs at least one coefficient".into(),
        ));
    }
    let mut acc = 0.0;
    for &a in alphas {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "coefficients must be positive, got {a}"
            )));
        }
        acc += 1.0 / (2.0 * std::f64::consts::PI * a * a);
    }
    Ok(acc)
}

/// Normal density with variance `sigma_sq` at `u`.
pub fn normal_density(u: f64, sigma_sq: f64) -> f64 {
    let sigma = sigma_sq.sqrt();
    (-(u * u) / (2.0 * sigma_sq)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// Solves `rho(u) = -u / sigma^2` for the unique negative root.
///
/// `f(u) = rho(u) + u/sigma^2` is strictly increasing on `u < 0` with
/// `f(0) > 0`, so bisection on `[-10 sigma, 0]` always brackets; a few Newton
/// steps polish the root. Residual is checked against `tol`.
pub fn solve_u0(sigma_sq: f64, tol: f64) -> Result<f64> {
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma_sq must be positive, got {sigma_sq}"
        )));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let f = |u: f64| normal_density(u, sigma_sq) + u / sigma_sq;
    let sigma = sigma_sq.sqrt();
    let mut lo = -10.0 * sigma;
    let mut hi = 0.0;
    if f(lo) >= 0.0 {
        return Err(Error::SolverFailure(format!(
            "no bracket at sigma_sq {sigma_sq}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * sigma.max(1e-30) {
            break;
        }
    }
    let mut u = 0.5 * (lo + hi);
    // Newton polish: f'(u) = rho'(u) + 1/sigma^2 with rho'(u) = -u rho / sigma^2.
    for _ in 0..5 {
        let rho = normal_density(u, sigma_sq);
        let fu = rho + u / sigma_sq;
        let dfu = -u * rho / sigma_sq + 1.0 / sigma_sq;
        if dfu.abs() < 1e-300 {
            break;
        }
        let next = u - fu / dfu;
        if next.is_finite() && next < 0.0 {
            u = next;
        }
    }
    let residual = (normal_density(u, sigma_sq) + u / sigma_sq).abs();
    if !(u.is_finite() && u < 0.0) || residual > tol {
        return Err(Error::SolverFailure(format!(
            "residual {residual:.3e} above tolerance {tol:.1e} at sigma_sq {sigma_sq}"
        )));
    }
    Ok(u)
}

/// Inverse logistic mapping from a CDF value to signed distance:
/// `D = ln(1/phi - 1)/mu - u0`.
///
/// Values outside (0, 1) are clamped to `[PHI_EPSILON, 1 - PHI_EPSILON]`;
/// the returned flag marks such degenerate rays.
pub fn sdf_from_cdf(phi: f64, mu: f64, u0: f64) -> (f64, bool) {
    let clamped = !(phi > PHI_EPSILON && phi < 1.0 - PHI_EPSILON);
    let p = phi.clamp(PHI_EPSILON, 1.0 - PHI_EPSILON);
    // ln(1/p - 1) as ln(1-p) - ln(p); the naive form cancels near p = 1.
    (((1.0 - p).ln() - p.ln()) / mu - u0, clamped)
}

/// Logistic CDF model `phi(u) = 1/(1 + exp(-mu (u - u0)))`.
pub fn logistic_cdf(u: f64, mu: f64, u0: f64) -> f64 {
    1.0 / (1.0 + (-mu * (u - u0)).exp())
}

/// CDF value on the `D = 0` level set, `1/(1 + exp(mu u0))`.
///
/// This, not 0.5, is the iso level for meshing: the logistic is translated
/// by `u0`, so the surface sits where the CDF crosses this value.
pub fn iso_level(mu: f64, u0: f64) -> f64 {
    1.0 / (1.0 + (mu * u0).exp())
}

/// Per-ray surface parameters.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceSolve {
    pub sigma_sq: f64,
    pub u0: f64,
    pub mu: f64,
    /// Ray parameter where the mapped SDF crosses zero.
    pub t_star: f64,
    /// Number of kernels counted as concentrated on the surface.
    pub kernel_count: usize,
}

impl SurfaceSolve {
    /// Builds the surface model for one ray.
    ///
    /// Membership in the near-surface kernel set: peaks within three
    /// weighted standard deviations of the blended depth (weights are the
    /// compositing weights). The blended depth is itself the weighted mean,
    /// so at least one kernel always qualifies.
    pub fn from_field(field: &RayField, mu: f64) -> Option<SurfaceSolve> {
        let (alphas, _) = surface_kernels(field)?;
        let sig = sigma_sq(&alphas).ok()?;
        let u0 = solve_u0(sig, 1e-10).ok()?;
        let t_star = solve_t_star(field, mu, u0);
        Some(SurfaceSolve {
            sigma_sq: sig,
            u0,
            mu,
            t_star,
            kernel_count: alphas.len(),
        })
    }

    /// Builds the surface model with an externally supplied (global) `u0`.
    pub fn with_u0(field: &RayField, mu: f64, u0: f64) -> Option<SurfaceSolve> {
        let (alphas, _) = surface_kernels(field)?;
        let sig = sigma_sq(&alphas).ok()?;
        let t_star = solve_t_star(field, mu, u0);
        Some(SurfaceSolve {
            sigma_sq: sig,
            u0,
            mu,
            t_star,
            kernel_count: alphas.len(),
        })
    }

    /// Signed distance at ray parameter `t`.
    pub fn sdf_at(&self, field: &RayField, t: f64) -> (f64, bool) {
        sdf_from_cdf(cdf_phi(field, t), self.mu, self.u0)
    }
}

/// Density-normalized coefficients and peaks of the kernels concentrated
/// near the blended depth.
///
/// The variance formula wants each kernel read as a normal density, so the
/// coefficient fed into it is `opacity * sqrt(k/pi)` (unit mass for a
/// Gaussian of sharpness `k`), not the blending alpha. With the blending
/// alpha, arbitrarily faint grazing kernels would blow the variance up and
/// push the iso level out of reach.
pub fn surface_kernels(field: &RayField) -> Option<(Vec<f64>, Vec<f64>)> {
    if field.is_empty() {
        return None;
    }
    let depth = render_depth(field);
    if !depth.is_finite() {
        return None;
    }
    let weights = blend_weights(field);
    let total: f64 = weights.iter().sum();
    let var: f64 = field
        .kernels()
        .iter()
        .zip(&weights)
        .map(|(k, w)| w * (k.t_peak - depth).powi(2))
        .sum::<f64>()
        / total;
    let window = 3.0 * var.sqrt() + 1e-12;
    let mut alphas = Vec::new();
    let mut peaks = Vec::new();
    for k in field.kernels() {
        if (k.t_peak - depth).abs() <= window && k.alpha > 0.0 && k.peak > 0.0 {
            let opacity = (k.alpha / k.peak).min(1.0);
            alphas.push(opacity * (k.sharpness / std::f64::consts::PI).sqrt());
            peaks.push(k.t_peak);
        }
    }
    if alphas.is_empty() {
        None
    } else {
        Some((alphas, peaks))
    }
}

/// Ray parameter where the CDF crosses the iso level (bisection over the
/// monotone CDF); infinity when the ray never reaches it.
fn solve_t_star(field: &RayField, mu: f64, u0: f64) -> f64 {
    let level = iso_level(mu, u0);
    let t_hi = field
        .kernels()
        .iter()
        .map(|k| k.t_peak)
        .fold(0.0, f64::max)
        + 10.0;
    if cdf_phi(field, t_hi) < level {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (0.0, t_hi);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if cdf_phi(field, mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Samples of the surface diagnostics on a `u` grid.
#[derive(Debug, Clone)]
pub struct SurfaceDiagnostics {
    pub u: Vec<f64>,
    /// `h(u) = -rho^2(u) + rho'(u) = -rho(u) [rho(u) + u/sigma^2]`.
    pub h: Vec<f64>,
    /// CDF derivative `phi'(u) = T(u) rho(u)` with the transmittance
    /// integral accumulated numerically from the grid start.
    pub phi_prime: Vec<f64>,
    pub phi_double_prime: Vec<f64>,
    /// Indices where `h` changes sign.
    pub sign_changes: Vec<usize>,
    /// Set when the grid is too coarse to bracket a single sign change.
    pub inconclusive: bool,
}

/// Samples `h`, `phi'`, and `phi''` of the near-surface model on `u_grid`.
pub fn h_diagnostic(sigma_sq: f64, u_grid: &[f64]) -> Result<SurfaceDiagnostics> {
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_sq must be positive, got {sigma_sq}"
        )));
    }
    if u_grid.len() < 2 || u_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "u grid must be ascending with at least two points".into(),
        ));
    }
    let rho: Vec<f64> = u_grid.iter().map(|&u| normal_density(u, sigma_sq)).collect();
    let h: Vec<f64> = u_grid
        .iter()
        .zip(&rho)
        .map(|(&u, &r)| -r * (r + u / sigma_sq))
        .collect();
    // Transmittance by trapezoid accumulation from the grid start.
    let mut integral = 0.0;
    let mut phi_prime = Vec::with_capacity(u_grid.len());
    phi_prime.push(rho[0]);
    for i in 1..u_grid.len() {
        integral += 0.5 * (rho[i] + rho[i - 1]) * (u_grid[i] - u_grid[i - 1]);
        phi_prime.push((-integral).exp() * rho[i]);
    }
    let phi_double_prime: Vec<f64> = (0..u_grid.len())
        .map(|i| h[i] * phi_prime[i] / rho[i].max(1e-300))
        .collect();
    let sign_changes: Vec<usize> = h
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] * w[1] < 0.0)
        .map(|(i, _)| i)
        .collect();
    let inconclusive = sign_changes.len() != 1;
    Ok(SurfaceDiagnostics {
        u: u_grid.to_vec(),
        h,
        phi_prime,
        phi_double_prime,
        sign_changes,
        inconclusive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::grid_sign_change;
    use crate::rng::SplitMix64;

    #[test]
    fn sigma_sq_substitution_cases() {
        let inv_2pi = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((sigma_sq(&[1.0]).unwrap() - inv_2pi).abs() < 1e-15);
        assert!((sigma_sq(&[1.0, 1.0]).unwrap() - 2.0 * inv_2pi).abs() < 1e-15);
    }

    #[test]
    fn sigma_sq_matches_naive_sum() {
        let mut rng = SplitMix64::new(41);
        for _ in 0..50 {
            let alphas: Vec<f64> = (0..8).map(|_| rng.uniform(0.05, 1.0)).collect();
            let naive: f64 = alphas
                .iter()
                .map(|a| 1.0 / (2.0 * std::f64::consts::PI * a * a))
                .sum();
            assert!((sigma_sq(&alphas).unwrap() - naive).abs() < 1e-12 * naive.max(1.0));
        }
    }

    #[test]
    fn sigma_sq_rejects_nonpositive() {
        assert!(sigma_sq(&[]).is_err());
        assert!(sigma_sq(&[0.5, 0.0]).is_err());
        assert!(sigma_sq(&[-0.1]).is_err());
    }

    #[test]
    fn u0_unit_variance_value() {
        let u0 = solve_u0(1.0, 1e-12).unwrap();
        assert!(u0 < 0.0);
        // Grid oracle: coarse scan then 1e-7 refinement of the sign change.
        let oracle = grid_sign_change(|u| normal_density(u, 1.0) + u, -10.0, 0.0, 1e-2, 1e-7)
            .unwrap();
        assert!((u0 - oracle).abs() < 1e-6, "solver {u0} vs grid {oracle}");
        assert!((u0 - (-0.373)).abs() < 1e-3);
    }

    #[test]
    fn u0_shrinks_with_sigma() {
        // u0 scales linearly with sigma (substituting u = sigma w reduces the
        // equation to the unit case), so its magnitude shrinks as sigma -> 0.
        let mut last = 0.0;
        for s in [1e-4f64, 1e-2, 1.0] {
            let u0 = solve_u0(s, 1e-10).unwrap();
            assert!(u0 < last, "root magnitude should grow with sigma");
            assert!((u0 / s.sqrt() - (-0.3722)).abs() < 1e-3);
            last = u0;
        }
        // And the trend agrees with the grid oracle.
        for s in [1e-4f64, 1e-2, 1.0] {
            let sigma: f64 = s.sqrt();
            let oracle = grid_sign_change(
                |u| normal_density(u, s) + u / s,
                -10.0 * sigma,
                0.0,
                sigma * 1e-2,
                sigma * 1e-7,
            )
            .unwrap();
            assert!((solve_u0(s, 1e-10).unwrap() - oracle).abs() < 1e-6 * sigma.max(1.0));
        }
    }

    #[test]
    fn u0_residual_postcondition() {
        let mut rng = SplitMix64::new(42);
        for _ in 0..100 {
            let s = 10f64.powf(rng.uniform(-4.0, 1.0));
            let u0 = solve_u0(s, 1e-10).unwrap();
            let residual = (normal_density(u0, s) + u0 / s).abs();
            assert!(residual <= 1e-10);
            assert!(u0 < 0.0);
        }
    }

    #[test]
    fn h_negative_at_origin_single_crossing() {
        let grid: Vec<f64> = (0..4001).map(|i| -4.0 + i as f64 * 1e-3).collect();
        let d = h_diagnostic(1.0, &grid).unwrap();
        assert!(*d.h.last().unwrap() < 0.0, "h(0) = -rho^2(0) < 0");
        assert_eq!(d.sign_changes.len(), 1);
        assert!(!d.inconclusive);
        // h crosses from positive to negative.
        let i = d.sign_changes[0];
        assert!(d.h[i] > 0.0 && d.h[i + 1] < 0.0);
        // The crossing is at u0.
        let u0 = solve_u0(1.0, 1e-10).unwrap();
        assert!((d.u[i] - u0).abs() < 2e-3);
    }

    #[test]
    fn h_inconclusive_on_coarse_grid() {
        // Two points on the same side of the crossing see no sign change.
        let d = h_diagnostic(1.0, &[-0.1, 0.0]).unwrap();
        assert!(d.inconclusive);
    }

    #[test]
    fn phi_prime_peaks_before_surface() {
        for s in [1e-3f64, 1e-1, 1.0, 4.0] {
            let sigma: f64 = s.sqrt();
            let grid: Vec<f64> = (0..8000)
                .map(|i| -6.0 * sigma + i as f64 * (6.0 * sigma / 7999.0))
                .collect();
            let d = h_diagnostic(s, &grid).unwrap();
            let argmax = d
                .phi_prime
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| d.u[i])
                .unwrap();
            assert!(argmax < 0.0, "phi' peak at {argmax} for sigma_sq {s}");
        }
    }

    #[test]
    fn sdf_level_set_and_midpoint() {
        for mu in [2.0, 8.0, 32.0] {
            let u0 = solve_u0(0.5, 1e-10).unwrap();
            let (d, flag) = sdf_from_cdf(iso_level(mu, u0), mu, u0);
            assert!(d.abs() < 1e-9, "D at iso level should be 0, got {d}");
            assert!(!flag);
            let (d_half, _) = sdf_from_cdf(0.5, mu, u0);
            assert!((d_half - (-u0)).abs() < 1e-12);
            assert!(d_half > 0.0);
        }
    }

    #[test]
    fn sdf_logistic_round_trip() {
        // The CDF value itself carries ~ulp(1) absolute error, which the
        // inverse amplifies by 1/(mu phi (1-phi)); staying inside
        // |mu (u - u0)| <= 8 keeps that amplification below 1e-12.
        let mut rng = SplitMix64::new(43);
        for mu in [2.0f64, 8.0, 32.0] {
            let u0 = solve_u0(1.0, 1e-10).unwrap();
            for _ in 0..200 {
                let u = u0 + rng.uniform(-8.0, 8.0) / mu;
                let phi = logistic_cdf(u, mu, u0);
                let (d, flag) = sdf_from_cdf(phi, mu, u0);
                assert!(!flag);
                assert!((d - (-u)).abs() < 1e-12, "mu {mu} u {u} d {d}");
            }
        }
    }

    #[test]
    fn sdf_clamps_degenerate_phi() {
        let (d0, f0) = sdf_from_cdf(0.0, 8.0, -0.3);
        assert!(f0 && d0.is_finite());
        let (d1, f1) = sdf_from_cdf(1.0, 8.0, -0.3);
        assert!(f1 && d1.is_finite());
        assert!(d0 > d1, "phi 0 is far outside, phi 1 far inside");
    }

    #[test]
    fn sdf_strictly_decreasing_in_phi() {
        let u0 = -0.4;
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let phi = i as f64 / 100.0;
            let (d, _) = sdf_from_cdf(phi, 8.0, u0);
            assert!(d < last);
            last = d;
        }
    }

    fn cluster_field(count: usize, alpha: f64, sharpness: f64) -> RayField {
        use crate::gaussian::RayKernel;
        let kernels = (0..count)
            .map(|i| RayKernel {
                t_peak: 5.0 + 0.01 * i as f64,
                sharpness,
                peak: 1.0,
                alpha,
                color: [1.0; 3],
                source: i,
            })
            .collect();
        RayField::new(kernels, [0.0; 3])
    }

    use crate::field::RayField;

    #[test]
    fn surface_solve_on_synthetic_field() {
        let field = cluster_field(3, 0.9, 200.0);
        let solve = SurfaceSolve::from_field(&field, 8.0).unwrap();
        assert!(solve.u0 < 0.0);
        assert!(solve.kernel_count >= 1);
        assert!(solve.t_star > 4.0 && solve.t_star < 6.0);
        // The SDF is positive in front of the cluster and negative behind it.
        let (front, _) = solve.sdf_at(&field, 1.0);
        let (behind, _) = solve.sdf_at(&field, 9.0);
        assert!(front > 0.0 && behind < 0.0);
    }

    #[test]
    fn surface_solve_unreachable_iso_level() {
        // Broad faint kernels give a large sigma^2 and an iso level above
        // the accumulated opacity: the ray never crosses the surface.
        let field = cluster_field(5, 0.2, 1.0);
        let solve = SurfaceSolve::from_field(&field, 8.0).unwrap();
        assert!(solve.t_star.is_infinite());
    }
}
