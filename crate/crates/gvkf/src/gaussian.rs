//! Gaussian primitives and the ray transform.
//!
//! A primitive is an anisotropic 3D Gaussian with covariance
//! `R * diag(s) * diag(s) * R^T`. Restricted to a ray it becomes a 1D
//! Gaussian; completing the square in the exponent gives the peak parameter
//! `t_peak`, the sharpness `k`, and the peak value, which combine with the
//! stored opacity into the per-kernel blending coefficient.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Condition-number cap for covariance construction, `(s_max/s_min)^2`.
const MAX_CONDITION: f64 = 1e12;

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    /// Base opacity in (0, 1].
    pub opacity: f64,
    /// RGB, each channel in [0, 1].
    pub color: [f64; 3],
    cov: Covariance3,
}

impl GaussianPrimitive {
    pub fn new(
        position: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        if !(opacity > 0.0 && opacity <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "opacity must be in (0, 1], got {opacity}"
            )));
        }
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParameter(format!(
                "color channels must be in [0, 1], got {color:?}"
            )));
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite position".into()));
        }
        let cov = Covariance3::from_rotation_scale(&rotation, &scale)?;
        Ok(GaussianPrimitive {
            position,
            rotation,
            scale,
            opacity,
            color,
            cov,
        })
    }

    /// Isotropic Gaussian with identity rotation.
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> Result<Self> {
        Self::new(
            position,
            UnitQuaternion::identity(),
            Vector3::new(scale, scale, scale),
            opacity,
            color,
        )
    }

    pub fn covariance(&self) -> &Covariance3 {
        &self.cov
    }

    /// Evaluates `opacity * exp(-0.5 (x-p)^T Sigma^-1 (x-p))`.
    pub fn evaluate_3d(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.position;
        let q = d.dot(&(self.cov.inverse() * d));
        self.opacity * (-0.5 * q).exp()
    }

    /// Radius of the 3-sigma sphere of influence, used for culling.
    pub fn influence_radius(&self) -> f64 {
        3.0 * self.scale.max()
    }
}

/// Symmetric positive-definite covariance with its cached inverse.
#[derive(Debug, Clone)]
pub struct Covariance3 {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl Covariance3 {
    /// Builds `R * diag(s) * diag(s)^T * R^T` and caches the inverse.
    ///
    /// The inverse is assembled from the same factors
    /// (`R * diag(1/s^2) * R^T`), which keeps it exactly symmetric and valid
    /// for any anisotropy the condition check admits.
    pub fn from_rotation_scale(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Result<Self> {
        if !(scale.iter().all(|s| *s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "scale components must be positive, got {:?}",
                scale
            )));
        }
        let smax = scale.max();
        let smin = scale.min();
        let condition = (smax / smin).powi(2);
        if condition > MAX_CONDITION {
            return Err(Error::SingularCovariance(format!(
                "condition number {condition:.3e} exceeds {MAX_CONDITION:.0e}"
            )));
        }
        let rot = rotation.to_rotation_matrix();
        let r = rot.matrix();
        let s2 = Matrix3::from_diagonal(&scale.map(|s| s * s));
        let s2_inv = Matrix3::from_diagonal(&scale.map(|s| 1.0 / (s * s)));
        let matrix = r * s2 * r.transpose();
        let inverse = r * s2_inv * r.transpose();
        Ok(Covariance3 { matrix, inverse })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }
}

/// A camera ray with a far bound used for background blending.
#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    /// Far bound, > 0.
    pub t_max: f64,
}

impl Ray {
    /// Normalizes `direction`; rejects near-zero directions and bad bounds.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_max: f64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::InvalidRay(format!(
                "degenerate direction with norm {norm:.3e}"
            )));
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::InvalidRay(format!("t_max must be positive, got {t_max}")));
        }
        Ok(Ray {
            origin,
            direction: direction / norm,
            t_max,
        })
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// The 1D kernel a Gaussian induces on one ray.
#[derive(Debug, Clone, Copy)]
pub struct RayKernel {
    /// Ray parameter of peak influence.
    pub t_peak: f64,
    /// Sharpness of the 1D Gaussian, > 0.
    pub sharpness: f64,
    /// Peak value of the unit-opacity 1D Gaussian along the ray, in (0, 1].
    pub peak: f64,
    /// Effective blending coefficient `opacity * peak`, in [0, 1].
    pub alpha: f64,
    pub color: [f64; 3],
    /// Index of the source primitive; breaks sorting ties deterministically.
    pub source: usize,
}

/// Restricts a Gaussian to a ray, completing the square in the exponent.
///
/// With the Gaussian translated into the ray frame (`p' = p - o`) and
/// `A = v^T S v`, `b = p'^T S v`, `c = p'^T S p'` for `S = Sigma^-1`:
/// the exponent `-1/2 (v t - p')^T S (v t - p')` equals
/// `-A/2 (t - b/A)^2 - 1/2 (c - b^2/A)`, so the peak sits at `t = b/A` with
/// sharpness `A/2` and peak value `exp(-1/2 (c - b^2/A))`.
pub fn ray_gaussian_transform(g: &GaussianPrimitive, ray: &Ray) -> Result<RayKernel> {
    let norm = ray.direction.norm();
    if !(norm.is_finite() && norm > 1e-12) {
        return Err(Error::InvalidRay(format!(
            "degenerate direction with norm {norm:.3e}"
        )));
    }
    let s = g.covariance().inverse();
    let p = g.position - ray.origin;
    let sv = s * ray.direction;
    let a = ray.direction.dot(&sv);
    let b = p.dot(&sv);
    let c = p.dot(&(s * p));
    let t_peak = b / a;
    // c - b^2/a >= 0 for SPD S; clamp rounding noise so peak stays <= 1.
    let residual = (c - b * b / a).max(0.0);
    let peak = (-0.5 * residual).exp();
    Ok(RayKernel {
        t_peak,
        sharpness: 0.5 * a,
        peak,
        alpha: (g.opacity * peak).clamp(0.0, 1.0),
        color: g.color,
        source: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{golden_section_argmax, scanned_argmax};
    use crate::rng::SplitMix64;

    fn random_unit_quat(r: &mut SplitMix64) -> UnitQuaternion<f64> {
        let q = nalgebra::Quaternion::new(
            r.uniform(-1.0, 1.0),
            r.uniform(-1.0, 1.0),
            r.uniform(-1.0, 1.0),
            r.uniform(-1.0, 1.0),
        );
        UnitQuaternion::from_quaternion(q)
    }

    #[test]
    fn covariance_identity_case() {
        let c = Covariance3::from_rotation_scale(
            &UnitQuaternion::identity(),
            &Vector3::new(1.0, 1.0, 1.0),
        )
        .unwrap();
        assert!((c.matrix() - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn covariance_diagonal_case() {
        let c = Covariance3::from_rotation_scale(
            &UnitQuaternion::identity(),
            &Vector3::new(2.0, 1.0, 1.0),
        )
        .unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((c.matrix() - expected).norm() < 1e-15);
    }

    #[test]
    fn covariance_eigenvalues_match_squared_scales() {
        // Eigen-decomposition oracle: eigenvalues of R diag(s^2) R^T are s^2.
        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let q = random_unit_quat(&mut rng);
            let c = Covariance3::from_rotation_scale(&q, &Vector3::new(0.5, 1.0, 2.0)).unwrap();
            let mut eig: Vec<f64> = c.matrix().symmetric_eigen().eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (got, want) in eig.iter().zip([0.25, 1.0, 4.0]) {
                assert!((got - want).abs() < 1e-10, "eigenvalue {got} vs {want}");
            }
        }
    }

    #[test]
    fn covariance_inverse_consistency() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..50 {
            let q = random_unit_quat(&mut rng);
            let s = Vector3::new(
                rng.uniform(0.1, 3.0),
                rng.uniform(0.1, 3.0),
                rng.uniform(0.1, 3.0),
            );
            let c = Covariance3::from_rotation_scale(&q, &s).unwrap();
            let prod = c.matrix() * c.inverse();
            assert!((prod - Matrix3::identity()).norm() < 1e-9);
            assert!((c.matrix() - c.matrix().transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn covariance_rejects_bad_scales() {
        let r = UnitQuaternion::identity();
        assert!(matches!(
            Covariance3::from_rotation_scale(&r, &Vector3::new(0.0, 1.0, 1.0)),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Covariance3::from_rotation_scale(&r, &Vector3::new(-1.0, 1.0, 1.0)),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Covariance3::from_rotation_scale(&r, &Vector3::new(1e-7, 1.0, 1.0)),
            Err(Error::SingularCovariance(_))
        ));
    }

    #[test]
    fn evaluate_peak_and_unit_offset() {
        let g = GaussianPrimitive::isotropic(Vector3::new(1.0, 2.0, 3.0), 1.0, 0.8, [1.0, 1.0, 1.0])
            .unwrap();
        assert!((g.evaluate_3d(&g.position) - 0.8).abs() < 1e-15);
        let off = g.position + Vector3::new(1.0, 0.0, 0.0);
        assert!((g.evaluate_3d(&off) - 0.8 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn evaluate_matches_dense_solve_oracle() {
        // Independent route: quadratic form via LU solve, no cached inverse.
        let mut rng = SplitMix64::new(9);
        for _ in 0..30 {
            let q = random_unit_quat(&mut rng);
            let s = Vector3::new(
                rng.uniform(0.2, 2.0),
                rng.uniform(0.2, 2.0),
                rng.uniform(0.2, 2.0),
            );
            let p = Vector3::new(
                rng.uniform(-2.0, 2.0),
                rng.uniform(-2.0, 2.0),
                rng.uniform(-2.0, 2.0),
            );
            let g = GaussianPrimitive::new(p, q, s, 0.9, [0.5, 0.5, 0.5]).unwrap();
            let x = Vector3::new(
                rng.uniform(-3.0, 3.0),
                rng.uniform(-3.0, 3.0),
                rng.uniform(-3.0, 3.0),
            );
            let d = x - p;
            let solved = g
                .covariance()
                .matrix()
                .lu()
                .solve(&d)
                .expect("solvable SPD system");
            let expected = 0.9 * (-0.5 * d.dot(&solved)).exp();
            assert!((g.evaluate_3d(&x) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_on_axis_case() {
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 5.0), 1.0, 1.0, [1.0; 3]).unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 100.0).unwrap();
        let k = ray_gaussian_transform(&g, &ray).unwrap();
        assert!((k.t_peak - 5.0).abs() < 1e-12);
        assert!((k.sharpness - 0.5).abs() < 1e-12);
        assert!((k.peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transform_off_axis_case() {
        let g = GaussianPrimitive::isotropic(Vector3::new(1.0, 0.0, 5.0), 1.0, 1.0, [1.0; 3]).unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 100.0).unwrap();
        let k = ray_gaussian_transform(&g, &ray).unwrap();
        // Numeric maximization along the ray agrees with the closed form.
        let argmax = golden_section_argmax(|t| g.evaluate_3d(&ray.point_at(t)), 0.0, 20.0, 1e-9);
        assert!((k.t_peak - 5.0).abs() < 1e-12);
        assert!((k.t_peak - argmax).abs() < 1e-6);
        assert!((k.peak - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn transform_matches_golden_section_argmax() {
        let mut rng = SplitMix64::new(10);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let s = Vector3::new(
                rng.uniform(0.2, 1.5),
                rng.uniform(0.2, 1.5),
                rng.uniform(0.2, 1.5),
            );
            let p = Vector3::new(
                rng.uniform(-2.0, 2.0),
                rng.uniform(-2.0, 2.0),
                rng.uniform(4.0, 8.0),
            );
            let g = GaussianPrimitive::new(p, q, s, 1.0, [1.0; 3]).unwrap();
            let dir = Vector3::new(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 1.0);
            let ray = Ray::new(Vector3::zeros(), dir, 100.0).unwrap();
            let k = ray_gaussian_transform(&g, &ray).unwrap();
            let Some(argmax) =
                scanned_argmax(|t| g.evaluate_3d(&ray.point_at(t)), 0.0, 20.0, 4000, 1e-8)
            else {
                continue;
            };
            assert!(
                (k.t_peak - argmax).abs() < 1e-4,
                "analytic {} vs numeric {}",
                k.t_peak,
                argmax
            );
            // peak * opacity equals the 3D evaluation at the peak point.
            let at_peak = g.evaluate_3d(&ray.point_at(k.t_peak));
            assert!((k.peak * g.opacity - at_peak).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scaling_law_for_sharpness() {
        // Scaling all scales by lambda divides the sharpness by lambda^2.
        let mut rng = SplitMix64::new(11);
        for _ in 0..20 {
            let q = random_unit_quat(&mut rng);
            let s = Vector3::new(
                rng.uniform(0.3, 1.0),
                rng.uniform(0.3, 1.0),
                rng.uniform(0.3, 1.0),
            );
            let lambda = rng.uniform(0.5, 3.0);
            let p = Vector3::new(0.0, 0.0, 5.0);
            let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 10.0).unwrap();
            let g1 = GaussianPrimitive::new(p, q, s, 1.0, [1.0; 3]).unwrap();
            let g2 = GaussianPrimitive::new(p, q, s * lambda, 1.0, [1.0; 3]).unwrap();
            let k1 = ray_gaussian_transform(&g1, &ray).unwrap();
            let k2 = ray_gaussian_transform(&g2, &ray).unwrap();
            assert!((k2.sharpness - k1.sharpness / (lambda * lambda)).abs() < 1e-9);
        }
    }

    #[test]
    fn ray_rejects_degenerate_direction() {
        assert!(matches!(
            Ray::new(Vector3::zeros(), Vector3::zeros(), 1.0),
            Err(Error::InvalidRay(_))
        ));
        assert!(Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 2.0), 1.0).is_ok());
    }

    #[test]
    fn primitive_rejects_bad_attributes() {
        let p = Vector3::zeros();
        let q = UnitQuaternion::identity();
        let s = Vector3::new(1.0, 1.0, 1.0);
        assert!(GaussianPrimitive::new(p, q, s, 0.0, [0.0; 3]).is_err());
        assert!(GaussianPrimitive::new(p, q, s, 1.1, [0.0; 3]).is_err());
        assert!(GaussianPrimitive::new(p, q, s, 0.5, [1.5, 0.0, 0.0]).is_err());
    }
}
