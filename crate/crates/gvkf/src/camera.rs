//! Pinhole camera.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::Ray;

#[derive(Debug, Clone)]
pub struct Camera {
    pub position: Vector3<f64>,
    pub look_at: Vector3<f64>,
    pub up: Vector3<f64>,
    /// Vertical field of view in degrees, in (0, 180).
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    /// Far bound, also the ray `t_max` used for background blending.
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        position: Vector3<f64>,
        look_at: Vector3<f64>,
        up: Vector3<f64>,
        fov_y_deg: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if (look_at - position).norm() < 1e-12 {
            return Err(Error::InvalidParameter(
                "camera look_at coincides with position".into(),
            ));
        }
        if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) {
            return Err(Error::InvalidParameter(format!(
                "fov_y_deg must be in (0, 180), got {fov_y_deg}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be positive".into()));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < near < far, got near {near} far {far}"
            )));
        }
        let forward = (look_at - position).normalize();
        if forward.cross(&up).norm() < 1e-9 {
            return Err(Error::InvalidParameter(
                "up vector is parallel to the view direction".into(),
            ));
        }
        Ok(Camera {
            position,
            look_at,
            up,
            fov_y_deg,
            width,
            height,
            near,
            far,
        })
    }

    /// Orthonormal (forward, right, up) basis.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let up = right.cross(&forward);
        (forward, right, up)
    }

    /// Ray through the center of pixel (px, py); py grows downward.
    pub fn generate_ray(&self, px: usize, py: usize) -> Result<Ray> {
        if px >= self.width || py >= self.height {
            return Err(Error::InvalidParameter(format!(
                "pixel ({px}, {py}) outside {}x{}",
                self.width, self.height
            )));
        }
        let (forward, right, up) = self.basis();
        let tan_half = (self.fov_y_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let ndc_x = (px as f64 + 0.5) / self.width as f64 * 2.0 - 1.0;
        let ndc_y = 1.0 - (py as f64 + 0.5) / self.height as f64 * 2.0;
        let dir = forward + right * (ndc_x * aspect * tan_half) + up * (ndc_y * tan_half);
        Ray::new(self.position, dir, self.far)
    }
}
