//! Sparse-voxel Gaussian kernel fields.
//!
//! A CPU implementation of a scene representation in which anisotropic 3D
//! Gaussians, managed by a sparse voxel grid, induce one-dimensional kernel
//! functions on camera rays. Summing those kernels gives a continuous opacity
//! density along each ray; compositing them gives pixel colors, a hit CDF, and
//! (through a logistic inverse) a signed distance along the ray from which
//! meshes are extracted with marching cubes.
//!
//! Modules:
//! - [`gaussian`]: Gaussian primitives, covariance construction, and the
//!   closed-form ray transform that turns a 3D Gaussian into a 1D kernel.
//! - [`field`]: per-ray kernel sets; opacity density, hit CDF, alpha-blended
//!   color and depth.
//! - [`volume`]: dense-quadrature volume rendering used as a numerical
//!   reference for the blended evaluators.
//! - [`surface`]: the near-surface opacity model, its transcendental root, and
//!   the logistic opacity-to-SDF mapping.
//! - [`voxel`]: sparse voxel grid with gradient-driven subdivision and pruning;
//!   feature decoding through small MLPs.
//! - [`scene`]: scene container plus JSON serialization (`gvkf-scene-v1`).
//! - [`camera`], [`image`], [`render`]: pinhole camera, image buffers with
//!   PPM/PFM writers, and the per-pixel renderer.
//! - [`mesh`]: SDF grid sampling, marching cubes, PLY/OBJ export.
//! - [`train`]: L1 / D-SSIM / depth-distortion losses and a finite-difference
//!   fitting loop with the voxel registration cadence.
//! - [`oracle`]: independent numerical oracles (golden-section search, grid
//!   root scans) used by the verification suite.
//! - [`checks`]: the named property suite behind `gvkf verify`.

pub mod camera;
pub mod checks;
pub mod error;
pub mod field;
pub mod gaussian;
pub mod image;
pub mod mesh;
pub mod oracle;
mod par;
pub mod render;
pub mod scene;
pub mod surface;
pub mod train;
pub mod volume;
pub mod voxel;

mod mlp;
mod rng;

pub use error::{Error, Result};
pub use gaussian::{Covariance3, GaussianPrimitive, Ray, RayKernel};
pub use field::RayField;
pub use scene::Scene;

/// Builds a thread pool honoring `threads` and runs `f` inside it.
///
/// With the `parallel` feature disabled, or `threads == Some(1)`, `f` simply
/// runs on the calling thread.
pub fn with_thread_cap<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    par::with_thread_cap(threads, f)
}
