//! Scene container and the `gvkf-scene-v1` JSON format.
//!
//! Direct scenes serialize a flat `gaussians` array (insertion order is
//! preserved through the voxel grid via source indices). Neural scenes
//! serialize `voxels` plus `decoder_weights`. All reals are 64-bit JSON
//! numbers, written with enough digits to round-trip exactly.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::GaussianPrimitive;
use crate::mlp::{Layer, Mlp};
use crate::voxel::{
    DecoderSet, FeatureVoxel, GridMode, SparseVoxelGrid, VoxelKey, FEATURE_DIM, MAX_DEPTH,
    MAX_GAUSSIANS_PER_VOXEL,
};

pub const SCENE_FORMAT: &str = "gvkf-scene-v1";

/// A renderable scene: a voxel grid in direct or neural mode.
#[derive(Debug, Clone)]
pub struct Scene {
    pub grid: SparseVoxelGrid,
}

impl Scene {
    /// Builds a direct scene by voxelizing explicit primitives.
    pub fn direct(gaussians: Vec<GaussianPrimitive>, voxel_size: f64) -> Result<Self> {
        let mut grid = SparseVoxelGrid::empty(voxel_size, GridMode::Direct)?;
        for (i, g) in gaussians.into_iter().enumerate() {
            grid.insert_direct(g, i)?;
        }
        Ok(Scene { grid })
    }

    pub fn neural(grid: SparseVoxelGrid) -> Result<Self> {
        if grid.mode() != GridMode::Neural {
            return Err(Error::InvalidParameter("grid is not in neural mode".into()));
        }
        if grid.decoders.is_none() {
            return Err(Error::InvalidParameter("neural grid has no decoders".into()));
        }
        Ok(Scene { grid })
    }

    pub fn mode(&self) -> GridMode {
        self.grid.mode()
    }

    /// Primitives with their source voxels; neural mode needs the camera
    /// position for the view-conditioned decoders.
    pub fn primitives_with_sources(
        &self,
        camera_position: Option<&Vector3<f64>>,
    ) -> Result<Vec<(VoxelKey, GaussianPrimitive)>> {
        self.grid.generate_gaussians(camera_position)
    }

    pub fn primitives(
        &self,
        camera_position: Option<&Vector3<f64>>,
    ) -> Result<Vec<GaussianPrimitive>> {
        Ok(self
            .primitives_with_sources(camera_position)?
            .into_iter()
            .map(|(_, g)| g)
            .collect())
    }

    /// Direct-mode primitives flattened back into insertion order.
    pub fn direct_gaussians(&self) -> Vec<GaussianPrimitive> {
        let mut indexed: Vec<(usize, GaussianPrimitive)> = self
            .grid
            .voxels()
            .flat_map(|(_, v)| {
                v.source_indices
                    .iter()
                    .copied()
                    .zip(v.primitives.iter().cloned())
            })
            .collect();
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, g)| g).collect()
    }

    /// Axis-aligned bounds enclosing every primitive's influence sphere;
    /// `None` for scenes that generate no primitives.
    pub fn bounds(
        &self,
        camera_position: Option<&Vector3<f64>>,
    ) -> Result<Option<(Vector3<f64>, Vector3<f64>)>> {
        let prims = self.primitives(camera_position)?;
        if prims.is_empty() {
            return Ok(None);
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for g in &prims {
            let r = g.influence_radius();
            min = min.inf(&g.position.add_scalar(-r));
            max = max.sup(&g.position.add_scalar(r));
        }
        Ok(Some((min, max)))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SceneJson::from_scene(self);
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::parse("scene", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SceneJson =
            serde_json::from_str(text).map_err(|e| Error::parse("scene", e.to_string()))?;
        doc.into_scene()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

// -- JSON document ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneJson {
    format: String,
    mode: String,
    voxel_size: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    voxels: Vec<VoxelJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    gaussians: Vec<GaussianJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decoder_weights: Option<DecoderWeightsJson>,
}

#[derive(Serialize, Deserialize)]
struct VoxelJson {
    center: [f64; 3],
    depth: u8,
    feature: Vec<f64>,
    offsets: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct GaussianJson {
    position: [f64; 3],
    /// Unit quaternion as [w, x, y, z].
    rotation_quat: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    rgb: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct DecoderWeightsJson {
    alpha: MlpJson,
    rotation: MlpJson,
    scale: MlpJson,
    color: MlpJson,
}

#[derive(Serialize, Deserialize)]
struct MlpJson {
    layers: Vec<LayerJson>,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl MlpJson {
    fn from_mlp(mlp: &Mlp) -> Self {
        MlpJson {
            layers: mlp
                .layers()
                .iter()
                .map(|l| LayerJson {
                    weight: l.weight.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    fn into_mlp(self) -> Result<Mlp> {
        Mlp::from_layers(
            self.layers
                .into_iter()
                .map(|l| Layer {
                    weight: l.weight,
                    bias: l.bias,
                })
                .collect(),
        )
    }
}

impl SceneJson {
    fn from_scene(scene: &Scene) -> Self {
        match scene.mode() {
            GridMode::Direct => SceneJson {
                format: SCENE_FORMAT.into(),
                mode: "direct".into(),
                voxel_size: scene.grid.voxel_size(),
                voxels: Vec::new(),
                gaussians: scene
                    .direct_gaussians()
                    .iter()
                    .map(|g| GaussianJson {
                        position: [g.position.x, g.position.y, g.position.z],
                        rotation_quat: [g.rotation.w, g.rotation.i, g.rotation.j, g.rotation.k],
                        scale: [g.scale.x, g.scale.y, g.scale.z],
                        opacity: g.opacity,
                        rgb: g.color,
                    })
                    .collect(),
                decoder_weights: None,
            },
            GridMode::Neural => SceneJson {
                format: SCENE_FORMAT.into(),
                mode: "neural".into(),
                voxel_size: scene.grid.voxel_size(),
                voxels: scene
                    .grid
                    .voxels()
                    .map(|(_, v)| VoxelJson {
                        center: [v.center.x, v.center.y, v.center.z],
                        depth: v.depth,
                        feature: v.feature.clone(),
                        offsets: v.offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
                    })
                    .collect(),
                gaussians: Vec::new(),
                decoder_weights: scene.grid.decoders.as_ref().map(|d| DecoderWeightsJson {
                    alpha: MlpJson::from_mlp(&d.alpha),
                    rotation: MlpJson::from_mlp(&d.rotation),
                    scale: MlpJson::from_mlp(&d.scale),
                    color: MlpJson::from_mlp(&d.color),
                }),
            },
        }
    }

    fn into_scene(self) -> Result<Scene> {
        if self.format != SCENE_FORMAT {
            return Err(Error::parse(
                "format",
                format!("expected {SCENE_FORMAT:?}, got {:?}", self.format),
            ));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::parse(
                "voxel_size",
                format!("must be positive, got {}", self.voxel_size),
            ));
        }
        match self.mode.as_str() {
            "direct" => {
                if !self.voxels.is_empty() || self.decoder_weights.is_some() {
                    return Err(Error::parse(
                        "mode",
                        "direct scenes must not carry voxels or decoder_weights",
                    ));
                }
                let mut gaussians = Vec::with_capacity(self.gaussians.len());
                for (i, g) in self.gaussians.into_iter().enumerate() {
                    gaussians.push(parse_gaussian(g, i)?);
                }
                Scene::direct(gaussians, self.voxel_size)
            }
            "neural" => {
                if !self.gaussians.is_empty() {
                    return Err(Error::parse("mode", "neural scenes must not carry gaussians"));
                }
                let weights = self.decoder_weights.ok_or_else(|| {
                    Error::parse("decoder_weights", "required in neural mode")
                })?;
                let decoders = DecoderSet {
                    alpha: weights.alpha.into_mlp()?,
                    rotation: weights.rotation.into_mlp()?,
                    scale: weights.scale.into_mlp()?,
                    color: weights.color.into_mlp()?,
                };
                decoders.validate()?;
                let mut grid = SparseVoxelGrid::empty(self.voxel_size, GridMode::Neural)?;
                for (i, v) in self.voxels.into_iter().enumerate() {
                    let field = format!("voxels[{i}]");
                    if v.depth > MAX_DEPTH {
                        return Err(Error::parse(
                            format!("{field}.depth"),
                            format!("depth {} exceeds {MAX_DEPTH}", v.depth),
                        ));
                    }
                    if v.feature.len() != FEATURE_DIM {
                        return Err(Error::parse(
                            format!("{field}.feature"),
                            format!("expected {FEATURE_DIM} values, got {}", v.feature.len()),
                        ));
                    }
                    if v.offsets.len() > MAX_GAUSSIANS_PER_VOXEL {
                        return Err(Error::parse(
                            format!("{field}.offsets"),
                            format!("at most {MAX_GAUSSIANS_PER_VOXEL} offsets"),
                        ));
                    }
                    if v.offsets.iter().flatten().any(|c| c.abs() > 0.5 + 1e-12) {
                        return Err(Error::parse(
                            format!("{field}.offsets"),
                            "offsets must lie within the half extent",
                        ));
                    }
                    let center = Vector3::new(v.center[0], v.center[1], v.center[2]);
                    let key = grid.key_for(&center, v.depth);
                    let snapped = grid.center_of(&key);
                    if (snapped - center).norm() > 1e-9 * grid.edge_length(v.depth) {
                        return Err(Error::parse(
                            format!("{field}.center"),
                            "center is not on the voxel lattice for its depth",
                        ));
                    }
                    if grid.voxel(&key).is_some() {
                        return Err(Error::parse(
                            format!("{field}.center"),
                            format!("duplicate voxel at {key}"),
                        ));
                    }
                    let mut voxel = FeatureVoxel::new_at(snapped, v.depth);
                    voxel.feature = v.feature;
                    voxel.offsets = v
                        .offsets
                        .iter()
                        .map(|o| Vector3::new(o[0], o[1], o[2]))
                        .collect();
                    grid.insert_voxel(key, voxel);
                }
                grid.decoders = Some(decoders);
                Scene::neural(grid)
            }
            other => Err(Error::parse("mode", format!("unknown mode {other:?}"))),
        }
    }
}

fn parse_gaussian(g: GaussianJson, index: usize) -> Result<GaussianPrimitive> {
    let field = format!("gaussians[{index}]");
    let q = nalgebra::Quaternion::new(
        g.rotation_quat[0],
        g.rotation_quat[1],
        g.rotation_quat[2],
        g.rotation_quat[3],
    );
    if (q.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::parse(
            format!("{field}.rotation_quat"),
            format!("quaternion norm {} is not 1", q.norm()),
        ));
    }
    GaussianPrimitive::new(
        Vector3::new(g.position[0], g.position[1], g.position[2]),
        UnitQuaternion::from_quaternion(q),
        Vector3::new(g.scale[0], g.scale[1], g.scale[2]),
        g.opacity,
        g.rgb,
    )
    .map_err(|e| Error::parse(field, e.to_string()))
}

// -- Camera files ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CameraJson {
    position: [f64; 3],
    look_at: [f64; 3],
    up: [f64; 3],
    fov_y_deg: f64,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
}

pub fn camera_to_json(cam: &Camera) -> Result<String> {
    let doc = CameraJson {
        position: [cam.position.x, cam.position.y, cam.position.z],
        look_at: [cam.look_at.x, cam.look_at.y, cam.look_at.z],
        up: [cam.up.x, cam.up.y, cam.up.z],
        fov_y_deg: cam.fov_y_deg,
        width: cam.width,
        height: cam.height,
        near: cam.near,
        far: cam.far,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::parse("camera", e.to_string()))
}

pub fn camera_from_json(text: &str) -> Result<Camera> {
    let doc: CameraJson =
        serde_json::from_str(text).map_err(|e| Error::parse("camera", e.to_string()))?;
    Camera::new(
        Vector3::from(doc.position),
        Vector3::from(doc.look_at),
        Vector3::from(doc.up),
        doc.fov_y_deg,
        doc.width,
        doc.height,
        doc.near,
        doc.far,
    )
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    camera_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_camera(cam: &Camera, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, camera_to_json(cam)?)?;
    Ok(())
}

// -- Built-in synthetic scenes ------------------------------------------------

/// Gaussians on a sphere shell via a Fibonacci lattice; colors follow the
/// surface position so renders have visible structure.
pub fn make_sphere_scene(
    count: usize,
    radius: f64,
    scale: f64,
    opacity: f64,
    voxel_size: f64,
) -> Result<Scene> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut gaussians = Vec::with_capacity(count);
    for i in 0..count {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        let dir = Vector3::new(r * phi.cos(), y, r * phi.sin());
        let color = [
            0.5 + 0.45 * dir.x,
            0.5 + 0.45 * dir.y,
            0.5 + 0.45 * dir.z,
        ];
        gaussians.push(GaussianPrimitive::isotropic(dir * radius, scale, opacity, color)?);
    }
    Scene::direct(gaussians, voxel_size)
}

/// Fronto-parallel wall of Gaussians on the plane `z = z_plane`.
pub fn make_wall_scene(
    half_extent: f64,
    spacing: f64,
    z_plane: f64,
    scale: f64,
    opacity: f64,
    voxel_size: f64,
) -> Result<Scene> {
    let n = (2.0 * half_extent / spacing).floor() as i64 + 1;
    let mut gaussians = Vec::new();
    for iy in 0..n {
        for ix in 0..n {
            let x = -half_extent + ix as f64 * spacing;
            let y = -half_extent + iy as f64 * spacing;
            let color = [
                0.5 + 0.5 * (x / half_extent).clamp(-1.0, 1.0) * 0.9,
                0.5 + 0.5 * (y / half_extent).clamp(-1.0, 1.0) * 0.9,
                0.7,
            ];
            gaussians.push(GaussianPrimitive::isotropic(
                Vector3::new(x, y, z_plane),
                scale,
                opacity,
                color,
            )?);
        }
    }
    Scene::direct(gaussians, voxel_size)
}

/// One isotropic Gaussian at the origin.
pub fn make_single_scene(scale: f64, opacity: f64, voxel_size: f64) -> Result<Scene> {
    Scene::direct(
        vec![GaussianPrimitive::isotropic(
            Vector3::zeros(),
            scale,
            opacity,
            [0.9, 0.35, 0.2],
        )?],
        voxel_size,
    )
}

/// Neural-mode sphere: feature voxels seeded from Fibonacci lattice points.
pub fn make_neural_sphere_scene(
    count: usize,
    radius: f64,
    voxel_size: f64,
    seed: u64,
) -> Result<Scene> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let points: Vec<Vector3<f64>> = (0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), y, r * phi.sin()) * radius
        })
        .collect();
    let grid = SparseVoxelGrid::init_from_points(&points, voxel_size, seed)?;
    Scene::neural(grid)
}
