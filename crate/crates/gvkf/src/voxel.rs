//! Sparse voxel grid.
//!
//! Voxels live in a map keyed by integer cell coordinates plus octree depth;
//! depth-0 cells have edge `voxel_size` and each subdivision halves the edge.
//! A voxel carries a feature vector and up to [`MAX_GAUSSIANS_PER_VOXEL`]
//! offsets; in neural mode four shared MLPs decode attributes from the
//! feature, in direct mode the voxel stores explicit primitives. Training
//! registers positional gradient norms per voxel, and the periodic evaluation
//! subdivides hot voxels and discards unused ones.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::GaussianPrimitive;
use crate::mlp::Mlp;
use crate::rng::SplitMix64;

pub const FEATURE_DIM: usize = 32;
pub const MAX_GAUSSIANS_PER_VOXEL: usize = 10;
pub const MAX_DEPTH: u8 = 3;
/// Mean positional-gradient norm above which a voxel subdivides.
pub const GRADIENT_THRESHOLD: f64 = 2e-4;
/// Registration cadence in training iterations.
pub const EVAL_INTERVAL: usize = 500;

/// Grid cell address: integer coordinates at a given octree depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelKey {
    pub cell: [i64; 3],
    pub depth: u8,
}

impl std::fmt::Display for VoxelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{})@{}",
            self.cell[0], self.cell[1], self.cell[2], self.depth
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Voxels hold explicit primitives.
    Direct,
    /// Attributes are decoded from features by the shared decoders.
    Neural,
}

/// One voxel cell.
#[derive(Debug, Clone)]
pub struct FeatureVoxel {
    pub center: Vector3<f64>,
    pub depth: u8,
    pub feature: Vec<f64>,
    /// Gaussian anchor points relative to the cell, each component in
    /// [-1/2, 1/2] of the edge length.
    pub offsets: Vec<Vector3<f64>>,
    /// Explicit primitives (direct mode), parallel to `offsets`.
    pub primitives: Vec<GaussianPrimitive>,
    /// Original insertion indices of `primitives`, for order-preserving
    /// serialization (direct mode).
    pub source_indices: Vec<usize>,
    grad_sum: f64,
    grad_count: u64,
    usage_count: u64,
}

impl FeatureVoxel {
    /// Fresh voxel with zeroed feature, no offsets, zeroed counters.
    pub fn new_at(center: Vector3<f64>, depth: u8) -> Self {
        FeatureVoxel {
            center,
            depth,
            feature: vec![0.0; FEATURE_DIM],
            offsets: Vec::new(),
            primitives: Vec::new(),
            source_indices: Vec::new(),
            grad_sum: 0.0,
            grad_count: 0,
            usage_count: 0,
        }
    }

    /// Mean of the gradient norms received since the last evaluation.
    pub fn accumulated_gradient(&self) -> f64 {
        if self.grad_count == 0 {
            0.0
        } else {
            self.grad_sum / self.grad_count as f64
        }
    }

    pub fn usage_count(&self) -> u64 {
        self.usage_count
    }
}

/// The four shared attribute decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSet {
    pub alpha: Mlp,
    pub rotation: Mlp,
    pub scale: Mlp,
    pub color: Mlp,
}

impl DecoderSet {
    /// Seeded init. Alpha and color take the feature plus the view
    /// direction; all decoders emit one attribute set per offset slot.
    pub fn seeded(seed: u64) -> Self {
        let m = MAX_GAUSSIANS_PER_VOXEL;
        DecoderSet {
            alpha: Mlp::seeded(&[FEATURE_DIM + 3, 32, 32, m], seed, 0xA),
            rotation: Mlp::seeded(&[FEATURE_DIM, 32, 32, 4 * m], seed, 0xB),
            scale: Mlp::seeded(&[FEATURE_DIM, 32, 32, 3 * m], seed, 0xC),
            color: Mlp::seeded(&[FEATURE_DIM + 3, 32, 32, 3 * m], seed, 0xD),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = MAX_GAUSSIANS_PER_VOXEL;
        let expect = [
            (&self.alpha, FEATURE_DIM + 3, m, "alpha"),
            (&self.rotation, FEATURE_DIM, 4 * m, "rotation"),
            (&self.scale, FEATURE_DIM, 3 * m, "scale"),
            (&self.color, FEATURE_DIM + 3, 3 * m, "color"),
        ];
        for (mlp, ins, outs, name) in expect {
            if mlp.input_dim() != ins || mlp.output_dim() != outs {
                return Err(Error::parse(
                    format!("decoder_weights.{name}"),
                    format!(
                        "expected {ins} inputs and {outs} outputs, got {} and {}",
                        mlp.input_dim(),
                        mlp.output_dim()
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sparse voxel grid with optional neural decoders.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    voxel_size: f64,
    mode: GridMode,
    voxels: BTreeMap<VoxelKey, FeatureVoxel>,
    pub decoders: Option<DecoderSet>,
}

impl SparseVoxelGrid {
    pub fn empty(voxel_size: f64, mode: GridMode) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "voxel_size must be positive, got {voxel_size}"
            )));
        }
        Ok(SparseVoxelGrid {
            voxel_size,
            mode,
            voxels: BTreeMap::new(),
            decoders: None,
        })
    }

    /// Builds a neural grid from a point cloud: one voxel per occupied
    /// depth-0 cell, offsets at the cell-relative point positions (up to
    /// [`MAX_GAUSSIANS_PER_VOXEL`], in input order), features seeded
    /// uniformly in [-0.1, 0.1].
    pub fn init_from_points(points: &[Vector3<f64>], voxel_size: f64, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("no points to initialize from".into()));
        }
        let mut grid = SparseVoxelGrid::empty(voxel_size, GridMode::Neural)?;
        for p in points {
            let key = grid.key_for(p, 0);
            let center = grid.center_of(&key);
            let edge = grid.edge_length(0);
            let voxel = grid
                .voxels
                .entry(key)
                .or_insert_with(|| FeatureVoxel::new_at(center, 0));
            if voxel.offsets.len() < MAX_GAUSSIANS_PER_VOXEL {
                voxel.offsets.push((p - center) / edge);
            }
        }
        for (key, voxel) in grid.voxels.iter_mut() {
            let mut rng = SplitMix64::derived(
                seed,
                &[
                    key.cell[0] as u64,
                    key.cell[1] as u64,
                    key.cell[2] as u64,
                    key.depth as u64,
                ],
            );
            for f in voxel.feature.iter_mut() {
                *f = rng.uniform(-0.1, 0.1);
            }
        }
        grid.decoders = Some(DecoderSet::seeded(seed));
        Ok(grid)
    }

    /// Inserts an explicit primitive into a direct-mode grid, snapping to
    /// the depth-0 cell containing its position.
    pub fn insert_direct(&mut self, primitive: GaussianPrimitive, source_index: usize) -> Result<()> {
        if self.mode != GridMode::Direct {
            return Err(Error::InvalidParameter(
                "insert_direct requires a direct-mode grid".into(),
            ));
        }
        let key = self.key_for(&primitive.position, 0);
        let center = self.center_of(&key);
        let edge = self.edge_length(0);
        let voxel = self
            .voxels
            .entry(key)
            .or_insert_with(|| FeatureVoxel::new_at(center, 0));
        if voxel.primitives.len() >= MAX_GAUSSIANS_PER_VOXEL {
            return Err(Error::InvalidParameter(format!(
                "voxel {key} already holds {MAX_GAUSSIANS_PER_VOXEL} gaussians; reduce voxel_size"
            )));
        }
        voxel.offsets.push((primitive.position - center) / edge);
        voxel.primitives.push(primitive);
        voxel.source_indices.push(source_index);
        Ok(())
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn edge_length(&self, depth: u8) -> f64 {
        self.voxel_size / (1u64 << depth) as f64
    }

    /// Cell key containing `p` at `depth`.
    pub fn key_for(&self, p: &Vector3<f64>, depth: u8) -> VoxelKey {
        let edge = self.edge_length(depth);
        VoxelKey {
            cell: [
                (p.x / edge).floor() as i64,
                (p.y / edge).floor() as i64,
                (p.z / edge).floor() as i64,
            ],
            depth,
        }
    }

    pub fn center_of(&self, key: &VoxelKey) -> Vector3<f64> {
        let edge = self.edge_length(key.depth);
        Vector3::new(
            (key.cell[0] as f64 + 0.5) * edge,
            (key.cell[1] as f64 + 0.5) * edge,
            (key.cell[2] as f64 + 0.5) * edge,
        )
    }

    /// World-space extent `[min, max)` of a cell.
    pub fn extent_of(&self, key: &VoxelKey) -> (Vector3<f64>, Vector3<f64>) {
        let edge = self.edge_length(key.depth);
        let min = Vector3::new(
            key.cell[0] as f64 * edge,
            key.cell[1] as f64 * edge,
            key.cell[2] as f64 * edge,
        );
        (min, min.add_scalar(edge))
    }

    pub fn voxels(&self) -> impl Iterator<Item = (&VoxelKey, &FeatureVoxel)> {
        self.voxels.iter()
    }

    pub fn voxel(&self, key: &VoxelKey) -> Option<&FeatureVoxel> {
        self.voxels.get(key)
    }

    pub fn voxel_mut(&mut self, key: &VoxelKey) -> Option<&mut FeatureVoxel> {
        self.voxels.get_mut(key)
    }

    pub fn keys(&self) -> Vec<VoxelKey> {
        self.voxels.keys().copied().collect()
    }

    pub fn insert_voxel(&mut self, key: VoxelKey, voxel: FeatureVoxel) {
        self.voxels.insert(key, voxel);
    }

    /// Generates primitives for every voxel, tagged with the source voxel.
    ///
    /// Direct mode returns the stored primitives verbatim. Neural mode
    /// decodes attributes from features (the view direction conditions the
    /// alpha and color decoders, so a camera position is required) and hides
    /// primitives whose decoded opacity is not positive.
    pub fn generate_gaussians(
        &self,
        camera_position: Option<&Vector3<f64>>,
    ) -> Result<Vec<(VoxelKey, GaussianPrimitive)>> {
        let mut out = Vec::new();
        for key in self.voxels.keys() {
            for g in self.generate_voxel_gaussians(key, camera_position)? {
                out.push((*key, g));
            }
        }
        Ok(out)
    }

    /// Primitives generated by a single voxel (the finite-difference fitter
    /// re-decodes only the voxel a probed parameter belongs to).
    pub fn generate_voxel_gaussians(
        &self,
        key: &VoxelKey,
        camera_position: Option<&Vector3<f64>>,
    ) -> Result<Vec<GaussianPrimitive>> {
        let voxel = self
            .voxels
            .get(key)
            .ok_or_else(|| Error::InvalidId(key.to_string()))?;
        match self.mode {
            GridMode::Direct => Ok(voxel.primitives.clone()),
            GridMode::Neural => {
                let cam = camera_position.ok_or(Error::MissingCamera)?;
                let decoders = self.decoders.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("neural grid has no decoders".into())
                })?;
                self.decode_voxel(decoders, voxel, cam)
            }
        }
    }

    fn decode_voxel(
        &self,
        decoders: &DecoderSet,
        voxel: &FeatureVoxel,
        camera_position: &Vector3<f64>,
    ) -> Result<Vec<GaussianPrimitive>> {
        let mut out = Vec::with_capacity(voxel.offsets.len());
        let edge = self.edge_length(voxel.depth);
        let view = voxel.center - camera_position;
        let view = if view.norm() > 1e-12 {
            view / view.norm()
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        };
        let mut conditioned = Vec::with_capacity(FEATURE_DIM + 3);
        conditioned.extend_from_slice(&voxel.feature);
        conditioned.extend_from_slice(&[view.x, view.y, view.z]);

        let alphas = decoders.alpha.forward(&conditioned);
        let rotations = decoders.rotation.forward(&voxel.feature);
        let scales = decoders.scale.forward(&voxel.feature);
        let colors = decoders.color.forward(&conditioned);

        for (j, offset) in voxel.offsets.iter().enumerate() {
            // Opacity squashes to (-1, 1); non-positive values hide the
            // primitive for this view.
            let opacity = alphas[j].tanh();
            if opacity <= 0.0 {
                continue;
            }
            let q = nalgebra::Quaternion::new(
                rotations[4 * j],
                rotations[4 * j + 1],
                rotations[4 * j + 2],
                rotations[4 * j + 3],
            );
            let rotation = if q.norm() > 1e-9 {
                UnitQuaternion::from_quaternion(q)
            } else {
                UnitQuaternion::identity()
            };
            let scale = Vector3::new(
                edge * scales[3 * j].clamp(-6.0, 2.0).exp(),
                edge * scales[3 * j + 1].clamp(-6.0, 2.0).exp(),
                edge * scales[3 * j + 2].clamp(-6.0, 2.0).exp(),
            );
            let color = [
                sigmoid(colors[3 * j]),
                sigmoid(colors[3 * j + 1]),
                sigmoid(colors[3 * j + 2]),
            ];
            let position = voxel.center + offset * edge;
            out.push(GaussianPrimitive::new(position, rotation, scale, opacity, color)?);
        }
        Ok(out)
    }

    /// Folds positional-gradient norms into their voxels and marks the
    /// voxels used. One entry per visible generated primitive.
    pub fn register_gradients(&mut self, entries: &[(VoxelKey, f64)]) -> Result<()> {
        for (key, _) in entries {
            if !self.voxels.contains_key(key) {
                return Err(Error::InvalidId(key.to_string()));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (key, norm) in entries {
            let voxel = self.voxels.get_mut(key).unwrap();
            voxel.grad_sum += norm.max(0.0);
            voxel.grad_count += 1;
            if seen.insert(*key) {
                voxel.usage_count += 1;
            }
        }
        Ok(())
    }

    /// Periodic registration: subdivides voxels whose mean gradient exceeds
    /// [`GRADIENT_THRESHOLD`] (depth permitting), prunes voxels unused over
    /// the window, and resets all counters.
    ///
    /// Subdivision copies the parent feature into all eight children. In
    /// neural mode the offset pattern is rescaled into each child extent; in
    /// direct mode the explicit primitives are redistributed into the child
    /// that contains them.
    pub fn evaluate_voxels(&mut self) -> VoxelEvaluation {
        let mut stats = VoxelEvaluation::default();
        let keys: Vec<VoxelKey> = self.voxels.keys().copied().collect();
        for key in keys {
            let grad = self.voxels[&key].accumulated_gradient();
            let depth = key.depth;
            if grad > GRADIENT_THRESHOLD && depth < MAX_DEPTH {
                let parent = self.voxels.remove(&key).unwrap();
                self.subdivide_into_children(&key, parent);
                stats.subdivided += 1;
            } else if self.voxels[&key].usage_count == 0 {
                self.voxels.remove(&key);
                stats.pruned += 1;
            }
        }
        for voxel in self.voxels.values_mut() {
            voxel.grad_sum = 0.0;
            voxel.grad_count = 0;
            voxel.usage_count = 0;
        }
        stats
    }

    fn subdivide_into_children(&mut self, key: &VoxelKey, parent: FeatureVoxel) {
        let child_depth = key.depth + 1;
        for dz in 0..2i64 {
            for dy in 0..2i64 {
                for dx in 0..2i64 {
                    let child_key = VoxelKey {
                        cell: [
                            2 * key.cell[0] + dx,
                            2 * key.cell[1] + dy,
                            2 * key.cell[2] + dz,
                        ],
                        depth: child_depth,
                    };
                    let mut child = FeatureVoxel::new_at(self.center_of(&child_key), child_depth);
                    child.feature = parent.feature.clone();
                    if self.mode == GridMode::Neural {
                        child.offsets = parent.offsets.clone();
                    }
                    self.voxels.insert(child_key, child);
                }
            }
        }
        if self.mode == GridMode::Direct {
            let edge = self.edge_length(child_depth);
            for (g, src) in parent.primitives.into_iter().zip(parent.source_indices) {
                let child_key = self.key_for(&g.position, child_depth);
                let center = self.center_of(&child_key);
                if let Some(child) = self.voxels.get_mut(&child_key) {
                    child.offsets.push((g.position - center) / edge);
                    child.primitives.push(g);
                    child.source_indices.push(src);
                }
            }
        }
    }
}

/// Counts from one [`SparseVoxelGrid::evaluate_voxels`] pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VoxelEvaluation {
    pub subdivided: usize,
    pub pruned: usize,
}
