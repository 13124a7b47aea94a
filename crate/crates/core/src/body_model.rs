//! Linear-blend-skinning body model.
//!
//! A model maps [`BodyParams`] (24 joint rotations in 6D form plus 10 shape
//! coefficients) to mesh vertices and skeleton joints. Pose-dependent
//! corrective blend shapes are not modelled.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rotations::{rot6d_backward, rot6d_to_rotmat, Rot6D};

pub const NUM_JOINTS: usize = 24;
pub const NUM_SHAPE: usize = 10;
pub const POSE_DIM: usize = 6 * NUM_JOINTS;
pub const PARAM_DIM: usize = POSE_DIM + NUM_SHAPE;

/// Kinematic tree of the 24-joint human skeleton (root = -1).
pub const SMPL_PARENTS: [i32; NUM_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Pose (one 6D block per joint) and shape coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub pose: [Rot6D; NUM_JOINTS],
    pub shape: [f64; NUM_SHAPE],
}

impl Default for BodyParams {
    fn default() -> Self {
        Self::neutral()
    }
}

impl BodyParams {
    /// Identity rotations and zero shape.
    pub fn neutral() -> Self {
        BodyParams {
            pose: [Rot6D::IDENTITY; NUM_JOINTS],
            shape: [0.0; NUM_SHAPE],
        }
    }

    /// Pose blocks in joint order followed by the shape coefficients.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(PARAM_DIM);
        for block in &self.pose {
            out.extend_from_slice(&block.0);
        }
        out.extend_from_slice(&self.shape);
        out
    }

    /// Inverse of [`BodyParams::flatten`]; checks length and pose decodability.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        let params = Self::from_flat_unchecked(values)?;
        params.validate()?;
        Ok(params)
    }

    pub(crate) fn from_flat_unchecked(values: &[f64]) -> Result<Self> {
        if values.len() != PARAM_DIM {
            return Err(invalid(format!(
                "parameter vector has length {}, expected {PARAM_DIM}",
                values.len()
            )));
        }
        let pose = std::array::from_fn(|j| Rot6D(std::array::from_fn(|i| values[6 * j + i])));
        let shape = std::array::from_fn(|i| values[POSE_DIM + i]);
        Ok(BodyParams { pose, shape })
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|v| !v.is_finite()) {
            return Err(invalid("shape coefficients must be finite"));
        }
        for (j, block) in self.pose.iter().enumerate() {
            rot6d_to_rotmat(block).map_err(|e| invalid(format!("pose block {j}: {e}")))?;
        }
        Ok(())
    }

    pub fn rotations(&self) -> Result<[Matrix3<f64>; NUM_JOINTS]> {
        let mut out = [Matrix3::identity(); NUM_JOINTS];
        for (j, block) in self.pose.iter().enumerate() {
            out[j] = rot6d_to_rotmat(block)?.into_inner();
        }
        Ok(out)
    }
}

/// Body part a vertex belongs to, used for part-aware distance weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartLabel {
    Head,
    Hand,
    Foot,
    Limb,
    Torso,
}

impl PartLabel {
    pub const ALL: [PartLabel; 5] = [
        PartLabel::Head,
        PartLabel::Hand,
        PartLabel::Foot,
        PartLabel::Limb,
        PartLabel::Torso,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PartLabel::Head => "head",
            PartLabel::Hand => "hand",
            PartLabel::Foot => "foot",
            PartLabel::Limb => "limb",
            PartLabel::Torso => "torso",
        }
    }
}

impl std::str::FromStr for PartLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown part label `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshVertices(pub Vec<Vector3<f64>>);

impl MeshVertices {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joints3D(pub [Vector3<f64>; NUM_JOINTS]);

/// Intermediate quantities of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub shaped: Vec<Vector3<f64>>,
    pub rest_joints: [Vector3<f64>; NUM_JOINTS],
    pub local: [Matrix3<f64>; NUM_JOINTS],
    pub global: [Matrix3<f64>; NUM_JOINTS],
    pub offsets: [Vector3<f64>; NUM_JOINTS],
    pub vertices: Vec<Vector3<f64>>,
}

impl ForwardCache {
    pub fn posed_joints(&self) -> Joints3D {
        Joints3D(std::array::from_fn(|k| {
            self.rest_joints[k] + self.offsets[k]
        }))
    }
}

/// Immutable body model. Construct with [`BodyModel::new`],
/// [`load_model`] or [`gen_toy_model`]; all invariants are checked.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    template: Vec<Vector3<f64>>,
    shape_dirs: Vec<[[f64; NUM_SHAPE]; 3]>,
    skin_weights: Vec<[f64; NUM_JOINTS]>,
    joint_regressor: Vec<Vec<f64>>,
    parents: [i32; NUM_JOINTS],
    part_labels: Vec<PartLabel>,
    meta: serde_json::Value,
    order: [usize; NUM_JOINTS],
}

/// On-disk JSON layout of a body model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub template: Vec<Vec<f64>>,
    pub shape_dirs: Vec<Vec<Vec<f64>>>,
    pub skin_weights: Vec<Vec<f64>>,
    pub joint_regressor: Vec<Vec<f64>>,
    pub parents: Vec<i64>,
    pub part_labels: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn load_err(field: &'static str, message: impl Into<String>) -> Error {
    Error::ModelLoad {
        field,
        message: message.into(),
    }
}

fn check_finite(field: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(load_err(field, "contains non-finite values"));
    }
    Ok(())
}

/// Returns joints ordered so that every parent precedes its children.
fn topological_order(parents: &[i32; NUM_JOINTS]) -> Result<[usize; NUM_JOINTS]> {
    let roots = parents.iter().filter(|&&p| p == -1).count();
    if roots != 1 {
        return Err(load_err(
            "parents",
            format!("expected exactly one root, found {roots}"),
        ));
    }
    for (k, &p) in parents.iter().enumerate() {
        if p != -1 && !(0..NUM_JOINTS as i32).contains(&p) {
            return Err(load_err(
                "parents",
                format!("joint {k} has invalid parent {p}"),
            ));
        }
    }
    let mut depth = [0usize; NUM_JOINTS];
    for k in 0..NUM_JOINTS {
        let mut cur = k;
        let mut steps = 0;
        while parents[cur] != -1 {
            cur = parents[cur] as usize;
            steps += 1;
            if steps > NUM_JOINTS {
                return Err(load_err("parents", format!("cycle through joint {k}")));
            }
        }
        depth[k] = steps;
    }
    let mut order: [usize; NUM_JOINTS] = std::array::from_fn(|k| k);
    order.sort_by_key(|&k| (depth[k], k));
    Ok(order)
}

impl BodyModel {
    pub fn new(file: ModelFile) -> Result<Self> {
        let v = file.template.len();
        if v == 0 {
            return Err(load_err("template", "model has no vertices"));
        }
        let mut template = Vec::with_capacity(v);
        for (i, row) in file.template.iter().enumerate() {
            if row.len() != 3 {
                return Err(load_err(
                    "template",
                    format!("row {i} has {} entries, expected 3", row.len()),
                ));
            }
            check_finite("template", row)?;
            template.push(Vector3::new(row[0], row[1], row[2]));
        }

        if file.shape_dirs.len() != v {
            return Err(load_err(
                "shape_dirs",
                format!("{} rows for {v} vertices", file.shape_dirs.len()),
            ));
        }
        let mut shape_dirs = Vec::with_capacity(v);
        for (i, block) in file.shape_dirs.iter().enumerate() {
            if block.len() != 3 || block.iter().any(|r| r.len() != NUM_SHAPE) {
                return Err(load_err(
                    "shape_dirs",
                    format!("vertex {i} is not 3x{NUM_SHAPE}"),
                ));
            }
            let mut out = [[0.0; NUM_SHAPE]; 3];
            for c in 0..3 {
                check_finite("shape_dirs", &block[c])?;
                out[c].copy_from_slice(&block[c]);
            }
            shape_dirs.push(out);
        }

        if file.skin_weights.len() != v {
            return Err(load_err(
                "skin_weights",
                format!("{} rows for {v} vertices", file.skin_weights.len()),
            ));
        }
        let mut skin_weights = Vec::with_capacity(v);
        for (i, row) in file.skin_weights.iter().enumerate() {
            if row.len() != NUM_JOINTS {
                return Err(load_err(
                    "skin_weights",
                    format!("row {i} has {} entries, expected {NUM_JOINTS}", row.len()),
                ));
            }
            check_finite("skin_weights", row)?;
            if row.iter().any(|w| *w < 0.0) {
                return Err(load_err(
                    "skin_weights",
                    format!("row {i} has negative weights"),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(load_err(
                    "skin_weights",
                    format!("row {i} sums to {sum}, expected 1"),
                ));
            }
            let mut out = [0.0; NUM_JOINTS];
            out.copy_from_slice(row);
            skin_weights.push(out);
        }

        if file.joint_regressor.len() != NUM_JOINTS {
            return Err(load_err(
                "joint_regressor",
                format!("{} rows, expected {NUM_JOINTS}", file.joint_regressor.len()),
            ));
        }
        for (k, row) in file.joint_regressor.iter().enumerate() {
            if row.len() != v {
                return Err(load_err(
                    "joint_regressor",
                    format!("row {k} has {} columns for {v} vertices", row.len()),
                ));
            }
            check_finite("joint_regressor", row)?;
            if row.iter().any(|w| *w < 0.0) {
                return Err(load_err(
                    "joint_regressor",
                    format!("row {k} has negative entries"),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(load_err(
                    "joint_regressor",
                    format!("row {k} sums to {sum}, expected 1"),
                ));
            }
        }

        if file.parents.len() != NUM_JOINTS {
            return Err(load_err(
                "parents",
                format!("{} entries, expected {NUM_JOINTS}", file.parents.len()),
            ));
        }
        let parents: [i32; NUM_JOINTS] =
            std::array::from_fn(|k| i32::try_from(file.parents[k]).unwrap_or(i32::MIN));
        let order = topological_order(&parents)?;

        if file.part_labels.len() != v {
            return Err(load_err(
                "part_labels",
                format!("{} labels for {v} vertices", file.part_labels.len()),
            ));
        }
        let part_labels = file
            .part_labels
            .iter()
            .map(|s| s.parse::<PartLabel>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| load_err("part_labels", e.to_string()))?;

        Ok(BodyModel {
            template,
            shape_dirs,
            skin_weights,
            joint_regressor: file.joint_regressor,
            parents,
            part_labels,
            meta: file.meta,
            order,
        })
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            template: self.template.iter().map(|p| vec![p.x, p.y, p.z]).collect(),
            shape_dirs: self
                .shape_dirs
                .iter()
                .map(|b| b.iter().map(|r| r.to_vec()).collect())
                .collect(),
            skin_weights: self.skin_weights.iter().map(|r| r.to_vec()).collect(),
            joint_regressor: self.joint_regressor.clone(),
            parents: self.parents.iter().map(|&p| p as i64).collect(),
            part_labels: self
                .part_labels
                .iter()
                .map(|l| l.as_str().to_string())
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string(&self.to_file())?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn shape_dirs(&self) -> &[[[f64; NUM_SHAPE]; 3]] {
        &self.shape_dirs
    }

    pub fn parents(&self) -> &[i32; NUM_JOINTS] {
        &self.parents
    }

    pub fn part_labels(&self) -> &[PartLabel] {
        &self.part_labels
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.parents[joint];
        (p >= 0).then_some(p as usize)
    }

    /// Template deformed by the shape blend shapes.
    pub fn shaped_template(&self, shape: &[f64; NUM_SHAPE]) -> Vec<Vector3<f64>> {
        self.template
            .iter()
            .zip(&self.shape_dirs)
            .map(|(t, dirs)| {
                let mut p = *t;
                for c in 0..3 {
                    p[c] += dirs[c].iter().zip(shape).map(|(d, b)| d * b).sum::<f64>();
                }
                p
            })
            .collect()
    }

    pub(crate) fn regress(&self, verts: &[Vector3<f64>]) -> [Vector3<f64>; NUM_JOINTS] {
        std::array::from_fn(|k| {
            self.joint_regressor[k]
                .iter()
                .zip(verts)
                .filter(|(w, _)| **w != 0.0)
                .fold(Vector3::zeros(), |acc, (w, p)| acc + p * *w)
        })
    }

    pub fn regress_joints(&self, verts: &MeshVertices) -> Result<Joints3D> {
        if verts.len() != self.num_vertices() {
            return Err(invalid(format!(
                "{} vertices supplied to a model with {}",
                verts.len(),
                self.num_vertices()
            )));
        }
        Ok(Joints3D(self.regress(&verts.0)))
    }

    /// Returns posed vertices and posed skeleton joints.
    pub fn forward(&self, params: &BodyParams) -> Result<(MeshVertices, Joints3D)> {
        let cache = self.forward_cached(params)?;
        let joints = cache.posed_joints();
        Ok((MeshVertices(cache.vertices), joints))
    }

    pub fn vertices(&self, params: &BodyParams) -> Result<MeshVertices> {
        Ok(MeshVertices(self.forward_cached(params)?.vertices))
    }

    /// Forward pass in displacement form:
    /// `v' = v + sum_k w_k ((G_k - I)(v - J_k) + d_k)`, where `G_k` is the
    /// global rotation of joint `k` and `d_k` the displacement of its posed
    /// position from the rest position. Identity poses reproduce the shaped
    /// template bit-for-bit.
    pub(crate) fn forward_cached(&self, params: &BodyParams) -> Result<ForwardCache> {
        if params.shape.iter().any(|v| !v.is_finite()) {
            return Err(invalid("shape coefficients must be finite"));
        }
        let local = params.rotations()?;
        let shaped = self.shaped_template(&params.shape);
        let rest_joints = self.regress(&shaped);

        let mut global = [Matrix3::identity(); NUM_JOINTS];
        let mut offsets = [Vector3::zeros(); NUM_JOINTS];
        for &k in &self.order {
            match self.parent(k) {
                None => global[k] = local[k],
                Some(p) => {
                    global[k] = global[p] * local[k];
                    offsets[k] = offsets[p]
                        + (global[p] - Matrix3::identity()) * (rest_joints[k] - rest_joints[p]);
                }
            }
        }
        let deltas: [Matrix3<f64>; NUM_JOINTS] =
            std::array::from_fn(|k| global[k] - Matrix3::identity());

        let vertices = shaped
            .iter()
            .zip(&self.skin_weights)
            .map(|(v, weights)| {
                let mut disp = Vector3::zeros();
                for (k, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        disp += (deltas[k] * (v - rest_joints[k]) + offsets[k]) * w;
                    }
                }
                v + disp
            })
            .collect();

        Ok(ForwardCache {
            shaped,
            rest_joints,
            local,
            global,
            offsets,
            vertices,
        })
    }

    /// Vector-Jacobian product of the forward pass with respect to the pose
    /// (6D blocks) and shape, given `dL/dv'` for every posed vertex.
    pub(crate) fn backward(
        &self,
        params: &BodyParams,
        cache: &ForwardCache,
        grad_vertices: &[Vector3<f64>],
    ) -> Result<([[f64; 6]; NUM_JOINTS], [f64; NUM_SHAPE])> {
        let identity = Matrix3::<f64>::identity();
        let mut g_shaped: Vec<Vector3<f64>> = grad_vertices.to_vec();
        let mut sum_g = [Vector3::<f64>::zeros(); NUM_JOINTS];
        let mut outer_g = [Matrix3::<f64>::zeros(); NUM_JOINTS];

        for (i, (v, weights)) in cache.shaped.iter().zip(&self.skin_weights).enumerate() {
            let g = grad_vertices[i];
            for (k, &w) in weights.iter().enumerate() {
                if w != 0.0 {
                    let wg = g * w;
                    sum_g[k] += wg;
                    outer_g[k] += wg * v.transpose();
                    g_shaped[i] += (cache.global[k] - identity).transpose() * wg;
                }
            }
        }

        let mut g_global = [Matrix3::<f64>::zeros(); NUM_JOINTS];
        let mut g_offset = [Vector3::<f64>::zeros(); NUM_JOINTS];
        let mut g_joint = [Vector3::<f64>::zeros(); NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            let j = cache.rest_joints[k];
            g_global[k] = outer_g[k] - sum_g[k] * j.transpose();
            g_joint[k] = -(cache.global[k] - identity).transpose() * sum_g[k];
            g_offset[k] = sum_g[k];
        }

        let mut g_local = [Matrix3::<f64>::zeros(); NUM_JOINTS];
        for &k in self.order.iter().rev() {
            match self.parent(k) {
                None => g_local[k] += g_global[k],
                Some(p) => {
                    let bone = cache.rest_joints[k] - cache.rest_joints[p];
                    let gd = g_offset[k];
                    let dp = cache.global[p] - identity;
                    g_offset[p] += gd;
                    let gg = g_global[k];
                    g_global[p] += gd * bone.transpose() + gg * cache.local[k].transpose();
                    g_joint[k] += dp.transpose() * gd;
                    g_joint[p] -= dp.transpose() * gd;
                    g_local[k] += cache.global[p].transpose() * gg;
                }
            }
        }

        for (k, row) in self.joint_regressor.iter().enumerate() {
            for (i, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    g_shaped[i] += g_joint[k] * w;
                }
            }
        }

        let mut g_shape = [0.0; NUM_SHAPE];
        for (dirs, g) in self.shape_dirs.iter().zip(&g_shaped) {
            for c in 0..3 {
                for (s, d) in g_shape.iter_mut().zip(&dirs[c]) {
                    *s += d * g[c];
                }
            }
        }

        let mut g_pose = [[0.0; 6]; NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            g_pose[k] = rot6d_backward(&params.pose[k], &g_local[k])?;
        }
        Ok((g_pose, g_shape))
    }

    /// Transposed regressor product, `dL/dv = J^T dL/dJ`.
    pub(crate) fn regress_backward(
        &self,
        grad_joints: &[Vector3<f64>; NUM_JOINTS],
    ) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); self.num_vertices()];
        for (k, row) in self.joint_regressor.iter().enumerate() {
            for (i, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    out[i] += grad_joints[k] * w;
                }
            }
        }
        out
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BodyModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    BodyModel::new(file)
}

/// Rest positions (meters) of the toy skeleton, pelvis at the origin.
const TOY_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.01],
    [0.10, -0.47, 0.0],
    [-0.10, -0.47, 0.0],
    [0.0, 0.25, 0.0],
    [0.09, -0.87, -0.03],
    [-0.09, -0.87, -0.03],
    [0.0, 0.30, 0.02],
    [0.11, -0.93, 0.09],
    [-0.11, -0.93, 0.09],
    [0.0, 0.51, 0.0],
    [0.08, 0.42, 0.0],
    [-0.08, 0.42, 0.0],
    [0.0, 0.60, 0.04],
    [0.18, 0.45, 0.0],
    [-0.18, 0.45, 0.0],
    [0.43, 0.44, -0.02],
    [-0.43, 0.44, -0.02],
    [0.68, 0.45, 0.0],
    [-0.68, 0.45, 0.0],
    [0.76, 0.44, -0.01],
    [-0.76, 0.44, -0.01],
];

/// Part label of every vertex owned by a toy-model joint.
pub fn toy_joint_label(joint: usize) -> PartLabel {
    match joint {
        12 | 15 => PartLabel::Head,
        22 | 23 => PartLabel::Hand,
        10 | 11 => PartLabel::Foot,
        0..=3 | 6 | 9 | 13 | 14 => PartLabel::Torso,
        _ => PartLabel::Limb,
    }
}

/// Deterministic desk-scale humanoid: `verts_per_joint` vertices on a ring
/// around each rest joint, perpendicular to the incoming bone.
pub fn gen_toy_model(seed: u64, verts_per_joint: usize) -> Result<BodyModel> {
    if verts_per_joint < 3 {
        return Err(invalid(format!(
            "verts_per_joint must be at least 3, got {verts_per_joint}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = verts_per_joint;
    let v_count = n * NUM_JOINTS;

    let mut template = Vec::with_capacity(v_count);
    let mut skin_weights = Vec::with_capacity(v_count);
    let mut part_labels = Vec::with_capacity(v_count);
    let mut joint_regressor = vec![vec![0.0; v_count]; NUM_JOINTS];

    for k in 0..NUM_JOINTS {
        let center = Vector3::from(TOY_JOINTS[k]);
        let parent = SMPL_PARENTS[k];
        let axis = if parent < 0 {
            Vector3::y()
        } else {
            (center - Vector3::from(TOY_JOINTS[parent as usize])).normalize()
        };
        let helper = if axis.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::z()
        };
        let u = axis.cross(&helper).normalize();
        let w = axis.cross(&u);
        let radius = rng.random_range(0.03..0.05);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);

        for i in 0..n {
            let angle = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let p = center + (u * angle.cos() + w * angle.sin()) * radius;
            template.push(vec![p.x, p.y, p.z]);

            let mut weights = vec![0.0; NUM_JOINTS];
            if parent < 0 {
                weights[k] = 1.0;
            } else {
                weights[k] = 0.8;
                weights[parent as usize] = 0.2;
            }
            skin_weights.push(weights);
            part_labels.push(toy_joint_label(k).as_str().to_string());
            joint_regressor[k][k * n + i] = 1.0 / n as f64;
        }
    }

    let shape_dirs = (0..v_count)
        .map(|_| {
            (0..3)
                .map(|_| {
                    (0..NUM_SHAPE)
                        .map(|_| 0.01 * rng.random_range(-1.0..1.0))
                        .collect()
                })
                .collect()
        })
        .collect();

    BodyModel::new(ModelFile {
        template,
        shape_dirs,
        skin_weights,
        joint_regressor,
        parents: SMPL_PARENTS.iter().map(|&p| p as i64).collect(),
        part_labels,
        meta: serde_json::json!({
            "generator": "toy",
            "seed": seed,
            "verts_per_joint": verts_per_joint,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::{axis_angle_to_rotmat, rotmat_to_rot6d, AxisAngle};
    use approx::assert_abs_diff_eq;

    fn max_diff(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).amax())
            .fold(0.0, f64::max)
    }

    fn random_params(rng: &mut ChaCha8Rng) -> BodyParams {
        let mut p = BodyParams::neutral();
        for block in p.pose.iter_mut() {
            let aa = AxisAngle::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            );
            *block = rotmat_to_rot6d(&axis_angle_to_rotmat(&aa).unwrap());
        }
        for s in p.shape.iter_mut() {
            *s = rng.random_range(-2.0..2.0);
        }
        p
    }

    #[test]
    fn toy_model_is_deterministic() {
        let a = gen_toy_model(7, 5).unwrap();
        let b = gen_toy_model(7, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_toy_model(8, 5).unwrap());
        assert_eq!(gen_toy_model(0, 10).unwrap().num_vertices(), 240);
        assert!(gen_toy_model(0, 2).is_err());
    }

    #[test]
    fn neutral_pose_reproduces_template() {
        let model = gen_toy_model(0, 10).unwrap();
        let (verts, joints) = model.forward(&BodyParams::neutral()).unwrap();
        assert_eq!(verts.0, model.template());
        let rest = model.regress(model.template());
        assert_eq!(joints.0, rest);
        let regressed = model.regress_joints(&verts).unwrap();
        assert_abs_diff_eq!(max_diff(&regressed.0, &rest), 0.0, epsilon = 1e-9);
        for (j, expected) in joints.0.iter().zip(TOY_JOINTS) {
            assert!((j - Vector3::from(expected)).amax() < 1e-12);
        }
    }

    #[test]
    fn unit_shape_adds_blend_shape() {
        let model = gen_toy_model(0, 4).unwrap();
        for k in 0..NUM_SHAPE {
            let mut p = BodyParams::neutral();
            p.shape[k] = 1.0;
            let verts = model.vertices(&p).unwrap();
            for (i, v) in verts.0.iter().enumerate() {
                let dirs = &model.shape_dirs()[i];
                let expected =
                    model.template()[i] + Vector3::new(dirs[0][k], dirs[1][k], dirs[2][k]);
                assert_abs_diff_eq!((v - expected).amax(), 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn root_rotation_is_rigid() {
        let model = gen_toy_model(0, 6).unwrap();
        let r = axis_angle_to_rotmat(&AxisAngle::new(0.3, -1.1, 0.4)).unwrap();
        let mut p = BodyParams::neutral();
        p.pose[0] = rotmat_to_rot6d(&r);
        let (verts, joints) = model.forward(&p).unwrap();
        let root = model.regress(model.template())[0];
        let m = r.matrix();
        for (v, t) in verts.0.iter().zip(model.template()) {
            assert!((v - (m * (t - root) + root)).amax() < 1e-8);
        }
        // the toy root sits at the origin, so this is a plain rotation
        for (v, t) in verts.0.iter().zip(model.template()) {
            assert!((v - m * t).amax() < 1e-8);
        }
        for (j, rest) in joints.0.iter().zip(model.regress(model.template())) {
            assert!((j - (m * (rest - root) + root)).amax() < 1e-8);
        }
    }

    #[test]
    fn shape_linearity_at_fixed_pose() {
        let model = gen_toy_model(0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_params(&mut rng);
        let b1 = random_params(&mut rng).shape;
        let b2 = random_params(&mut rng).shape;
        let with_shape = |s: [f64; NUM_SHAPE]| {
            let mut p = base.clone();
            p.shape = s;
            model.vertices(&p).unwrap().0
        };
        let sum: [f64; NUM_SHAPE] = std::array::from_fn(|i| b1[i] + b2[i]);
        let (v12, v1, v2, v0) = (
            with_shape(sum),
            with_shape(b1),
            with_shape(b2),
            with_shape([0.0; NUM_SHAPE]),
        );
        for i in 0..v0.len() {
            assert!((v12[i] - v1[i] - v2[i] + v0[i]).amax() < 1e-9);
        }
    }

    #[test]
    fn regressor_one_hot_and_uniform() {
        let mut file = gen_toy_model(0, 3).unwrap().to_file();
        let v = file.template.len();
        file.joint_regressor[0] = vec![0.0; v];
        file.joint_regressor[0][5] = 1.0;
        file.joint_regressor[1] = vec![1.0 / v as f64; v];
        let model = BodyModel::new(file).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let verts = model.vertices(&random_params(&mut rng)).unwrap();
        let joints = model.regress_joints(&verts).unwrap();
        assert_eq!(joints.0[0], verts.0[5]);
        let centroid = verts.0.iter().fold(Vector3::zeros(), |a, p| a + p) / v as f64;
        assert!((joints.0[1] - centroid).amax() < 1e-12);
        assert!(model
            .regress_joints(&MeshVertices(verts.0[1..].to_vec()))
            .is_err());
    }

    #[test]
    fn params_flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng);
        let flat = p.flatten();
        assert_eq!(flat.len(), PARAM_DIM);
        assert_eq!(BodyParams::from_flat(&flat).unwrap(), p);
        assert!(BodyParams::from_flat(&flat[1..]).is_err());
        let mut bad = flat.clone();
        bad[..6].copy_from_slice(&[0.0; 6]);
        assert!(BodyParams::from_flat(&bad).is_err());
    }

    #[test]
    fn load_errors_name_the_field() {
        let good = gen_toy_model(0, 3).unwrap().to_file();

        let mut f = good.clone();
        f.skin_weights[4] = f.skin_weights[4].iter().map(|w| w * 0.8).collect();
        match BodyModel::new(f) {
            Err(Error::ModelLoad { field, .. }) => assert_eq!(field, "skin_weights"),
            other => panic!("unexpected {other:?}"),
        }

        let mut f = good.clone();
        f.parents[0] = 3;
        match BodyModel::new(f) {
            Err(Error::ModelLoad { field, .. }) => assert_eq!(field, "parents"),
            other => panic!("unexpected {other:?}"),
        }

        // a cycle with a root still present elsewhere
        let mut f = good.clone();
        f.parents[1] = 4;
        match BodyModel::new(f) {
            Err(Error::ModelLoad { field, message }) => {
                assert_eq!(field, "parents");
                assert!(message.contains("cycle"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut f = good.clone();
        f.parents.pop();
        assert!(matches!(
            BodyModel::new(f),
            Err(Error::ModelLoad {
                field: "parents",
                ..
            })
        ));

        let mut f = good.clone();
        f.part_labels[0] = "tail".into();
        assert!(matches!(
            BodyModel::new(f),
            Err(Error::ModelLoad {
                field: "part_labels",
                ..
            })
        ));

        let mut f = good.clone();
        f.joint_regressor[2][0] += 0.5;
        assert!(matches!(
            BodyModel::new(f),
            Err(Error::ModelLoad {
                field: "joint_regressor",
                ..
            })
        ));

        let mut f = good;
        f.shape_dirs[0].pop();
        assert!(matches!(
            BodyModel::new(f),
            Err(Error::ModelLoad {
                field: "shape_dirs",
                ..
            })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let model = gen_toy_model(3, 4).unwrap();
        model.save(&path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn backward_matches_central_differences() {
        let model = gen_toy_model(1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = random_params(&mut rng);
        let probe: Vec<Vector3<f64>> = (0..model.num_vertices())
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let objective = |p: &BodyParams| -> f64 {
            model
                .vertices(p)
                .unwrap()
                .0
                .iter()
                .zip(&probe)
                .map(|(v, g)| v.dot(g))
                .sum()
        };
        let cache = model.forward_cached(&params).unwrap();
        let (g_pose, g_shape) = model.backward(&params, &cache, &probe).unwrap();
        let h = 1e-6;
        let mut flat = params.flatten();
        for i in 0..PARAM_DIM {
            let orig = flat[i];
            flat[i] = orig + h;
            let up = objective(&BodyParams::from_flat_unchecked(&flat).unwrap());
            flat[i] = orig - h;
            let down = objective(&BodyParams::from_flat_unchecked(&flat).unwrap());
            flat[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = if i < POSE_DIM {
                g_pose[i / 6][i % 6]
            } else {
                g_shape[i - POSE_DIM]
            };
            assert!(
                (analytic - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: {analytic} vs {fd}"
            );
        }
    }
}
