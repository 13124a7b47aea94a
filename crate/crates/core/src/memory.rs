//! Prototype memory: persisted cluster centers, nearest-prototype labels
//! and score-weighted prototype selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, BodyParams, PARAM_DIM};
use crate::clustering::{assign_samples, ClusterResult, Variant};
use crate::distance::{PartWeightMap, PartWeights};
use crate::error::{invalid, Error, Result};
use crate::rotations::{rot6d_to_rotmat, rotmat_to_rot6d};

/// Tolerance on the sum of a score vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryMeta {
    pub variant: Variant,
    pub part_weights: PartWeightMap,
    pub seed: u64,
    pub dataset_digest: String,
}

/// `K` body configurations stored as rows of a `K x 154` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    rows: Vec<BodyParams>,
    meta: MemoryMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub meta: MemoryMeta,
}

fn decode_row(row: usize, values: &[f64]) -> Result<BodyParams> {
    BodyParams::from_flat(values).map_err(|e| Error::MemoryRow {
        row,
        source: Box::new(e),
    })
}

impl PrototypeMemory {
    pub fn new(rows: Vec<BodyParams>, meta: MemoryMeta) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("a memory needs at least one row"));
        }
        for (row, p) in rows.iter().enumerate() {
            p.validate().map_err(|e| Error::MemoryRow {
                row,
                source: Box::new(e),
            })?;
        }
        Ok(PrototypeMemory { rows, meta })
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[BodyParams] {
        &self.rows
    }

    pub fn row(&self, j: usize) -> Option<&BodyParams> {
        self.rows.get(j)
    }

    pub fn meta(&self) -> &MemoryMeta {
        &self.meta
    }

    pub fn to_file(&self) -> MemoryFile {
        MemoryFile {
            k: self.k(),
            dim: PARAM_DIM,
            rows: self.rows.iter().map(BodyParams::flatten).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_file(file: MemoryFile) -> Result<Self> {
        if file.dim != PARAM_DIM {
            return Err(invalid(format!(
                "memory dim is {}, expected {PARAM_DIM}",
                file.dim
            )));
        }
        if file.rows.len() != file.k {
            return Err(invalid(format!(
                "memory declares K = {} but stores {} rows",
                file.k,
                file.rows.len()
            )));
        }
        let rows = file
            .rows
            .iter()
            .enumerate()
            .map(|(row, values)| decode_row(row, values))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, file.meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}

/// Nonnegative scores over the `K` prototypes that sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("score vector is empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("scores must be finite and nonnegative"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("scores sum to {sum}, not 1")));
        }
        Ok(ScoreVector(values))
    }

    pub fn one_hot(k: usize, j: usize) -> Result<Self> {
        if j >= k {
            return Err(invalid(format!(
                "one-hot index {j} out of range for K = {k}"
            )));
        }
        let mut v = vec![0.0; k];
        v[j] = 1.0;
        Ok(ScoreVector(v))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("score vector is empty"));
        }
        Ok(ScoreVector(vec![1.0 / k as f64; k]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the one entry equal to 1 when every other entry is 0.
    pub fn one_hot_index(&self) -> Option<usize> {
        let mut hit = None;
        for (j, &v) in self.0.iter().enumerate() {
            if v == 1.0 && hit.is_none() {
                hit = Some(j);
            } else if v != 0.0 {
                return None;
            }
        }
        hit
    }

    /// Largest score, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = j;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ScoreVector::new(values)
    }
}

impl From<ScoreVector> for Vec<f64> {
    fn from(c: ScoreVector) -> Self {
        c.0
    }
}

/// Memory whose rows are the cluster centers, in cluster order.
pub fn build_memory(result: &ClusterResult) -> Result<PrototypeMemory> {
    let meta = MemoryMeta {
        variant: result.config.variant,
        part_weights: result.config.effective_weight_map(),
        seed: result.config.seed,
        dataset_digest: result.dataset_digest.clone(),
    };
    PrototypeMemory::new(result.centers.clone(), meta)
}

/// Index of and distance to the nearest prototype for every sample.
pub fn nearest_prototypes(
    samples: &[BodyParams],
    memory: &PrototypeMemory,
    model: &BodyModel,
    weights: &PartWeights,
) -> Result<(Vec<usize>, Vec<f64>)> {
    assign_samples(samples, memory.rows(), model, weights)
}

/// One-hot label of the nearest prototype under the weighted vertex
/// distance, ties to the lowest index.
pub fn label_samples(
    samples: &[BodyParams],
    memory: &PrototypeMemory,
    model: &BodyModel,
    weights: &PartWeights,
) -> Result<Vec<ScoreVector>> {
    let (idx, _) = nearest_prototypes(samples, memory, model, weights)?;
    idx.into_iter()
        .map(|j| ScoreVector::one_hot(memory.k(), j))
        .collect()
}

/// `phi = c M`. A one-hot score returns its row unchanged; otherwise every
/// blended pose block is decoded and re-encoded as an orthonormal pair.
pub fn select_prototype(memory: &PrototypeMemory, c: &ScoreVector) -> Result<BodyParams> {
    if c.len() != memory.k() {
        return Err(invalid(format!(
            "score vector has {} entries for a memory of {} rows",
            c.len(),
            memory.k()
        )));
    }
    if let Some(j) = c.one_hot_index() {
        return Ok(memory.rows[j].clone());
    }
    let mut blend = vec![0.0; PARAM_DIM];
    for (row, &w) in memory.rows.iter().zip(c.values()) {
        if w == 0.0 {
            continue;
        }
        for (acc, v) in blend.iter_mut().zip(row.flatten()) {
            *acc += w * v;
        }
    }
    let mut params = BodyParams::from_flat_unchecked(&blend)?;
    for (j, block) in params.pose.iter_mut().enumerate() {
        let r = rot6d_to_rotmat(block)
            .map_err(|e| Error::DegenerateSelection(format!("blended pose block {j}: {e}")))?;
        *block = rotmat_to_rot6d(&r);
    }
    Ok(params)
}
