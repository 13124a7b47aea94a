//! Vertex-space distances between body configurations.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, MeshVertices, PartLabel};
use crate::error::{invalid, Result};

/// Distance weight per body part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartWeightMap {
    pub limb: f64,
    pub head: f64,
    pub hand: f64,
    pub foot: f64,
    pub torso: f64,
}

impl Default for PartWeightMap {
    /// Limbs 5.0, head and hands 0.3, feet 0.5, torso 1.0.
    fn default() -> Self {
        PartWeightMap {
            limb: 5.0,
            head: 0.3,
            hand: 0.3,
            foot: 0.5,
            torso: 1.0,
        }
    }
}

impl PartWeightMap {
    pub fn uniform(w: f64) -> Self {
        PartWeightMap {
            limb: w,
            head: w,
            hand: w,
            foot: w,
            torso: w,
        }
    }

    pub fn get(&self, label: PartLabel) -> f64 {
        match label {
            PartLabel::Limb => self.limb,
            PartLabel::Head => self.head,
            PartLabel::Hand => self.hand,
            PartLabel::Foot => self.foot,
            PartLabel::Torso => self.torso,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.limb, self.head, self.hand, self.foot, self.torso];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("part weights must be finite and nonnegative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(invalid("at least one part weight must be positive"));
        }
        Ok(())
    }
}

/// Per-vertex weight, applied to all three coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PartWeights(pub Vec<f64>);

impl PartWeights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_part_weights(model: &BodyModel, map: &PartWeightMap) -> Result<PartWeights> {
    map.validate()?;
    Ok(PartWeights(
        model.part_labels().iter().map(|l| map.get(*l)).collect(),
    ))
}

/// `||(Va - Vb) o W||^2`, the squared norm of the weighted difference.
pub fn weighted_vertex_distance(
    a: &MeshVertices,
    b: &MeshVertices,
    w: &PartWeights,
) -> Result<f64> {
    if a.len() != b.len() || a.len() != w.len() {
        return Err(invalid(format!(
            "vertex counts differ: {}, {} and {} weights",
            a.len(),
            b.len(),
            w.len()
        )));
    }
    Ok(weighted_sq_distance(&a.0, &b.0, &w.0))
}

pub(crate) fn weighted_sq_distance(a: &[Vector3<f64>], b: &[Vector3<f64>], w: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(w)
        .map(|((p, q), w)| {
            let d = p - q;
            let (x, y, z) = (d.x * w, d.y * w, d.z * w);
            x * x + y * y + z * z
        })
        .sum()
}

/// Root-mean-square per-vertex Euclidean distance.
pub fn unweighted_vertex_rmsd(a: &MeshVertices, b: &MeshVertices) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "vertex counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(invalid("cannot compare empty vertex sets"));
    }
    let sum: f64 =
        a.0.iter()
            .zip(&b.0)
            .map(|(p, q)| (p - q).norm_squared())
            .sum();
    Ok((sum / a.len() as f64).sqrt())
}
