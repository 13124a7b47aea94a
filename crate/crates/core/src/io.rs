//! JSON Lines datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyParams, Joints3D, NUM_JOINTS, NUM_SHAPE, POSE_DIM};
use crate::error::{invalid, Error, Result};
use crate::fitting::{FitProblem, Keypoints2D};

/// One body configuration with optional observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub pose: Vec<f64>,
    pub shape: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j2d: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl DatasetRecord {
    pub fn from_params(p: &BodyParams) -> Self {
        let flat = p.flatten();
        DatasetRecord {
            pose: flat[..POSE_DIM].to_vec(),
            shape: flat[POSE_DIM..].to_vec(),
            j3d: None,
            j2d: None,
            visibility: None,
            label: None,
        }
    }

    pub fn params(&self) -> Result<BodyParams> {
        if self.pose.len() != POSE_DIM || self.shape.len() != NUM_SHAPE {
            return Err(invalid(format!(
                "record has {} pose and {} shape values, expected {POSE_DIM} and {NUM_SHAPE}",
                self.pose.len(),
                self.shape.len()
            )));
        }
        let mut flat = self.pose.clone();
        flat.extend_from_slice(&self.shape);
        BodyParams::from_flat(&flat)
    }

    pub fn validate(&self) -> Result<()> {
        self.params()?;
        let check = |name: &str, len: Option<usize>| match len {
            Some(n) if n != NUM_JOINTS => Err(invalid(format!(
                "`{name}` has {n} entries, expected {NUM_JOINTS}"
            ))),
            _ => Ok(()),
        };
        check("j3d", self.j3d.as_ref().map(Vec::len))?;
        check("j2d", self.j2d.as_ref().map(Vec::len))?;
        check("visibility", self.visibility.as_ref().map(Vec::len))?;
        if let Some(v) = &self.visibility {
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(invalid("visibility values must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Fit problem built from the stored observations. Returns `None` when
    /// the record carries neither 3D joints nor 2D keypoints.
    pub fn observations(&self) -> Result<Option<FitProblem>> {
        self.validate()?;
        if self.j3d.is_none() && self.j2d.is_none() {
            return Ok(None);
        }
        let target_j3d = self
            .j3d
            .as_ref()
            .map(|v| Joints3D(std::array::from_fn(|k| Vector3::from(v[k]))));
        let target_j2d: Option<Keypoints2D> =
            self.j2d.as_ref().map(|v| std::array::from_fn(|k| v[k]));
        let mut problem = FitProblem {
            target_j3d,
            target_j2d,
            ..FitProblem::default()
        };
        if let Some(v) = &self.visibility {
            problem.visibility.copy_from_slice(v);
        }
        Ok(Some(problem))
    }
}

/// Reads one JSON value per nonblank line; errors name the line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value =
            serde_json::from_str(&line).map_err(|e| invalid(format!("line {}: {e}", n + 1)))?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset and validates every record; errors name the line.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    for (n, r) in records.iter().enumerate() {
        r.validate().map_err(|e| match e {
            Error::InvalidInput(m) => invalid(format!("record {}: {m}", n + 1)),
            other => other,
        })?;
    }
    Ok(records)
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<BodyParams>> {
    read_dataset(path)?
        .iter()
        .map(DatasetRecord::params)
        .collect()
}
