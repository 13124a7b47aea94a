//! Part-aware K-Means over body configurations and its ablation variants.
//!
//! Samples are compared through their posed vertices under a per-vertex
//! weight; cluster centers average shapes arithmetically and poses per joint
//! through quaternion eigen-averaging, so every center stays a valid set of
//! rotations. The `naive_params` variant instead runs plain K-Means on the
//! flattened parameter vectors.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body_model::{BodyModel, BodyParams, NUM_JOINTS, NUM_SHAPE, PARAM_DIM};
use crate::distance::{build_part_weights, weighted_sq_distance, PartWeightMap, PartWeights};
use crate::error::{invalid, Error, Result};
use crate::rotations::{
    average_quaternions, quat_to_rotmat, rot6d_to_rotmat, rotmat_to_quat, rotmat_to_rot6d,
    UnitQuaternion,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Part-weighted vertex distance with quaternion center averaging.
    #[serde(rename = "p3dh")]
    P3dh,
    /// As `P3dh` with all vertex weights set to 1.
    #[serde(rename = "3dh")]
    Uniform3dh,
    /// Randomly drawn initial centers and a single assignment pass.
    #[serde(rename = "random_center")]
    RandomCenter,
    /// Euclidean K-Means on the flattened parameter vector.
    #[serde(rename = "naive_params")]
    NaiveParams,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::P3dh => "p3dh",
            Variant::Uniform3dh => "3dh",
            Variant::RandomCenter => "random_center",
            Variant::NaiveParams => "naive_params",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "p3dh" => Ok(Variant::P3dh),
            "3dh" => Ok(Variant::Uniform3dh),
            "random_center" | "random" => Ok(Variant::RandomCenter),
            "naive_params" | "naive" => Ok(Variant::NaiveParams),
            other => Err(invalid(format!("unknown clustering variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    /// Stop once the average sample-to-center distance drops to this value.
    pub gamma_hat: f64,
    /// Iteration budget.
    pub lambda_hat: usize,
    pub seed: u64,
    pub variant: Variant,
    pub part_weight_map: PartWeightMap,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 50,
            gamma_hat: 0.0,
            lambda_hat: 100,
            seed: 0,
            variant: Variant::P3dh,
            part_weight_map: PartWeightMap::default(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(invalid("cluster count must be at least 1"));
        }
        if self.lambda_hat < 1 {
            return Err(invalid("iteration budget must be at least 1"));
        }
        if !(self.gamma_hat >= 0.0) {
            return Err(invalid("distance threshold must be nonnegative"));
        }
        self.part_weight_map.validate()
    }

    /// Weight map actually used for distances under this variant.
    pub fn effective_weight_map(&self) -> PartWeightMap {
        match self.variant {
            Variant::Uniform3dh => PartWeightMap::uniform(1.0),
            _ => self.part_weight_map,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centers: Vec<BodyParams>,
    pub assignments: Vec<usize>,
    /// Distance of each sample to its assigned center.
    pub distances: Vec<f64>,
    /// Average distance of every assignment pass inside the loop.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// True when assignments stopped changing before the budget ran out.
    pub converged: bool,
    pub config: ClusterConfig,
    pub dataset_digest: String,
}

/// JSON layout of a persisted [`ClusterResult`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterResultFile {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub distances: Vec<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub config: ClusterConfig,
    pub dataset_digest: String,
}

impl ClusterResult {
    pub fn to_file(&self) -> ClusterResultFile {
        ClusterResultFile {
            centers: self.centers.iter().map(BodyParams::flatten).collect(),
            assignments: self.assignments.clone(),
            distances: self.distances.clone(),
            trace: self.trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            config: self.config.clone(),
            dataset_digest: self.dataset_digest.clone(),
        }
    }

    pub fn from_file(file: ClusterResultFile) -> Result<Self> {
        let centers = file
            .centers
            .iter()
            .map(|row| BodyParams::from_flat(row))
            .collect::<Result<Vec<_>>>()?;
        if centers.len() != file.config.k {
            return Err(invalid(format!(
                "{} centers stored for k = {}",
                centers.len(),
                file.config.k
            )));
        }
        if file.assignments.len() != file.distances.len() {
            return Err(invalid("assignments and distances differ in length"));
        }
        if file.assignments.iter().any(|a| *a >= centers.len()) {
            return Err(invalid("assignment index out of range"));
        }
        Ok(ClusterResult {
            centers,
            assignments: file.assignments,
            distances: file.distances,
            trace: file.trace,
            iterations: file.iterations,
            converged: file.converged,
            config: file.config,
            dataset_digest: file.dataset_digest,
        })
    }
}

/// SHA-256 over the little-endian bytes of every flattened sample.
pub fn dataset_digest(samples: &[BodyParams]) -> String {
    let mut hasher = Sha256::new();
    for s in samples {
        for v in s.flatten() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Draws `k` distinct sample indices (partial Fisher-Yates), in draw order.
pub fn init_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("cluster count must be at least 1"));
    }
    if n < k {
        return Err(invalid(format!("{n} samples cannot seed {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    Ok(idx)
}

pub fn init_centers(samples: &[BodyParams], k: usize, seed: u64) -> Result<Vec<BodyParams>> {
    Ok(init_indices(samples.len(), k, seed)?
        .into_iter()
        .map(|i| samples[i].clone())
        .collect())
}

fn compute_vertices(model: &BodyModel, params: &[BodyParams]) -> Result<Vec<Vec<Vector3<f64>>>> {
    params
        .par_iter()
        .map(|p| model.vertices(p).map(|v| v.0))
        .collect()
}

/// Argmin over centers with ties going to the lowest index.
fn nearest<F: Fn(usize) -> f64>(k: usize, dist: F) -> (usize, f64) {
    let mut best = (0, dist(0));
    for j in 1..k {
        let d = dist(j);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_vertices(
    sample_verts: &[Vec<Vector3<f64>>],
    center_verts: &[Vec<Vector3<f64>>],
    weights: &PartWeights,
) -> (Vec<usize>, Vec<f64>) {
    sample_verts
        .par_iter()
        .map(|sv| {
            nearest(center_verts.len(), |j| {
                weighted_sq_distance(sv, &center_verts[j], &weights.0)
            })
        })
        .unzip()
}

/// Assigns each sample to the center with the smallest weighted vertex
/// distance. Center vertices are computed once per call.
pub fn assign_samples(
    samples: &[BodyParams],
    centers: &[BodyParams],
    model: &BodyModel,
    weights: &PartWeights,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if samples.is_empty() || centers.is_empty() {
        return Err(invalid(
            "assignment needs at least one sample and one center",
        ));
    }
    if weights.len() != model.num_vertices() {
        return Err(invalid("part weights do not match the model vertex count"));
    }
    let center_verts = compute_vertices(model, centers)?;
    let sample_verts = compute_vertices(model, samples)?;
    Ok(assign_vertices(&sample_verts, &center_verts, weights))
}

fn members_by_cluster(assignments: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        if a >= k {
            return Err(invalid(format!(
                "sample {i} assigned to cluster {a} of {k}"
            )));
        }
        members[a].push(i);
    }
    Ok(members)
}

/// Samples used to reseed empty clusters: farthest first, ties by index.
fn reseed_order(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    order
}

fn average_members(
    samples: &[BodyParams],
    members: &[usize],
    cluster: usize,
) -> Result<BodyParams> {
    let count = members.len() as f64;
    let mut shape = [0.0; NUM_SHAPE];
    for &i in members {
        for (s, v) in shape.iter_mut().zip(&samples[i].shape) {
            *s += v;
        }
    }
    for s in shape.iter_mut() {
        *s /= count;
    }

    let mut center = BodyParams::neutral();
    center.shape = shape;
    for joint in 0..NUM_JOINTS {
        let wrap = |source: Error| Error::CenterUpdate {
            cluster,
            joint,
            source: Box::new(source),
        };
        let quats = members
            .iter()
            .map(|&i| rot6d_to_rotmat(&samples[i].pose[joint]).map(|r| rotmat_to_quat(&r)))
            .collect::<Result<Vec<UnitQuaternion>>>()
            .map_err(wrap)?;
        let mean = average_quaternions(&quats, None).map_err(wrap)?;
        center.pose[joint] = rotmat_to_rot6d(&quat_to_rotmat(&mean));
    }
    Ok(center)
}

/// Recomputes centers from assignments: shapes by arithmetic mean, poses
/// joint by joint through quaternion averaging. An empty cluster takes the
/// sample with the largest current distance (ties to the lowest index).
pub fn update_centers(
    samples: &[BodyParams],
    assignments: &[usize],
    distances: &[f64],
    k: usize,
) -> Result<Vec<BodyParams>> {
    Ok(update_centers_inner(samples, assignments, distances, k)?.0)
}

fn update_centers_inner(
    samples: &[BodyParams],
    assignments: &[usize],
    distances: &[f64],
    k: usize,
) -> Result<(Vec<BodyParams>, bool)> {
    if assignments.len() != samples.len() || distances.len() != samples.len() {
        return Err(invalid(
            "assignments and distances must match the sample count",
        ));
    }
    let members = members_by_cluster(assignments, k)?;
    let mut reseeds = reseed_order(distances).into_iter();
    let mut reseeded = false;
    let plan: Vec<std::result::Result<usize, &Vec<usize>>> = members
        .iter()
        .map(|m| {
            if m.is_empty() {
                reseeded = true;
                Ok(reseeds.next().unwrap_or(0))
            } else {
                Err(m)
            }
        })
        .collect();
    let centers = plan
        .par_iter()
        .enumerate()
        .map(|(j, p)| match p {
            Ok(i) => Ok(samples[*i].clone()),
            Err(m) => average_members(samples, m, j),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((centers, reseeded))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

struct LoopOutcome<C> {
    centers: Vec<C>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Shared K-Means driver: runs while the average distance exceeds
/// `gamma_hat` and the budget `lambda_hat` is not exhausted.
fn kmeans_loop<C, A, U>(
    init: Vec<C>,
    config: &ClusterConfig,
    assign: A,
    update: U,
) -> Result<LoopOutcome<C>>
where
    A: Fn(&[C]) -> Result<(Vec<usize>, Vec<f64>)>,
    U: Fn(&[usize], &[f64]) -> Result<(Vec<C>, bool)>,
{
    let mut centers = init;
    let mut gamma_bar = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut previous: Option<Vec<usize>> = None;
    let mut last_reseeded = true;

    while gamma_bar > config.gamma_hat && iterations < config.lambda_hat {
        let wrap = move |source: Error| Error::Iteration {
            iteration: iterations,
            source: Box::new(source),
        };
        let (assignments, distances) = assign(&centers).map_err(wrap)?;
        gamma_bar = mean(&distances);
        trace.push(gamma_bar);
        iterations += 1;
        if !last_reseeded && previous.as_deref() == Some(assignments.as_slice()) {
            // centers are already the update of these assignments
            converged = true;
            break;
        }
        let (next, reseeded) = update(&assignments, &distances).map_err(wrap)?;
        centers = next;
        last_reseeded = reseeded;
        previous = Some(assignments);
    }
    Ok(LoopOutcome {
        centers,
        trace,
        iterations,
        converged,
    })
}

/// Part-aware 3D human K-Means. Dispatches to [`naive_kmeans`] for the
/// parameter-space variant.
pub fn p3dh_kmeans(
    samples: &[BodyParams],
    config: &ClusterConfig,
    model: &BodyModel,
) -> Result<ClusterResult> {
    config.validate()?;
    if config.variant == Variant::NaiveParams {
        return naive_kmeans(samples, config);
    }
    let weights = build_part_weights(model, &config.effective_weight_map())?;
    let init = init_centers(samples, config.k, config.seed)?;
    let sample_verts = compute_vertices(model, samples)?;
    let assign = |centers: &[BodyParams]| -> Result<(Vec<usize>, Vec<f64>)> {
        let center_verts = compute_vertices(model, centers)?;
        Ok(assign_vertices(&sample_verts, &center_verts, &weights))
    };

    let outcome = if config.variant == Variant::RandomCenter {
        LoopOutcome {
            centers: init,
            trace: Vec::new(),
            iterations: 0,
            converged: false,
        }
    } else {
        kmeans_loop(init, config, assign, |a, d| {
            update_centers_inner(samples, a, d, config.k)
        })?
    };

    let (assignments, distances) = assign(&outcome.centers)?;
    let mut trace = outcome.trace;
    if config.variant == Variant::RandomCenter {
        trace.push(mean(&distances));
    }
    Ok(ClusterResult {
        centers: outcome.centers,
        assignments,
        distances,
        trace,
        iterations: outcome.iterations,
        converged: outcome.converged,
        config: config.clone(),
        dataset_digest: dataset_digest(samples),
    })
}

fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plain K-Means on flattened parameters. Pose blocks of the centers are raw
/// coordinate means and are not re-orthonormalized.
pub fn naive_kmeans(samples: &[BodyParams], config: &ClusterConfig) -> Result<ClusterResult> {
    config.validate()?;
    let flat: Vec<Vec<f64>> = samples.iter().map(BodyParams::flatten).collect();
    let init: Vec<Vec<f64>> = init_indices(samples.len(), config.k, config.seed)?
        .into_iter()
        .map(|i| flat[i].clone())
        .collect();

    let assign = |centers: &[Vec<f64>]| -> Result<(Vec<usize>, Vec<f64>)> {
        Ok(flat
            .par_iter()
            .map(|x| nearest(centers.len(), |j| sq_euclidean(x, &centers[j])))
            .unzip())
    };
    let update = |assignments: &[usize], distances: &[f64]| -> Result<(Vec<Vec<f64>>, bool)> {
        let members = members_by_cluster(assignments, config.k)?;
        let mut reseeds = reseed_order(distances).into_iter();
        let mut reseeded = false;
        let centers = members
            .iter()
            .map(|m| {
                if m.is_empty() {
                    reseeded = true;
                    return flat[reseeds.next().unwrap_or(0)].clone();
                }
                let mut c = vec![0.0; PARAM_DIM];
                for &i in m {
                    for (acc, v) in c.iter_mut().zip(&flat[i]) {
                        *acc += v;
                    }
                }
                c.iter_mut().for_each(|v| *v /= m.len() as f64);
                c
            })
            .collect();
        Ok((centers, reseeded))
    };

    let outcome = kmeans_loop(init, config, assign, update)?;
    let (assignments, distances) = assign(&outcome.centers)?;
    let centers = outcome
        .centers
        .iter()
        .enumerate()
        .map(|(row, c)| {
            BodyParams::from_flat(c).map_err(|e| Error::MemoryRow {
                row,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterResult {
        centers,
        assignments,
        distances,
        trace: outcome.trace,
        iterations: outcome.iterations,
        converged: outcome.converged,
        config: config.clone(),
        dataset_digest: dataset_digest(samples),
    })
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("labelings differ in length"));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let row_sum: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let col_sum: f64 = (0..kb)
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n as u64);
    let expected = row_sum * col_sum / total;
    let max_index = 0.5 * (row_sum + col_sum);
    if max_index == expected {
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}
