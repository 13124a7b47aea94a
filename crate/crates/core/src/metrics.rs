//! Reconstruction errors in millimeters and tail bucketing by distance to a
//! single prototype.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, BodyParams, Joints3D, MeshVertices};
use crate::distance::unweighted_vertex_rmsd;
use crate::error::{invalid, Error, Result};

const MM: f64 = 1000.0;

fn mean_point_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "point counts differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(invalid("cannot compare empty point sets"));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, q)| (p - q).norm()).sum();
    Ok(sum / pred.len() as f64 * MM)
}

/// Mean per-vertex position error in millimeters.
pub fn mpvpe(pred: &MeshVertices, gt: &MeshVertices) -> Result<f64> {
    mean_point_error(&pred.0, &gt.0)
}

/// Mean per-joint position error in millimeters.
pub fn mpjpe(pred: &Joints3D, gt: &Joints3D) -> Result<f64> {
    mean_point_error(&pred.0, &gt.0)
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Similarity transform (rotation, uniform scale, translation) of `pred`
/// that best matches `gt` in the least-squares sense. Reflections are not
/// allowed.
pub fn procrustes_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "point counts differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(invalid("alignment needs at least 3 points"));
    }
    if pred
        .iter()
        .chain(gt)
        .any(|p| !p.iter().all(|v| v.is_finite()))
    {
        return Err(invalid("points must be finite"));
    }
    let mu_p = centroid(pred);
    let mu_g = centroid(gt);
    let p: Vec<Vector3<f64>> = pred.iter().map(|x| x - mu_p).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|x| x - mu_g).collect();

    let var_p: f64 = p.iter().map(|x| x.norm_squared()).sum();
    let mut cov = Matrix3::zeros();
    for (a, b) in g.iter().zip(&p) {
        cov += a * b.transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Alignment("SVD did not converge".into())),
    };
    let sigma = svd.singular_values;
    let scale_ref = sigma.max().max(f64::MIN_POSITIVE);
    let rank = sigma.iter().filter(|s| **s > 1e-12 * scale_ref).count();
    if sigma.max() <= 0.0 || rank < 2 || var_p <= 0.0 {
        return Err(Error::Alignment(format!(
            "degenerate configuration, covariance rank {rank}"
        )));
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * v_t;
    let trace = sigma[0] * d[(0, 0)] + sigma[1] * d[(1, 1)] + sigma[2] * d[(2, 2)];
    let scale = trace / var_p;
    Ok(p.iter().map(|x| rot * x * scale + mu_g).collect())
}

/// MPJPE after Procrustes alignment of the prediction, in millimeters.
pub fn pa_mpjpe(pred: &Joints3D, gt: &Joints3D) -> Result<f64> {
    let aligned = procrustes_align(&pred.0, &gt.0)?;
    mean_point_error(&aligned, &gt.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpvpe: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub count: usize,
}

impl MetricReport {
    fn mean(rows: &[[f64; 3]]) -> Option<MetricReport> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let sum = rows.iter().fold([0.0; 3], |acc, r| {
            [acc[0] + r[0], acc[1] + r[1], acc[2] + r[2]]
        });
        Some(MetricReport {
            mpvpe: sum[0] / n,
            mpjpe: sum[1] / n,
            pa_mpjpe: sum[2] / n,
            count: rows.len(),
        })
    }
}

/// MPVPE, MPJPE and PA-MPJPE of one prediction. Joints are regressed from
/// the posed vertices.
pub fn sample_metrics(model: &BodyModel, pred: &BodyParams, gt: &BodyParams) -> Result<[f64; 3]> {
    let vp = model.vertices(pred)?;
    let vg = model.vertices(gt)?;
    let jp = model.regress_joints(&vp)?;
    let jg = model.regress_joints(&vg)?;
    Ok([mpvpe(&vp, &vg)?, mpjpe(&jp, &jg)?, pa_mpjpe(&jp, &jg)?])
}

/// Per-sample metrics for paired predictions and ground truth.
pub fn per_sample_metrics(
    model: &BodyModel,
    pred: &[BodyParams],
    gt: &[BodyParams],
) -> Result<Vec<[f64; 3]>> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "{} predictions for {} ground-truth samples",
            pred.len(),
            gt.len()
        )));
    }
    pred.par_iter()
        .zip(gt)
        .map(|(p, g)| sample_metrics(model, p, g))
        .collect()
}

/// Averages of the per-sample metrics.
pub fn evaluate(model: &BodyModel, pred: &[BodyParams], gt: &[BodyParams]) -> Result<MetricReport> {
    let rows = per_sample_metrics(model, pred, gt)?;
    MetricReport::mean(&rows).ok_or_else(|| invalid("nothing to evaluate"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSubset {
    pub percent: f64,
    /// Sample indices, farthest first.
    pub indices: Vec<usize>,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub edges: Vec<f64>,
    /// RMSD of every sample to the singular prototype, in meters.
    pub distances: Vec<f64>,
    pub buckets: Vec<Bucket>,
    pub tails: Vec<TailSubset>,
}

impl BucketReport {
    /// One row per bucket and per tail subset.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,lo,hi,percent,count,mpvpe,mpjpe,pa_mpjpe\n");
        let metric_cols = |m: &Option<MetricReport>| match m {
            Some(m) => format!("{},{},{}", m.mpvpe, m.mpjpe, m.pa_mpjpe),
            None => ",,".to_string(),
        };
        for b in &self.buckets {
            out += &format!(
                "bucket,{},{},,{},{}\n",
                b.lo,
                b.hi,
                b.count,
                metric_cols(&b.metrics)
            );
        }
        for t in &self.tails {
            out += &format!(
                "tail,,,{},{},{}\n",
                t.percent,
                t.indices.len(),
                metric_cols(&t.metrics)
            );
        }
        out
    }
}

/// The `ceil(percent / 100 * n)` largest distances, ties to the lower index.
pub fn tail_indices(distances: &[f64], percent: f64) -> Result<Vec<usize>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(invalid(format!("tail percent {percent} not in (0, 100]")));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    let take = ((percent / 100.0) * distances.len() as f64).ceil() as usize;
    order.truncate(take.min(distances.len()));
    Ok(order)
}

/// Bucket of `d` for strictly increasing `edges`. Values below the first
/// edge go to the first bucket and values at or above the last edge to the
/// last one.
fn bucket_of(edges: &[f64], d: f64) -> usize {
    let buckets = edges.len() - 1;
    let above = edges[1..buckets].iter().filter(|e| d >= **e).count();
    above.min(buckets - 1)
}

/// Histograms samples by their vertex RMSD to `singular` and collects tail
/// subsets. Metrics are filled in when predictions are supplied.
pub fn bucket_by_prototype_distance(
    samples: &[BodyParams],
    singular: &BodyParams,
    model: &BodyModel,
    edges: &[f64],
    tails: &[f64],
    predictions: Option<&[BodyParams]>,
) -> Result<BucketReport> {
    if edges.len() < 2 {
        return Err(invalid("need at least two bucket edges"));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(
            "bucket edges must be finite and strictly increasing",
        ));
    }
    let reference = model.vertices(singular)?;
    let distances = samples
        .par_iter()
        .map(|s| unweighted_vertex_rmsd(&model.vertices(s)?, &reference))
        .collect::<Result<Vec<f64>>>()?;
    let rows = match predictions {
        Some(pred) => Some(per_sample_metrics(model, pred, samples)?),
        None => None,
    };
    let subset_metrics = |idx: &[usize]| -> Option<MetricReport> {
        let rows = rows.as_ref()?;
        let picked: Vec<[f64; 3]> = idx.iter().map(|&i| rows[i]).collect();
        MetricReport::mean(&picked)
    };

    let mut members = vec![Vec::new(); edges.len() - 1];
    for (i, &d) in distances.iter().enumerate() {
        members[bucket_of(edges, d)].push(i);
    }
    let buckets = members
        .iter()
        .enumerate()
        .map(|(b, idx)| Bucket {
            lo: edges[b],
            hi: edges[b + 1],
            count: idx.len(),
            metrics: subset_metrics(idx),
        })
        .collect();
    let tails = tails
        .iter()
        .map(|&percent| {
            let indices = tail_indices(&distances, percent)?;
            let metrics = subset_metrics(&indices);
            Ok(TailSubset {
                percent,
                indices,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BucketReport {
        edges: edges.to_vec(),
        distances,
        buckets,
        tails,
    })
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("need two equally long series of length >= 2"));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &o in &order[i..=j] {
                r[o] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("rank correlation undefined for a constant series"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
