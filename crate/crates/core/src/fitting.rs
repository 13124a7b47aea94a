//! Weak-perspective projection, the fitting loss stack and a gradient
//! descent fitter over pose, shape and camera.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body_model::{
    BodyModel, BodyParams, Joints3D, NUM_JOINTS, NUM_SHAPE, PARAM_DIM, POSE_DIM,
};
use crate::error::{invalid, Error, Result};
use crate::memory::ScoreVector;
use crate::metrics::{mpvpe, tail_indices};
use crate::rotations::Rot6D;

/// Number of optimized variables: pose, shape and the three camera values.
pub const FIT_DIM: usize = PARAM_DIM + 3;

pub type Keypoints2D = [[f64; 2]; NUM_JOINTS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams {
            s: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

impl CameraParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(invalid(format!(
                "camera scale must be positive, got {}",
                self.s
            )));
        }
        if !self.tx.is_finite() || !self.ty.is_finite() {
            return Err(invalid("camera translation must be finite"));
        }
        Ok(())
    }
}

/// `(s x + tx, s y + ty)` for every joint; depth is dropped.
pub fn project(j3d: &Joints3D, cam: &CameraParams) -> Keypoints2D {
    std::array::from_fn(|k| {
        let p = j3d.0[k];
        [cam.s * p.x + cam.tx, cam.s * p.y + cam.ty]
    })
}

/// Loss weights `lambda_1..lambda_5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub j3d: f64,
    pub j2d: f64,
    pub pose: f64,
    pub shape: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            j3d: 5.0,
            j2d: 5.0,
            pose: 1.0,
            shape: 1e-3,
            class: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.j3d, self.j2d, self.pose, self.shape, self.class];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pose: f64,
    pub shape: f64,
    pub j3d: f64,
    pub j2d: f64,
    pub class: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.j3d * terms.j3d
        + weights.j2d * terms.j2d
        + weights.pose * terms.pose
        + weights.shape * terms.shape
        + weights.class * terms.class
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    pub target_j3d: Option<Joints3D>,
    pub target_j2d: Option<Keypoints2D>,
    pub visibility: [f64; NUM_JOINTS],
    pub target_pose: Option<[Rot6D; NUM_JOINTS]>,
    pub target_shape: Option<[f64; NUM_SHAPE]>,
    /// One-hot class label.
    pub target_label: Option<ScoreVector>,
    /// Predicted class scores.
    pub scores: Option<ScoreVector>,
    pub weights: LossWeights,
}

impl Default for FitProblem {
    fn default() -> Self {
        FitProblem {
            target_j3d: None,
            target_j2d: None,
            visibility: [1.0; NUM_JOINTS],
            target_pose: None,
            target_shape: None,
            target_label: None,
            scores: None,
            weights: LossWeights::default(),
        }
    }
}

impl FitProblem {
    /// 3D joints regressed from the posed mesh of `gt` and their projection
    /// through `cam`, all joints visible.
    pub fn from_ground_truth(
        model: &BodyModel,
        gt: &BodyParams,
        cam: &CameraParams,
    ) -> Result<Self> {
        cam.validate()?;
        let verts = model.vertices(gt)?;
        let j3d = model.regress_joints(&verts)?;
        let j2d = project(&j3d, cam);
        Ok(FitProblem {
            target_j3d: Some(j3d),
            target_j2d: Some(j2d),
            ..FitProblem::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.visibility.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("visibility values must be nonnegative"));
        }
        let has_target = self.target_j3d.is_some()
            || self.target_j2d.is_some()
            || self.target_pose.is_some()
            || self.target_shape.is_some()
            || self.target_label.is_some();
        if !has_target {
            return Err(invalid("fit problem has no target"));
        }
        if let (Some(l), Some(c)) = (&self.target_label, &self.scores) {
            if l.len() != c.len() {
                return Err(invalid("label and score vectors differ in length"));
            }
        }
        let finite = self
            .target_j3d
            .iter()
            .flat_map(|j| j.0.iter().flat_map(|p| p.iter().copied()))
            .chain(self.target_j2d.iter().flatten().flatten().copied())
            .chain(self.target_pose.iter().flatten().flat_map(|r| r.0))
            .chain(self.target_shape.iter().flatten().copied());
        for v in finite {
            if !v.is_finite() {
                return Err(invalid("fit targets must be finite"));
            }
        }
        Ok(())
    }
}

/// JSON Lines layout of a [`FitProblem`]; absent targets are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitProblemRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j2d: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ScoreVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
}

fn fixed<T: Copy, const N: usize>(field: &str, v: &[T]) -> Result<[T; N]> {
    v.try_into()
        .map_err(|_| invalid(format!("`{field}` has {} entries, expected {N}", v.len())))
}

impl FitProblemRecord {
    pub fn to_problem(&self) -> Result<FitProblem> {
        let target_j3d = match &self.j3d {
            Some(v) => {
                let a: [[f64; 3]; NUM_JOINTS] = fixed("j3d", v)?;
                Some(Joints3D(a.map(Vector3::from)))
            }
            None => None,
        };
        let target_j2d = match &self.j2d {
            Some(v) => Some(fixed("j2d", v)?),
            None => None,
        };
        let visibility = match &self.visibility {
            Some(v) => fixed("visibility", v)?,
            None => [1.0; NUM_JOINTS],
        };
        let target_pose = match &self.pose {
            Some(v) => {
                let flat: [f64; POSE_DIM] = fixed("pose", v)?;
                Some(std::array::from_fn(|j| {
                    Rot6D(std::array::from_fn(|i| flat[6 * j + i]))
                }))
            }
            None => None,
        };
        let target_shape = match &self.shape {
            Some(v) => Some(fixed("shape", v)?),
            None => None,
        };
        let problem = FitProblem {
            target_j3d,
            target_j2d,
            visibility,
            target_pose,
            target_shape,
            target_label: self.label.clone(),
            scores: self.scores.clone(),
            weights: self.weights.unwrap_or_default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn from_problem(p: &FitProblem) -> Self {
        FitProblemRecord {
            j3d: p
                .target_j3d
                .as_ref()
                .map(|j| j.0.iter().map(|v| [v.x, v.y, v.z]).collect()),
            j2d: p.target_j2d.map(|k| k.to_vec()),
            visibility: Some(p.visibility.to_vec()),
            pose: p.target_pose.map(|r| r.iter().flat_map(|b| b.0).collect()),
            shape: p.target_shape.map(|s| s.to_vec()),
            label: p.target_label.clone(),
            scores: p.scores.clone(),
            weights: Some(p.weights),
        }
    }
}

fn class_loss(label: &ScoreVector, scores: &ScoreVector) -> f64 {
    label
        .values()
        .iter()
        .zip(scores.values())
        .filter(|(l, _)| **l != 0.0)
        .map(|(l, c)| -l * c.ln())
        .sum()
}

struct Evaluation {
    terms: LossTerms,
    total: f64,
    grad: Option<Vec<f64>>,
}

fn evaluate(
    params: &BodyParams,
    cam: &CameraParams,
    model: &BodyModel,
    problem: &FitProblem,
    want_grad: bool,
) -> Result<Evaluation> {
    let w = &problem.weights;
    let mut terms = LossTerms::default();
    let mut grad = vec![0.0; FIT_DIM];

    if let Some(target) = &problem.target_pose {
        for (j, (r, t)) in params.pose.iter().zip(target).enumerate() {
            for i in 0..6 {
                let d = r.0[i] - t.0[i];
                terms.pose += d * d;
                grad[6 * j + i] += 2.0 * w.pose * d;
            }
        }
    }
    if let Some(target) = &problem.target_shape {
        for (i, (b, t)) in params.shape.iter().zip(target).enumerate() {
            let d = b - t;
            terms.shape += d * d;
            grad[POSE_DIM + i] += 2.0 * w.shape * d;
        }
    }
    if let (Some(l), Some(c)) = (&problem.target_label, &problem.scores) {
        terms.class = class_loss(l, c);
    }

    if problem.target_j3d.is_some() || problem.target_j2d.is_some() {
        let cache = model.forward_cached(params)?;
        let joints = model.regress(&cache.vertices);
        let mut g_joints = [Vector3::<f64>::zeros(); NUM_JOINTS];
        if let Some(target) = &problem.target_j3d {
            for k in 0..NUM_JOINTS {
                let d = joints[k] - target.0[k];
                terms.j3d += d.norm_squared();
                g_joints[k] += d * (2.0 * w.j3d);
            }
        }
        if let Some(target) = &problem.target_j2d {
            let proj = project(&Joints3D(joints), cam);
            let (mut gs, mut gtx, mut gty) = (0.0, 0.0, 0.0);
            for k in 0..NUM_JOINTS {
                let mu = problem.visibility[k];
                let dx = mu * (proj[k][0] - target[k][0]);
                let dy = mu * (proj[k][1] - target[k][1]);
                terms.j2d += dx * dx + dy * dy;
                let (ex, ey) = (2.0 * w.j2d * mu * dx, 2.0 * w.j2d * mu * dy);
                g_joints[k].x += ex * cam.s;
                g_joints[k].y += ey * cam.s;
                gs += ex * joints[k].x + ey * joints[k].y;
                gtx += ex;
                gty += ey;
            }
            grad[PARAM_DIM] += gs;
            grad[PARAM_DIM + 1] += gtx;
            grad[PARAM_DIM + 2] += gty;
        }
        if want_grad {
            let g_verts = model.regress_backward(&g_joints);
            let (g_pose, g_shape) = model.backward(params, &cache, &g_verts)?;
            for (j, block) in g_pose.iter().enumerate() {
                for i in 0..6 {
                    grad[6 * j + i] += block[i];
                }
            }
            for (i, g) in g_shape.iter().enumerate() {
                grad[POSE_DIM + i] += g;
            }
        }
    }

    Ok(Evaluation {
        total: total_loss(&terms, w),
        terms,
        grad: want_grad.then_some(grad),
    })
}

/// Per-term losses. Absent targets contribute 0; the class term needs both
/// a label and scores.
pub fn loss_terms(
    params: &BodyParams,
    cam: &CameraParams,
    model: &BodyModel,
    problem: &FitProblem,
) -> Result<LossTerms> {
    problem.validate()?;
    Ok(evaluate(params, cam, model, problem, false)?.terms)
}

/// Total loss and its analytic gradient, laid out as pose, shape,
/// `(s, tx, ty)`.
pub fn loss_and_gradient(
    params: &BodyParams,
    cam: &CameraParams,
    model: &BodyModel,
    problem: &FitProblem,
) -> Result<(f64, Vec<f64>)> {
    problem.validate()?;
    let e = evaluate(params, cam, model, problem, true)?;
    Ok((e.total, e.grad.unwrap_or_default()))
}

fn pack(params: &BodyParams, cam: &CameraParams) -> Vec<f64> {
    let mut x = params.flatten();
    x.extend([cam.s, cam.tx, cam.ty]);
    x
}

fn unpack(x: &[f64]) -> Result<(BodyParams, CameraParams)> {
    let params = BodyParams::from_flat_unchecked(&x[..PARAM_DIM])?;
    let cam = CameraParams {
        s: x[PARAM_DIM],
        tx: x[PARAM_DIM + 1],
        ty: x[PARAM_DIM + 2],
    };
    Ok((params, cam))
}

/// Central-difference gradient of the total loss with step `h`.
pub fn finite_difference_gradient(
    params: &BodyParams,
    cam: &CameraParams,
    model: &BodyModel,
    problem: &FitProblem,
    h: f64,
) -> Result<Vec<f64>> {
    problem.validate()?;
    let x = pack(params, cam);
    let f = |x: &[f64]| -> Result<f64> {
        let (p, c) = unpack(x)?;
        Ok(evaluate(&p, &c, model, problem, false)?.total)
    };
    let mut grad = vec![0.0; FIT_DIM];
    let mut probe = x.clone();
    for i in 0..FIT_DIM {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: BodyParams,
    pub camera: CameraParams,
    /// Total loss before the first iteration and after each one.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub terms: LossTerms,
    pub loss: f64,
}

/// Largest number of step halvings tried per iteration.
pub const MAX_HALVINGS: usize = 20;

/// Gradient descent from `init` with backtracking: a step that does not
/// lower the loss is halved up to [`MAX_HALVINGS`] times and dropped if it
/// still fails. Returns the lowest-loss iterate.
pub fn fit(
    init: &BodyParams,
    init_cam: &CameraParams,
    model: &BodyModel,
    problem: &FitProblem,
    iters: usize,
    step: f64,
) -> Result<FitReport> {
    if iters < 1 {
        return Err(invalid("fit needs at least one iteration"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid("step size must be positive"));
    }
    problem.validate()?;
    init.validate()?;
    init_cam.validate()?;

    let mut x = pack(init, init_cam);
    let first = evaluate(init, init_cam, model, problem, false)?;
    let mut trace = vec![first.total];
    if !first.total.is_finite() {
        return Err(Error::FitDiverged { trace });
    }
    let mut current = first;

    for _ in 0..iters {
        let (p, c) = unpack(&x)?;
        let grad = evaluate(&p, &c, model, problem, true)?
            .grad
            .unwrap_or_default();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::FitDiverged { trace });
        }
        if grad.iter().any(|g| *g != 0.0) {
            let mut alpha = step;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = x.iter().zip(&grad).map(|(v, g)| v - alpha * g).collect();
                let (tp, tc) = unpack(&trial)?;
                if tc.validate().is_ok() && tp.validate().is_ok() {
                    let e = evaluate(&tp, &tc, model, problem, false)?;
                    if !e.total.is_finite() {
                        trace.push(e.total);
                        return Err(Error::FitDiverged { trace });
                    }
                    if e.total < current.total {
                        x = trial;
                        current = e;
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        trace.push(current.total);
    }

    let (params, camera) = unpack(&x)?;
    Ok(FitReport {
        params,
        camera,
        trace,
        iterations: iters,
        terms: current.terms,
        loss: current.total,
    })
}

/// Final MPVPE of two fits of the same problem from different starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTrial {
    pub prototype_mpvpe: f64,
    pub global_mpvpe: f64,
    /// Vertex RMSD of the ground truth to the global prototype, meters.
    pub distance: f64,
}

impl PairedTrial {
    pub fn prototype_wins(&self) -> bool {
        self.prototype_mpvpe <= self.global_mpvpe
    }
}

/// Fits `problem` once from `prototype` and once from `global` with the same
/// budget and scores both results against `gt`.
#[allow(clippy::too_many_arguments)]
pub fn paired_trial(
    model: &BodyModel,
    gt: &BodyParams,
    problem: &FitProblem,
    prototype: &BodyParams,
    global: &BodyParams,
    cam: &CameraParams,
    iters: usize,
    step: f64,
) -> Result<PairedTrial> {
    let gt_verts = model.vertices(gt)?;
    let a = fit(prototype, cam, model, problem, iters, step)?;
    let b = fit(global, cam, model, problem, iters, step)?;
    let global_verts = model.vertices(global)?;
    Ok(PairedTrial {
        prototype_mpvpe: mpvpe(&model.vertices(&a.params)?, &gt_verts)?,
        global_mpvpe: mpvpe(&model.vertices(&b.params)?, &gt_verts)?,
        distance: crate::distance::unweighted_vertex_rmsd(&gt_verts, &global_verts)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub trials: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub prototype_mpvpe: f64,
    pub global_mpvpe: f64,
    pub tail_percent: f64,
    pub tail_prototype_mpvpe: f64,
    pub tail_global_mpvpe: f64,
}

pub fn summarize_paired(trials: &[PairedTrial], tail_percent: f64) -> Result<PairedSummary> {
    if trials.is_empty() {
        return Err(invalid("no paired trials"));
    }
    let n = trials.len() as f64;
    let wins = trials.iter().filter(|t| t.prototype_wins()).count();
    let distances: Vec<f64> = trials.iter().map(|t| t.distance).collect();
    let tail = tail_indices(&distances, tail_percent)?;
    let mean = |idx: &mut dyn Iterator<Item = f64>, count: f64| idx.sum::<f64>() / count;
    let tn = tail.len() as f64;
    Ok(PairedSummary {
        trials: trials.len(),
        wins,
        win_rate: wins as f64 / n,
        prototype_mpvpe: mean(&mut trials.iter().map(|t| t.prototype_mpvpe), n),
        global_mpvpe: mean(&mut trials.iter().map(|t| t.global_mpvpe), n),
        tail_percent,
        tail_prototype_mpvpe: mean(&mut tail.iter().map(|&i| trials[i].prototype_mpvpe), tn),
        tail_global_mpvpe: mean(&mut tail.iter().map(|&i| trials[i].global_mpvpe), tn),
    })
}
