//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use protomem::body_model::{gen_toy_model, BodyModel, BodyParams, Joints3D, NUM_JOINTS, NUM_SHAPE};
use protomem::clustering::{
    adjusted_rand_index, assign_samples, p3dh_kmeans, ClusterConfig, Variant,
};
use protomem::distance::{build_part_weights, weighted_vertex_distance, PartWeightMap};
use protomem::fitting::{
    finite_difference_gradient, loss_and_gradient, paired_trial, summarize_paired, total_loss,
    CameraParams, FitProblem, LossTerms, LossWeights,
};
use protomem::memory::{build_memory, nearest_prototypes};
use protomem::metrics::{mpjpe, pa_mpjpe};
use protomem::rotations::{
    average_quaternions, axis_angle_to_rotmat, quat_to_rotmat, quaternion_moment, rot6d_to_rotmat,
    rotmat_to_axis_angle, rotmat_to_quat, rotmat_to_rot6d, AxisAngle, Rot6D, UnitQuaternion,
};
use protomem::synth::{generate_corpus, Corpus, CorpusSpec};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion {
    let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    UnitQuaternion::normalize(v[0], v[1], v[2], v[3]).unwrap()
}

fn random_axis_angle(rng: &mut ChaCha8Rng, max: f64) -> AxisAngle {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    AxisAngle(Vector3::from(axis) * rng.random_range(0.0..max))
}

fn max_abs(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).abs().max()
}

fn sign_free(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    let (x, y) = (a.coords(), b.coords());
    let plus = (0..4).map(|i| (x[i] - y[i]).abs()).fold(0.0, f64::max);
    let minus = (0..4).map(|i| (x[i] + y[i]).abs()).fold(0.0, f64::max);
    plus.min(minus)
}

fn rotation_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_trip = 0.0f64;
    for _ in 0..2000 {
        let aa = random_axis_angle(&mut rng, std::f64::consts::PI - 1e-3);
        let r = axis_angle_to_rotmat(&aa).unwrap();
        worst_trip = worst_trip.max((rotmat_to_axis_angle(&r).0 - aa.0).abs().max());
        let via_quat = quat_to_rotmat(&rotmat_to_quat(&r));
        worst_trip = worst_trip.max(max_abs(via_quat.matrix(), r.matrix()));
        let via_6d = rot6d_to_rotmat(&rotmat_to_rot6d(&r)).unwrap();
        worst_trip = worst_trip.max(max_abs(via_6d.matrix(), r.matrix()));
        let q = random_quat(&mut rng);
        worst_trip = worst_trip.max(sign_free(&rotmat_to_quat(&quat_to_rotmat(&q)), &q));
    }
    ensure(worst_trip < 1e-9, || {
        format!("round-trip error {worst_trip:e}")
    })?;

    let mut worst_ortho = 0.0f64;
    for _ in 0..2000 {
        let r = Rot6D(std::array::from_fn(|_| rng.random_range(-10.0..10.0)));
        let m = rot6d_to_rotmat(&r).unwrap().into_inner();
        worst_ortho = worst_ortho.max(max_abs(&(m.transpose() * m), &Matrix3::identity()));
        worst_ortho = worst_ortho.max((m.determinant() - 1.0).abs());
    }
    ensure(worst_ortho < 1e-8, || {
        format!("orthonormality error {worst_ortho:e}")
    })?;

    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let qs: Vec<UnitQuaternion> = (0..n).map(|_| random_quat(&mut rng)).collect();
        let flipped: Vec<UnitQuaternion> = qs
            .iter()
            .map(|q| if rng.random_bool(0.5) { q.neg() } else { *q })
            .collect();
        let a = average_quaternions(&qs, None).unwrap();
        let b = average_quaternions(&flipped, None).unwrap();
        ensure(a.coords() == b.coords(), || {
            "sign flip changed the average".into()
        })?;
    }

    let mut worst_mid = 0.0f64;
    for _ in 0..200 {
        let q0 = rotmat_to_quat(&axis_angle_to_rotmat(&random_axis_angle(&mut rng, 3.0)).unwrap());
        let delta = random_axis_angle(&mut rng, 3.0);
        let half = AxisAngle(delta.0 * 0.5);
        let step = |aa: &AxisAngle| rotmat_to_quat(&axis_angle_to_rotmat(aa).unwrap());
        let q1 = q0.compose(&step(&delta));
        let mid = q0.compose(&step(&half));
        let avg = average_quaternions(&[q0, q1], None).unwrap();
        worst_mid = worst_mid.max(avg.angular_distance(&mid));
    }
    ensure(worst_mid < 1e-6, || format!("midpoint error {worst_mid:e}"))?;
    Ok(format!(
        "round-trip {worst_trip:.1e}, orthonormality {worst_ortho:.1e}, midpoint {worst_mid:.1e}"
    ))
}

fn markley_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let qs: Vec<UnitQuaternion> = (0..n).map(|_| random_quat(&mut rng)).collect();
        let m = quaternion_moment(&qs, None);
        let avg = Vector4::from(average_quaternions(&qs, None).unwrap().coords());
        let best = (avg.transpose() * m * avg)[0];
        for _ in 0..10_000 {
            let p = Vector4::from(random_quat(&mut rng).coords());
            worst = worst.max((p.transpose() * m * p)[0] - best);
        }
    }
    ensure(worst <= 1e-9, || {
        format!("a probe exceeds the average by {worst:e}")
    })?;
    Ok(format!("largest probe excess {worst:.2e}"))
}

fn body_model_linearity() -> Outcome {
    let model = gen_toy_model(0, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_lin = 0.0f64;
    for _ in 0..20 {
        let a: [f64; NUM_SHAPE] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let b: [f64; NUM_SHAPE] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let (x, y) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: [f64; NUM_SHAPE] = std::array::from_fn(|i| x * a[i] + y * b[i]);
        let t = model.template();
        let (ta, tb, tm) = (
            model.shaped_template(&a),
            model.shaped_template(&b),
            model.shaped_template(&mix),
        );
        for i in 0..t.len() {
            let expected = t[i] + (ta[i] - t[i]) * x + (tb[i] - t[i]) * y;
            worst_lin = worst_lin.max((tm[i] - expected).abs().max());
        }
    }
    ensure(worst_lin < 1e-9, || {
        format!("shape linearity residual {worst_lin:e}")
    })?;

    let mut worst_rigid = 0.0f64;
    let (rest_v, rest_j) = model.forward(&BodyParams::neutral()).unwrap();
    for _ in 0..20 {
        let r = axis_angle_to_rotmat(&random_axis_angle(&mut rng, 3.1)).unwrap();
        let mut p = BodyParams::neutral();
        p.pose[0] = rotmat_to_rot6d(&r);
        let (v, j) = model.forward(&p).unwrap();
        let root = rest_j.0[0];
        let m = r.matrix();
        for (a, b) in v.0.iter().zip(&rest_v.0) {
            worst_rigid = worst_rigid.max((a - (m * (b - root) + root)).abs().max());
        }
        for (a, b) in j.0.iter().zip(&rest_j.0) {
            worst_rigid = worst_rigid.max((a - (m * (b - root) + root)).abs().max());
        }
    }
    ensure(worst_rigid < 1e-8, || {
        format!("rigidity residual {worst_rigid:e}")
    })?;
    Ok(format!(
        "linearity {worst_lin:.1e}, rigidity {worst_rigid:.1e}"
    ))
}

const RECOVERY_SEED: u64 = 2;

fn cluster_ari(model: &BodyModel, corpus: &Corpus, variant: Variant) -> f64 {
    let config = ClusterConfig {
        k: corpus.generators.len(),
        seed: RECOVERY_SEED,
        variant,
        ..ClusterConfig::default()
    };
    let r = p3dh_kmeans(&corpus.samples, &config, model).unwrap();
    adjusted_rand_index(&corpus.labels, &r.assignments).unwrap()
}

fn clustering_recovery() -> Outcome {
    let model = gen_toy_model(0, 10).unwrap();
    let plain = generate_corpus(&CorpusSpec {
        seed: RECOVERY_SEED,
        n: 300,
        clusters: 3,
        noise: 0.05,
        ..CorpusSpec::default()
    })
    .unwrap();
    let ari_plain = cluster_ari(&model, &plain, Variant::P3dh);
    ensure(ari_plain == 1.0, || {
        format!("p3dh ARI {ari_plain} on the 3-cluster corpus")
    })?;

    let limb = generate_corpus(&CorpusSpec::limb_dominant(RECOVERY_SEED, 300)).unwrap();
    let ari_p3dh = cluster_ari(&model, &limb, Variant::P3dh);
    let ari_naive = cluster_ari(&model, &limb, Variant::NaiveParams);
    ensure(ari_p3dh == 1.0, || {
        format!("p3dh ARI {ari_p3dh} on the limb-dominant corpus")
    })?;
    ensure(ari_naive < 1.0, || {
        format!("naive ARI {ari_naive} on the limb-dominant corpus")
    })?;
    Ok(format!(
        "3-cluster p3dh ARI {ari_plain}; limb-dominant p3dh ARI {ari_p3dh}, naive ARI {ari_naive:.3}"
    ))
}

fn brute_force_equivalence() -> Outcome {
    let model = gen_toy_model(0, 5).unwrap();
    let w = build_part_weights(&model, &PartWeightMap::default()).unwrap();
    let mut worst = 0.0f64;
    for (seed, threads) in [(0u64, 1usize), (1, 2), (2, 8), (3, 3)] {
        let corpus = generate_corpus(&CorpusSpec {
            seed,
            n: 55,
            clusters: 5,
            noise: 0.1,
            ..CorpusSpec::default()
        })
        .unwrap();
        let (samples, centers) = corpus.samples.split_at(50);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let (a, d) = pool
            .install(|| assign_samples(samples, centers, &model, &w))
            .unwrap();
        for (i, s) in samples.iter().enumerate() {
            let vs = model.vertices(s).unwrap();
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let dist = weighted_vertex_distance(&vs, &model.vertices(c).unwrap(), &w).unwrap();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            ensure(a[i] == best.0, || {
                format!("sample {i} assigned {} vs {}", a[i], best.0)
            })?;
            worst = worst.max((d[i] - best.1).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("distance mismatch {worst:e}"))?;
    Ok(format!(
        "50x5 at 1, 2, 3 and 8 threads, max distance mismatch {worst:.1e}"
    ))
}

fn distance_reduction() -> Outcome {
    let model = gen_toy_model(0, 5).unwrap();
    let w = build_part_weights(&model, &PartWeightMap::default()).unwrap();
    let corpora = [
        (
            "1 cluster",
            CorpusSpec {
                seed: 10,
                n: 200,
                clusters: 1,
                ..CorpusSpec::default()
            },
        ),
        (
            "3 clusters",
            CorpusSpec {
                seed: 11,
                n: 200,
                clusters: 3,
                ..CorpusSpec::default()
            },
        ),
        (
            "8 clusters",
            CorpusSpec {
                seed: 12,
                n: 200,
                clusters: 8,
                noise: 0.1,
                ..CorpusSpec::default()
            },
        ),
        ("limb-dominant", CorpusSpec::limb_dominant(13, 200)),
    ];
    let mut details = Vec::new();
    for (name, spec) in corpora {
        let corpus = generate_corpus(&spec).unwrap();
        let memory = |k: usize| {
            let config = ClusterConfig {
                k,
                seed: 0,
                ..ClusterConfig::default()
            };
            build_memory(&p3dh_kmeans(&corpus.samples, &config, &model).unwrap()).unwrap()
        };
        let mean = |m: &protomem::memory::PrototypeMemory| {
            let (_, d) = nearest_prototypes(&corpus.samples, m, &model, &w).unwrap();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let (many, one) = (mean(&memory(50)), mean(&memory(1)));
        ensure(many <= one, || {
            format!("{name}: K=50 mean {many} exceeds K=1 mean {one}")
        })?;
        if spec.clusters > 1 {
            ensure(many < one, || format!("{name}: no strict reduction"))?;
        }
        details.push(format!("{name} {:.3}", many / one));
    }
    Ok(format!("K=50 / K=1 mean distance: {}", details.join(", ")))
}

fn paired_fit() -> Outcome {
    let model = gen_toy_model(0, 10).unwrap();
    let corpus = generate_corpus(&CorpusSpec {
        seed: 7,
        n: 600,
        clusters: 5,
        noise: 0.05,
        ..CorpusSpec::default()
    })
    .unwrap();
    let (train, test) = corpus.samples.split_at(500);
    let memory = build_memory(
        &p3dh_kmeans(
            train,
            &ClusterConfig {
                k: 50,
                ..ClusterConfig::default()
            },
            &model,
        )
        .unwrap(),
    )
    .unwrap();
    let global = p3dh_kmeans(
        train,
        &ClusterConfig {
            k: 1,
            ..ClusterConfig::default()
        },
        &model,
    )
    .unwrap()
    .centers
    .remove(0);
    let w = build_part_weights(&model, &memory.meta().part_weights).unwrap();
    let (nearest, _) = nearest_prototypes(test, &memory, &model, &w).unwrap();
    let cam = CameraParams::default();
    let trials = test
        .iter()
        .zip(&nearest)
        .map(|(gt, &j)| {
            let problem = FitProblem::from_ground_truth(&model, gt, &cam).unwrap();
            paired_trial(
                &model,
                gt,
                &problem,
                &memory.rows()[j],
                &global,
                &cam,
                10,
                1.0,
            )
            .unwrap()
        })
        .collect::<Vec<_>>();
    let s = summarize_paired(&trials, 10.0).unwrap();
    ensure(s.trials == 100, || format!("{} trials", s.trials))?;
    ensure(s.win_rate >= 0.8, || format!("win rate {}", s.win_rate))?;
    ensure(s.tail_prototype_mpvpe < s.tail_global_mpvpe, || {
        format!(
            "tail-10% MPVPE {} (prototype) vs {} (global)",
            s.tail_prototype_mpvpe, s.tail_global_mpvpe
        )
    })?;
    Ok(format!(
        "win rate {:.2}, tail-10% MPVPE {:.2} mm vs {:.2} mm",
        s.win_rate, s.tail_prototype_mpvpe, s.tail_global_mpvpe
    ))
}

fn joints_from(points: Vec<Vector3<f64>>) -> Joints3D {
    Joints3D(std::array::from_fn(|k| points[k]))
}

fn metric_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let point = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    };
    let mut worst_pa = 0.0f64;
    for _ in 0..100 {
        let gt: Vec<Vector3<f64>> = (0..NUM_JOINTS).map(|_| point(&mut rng)).collect();
        let r = axis_angle_to_rotmat(&random_axis_angle(&mut rng, 3.1)).unwrap();
        let s = rng.random_range(0.1..10.0);
        let t = point(&mut rng) * 5.0;
        let pred: Vec<Vector3<f64>> = gt.iter().map(|p| r.matrix() * p * s + t).collect();
        worst_pa = worst_pa.max(pa_mpjpe(&joints_from(pred), &joints_from(gt)).unwrap());
    }
    ensure(worst_pa < 1e-9, || {
        format!("PA-MPJPE {worst_pa:e} after exact similarity")
    })?;

    for _ in 0..100 {
        let gt: Vec<Vector3<f64>> = (0..NUM_JOINTS).map(|_| point(&mut rng)).collect();
        let pred: Vec<Vector3<f64>> = gt.iter().map(|p| p + point(&mut rng) * 0.05).collect();
        let (p, g) = (joints_from(pred), joints_from(gt));
        let (pa, plain) = (pa_mpjpe(&p, &g).unwrap(), mpjpe(&p, &g).unwrap());
        ensure(pa <= plain, || format!("PA-MPJPE {pa} above MPJPE {plain}"))?;
    }

    let w = LossWeights::default();
    let unit = |set: fn(&mut LossTerms)| {
        let mut t = LossTerms::default();
        set(&mut t);
        total_loss(&t, &w)
    };
    let got = [
        unit(|t| t.j3d = 1.0),
        unit(|t| t.j2d = 1.0),
        unit(|t| t.pose = 1.0),
        unit(|t| t.shape = 1.0),
        unit(|t| t.class = 1.0),
    ];
    ensure(got == [5.0, 5.0, 1.0, 1e-3, 1.0], || {
        format!("default weighting {got:?}")
    })?;
    Ok(format!("max PA-MPJPE after similarity {worst_pa:.1e} mm"))
}

fn gradient_check() -> Outcome {
    let model = gen_toy_model(0, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let draw = |seed| {
            generate_corpus(&CorpusSpec {
                seed,
                n: 1,
                clusters: 1,
                ..CorpusSpec::default()
            })
            .unwrap()
            .samples
            .remove(0)
        };
        let (gt, at) = (draw(1000 + trial), draw(2000 + trial));
        let true_cam = CameraParams {
            s: rng.random_range(0.5..2.0),
            tx: rng.random_range(-0.3..0.3),
            ty: rng.random_range(-0.3..0.3),
        };
        let cam = CameraParams {
            s: rng.random_range(0.5..2.0),
            tx: rng.random_range(-0.3..0.3),
            ty: rng.random_range(-0.3..0.3),
        };
        let mut problem = FitProblem::from_ground_truth(&model, &gt, &true_cam).unwrap();
        problem.target_pose = Some(gt.pose);
        problem.target_shape = Some(gt.shape);
        for v in problem.visibility.iter_mut() {
            *v = if rng.random_bool(0.8) { 1.0 } else { 0.0 };
        }
        let (_, g) = loss_and_gradient(&at, &cam, &model, &problem).unwrap();
        let fd = finite_difference_gradient(&at, &cam, &model, &problem, 1e-5).unwrap();
        let diff = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    ensure(worst <= 1e-4, || {
        format!("relative gradient error {worst:e}")
    })?;
    Ok(format!("max relative error {worst:.1e} over 20 problems"))
}

fn run_cli(dir: &Path, threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_protomem"))
        .current_dir(dir)
        .args(["--seed", "3", "--threads", &threads.to_string()])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn pipeline(dir: &Path, threads: usize) -> Result<(), String> {
    let steps: &[&[&str]] = &[
        &["gen-toy", "--verts-per-joint", "4", "--out", "model.json"],
        &[
            "gen-samples",
            "--n",
            "60",
            "--clusters",
            "3",
            "--out",
            "data.jsonl",
        ],
        &[
            "cluster",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--k",
            "6",
            "--out",
            "result.json",
        ],
        &[
            "cluster",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--k",
            "1",
            "--out",
            "single.json",
        ],
        &[
            "build-memory",
            "--result",
            "result.json",
            "--out",
            "memory.json",
        ],
        &[
            "build-memory",
            "--result",
            "single.json",
            "--out",
            "global.json",
        ],
        &[
            "label",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--memory",
            "memory.json",
            "--out",
            "labels.jsonl",
        ],
        &[
            "fit",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--memory",
            "memory.json",
            "--iters",
            "5",
            "--out",
            "fits.jsonl",
        ],
        &[
            "fit",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--memory",
            "memory.json",
            "--iters",
            "5",
            "--paired",
            "--global",
            "global.json",
            "--out",
            "paired.json",
        ],
    ];
    for args in steps {
        run_cli(dir, threads, args)?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [("a", 1), ("b", 8), ("c", 8)];
    for (name, threads) in runs {
        let dir = root.path().join(name);
        std::fs::create_dir(&dir).map_err(|e| e.to_string())?;
        pipeline(&dir, threads)?;
    }
    let mut files: Vec<String> = std::fs::read_dir(root.path().join("a"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    for f in &files {
        let a = std::fs::read(root.path().join("a").join(f)).map_err(|e| e.to_string())?;
        for other in ["b", "c"] {
            let b = std::fs::read(root.path().join(other).join(f)).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{f} differs between runs a and {other}"))?;
        }
    }
    Ok(format!(
        "{} files identical across 3 runs (threads 1, 8, 8)",
        files.len()
    ))
}

fn main() {
    let criteria: [(&str, Option<Duration>, fn() -> Outcome); 10] = [
        (
            "rotation suite",
            Some(Duration::from_secs(1)),
            rotation_suite,
        ),
        (
            "Markley averaging oracle",
            Some(Duration::from_secs(10)),
            markley_oracle,
        ),
        ("body-model linearity", None, body_model_linearity),
        (
            "clustering recovery",
            Some(Duration::from_secs(30)),
            clustering_recovery,
        ),
        ("brute-force equivalence", None, brute_force_equivalence),
        ("distance-reduction premise", None, distance_reduction),
        (
            "paired-fit experiment",
            Some(Duration::from_secs(300)),
            paired_fit,
        ),
        ("metric suite", None, metric_suite),
        ("gradient check", None, gradient_check),
        ("determinism", None, determinism),
    ];
    let mut failures = 0;
    let mut out = std::io::stdout();
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".to_string()));
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > *b => Err(format!("took longer than {b:?}")),
            (r, _) => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        if result.is_err() {
            failures += 1;
        }
        let _ = writeln!(
            out,
            "criterion {:>2} {:<28} {status} {:>8.3}s  {detail}",
            i + 1,
            name,
            elapsed.as_secs_f64()
        );
    }
    let _ = out.flush();
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
