use protomem::body_model::{gen_toy_model, BodyModel, BodyParams};
use protomem::clustering::{p3dh_kmeans, ClusterConfig, ClusterResult};
use protomem::distance::{build_part_weights, unweighted_vertex_rmsd};
use protomem::fitting::{fit, CameraParams, FitProblem};
use protomem::memory::{
    build_memory, label_samples, select_prototype, PrototypeMemory, ScoreVector,
};
use protomem::metrics::{bucket_by_prototype_distance, mpvpe, spearman};
use protomem::rotations::rot6d_to_rotmat;
use protomem::synth::{generate_corpus, Corpus, CorpusSpec};

fn setup(k: usize) -> (BodyModel, Corpus, ClusterResult) {
    let model = gen_toy_model(0, 5).unwrap();
    let corpus = generate_corpus(&CorpusSpec {
        seed: 4,
        n: 90,
        clusters: 4,
        noise: 0.1,
        ..CorpusSpec::default()
    })
    .unwrap();
    let config = ClusterConfig {
        k,
        seed: 1,
        ..ClusterConfig::default()
    };
    let result = p3dh_kmeans(&corpus.samples, &config, &model).unwrap();
    (model, corpus, result)
}

#[test]
fn labels_reproduce_final_assignments() {
    let (model, corpus, result) = setup(8);
    let memory = build_memory(&result).unwrap();
    let w = build_part_weights(&model, &memory.meta().part_weights).unwrap();
    let labels = label_samples(&corpus.samples, &memory, &model, &w).unwrap();
    let idx: Vec<usize> = labels.iter().map(|c| c.one_hot_index().unwrap()).collect();
    assert_eq!(idx, result.assignments);
}

#[test]
fn labels_follow_row_permutation() {
    let (model, corpus, result) = setup(8);
    let memory = build_memory(&result).unwrap();
    let w = build_part_weights(&model, &memory.meta().part_weights).unwrap();
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let rows: Vec<BodyParams> = perm.iter().map(|&j| memory.rows()[j].clone()).collect();
    let shuffled = PrototypeMemory::new(rows, memory.meta().clone()).unwrap();

    let before = label_samples(&corpus.samples, &memory, &model, &w).unwrap();
    let after = label_samples(&corpus.samples, &shuffled, &model, &w).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(perm[b.one_hot_index().unwrap()], a.one_hot_index().unwrap());
    }
}

#[test]
fn selection_returns_rows_and_valid_blends() {
    let (_, _, result) = setup(8);
    let memory = build_memory(&result).unwrap();
    for j in 0..memory.k() {
        let c = ScoreVector::one_hot(memory.k(), j).unwrap();
        assert_eq!(select_prototype(&memory, &c).unwrap(), memory.rows()[j]);
    }
    let blend = select_prototype(&memory, &ScoreVector::uniform(memory.k()).unwrap()).unwrap();
    for block in &blend.pose {
        let m = rot6d_to_rotmat(block).unwrap().into_inner();
        assert!(
            (m.transpose() * m - nalgebra::Matrix3::identity())
                .abs()
                .max()
                < 1e-12
        );
    }
}

#[test]
fn more_prototypes_sit_closer() {
    let (_, _, many) = setup(12);
    let (_, _, one) = setup(1);
    let mean = |r: &ClusterResult| r.distances.iter().sum::<f64>() / r.distances.len() as f64;
    assert!(mean(&many) < mean(&one));
}

#[test]
fn global_init_error_grows_with_distance() {
    let (model, corpus, one) = setup(1);
    let global = &one.centers[0];
    let cam = CameraParams::default();
    let errors: Vec<f64> = corpus
        .samples
        .iter()
        .map(|gt| {
            let problem = FitProblem::from_ground_truth(&model, gt, &cam).unwrap();
            let r = fit(global, &cam, &model, &problem, 5, 1.0).unwrap();
            mpvpe(
                &model.vertices(&r.params).unwrap(),
                &model.vertices(gt).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let report =
        bucket_by_prototype_distance(&corpus.samples, global, &model, &[0.0, 1.0], &[10.0], None)
            .unwrap();
    let reference = model.vertices(global).unwrap();
    for (s, d) in corpus.samples.iter().zip(&report.distances) {
        let direct = unweighted_vertex_rmsd(&model.vertices(s).unwrap(), &reference).unwrap();
        assert_eq!(direct, *d);
    }
    let rho = spearman(&report.distances, &errors).unwrap();
    assert!(rho > 0.0, "rank correlation {rho}");
}
