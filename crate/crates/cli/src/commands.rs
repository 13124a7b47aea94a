use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use rayon::prelude::*;
use serde::Serialize;

use protomem::body_model::{gen_toy_model, load_model, BodyModel, BodyParams};
use protomem::clustering::{p3dh_kmeans, ClusterConfig, ClusterResult, ClusterResultFile, Variant};
use protomem::distance::{build_part_weights, PartWeightMap};
use protomem::fitting::{
    fit as fit_one, paired_trial, summarize_paired, CameraParams, FitProblem, PairedTrial,
};
use protomem::io::{read_dataset, read_jsonl, write_jsonl, DatasetRecord};
use protomem::memory::{
    build_memory as memory_from_result, label_samples, nearest_prototypes, select_prototype,
    PrototypeMemory, ScoreVector,
};
use protomem::metrics::{bucket_by_prototype_distance, evaluate, mpvpe, tail_indices};
use protomem::synth::{generate_corpus, CorpusSpec};
use protomem::Error;

use crate::{BucketArgs, ClusterArgs, FitArgs, GenSamplesArgs, WeightArgs};

pub struct Context {
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// 1 usage, 2 I/O, 3 validation, 4 numerical failure.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io(_) => 2,
                err if err.is_numerical() => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if cause
            .downcast_ref::<rayon::ThreadPoolBuildError>()
            .is_some()
        {
            return 1;
        }
    }
    3
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a PathBuf> {
    path.as_ref()
        .ok_or_else(|| usage(format!("this command needs {flag}")))
}

fn model(ctx: &Context) -> anyhow::Result<BodyModel> {
    let path = require(&ctx.model, "--model")?;
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn samples(path: &Path) -> anyhow::Result<Vec<DatasetRecord>> {
    read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn params_of(records: &[DatasetRecord]) -> anyhow::Result<Vec<BodyParams>> {
    Ok(records
        .iter()
        .map(DatasetRecord::params)
        .collect::<protomem::Result<Vec<_>>>()?)
}

fn memory(path: &Path) -> anyhow::Result<PrototypeMemory> {
    PrototypeMemory::load(path).with_context(|| format!("loading memory {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit_json<T: Serialize>(ctx: &Context, value: &T) -> anyhow::Result<()> {
    match &ctx.out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen_toy(ctx: &Context, verts_per_joint: usize) -> anyhow::Result<()> {
    let out = require(&ctx.out, "--out")?;
    let model = gen_toy_model(ctx.seed, verts_per_joint)?;
    model
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote toy model with {} vertices to {}",
        model.num_vertices(),
        out.display()
    );
    Ok(())
}

pub fn gen_samples(ctx: &Context, a: &GenSamplesArgs) -> anyhow::Result<()> {
    let out = require(&ctx.out, "--out")?;
    let spec = if a.limb_dominant {
        CorpusSpec {
            clusters: a.clusters,
            noise: a.noise,
            ..CorpusSpec::limb_dominant(ctx.seed, a.n)
        }
    } else {
        CorpusSpec {
            seed: ctx.seed,
            n: a.n,
            clusters: a.clusters,
            noise: a.noise,
            ..CorpusSpec::default()
        }
    };
    let corpus = generate_corpus(&spec)?;
    let records: Vec<DatasetRecord> = corpus
        .samples
        .iter()
        .zip(&corpus.labels)
        .map(|(s, &l)| DatasetRecord {
            label: Some(l),
            ..DatasetRecord::from_params(s)
        })
        .collect();
    write_jsonl(out, &records).with_context(|| format!("writing {}", out.display()))?;
    let labels_path = a
        .labels_out
        .clone()
        .unwrap_or_else(|| with_suffix(out, ".labels.jsonl"));
    write_jsonl(&labels_path, &corpus.labels)
        .with_context(|| format!("writing {}", labels_path.display()))?;
    println!(
        "wrote {} samples in {} clusters to {}",
        records.len(),
        spec.clusters,
        out.display()
    );
    Ok(())
}

fn weight_map(w: &WeightArgs) -> PartWeightMap {
    PartWeightMap {
        limb: w.limb_weight,
        head: w.head_weight,
        hand: w.hand_weight,
        foot: w.foot_weight,
        torso: w.torso_weight,
    }
}

pub fn cluster(ctx: &Context, a: &ClusterArgs) -> anyhow::Result<()> {
    let out = require(&ctx.out, "--out")?;
    let variant: Variant = a.variant.parse().map_err(|e: Error| usage(e.to_string()))?;
    let model = model(ctx)?;
    let data = params_of(&samples(&a.data)?)?;
    let config = ClusterConfig {
        k: a.k,
        gamma_hat: a.gamma_hat,
        lambda_hat: a.lambda_hat,
        seed: ctx.seed,
        variant,
        part_weight_map: weight_map(&a.weights),
    };
    let result = p3dh_kmeans(&data, &config, &model)
        .with_context(|| format!("clustering {}", a.data.display()))?;
    for (i, g) in result.trace.iter().enumerate() {
        println!("iteration {}: mean distance {g:.9e}", i + 1);
    }
    println!(
        "{} clusters, {} iterations, converged: {}",
        result.centers.len(),
        result.iterations,
        result.converged
    );
    write_json(out, &result.to_file())
}

pub fn build_memory(ctx: &Context, result: &Path) -> anyhow::Result<()> {
    let out = require(&ctx.out, "--out")?;
    let text =
        std::fs::read_to_string(result).with_context(|| format!("reading {}", result.display()))?;
    let file: ClusterResultFile = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", result.display()))?;
    let result = ClusterResult::from_file(file)?;
    let memory = memory_from_result(&result)?;
    memory
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("wrote memory with K = {} to {}", memory.k(), out.display());
    Ok(())
}

pub fn label(ctx: &Context, data: &Path, memory_path: &Path) -> anyhow::Result<()> {
    let out = require(&ctx.out, "--out")?;
    let model = model(ctx)?;
    let memory = memory(memory_path)?;
    let weights = build_part_weights(&model, &memory.meta().part_weights)?;
    let data = params_of(&samples(data)?)?;
    let labels = label_samples(&data, &memory, &model, &weights)?;
    write_jsonl(out, &labels).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn read_scores(path: &Path) -> anyhow::Result<Vec<ScoreVector>> {
    read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

pub fn select(ctx: &Context, memory_path: &Path, scores: &Path) -> anyhow::Result<()> {
    let out = require(&ctx.out, "--out")?;
    let memory = memory(memory_path)?;
    let records = read_scores(scores)?
        .iter()
        .enumerate()
        .map(|(i, c)| {
            select_prototype(&memory, c)
                .map(|p| DatasetRecord::from_params(&p))
                .with_context(|| format!("score vector {}", i + 1))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_jsonl(out, &records).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn problem_for(model: &BodyModel, record: &DatasetRecord) -> protomem::Result<FitProblem> {
    match record.observations()? {
        Some(p) => Ok(p),
        None => FitProblem::from_ground_truth(model, &record.params()?, &CameraParams::default()),
    }
}

#[derive(Serialize)]
struct FitRecord {
    pose: Vec<f64>,
    shape: Vec<f64>,
    camera: CameraParams,
    loss: f64,
    iterations: usize,
    trace: Vec<f64>,
    prototype: Option<usize>,
}

/// Initial parameters per record and, for hard choices, the row used.
fn initial_params(
    model: &BodyModel,
    memory: &PrototypeMemory,
    gt: &[BodyParams],
    scores: Option<&Path>,
) -> anyhow::Result<Vec<(BodyParams, Option<usize>)>> {
    match scores {
        Some(path) => {
            let scores = read_scores(path)?;
            if scores.len() != gt.len() {
                return Err(Error::InvalidInput(format!(
                    "{} score vectors for {} records",
                    scores.len(),
                    gt.len()
                ))
                .into());
            }
            scores
                .iter()
                .map(|c| Ok((select_prototype(memory, c)?, c.one_hot_index())))
                .collect()
        }
        None => {
            let weights = build_part_weights(model, &memory.meta().part_weights)?;
            let (idx, _) = nearest_prototypes(gt, memory, model, &weights)?;
            Ok(idx
                .into_iter()
                .map(|j| (memory.rows()[j].clone(), Some(j)))
                .collect())
        }
    }
}

fn single_row(path: &Path) -> anyhow::Result<BodyParams> {
    let m = memory(path)?;
    if m.k() != 1 {
        return Err(Error::InvalidInput(format!(
            "{} holds {} rows, expected a single global prototype",
            path.display(),
            m.k()
        ))
        .into());
    }
    Ok(m.rows()[0].clone())
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    mpvpe: f64,
    tail5: f64,
    tail10: f64,
}

#[derive(Serialize)]
struct SweepTable {
    parameter: &'static str,
    rows: Vec<SweepRow>,
}

fn mean_of(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

pub fn fit(ctx: &Context, a: &FitArgs) -> anyhow::Result<()> {
    let model = model(ctx)?;
    let records = samples(&a.data)?;
    let gt = params_of(&records)?;
    let problems = records
        .iter()
        .map(|r| problem_for(&model, r))
        .collect::<protomem::Result<Vec<_>>>()?;
    let cam = CameraParams::default();

    if !a.sweep_k.is_empty() || !a.sweep_limb_weight.is_empty() {
        if !a.sweep_k.is_empty() && !a.sweep_limb_weight.is_empty() {
            return Err(usage("choose one of --sweep-k and --sweep-limb-weight"));
        }
        let train_path = require(&a.train, "--train")?;
        let train = params_of(&samples(train_path)?)?;
        let base = ClusterConfig {
            k: a.k,
            lambda_hat: a.lambda_hat,
            seed: ctx.seed,
            ..ClusterConfig::default()
        };
        let global = match &a.global {
            Some(p) => single_row(p)?,
            None => p3dh_kmeans(
                &train,
                &ClusterConfig {
                    k: 1,
                    ..base.clone()
                },
                &model,
            )?
            .centers
            .remove(0),
        };
        let global_verts = model.vertices(&global)?;
        let distances = gt
            .iter()
            .map(|g| protomem::distance::unweighted_vertex_rmsd(&model.vertices(g)?, &global_verts))
            .collect::<protomem::Result<Vec<f64>>>()?;
        let (tail5, tail10) = (
            tail_indices(&distances, 5.0)?,
            tail_indices(&distances, 10.0)?,
        );
        let (parameter, configs): (&'static str, Vec<(f64, ClusterConfig)>) =
            if !a.sweep_k.is_empty() {
                let configs = a
                    .sweep_k
                    .iter()
                    .map(|&k| (k as f64, ClusterConfig { k, ..base.clone() }))
                    .collect();
                ("k", configs)
            } else {
                let configs = a
                    .sweep_limb_weight
                    .iter()
                    .map(|&w| {
                        let mut c = base.clone();
                        c.part_weight_map.limb = w;
                        (w, c)
                    })
                    .collect();
                ("limb_weight", configs)
            };
        let mut rows = Vec::new();
        for (value, config) in configs {
            let result = p3dh_kmeans(&train, &config, &model)
                .with_context(|| format!("clustering for {parameter} = {value}"))?;
            let memory = memory_from_result(&result)?;
            let inits = initial_params(&model, &memory, &gt, None)?;
            let errors = inits
                .par_iter()
                .zip(&problems)
                .zip(&gt)
                .map(|(((init, _), problem), g)| {
                    let r = fit_one(init, &cam, &model, problem, a.iters, a.step)?;
                    mpvpe(&model.vertices(&r.params)?, &model.vertices(g)?)
                })
                .collect::<protomem::Result<Vec<f64>>>()?;
            let all: Vec<usize> = (0..errors.len()).collect();
            let row = SweepRow {
                value,
                mpvpe: mean_of(&errors, &all),
                tail5: mean_of(&errors, &tail5),
                tail10: mean_of(&errors, &tail10),
            };
            println!(
                "{parameter} = {:<8} mpvpe {:>10.4}  tail-5% {:>10.4}  tail-10% {:>10.4}",
                row.value, row.mpvpe, row.tail5, row.tail10
            );
            rows.push(row);
        }
        return emit_json(ctx, &SweepTable { parameter, rows });
    }

    let memory_path = require(&a.memory, "--memory")?;
    let memory = memory(memory_path)?;
    let inits = initial_params(&model, &memory, &gt, a.scores.as_deref())?;

    if a.paired {
        let global_path = require(&a.global, "--global")?;
        let global = single_row(global_path)?;
        let trials = inits
            .par_iter()
            .zip(&problems)
            .zip(&gt)
            .map(|(((init, _), problem), g)| {
                paired_trial(&model, g, problem, init, &global, &cam, a.iters, a.step)
            })
            .collect::<protomem::Result<Vec<PairedTrial>>>()?;
        let summary = summarize_paired(&trials, a.tail)?;
        println!(
            "{:>7} {:>6} {:>9} {:>16} {:>13} {:>18} {:>15}",
            "trials",
            "wins",
            "win_rate",
            "mpvpe_prototype",
            "mpvpe_global",
            "tail_mpvpe_proto",
            "tail_mpvpe_glob"
        );
        println!(
            "{:>7} {:>6} {:>9.3} {:>16.4} {:>13.4} {:>18.4} {:>15.4}",
            summary.trials,
            summary.wins,
            summary.win_rate,
            summary.prototype_mpvpe,
            summary.global_mpvpe,
            summary.tail_prototype_mpvpe,
            summary.tail_global_mpvpe
        );
        #[derive(Serialize)]
        struct Paired<'a> {
            summary: protomem::fitting::PairedSummary,
            trials: &'a [PairedTrial],
        }
        return emit_json(
            ctx,
            &Paired {
                summary,
                trials: &trials,
            },
        );
    }

    let out = require(&ctx.out, "--out")?;
    let fits = inits
        .par_iter()
        .zip(&problems)
        .map(|((init, row), problem)| {
            let r = fit_one(init, &cam, &model, problem, a.iters, a.step)?;
            let flat = r.params.flatten();
            Ok(FitRecord {
                pose: flat[..protomem::body_model::POSE_DIM].to_vec(),
                shape: flat[protomem::body_model::POSE_DIM..].to_vec(),
                camera: r.camera,
                loss: r.loss,
                iterations: r.iterations,
                trace: r.trace,
                prototype: *row,
            })
        })
        .collect::<protomem::Result<Vec<_>>>()?;
    write_jsonl(out, &fits).with_context(|| format!("writing {}", out.display()))?;
    let mean_loss = fits.iter().map(|f| f.loss).sum::<f64>() / fits.len().max(1) as f64;
    println!(
        "fitted {} records, mean final loss {mean_loss:.6e}",
        fits.len()
    );
    Ok(())
}

pub fn eval(ctx: &Context, pred: &Path, gt: &Path) -> anyhow::Result<()> {
    let model = model(ctx)?;
    let pred = params_of(&samples(pred)?)?;
    let gt = params_of(&samples(gt)?)?;
    let report = evaluate(&model, &pred, &gt)?;
    emit_json(ctx, &report)
}

pub fn buckets(ctx: &Context, a: &BucketArgs) -> anyhow::Result<()> {
    let model = model(ctx)?;
    let data = params_of(&samples(&a.data)?)?;
    let singular = memory(&a.singular)?
        .row(0)
        .cloned()
        .ok_or_else(|| anyhow!("empty memory"))?;
    let pred = match &a.pred {
        Some(p) => Some(params_of(&samples(p)?)?),
        None => None,
    };
    let report = bucket_by_prototype_distance(
        &data,
        &singular,
        &model,
        &a.edges,
        &a.tails,
        pred.as_deref(),
    )?;
    emit_json(ctx, &report)?;
    let csv_path = a
        .csv
        .clone()
        .or_else(|| ctx.out.as_ref().map(|o| with_suffix(o, ".csv")));
    if let Some(path) = csv_path {
        std::fs::write(&path, report.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
