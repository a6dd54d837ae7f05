//! Learning-curve harness: train every (size, method, seed) job on a
//! stratified subsample of the training pool and score it on the test split.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{infer, train, LabeledImages, Method, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{icc, mse, PairedSeries, Statistic};
use crate::regressor::{ArchitectureConfig, RegressorModel};
use crate::rng;

const STREAM_SUBSAMPLE: u64 = 101;

pub const CURVE_HEADER: &str = "size,method,seed,test_mse,test_icc,train_seconds";
pub const AGGREGATE_HEADER: &str = "size,method,mean_mse,std_mse,mean_icc,std_icc";

/// Picks `size` pool indices so the labels stay close to uniform.
///
/// Distinct label values are split into `min(size, distinct)` contiguous
/// quantile bins. Bins are then filled greedily: each round visits the
/// non-exhausted bins in a fresh random order and takes one random member
/// from each, until `size` indices are chosen. Returned indices are sorted.
pub fn stratified_subsample<R: Rng + ?Sized>(
    labels: &[f64],
    size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::invalid("subsample size must be positive"));
    }
    if size > labels.len() {
        return Err(Error::invalid(format!(
            "subsample size {size} exceeds the pool of {} records",
            labels.len()
        )));
    }
    if labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("pool labels must be finite"));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let bins = size.min(distinct.len());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, v) in labels.iter().enumerate() {
        let rank = distinct.partition_point(|d| d < v);
        members[rank * bins / distinct.len()].push(i);
    }
    for m in &mut members {
        m.shuffle(rng);
    }
    let mut chosen = Vec::with_capacity(size);
    while chosen.len() < size {
        let mut open: Vec<usize> = (0..bins).filter(|&b| !members[b].is_empty()).collect();
        open.shuffle(rng);
        for b in open {
            if chosen.len() == size {
                break;
            }
            chosen.push(members[b].pop().expect("open bin"));
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// What to sweep. `seeds` jobs are run per (size, method); the seed index
/// selects both the model initialisation and the training randomness, and is
/// shared across methods so they start from identical weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSpec {
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub num_seeds: usize,
    pub master_seed: u64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
    /// Write measured training times instead of 0.
    pub record_timing: bool,
}

impl CurveSpec {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.sizes.is_empty() || self.methods.is_empty() || self.num_seeds == 0 {
            return Err(Error::invalid(
                "a curve needs at least one size, method and seed",
            ));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs must be positive"));
        }
        if let Some(&s) = self.sizes.iter().find(|&&s| s == 0 || s > pool_size) {
            return Err(Error::invalid(format!(
                "training size {s} is outside 1..={pool_size} (available training records)"
            )));
        }
        Ok(())
    }
}

/// One finished job.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub size: usize,
    pub method: Method,
    pub seed: usize,
    pub test_mse: f64,
    pub test_icc: Statistic,
    pub train_seconds: f64,
}

/// Per-seed values for one (size, method) with their summary statistics.
/// Means and standard deviations skip seeds whose ICC is not computable.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurvePoint {
    pub size: usize,
    pub method: Method,
    pub seeds: Vec<usize>,
    pub test_mse: Vec<f64>,
    pub test_icc: Vec<Statistic>,
    pub mean_mse: f64,
    pub std_mse: Option<f64>,
    pub mean_icc: Option<f64>,
    pub std_icc: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation; none below two values.
fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

impl LearningCurvePoint {
    pub fn from_rows(rows: &[&CurveRow]) -> Self {
        let test_mse: Vec<f64> = rows.iter().map(|r| r.test_mse).collect();
        let iccs: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.test_icc.clone().ok())
            .collect();
        Self {
            size: rows[0].size,
            method: rows[0].method,
            seeds: rows.iter().map(|r| r.seed).collect(),
            mean_mse: mean(&test_mse).unwrap_or(f64::NAN),
            std_mse: sample_std(&test_mse),
            mean_icc: mean(&iccs),
            std_icc: sample_std(&iccs),
            test_icc: rows.iter().map(|r| r.test_icc.clone()).collect(),
            test_mse,
        }
    }
}

struct Job {
    size: usize,
    method: Method,
    seed: usize,
}

fn run_job(
    job: &Job,
    subsample: &LabeledImages,
    val: &LabeledImages,
    test: &LabeledImages,
    architecture: &ArchitectureConfig,
    base: &TrainConfig,
    master_seed: u64,
) -> Result<CurveRow> {
    let seed = rng::derive_seed(master_seed, &[job.size as u64, job.seed as u64]);
    let model = RegressorModel::build(ArchitectureConfig {
        seed,
        ..architecture.clone()
    })?;
    let config = TrainConfig {
        method: job.method,
        seed,
        ..base.clone()
    };
    let started = Instant::now();
    let (model, _) = train(model, subsample, val, &config)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let preds = infer(&model, &test.images)?;
    let series = PairedSeries::new(test.labels.clone(), preds)?;
    Ok(CurveRow {
        size: job.size,
        method: job.method,
        seed: job.seed,
        test_mse: mse(&series),
        test_icc: icc(&series),
        train_seconds,
    })
}

/// Runs every job and returns the per-job rows (size-major, then method,
/// then seed) with one aggregated point per (size, method).
pub fn learning_curve_experiment(
    pool: &LabeledImages,
    val: &LabeledImages,
    test: &LabeledImages,
    architecture: &ArchitectureConfig,
    train_config: &TrainConfig,
    spec: &CurveSpec,
) -> Result<(Vec<CurveRow>, Vec<LearningCurvePoint>)> {
    spec.validate(pool.len())?;
    if test.len() < 2 {
        return Err(Error::invalid("the test split needs at least two records"));
    }
    let mut subsamples = BTreeMap::new();
    for &size in &spec.sizes {
        let mut r = rng::stream(spec.master_seed, &[STREAM_SUBSAMPLE, size as u64]);
        let idx = stratified_subsample(&pool.labels, size, &mut r)?;
        subsamples.insert(size, pool.subset(&idx));
    }
    let jobs: Vec<Job> = spec
        .sizes
        .iter()
        .flat_map(|&size| {
            spec.methods.iter().flat_map(move |&method| {
                (0..spec.num_seeds).map(move |seed| Job { size, method, seed })
            })
        })
        .collect();
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {} worker threads: {e}", spec.jobs)))?;
    let results: Vec<Result<CurveRow>> = pool_threads.install(|| {
        jobs.par_iter()
            .map(|job| {
                run_job(
                    job,
                    &subsamples[&job.size],
                    val,
                    test,
                    architecture,
                    train_config,
                    spec.master_seed,
                )
            })
            .collect()
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    if !spec.record_timing {
        for r in &mut rows {
            r.train_seconds = 0.0;
        }
    }
    let mut points = Vec::new();
    for &size in &spec.sizes {
        for &method in &spec.methods {
            let group: Vec<&CurveRow> = rows
                .iter()
                .filter(|r| r.size == size && r.method == method)
                .collect();
            points.push(LearningCurvePoint::from_rows(&group));
        }
    }
    Ok((rows, points))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))
}

/// Floats use the shortest round-trip form; missing statistics read `NA`.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{},{:?}\n",
            r.size,
            r.method,
            r.seed,
            r.test_mse,
            opt(r.test_icc.clone().ok()),
            r.train_seconds
        ));
    }
    out
}

pub fn aggregate_csv(points: &[LearningCurvePoint]) -> String {
    let mut out = format!("{AGGREGATE_HEADER}\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:?},{},{},{}\n",
            p.size,
            p.method,
            p.mean_mse,
            opt(p.std_mse),
            opt(p.mean_icc),
            opt(p.std_icc)
        ));
    }
    out
}
