//! The subcommands. Each one reads its inputs, checks that every path it
//! will touch is usable, then computes and writes its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fbf_core::baselines::{pf_run, StateSpaceModel};
use fbf_core::filtering::{fbf_filter, sample_run, FilterOptions, FilterRun};
use fbf_core::metrics::{crps, mmd, rmse, SampleSet, Summary};
use fbf_core::model::{TrainedFilter, Variant};
use fbf_core::rng::{self, derive_seed};
use fbf_core::systems::{make_ssm_interface, simulate, Dataset, Trajectory};
use fbf_core::training::fit;
use fbf_core::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{noise_of, with_noise, ExperimentConfig, Method, Metric};
use crate::error::{io_at, CliError, CliResult};
use crate::formats::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, SampleReader, SampleWriter, SamplesHeader,
    FORMAT_VERSION,
};

/// Per-invocation path and count overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub samples: Option<usize>,
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(io_at(p)),
        _ => Ok(()),
    }
}

fn ensure_input(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{}: no such file", path.display())))
    }
}

/// `foo.fbfs` -> `foo.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(io_at(path))
}

/// Runs `f` over `indices` a few at a time in parallel and hands the results
/// to `sink` in index order. Bounds memory to one batch of results.
fn in_batches<T, F, S>(indices: std::ops::Range<usize>, f: F, mut sink: S) -> CliResult<()>
where
    T: Send,
    F: Fn(usize) -> CliResult<T> + Sync,
    S: FnMut(usize, T) -> CliResult<()>,
{
    let width = rayon::current_num_threads().max(1);
    let all: Vec<usize> = indices.collect();
    for batch in all.chunks(width) {
        let results: Vec<CliResult<T>> = batch.par_iter().map(|&i| f(i)).collect();
        for (&i, r) in batch.iter().zip(results) {
            sink(i, r?)?;
        }
    }
    Ok(())
}

pub struct GenerateSummary {
    pub path: PathBuf,
    pub trajectories: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub meas_dim: usize,
    pub bytes: u64,
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    Ok(simulate(&cfg.system, cfg.data.trajectories, cfg.data.steps, cfg.data_seed())?)
}

pub fn cmd_generate(cfg: &ExperimentConfig, ov: &Overrides) -> CliResult<GenerateSummary> {
    let path = ov.out.clone().unwrap_or_else(|| cfg.paths.dataset());
    ensure_parent(&path)?;
    let data = generate_dataset(cfg)?;
    let bytes = save_dataset(&path, &data)?;
    Ok(GenerateSummary {
        path,
        trajectories: data.meta.trajectories,
        steps: data.meta.steps,
        state_dim: data.meta.state_dim,
        meas_dim: data.meta.meas_dim,
        bytes,
    })
}

fn loss_csv(history: &[fbf_core::LossRecord]) -> String {
    let mut s = String::from("iteration,objective,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.objective, r.lr);
    }
    s
}

fn check_dataset_matches(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<()> {
    if data.len() != cfg.data.trajectories {
        return Err(CliError::Config(format!(
            "dataset has {} trajectories, config expects {}",
            data.len(),
            cfg.data.trajectories
        )));
    }
    Ok(())
}

/// Trains on the leading `N - test_trajectories` trajectories. A diverged run
/// still writes its partial loss history.
pub fn train_filter(cfg: &ExperimentConfig, data: &Dataset, loss_path: Option<&Path>) -> CliResult<TrainedFilter> {
    check_dataset_matches(cfg, data)?;
    let train = data.slice(0..cfg.test_start());
    let mc = cfg.model_config(data.meta.state_dim, data.meta.meas_dim);
    match fit(&mc, &train, &cfg.train_config()) {
        Ok(f) => {
            if let Some(p) = loss_path {
                write_text(p, &loss_csv(&f.history))?;
            }
            Ok(f)
        }
        Err(Error::Divergence {
            iteration,
            reason,
            history,
        }) => {
            if let Some(p) = loss_path {
                write_text(p, &loss_csv(&history))?;
            }
            Err(CliError::Numeric(format!("training diverged at iteration {iteration}: {reason}")))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, ov: &Overrides) -> CliResult<PathBuf> {
    let data_path = ov.data.clone().unwrap_or_else(|| cfg.paths.dataset());
    let out = ov.out.clone().unwrap_or_else(|| cfg.paths.checkpoint());
    ensure_input(&data_path)?;
    ensure_parent(&out)?;
    let data = load_dataset(&data_path)?;
    let loss = sibling(&out, "loss.csv");
    let f = train_filter(cfg, &data, Some(&loss))?;
    save_checkpoint(&out, &f)?;
    Ok(out)
}

fn filter_seed(cfg: &ExperimentConfig, traj: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, "filter", 0), "trajectory", traj as u64)
}

fn pf_seed(cfg: &ExperimentConfig, traj: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, "pf", 0), "trajectory", traj as u64)
}

/// Filters one trajectory and draws `count` posterior samples per step.
pub fn fbf_trajectory(
    filter: &TrainedFilter,
    traj: &Trajectory,
    count: usize,
    seed: u64,
    opts: FilterOptions,
) -> CliResult<(FilterRun, Vec<f64>)> {
    let run = fbf_filter(filter, &traj.measurements, opts)?;
    let samples = sample_run(filter, &run, count, seed)?;
    Ok((run, samples))
}

/// Bootstrap filter summary at one step.
pub struct PfStep {
    pub ess: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Runs the particle filter on one trajectory and resamples `count`
/// equal-weight draws per step.
pub fn pf_trajectory<S: StateSpaceModel + ?Sized>(
    ssm: &S,
    traj: &Trajectory,
    particles: usize,
    count: usize,
    seed: u64,
) -> CliResult<(Vec<PfStep>, Vec<f64>)> {
    let mut steps = Vec::with_capacity(traj.k());
    let mut samples = Vec::with_capacity(traj.k() * count * traj.m());
    let mut r = rng::stream(seed, "pf.samples", 0);
    pf_run(ssm, &traj.measurements, particles, seed, |c| {
        steps.push(PfStep {
            ess: c.ess,
            mean: c.mean(),
            std: c.variance().iter().map(|v| v.sqrt()).collect(),
        });
        samples.extend(c.equal_weight_samples(count, &mut r));
        Ok(())
    })?;
    Ok((steps, samples))
}

fn variant_method(v: Variant) -> &'static str {
    match v {
        Variant::Fbf => Method::Fbf.name(),
        Variant::FbfPrime => Method::FbfPrime.name(),
    }
}

fn beliefs_header(m: usize) -> String {
    let mut s = String::from("trajectory,k");
    for p in ["latent_mean", "latent_var", "x_mean"] {
        for i in 0..m {
            let _ = write!(s, ",{p}_{i}");
        }
    }
    s.push('\n');
    s
}

pub fn cmd_filter(cfg: &ExperimentConfig, ov: &Overrides) -> CliResult<PathBuf> {
    let ckpt = ov.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint());
    let data_path = ov.data.clone().unwrap_or_else(|| cfg.paths.dataset());
    ensure_input(&ckpt)?;
    ensure_input(&data_path)?;
    let filter = load_checkpoint(&ckpt)?;
    let method = variant_method(filter.variant());
    let out = ov.out.clone().unwrap_or_else(|| cfg.paths.samples(method));
    ensure_parent(&out)?;
    let data = load_dataset(&data_path)?;
    check_dataset_matches(cfg, &data)?;
    let (m, n) = (data.meta.state_dim, data.meta.meas_dim);
    if filter.model.state_dim() != m || filter.model.meas_dim() != n {
        return Err(CliError::Config(format!(
            "checkpoint is for m = {}, n = {}; dataset has m = {m}, n = {n}",
            filter.model.state_dim(),
            filter.model.meas_dim()
        )));
    }
    let count = ov.samples.unwrap_or(cfg.evaluation.samples);
    if count == 0 {
        return Err(CliError::Config("--samples must be positive".into()));
    }
    let start = cfg.test_start();
    let header = SamplesHeader {
        format_version: FORMAT_VERSION,
        method: method.to_string(),
        first_trajectory: start,
        trajectories: data.len() - start,
        steps: data.meta.steps,
        samples: count,
        state_dim: m,
        seed: cfg.seed,
    };
    let mut writer = SampleWriter::create(&out, header)?;
    let mut csv = beliefs_header(m);
    in_batches(
        start..data.len(),
        |i| {
            fbf_trajectory(&filter, &data.trajectories[i], count, filter_seed(cfg, i), cfg.filter)
                .map_err(|e| e.context(&format!("trajectory {i}")))
        },
        |i, (run, samples)| {
            let set = SampleSet::new(run.steps(), count, m, samples)?;
            for (k, b) in run.beliefs.iter().enumerate() {
                let _ = write!(csv, "{i},{k}");
                for v in b.mean.iter().chain(b.cov.diagonal().iter()) {
                    let _ = write!(csv, ",{v}");
                }
                // no samples are drawn at k = 0
                let xm = if k == 0 { vec![f64::NAN; m] } else { set.mean(k - 1) };
                for v in xm {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
            writer.write_trajectory(&set.data)
        },
    )?;
    writer.finish()?;
    write_text(&sibling(&out, "beliefs.csv"), &csv)?;
    Ok(out)
}

pub fn cmd_pf(cfg: &ExperimentConfig, ov: &Overrides) -> CliResult<PathBuf> {
    let data_path = ov.data.clone().unwrap_or_else(|| cfg.paths.dataset());
    let out = ov.out.clone().unwrap_or_else(|| cfg.paths.samples(Method::Pf.name()));
    ensure_input(&data_path)?;
    ensure_parent(&out)?;
    let data = load_dataset(&data_path)?;
    check_dataset_matches(cfg, &data)?;
    if data.meta.system != cfg.system {
        return Err(CliError::Config("dataset was generated from a different system block".into()));
    }
    let ssm = make_ssm_interface(&cfg.system)?;
    let count = ov.samples.unwrap_or(cfg.evaluation.samples);
    if count == 0 {
        return Err(CliError::Config("--samples must be positive".into()));
    }
    let m = data.meta.state_dim;
    let start = cfg.test_start();
    let header = SamplesHeader {
        format_version: FORMAT_VERSION,
        method: Method::Pf.name().to_string(),
        first_trajectory: start,
        trajectories: data.len() - start,
        steps: data.meta.steps,
        samples: count,
        state_dim: m,
        seed: cfg.seed,
    };
    let mut writer = SampleWriter::create(&out, header)?;
    let mut csv = String::from("trajectory,k,ess");
    for p in ["mean", "std"] {
        for i in 0..m {
            let _ = write!(csv, ",{p}_{i}");
        }
    }
    csv.push('\n');
    // one particle filter at a time; each is parallel inside
    for i in start..data.len() {
        let (steps, samples) = pf_trajectory(&ssm, &data.trajectories[i], cfg.evaluation.particles, count, pf_seed(cfg, i))
            .map_err(|e| e.context(&format!("trajectory {i}")))?;
        for (k, s) in steps.iter().enumerate() {
            let _ = write!(csv, "{i},{},{}", k + 1, s.ess);
            for v in s.mean.iter().chain(&s.std) {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        writer.write_trajectory(&samples)?;
    }
    writer.finish()?;
    write_text(&sibling(&out, "summary.csv"), &csv)?;
    Ok(out)
}

/// The requested metrics for one trajectory, in the order of `metrics`.
pub fn trajectory_metrics(
    traj: &Trajectory,
    samples: Vec<f64>,
    count: usize,
    metrics: &[Metric],
    sigma: f64,
) -> CliResult<Vec<f64>> {
    let m = traj.m();
    let set = SampleSet::new(traj.k(), count, m, samples)?;
    let truth = &traj.states[m..];
    metrics
        .iter()
        .map(|metric| {
            Ok(match metric {
                Metric::Rmse => rmse(truth, &set)?,
                Metric::Mmd => mmd(truth, &set, sigma)?,
                Metric::Crps => crps(truth, &set)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricColumn {
    pub name: &'static str,
    pub mean: f64,
    pub std: f64,
    pub per_trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub method: String,
    pub first_trajectory: usize,
    pub trajectories: usize,
    pub samples: usize,
    pub mmd_sigma: f64,
    pub metrics: Vec<MetricColumn>,
}

impl EvaluationReport {
    pub fn new(method: &str, first: usize, samples: usize, cfg: &ExperimentConfig, rows: &[Vec<f64>]) -> Self {
        let metrics = cfg
            .evaluation
            .metrics
            .iter()
            .enumerate()
            .map(|(c, metric)| {
                let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                let s = Summary::of(&col);
                MetricColumn {
                    name: metric.name(),
                    mean: s.mean,
                    std: s.std,
                    per_trajectory: col,
                }
            })
            .collect();
        EvaluationReport {
            method: method.to_string(),
            first_trajectory: first,
            trajectories: rows.len(),
            samples,
            mmd_sigma: cfg.evaluation.mmd_sigma,
            metrics,
        }
    }

    pub fn column(&self, name: &str) -> Option<&MetricColumn> {
        self.metrics.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory");
        for c in &self.metrics {
            let _ = write!(s, ",{}", c.name);
        }
        s.push('\n');
        for t in 0..self.trajectories {
            let _ = write!(s, "{}", self.first_trajectory + t);
            for c in &self.metrics {
                let _ = write!(s, ",{}", c.per_trajectory[t]);
            }
            s.push('\n');
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            s.push_str(label);
            for c in &self.metrics {
                let _ = write!(s, ",{}", if pick == 0 { c.mean } else { c.std });
            }
            s.push('\n');
        }
        s
    }
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, ov: &Overrides) -> CliResult<EvaluationReport> {
    let data_path = ov.data.clone().unwrap_or_else(|| cfg.paths.dataset());
    let input = ov.input.clone().unwrap_or_else(|| cfg.paths.samples(Method::Fbf.name()));
    ensure_input(&data_path)?;
    ensure_input(&input)?;
    let mut reader = SampleReader::open(&input)?;
    let h = reader.header.clone();
    let out = ov.out.clone().unwrap_or_else(|| cfg.paths.metrics_json(&h.method));
    ensure_parent(&out)?;
    let data = load_dataset(&data_path)?;
    if h.first_trajectory + h.trajectories > data.len() || h.steps != data.meta.steps || h.state_dim != data.meta.state_dim
    {
        return Err(CliError::Config(format!(
            "samples cover trajectories {}..{} with K = {}, m = {}; dataset has {} with K = {}, m = {}",
            h.first_trajectory,
            h.first_trajectory + h.trajectories,
            h.steps,
            h.state_dim,
            data.len(),
            data.meta.steps,
            data.meta.state_dim
        )));
    }
    let mut rows = Vec::with_capacity(h.trajectories);
    let mut i = h.first_trajectory;
    while let Some(block) = reader.next_trajectory()? {
        rows.push(trajectory_metrics(
            &data.trajectories[i],
            block,
            h.samples,
            &cfg.evaluation.metrics,
            cfg.evaluation.mmd_sigma,
        )?);
        i += 1;
    }
    let report = EvaluationReport::new(&h.method, h.first_trajectory, h.samples, cfg, &rows);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out, &(json + "\n"))?;
    write_text(&sibling(&out, "csv"), &report.to_csv())?;
    Ok(report)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub noise: f64,
    pub report: EvaluationReport,
    /// Training wall time; `None` for methods without a training stage.
    pub offline_seconds: Option<f64>,
    /// Filtering plus sampling wall time over the test set.
    pub online_seconds: f64,
}

/// Runs every configured method on one freshly generated dataset per noise
/// level, entirely in memory.
pub fn run_compare(cfg: &ExperimentConfig) -> CliResult<Vec<CompareRow>> {
    let levels = if cfg.compare.noise_levels.is_empty() {
        vec![noise_of(&cfg.system)]
    } else {
        cfg.compare.noise_levels.clone()
    };
    let mut rows = Vec::new();
    for (j, &noise) in levels.iter().enumerate() {
        let mut sub = cfg.clone().with_seed(derive_seed(cfg.seed, "compare", j as u64));
        sub.system = with_noise(&cfg.system, noise);
        sub.validate()?;
        let data = generate_dataset(&sub)?;
        let start = sub.test_start();
        let count = sub.evaluation.samples;
        for &method in &cfg.compare.methods {
            let label = format!("{} at noise {noise}", method.name());
            let row = compare_one(&sub, &data, method, start, count).map_err(|e| e.context(&label))?;
            rows.push(CompareRow { noise, ..row });
        }
    }
    Ok(rows)
}

fn compare_one(cfg: &ExperimentConfig, data: &Dataset, method: Method, start: usize, count: usize) -> CliResult<CompareRow> {
    let mut rows = Vec::new();
    let (offline, online) = match method {
        Method::Fbf | Method::FbfPrime => {
            let mut c = cfg.clone();
            c.model.variant = if method == Method::Fbf { Variant::Fbf } else { Variant::FbfPrime };
            let t0 = Instant::now();
            let filter = train_filter(&c, data, None)?;
            let offline = t0.elapsed().as_secs_f64();
            let mut online = 0.0;
            for i in start..data.len() {
                let t = &data.trajectories[i];
                let t1 = Instant::now();
                let (_, samples) = fbf_trajectory(&filter, t, count, filter_seed(cfg, i), cfg.filter)?;
                online += t1.elapsed().as_secs_f64();
                rows.push(trajectory_metrics(t, samples, count, &cfg.evaluation.metrics, cfg.evaluation.mmd_sigma)?);
            }
            (Some(offline), online)
        }
        Method::Pf => {
            let ssm = make_ssm_interface(&cfg.system)?;
            let mut online = 0.0;
            for i in start..data.len() {
                let t = &data.trajectories[i];
                let t1 = Instant::now();
                let (_, samples) = pf_trajectory(&ssm, t, cfg.evaluation.particles, count, pf_seed(cfg, i))?;
                online += t1.elapsed().as_secs_f64();
                rows.push(trajectory_metrics(t, samples, count, &cfg.evaluation.metrics, cfg.evaluation.mmd_sigma)?);
            }
            (None, online)
        }
    };
    Ok(CompareRow {
        method,
        noise: noise_of(&cfg.system),
        report: EvaluationReport::new(method.name(), start, count, cfg, &rows),
        offline_seconds: offline,
        online_seconds: online,
    })
}

pub fn compare_csv(cfg: &ExperimentConfig, rows: &[CompareRow]) -> String {
    let mut s = String::from("method,noise");
    for m in &cfg.evaluation.metrics {
        let _ = write!(s, ",{0}_mean,{0}_std", m.name());
    }
    s.push_str(",offline_seconds,online_seconds\n");
    for r in rows {
        let _ = write!(s, "{},{}", r.method.name(), r.noise);
        for c in &r.report.metrics {
            let _ = write!(s, ",{},{}", c.mean, c.std);
        }
        match r.offline_seconds {
            Some(t) => {
                let _ = write!(s, ",{t:.3}");
            }
            None => s.push_str(",n/a"),
        }
        let _ = writeln!(s, ",{:.3}", r.online_seconds);
    }
    s
}

pub fn cmd_compare(cfg: &ExperimentConfig, ov: &Overrides) -> CliResult<(PathBuf, Vec<CompareRow>)> {
    let out = ov.out.clone().unwrap_or_else(|| cfg.paths.compare_csv());
    ensure_parent(&out)?;
    let mut cfg = cfg.clone();
    if let Some(n) = ov.samples {
        cfg.evaluation.samples = n;
    }
    let rows = run_compare(&cfg)?;
    write_text(&out, &compare_csv(&cfg, &rows))?;
    Ok((out, rows))
}
