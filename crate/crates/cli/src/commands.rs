//! Subcommand implementations. Every output path is a pure function of the
//! relevant config sections' hash and the seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use emag_core::guidance::GuidanceConfig;
use emag_core::metrics::{write_entropy_csv, EntropyPoint, MetricReport};
use emag_core::model::checkpoint;
use emag_core::model::data::Dataset;
use emag_core::model::train::train;
use emag_core::model::ToyModelParams;
use emag_core::sampler::{dump, run_sampler};
use emag_core::Tensor;

use crate::config::{config_hash, require, LabConfig, LoadedConfig, MetricsConfig, ScheduleConfig};
use crate::error::{CliError, CliResult};

pub const OUT_ENV: &str = "EMAG_LAB_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// `--out`, then `$EMAG_LAB_OUT`, then `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub samples: usize,
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

impl From<&MetricReport> for MetricSummary {
    fn from(r: &MetricReport) -> Self {
        Self {
            samples: r.samples,
            frechet: r.frechet,
            precision: r.precision,
            recall: r.recall,
            density: r.density,
            coverage: r.coverage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceConfig>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSummary>,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(CliError::io(format!("cannot read {}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(format!("cannot write {}", path.display())))
}

fn relative(paths: &[PathBuf], dir: &Path) -> Vec<String> {
    paths
        .iter()
        .map(|p| {
            p.strip_prefix(dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        })
        .collect()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(format!("cannot create {}", dir.display())))
}

/// Trains a model and writes `checkpoint/`, `loss.csv` and the run manifest.
pub fn cmd_train(cfg: &LoadedConfig, seed: u64, root: &Path) -> CliResult<PathBuf> {
    let c = &cfg.config;
    let model = require(&c.model, "model")?.clone();
    model.validate()?;
    let tc = require(&c.train, "train")?;
    tc.validate()?;
    let data = c.data.clone().unwrap_or_default();
    if data.size == 0 {
        return Err(CliError::Config("data.size must be positive".into()));
    }
    let hash = config_hash(&json!({"model": model, "train": tc, "data": data}))?;
    let dir = root.join("train").join(format!("{hash}-s{seed}"));
    create_dir(&dir)?;

    let dataset = Dataset::generate(data.size, seed);
    let (params, report) = train(&dataset, model, tc, seed)?;
    checkpoint::save(&params, seed, json!({"train": tc, "data": data}), dir.join("checkpoint"))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    std::fs::write(dir.join("loss.csv"), csv).map_err(CliError::io("cannot write loss curve"))?;
    RunManifest {
        command: "train".into(),
        config_hash: hash,
        seed,
        schedule: None,
        checkpoint: Some("checkpoint".into()),
        guidance: None,
        outputs: vec!["checkpoint/manifest.json".into(), "loss.csv".into()],
        metrics: None,
    }
    .write(&dir)?;
    Ok(dir)
}

/// Hash of the sections that determine a sampled run.
pub fn sample_hash(c: &LabConfig) -> CliResult<String> {
    config_hash(&json!({
        "schedule": require(&c.schedule, "schedule")?,
        "guidance": require(&c.guidance, "guidance")?,
        "sampling": require(&c.sampling, "sampling")?,
    }))
}

fn load_checkpoint(cfg: &LoadedConfig, rel: &str) -> CliResult<ToyModelParams> {
    let path = cfg.resolve(rel);
    if !path.join(checkpoint::MANIFEST).exists() {
        return Err(CliError::Config(format!("no checkpoint at {}", path.display())));
    }
    Ok(checkpoint::load(&path)?.0)
}

/// Samples one guided trajectory batch and dumps it under `sample/`.
pub fn cmd_sample(cfg: &LoadedConfig, seed: u64, root: &Path) -> CliResult<PathBuf> {
    let c = &cfg.config;
    let schedule = require(&c.schedule, "schedule")?;
    let guidance = require(&c.guidance, "guidance")?;
    let sampling = require(&c.sampling, "sampling")?;
    let hash = sample_hash(c)?;
    let sched = schedule.build()?;

    let model = load_checkpoint(cfg, &sampling.checkpoint)?;
    guidance.validate(sched.steps(), &model.config.layout())?;
    let weak = match &sampling.weak_checkpoint {
        Some(rel) => Some(load_checkpoint(cfg, rel)?),
        None => None,
    };
    let labels = sampling.labels(model.config.num_classes)?;
    let traj = run_sampler(&model, weak.as_ref(), &sched, guidance, &labels, seed)?;

    let dir = root.join("sample").join(format!("{hash}-s{seed}"));
    create_dir(&dir)?;
    let written = dump::write_trajectory(&traj, &dir, guidance.lambda, guidance.resolved_beta()?)?;
    RunManifest {
        command: "sample".into(),
        config_hash: hash,
        seed,
        schedule: Some(schedule.clone()),
        checkpoint: Some(sampling.checkpoint.clone()),
        guidance: Some(guidance.clone()),
        outputs: relative(&written, &dir),
        metrics: None,
    }
    .write(&dir)?;
    Ok(dir)
}

/// Pools the samples of several runs and scores them against fresh data.
pub fn cmd_analyze(runs: &[PathBuf], metrics: &MetricsConfig, root: &Path) -> CliResult<PathBuf> {
    if runs.is_empty() {
        return Err(CliError::Config("empty report: no run directories given".into()));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut entropy: BTreeMap<(std::cmp::Reverse<usize>, usize), (f64, usize)> = BTreeMap::new();
    for run in runs {
        if !run.join(dump::INDEX).exists() {
            return Err(CliError::Config(format!(
                "empty report: {} holds no trajectories",
                run.display()
            )));
        }
        let manifest = RunManifest::read(run)?;
        ids.push(format!("{}-s{}", manifest.config_hash, manifest.seed));
        let samples = dump::read_samples(run)?;
        rows.extend(samples.rows().map(<[f64]>::to_vec));
        for p in dump::read_entropy(run)? {
            let e = entropy.entry((std::cmp::Reverse(p.step), p.layer)).or_insert((0.0, 0));
            e.0 += p.mean_entropy_nats;
            e.1 += 1;
        }
    }
    if rows.len() < metrics.k + 1 {
        return Err(CliError::Config(format!(
            "need at least {} samples for k={}, found {}",
            metrics.k + 1,
            metrics.k,
            rows.len()
        )));
    }
    let width = rows[0].len();
    let samples = Tensor::new([rows.len(), width], rows.concat())?;
    let reference = Dataset::generate(metrics.reference, metrics.reference_seed).images;
    let trace: Vec<EntropyPoint> = entropy
        .into_iter()
        .map(|((step, layer), (sum, n))| EntropyPoint {
            step: step.0,
            layer,
            mean_entropy_nats: sum / n as f64,
        })
        .collect();
    let report = MetricReport::compute(&reference, &samples, metrics.k, trace)?;

    let hash = config_hash(&json!({"runs": ids, "metrics": metrics}))?;
    let dir = root.join("analyze").join(&hash);
    create_dir(&dir)?;
    write_json(&dir.join("metrics.json"), &report)?;
    let mut csv = Vec::new();
    write_entropy_csv(&report.entropy, &mut csv)?;
    std::fs::write(dir.join("entropy.csv"), csv).map_err(CliError::io("cannot write entropy trace"))?;
    RunManifest {
        command: "analyze".into(),
        config_hash: hash,
        seed: metrics.reference_seed,
        schedule: None,
        checkpoint: None,
        guidance: None,
        outputs: vec!["metrics.json".into(), "entropy.csv".into()],
        metrics: Some(MetricSummary::from(&report)),
    }
    .write(&dir)?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub w_cfg: f64,
    pub w_e: f64,
    pub config_hash: String,
    pub metrics: MetricSummary,
}

/// Samples and analyzes every `(w_cfg, w_e)` grid point, `w_cfg` outermost,
/// and writes `table.csv` in grid order.
pub fn cmd_sweep(cfg: &LoadedConfig, seed: u64, root: &Path, jobs: Option<usize>) -> CliResult<PathBuf> {
    let c = &cfg.config;
    let sweep = require(&c.sweep, "sweep")?;
    let base_guidance = require(&c.guidance, "guidance")?;
    if sweep.w_cfg.is_empty() || sweep.w_e.is_empty() {
        return Err(CliError::Config("sweep grids must be non-empty".into()));
    }
    let metrics = c.metrics.clone().unwrap_or_default();
    let points: Vec<LoadedConfig> = sweep
        .w_cfg
        .iter()
        .flat_map(|&w_cfg| sweep.w_e.iter().map(move |&w_e| (w_cfg, w_e)))
        .map(|(w_cfg, w_e)| {
            let mut point = cfg.clone();
            point.config.sweep = None;
            point.config.guidance = Some(GuidanceConfig {
                w_cfg,
                w_e: Some(w_e),
                ..base_guidance.clone()
            });
            point
        })
        .collect();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs:?} workers: {e}")))?;
    let rows: Vec<CliResult<SweepRow>> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let run = cmd_sample(p, seed, root)?;
                let analysis = cmd_analyze(std::slice::from_ref(&run), &metrics, root)?;
                let g = p.config.guidance.as_ref().expect("set above");
                Ok(SweepRow {
                    w_cfg: g.w_cfg,
                    w_e: g.w_e.expect("set above"),
                    config_hash: sample_hash(&p.config)?,
                    metrics: RunManifest::read(&analysis)?.metrics.expect("analysis has metrics"),
                })
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<CliResult<Vec<_>>>()?;

    let hash = config_hash(&json!({
        "sample": sample_hash(&LabConfig { sweep: None, ..c.clone() })?,
        "sweep": sweep,
        "metrics": metrics,
    }))?;
    let dir = root.join("sweep").join(format!("{hash}-s{seed}"));
    create_dir(&dir)?;
    let mut table = String::from("w_cfg,w_e,config_hash,frechet,precision,recall,density,coverage\n");
    for r in &rows {
        let m = &r.metrics;
        table.push_str(&format!(
            "{:?},{:?},{},{:?},{:?},{:?},{:?},{:?}\n",
            r.w_cfg, r.w_e, r.config_hash, m.frechet, m.precision, m.recall, m.density, m.coverage
        ));
    }
    std::fs::write(dir.join("table.csv"), table).map_err(CliError::io("cannot write sweep table"))?;
    RunManifest {
        command: "sweep".into(),
        config_hash: hash,
        seed,
        schedule: c.schedule.clone(),
        checkpoint: c.sampling.as_ref().map(|s| s.checkpoint.clone()),
        guidance: Some(base_guidance.clone()),
        outputs: vec!["table.csv".into()],
        metrics: None,
    }
    .write(&dir)?;
    Ok(dir)
}
