//! Executes one experiment config end to end and persists its artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stitchlab_core::analysis::{
    build_cross_layer_grid, build_stitching_plot, derive_seed, measure_baseline, penultimate_similarity_probe,
    run_job_with_sink, self_accuracy, subset_class_curve, Baseline, CrossLayerGrid, Executor, ProbeCurve,
    StitchContext, StitchJob, StitchOutcome, StitchingPlot, SubsetCurve,
};
use stitchlab_core::data::{Dataset, Normalization};
use stitchlab_core::shortcuts::ShortcutSpec;
use stitchlab_core::trainer::{train_base, EpochRecord, MetricsSink};
use stitchlab_core::{NetConfig, TappedNetwork};

use crate::checkpoint::{encode_f32, load_network, save_network};
use crate::config::{hex, ExperimentConfig, ExperimentKind, NetSpec, NormalizationChoice, ObjectiveName, TaskChoice};
use crate::datasets::{self, Role};
use crate::error::{CliError, CliResult};

/// Version of the `results.json` layout.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.json";
pub const RECORD_FILE: &str = "record.json";
pub const CONFIG_FILE: &str = "config.json";

/// Streams epoch records as JSON lines.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(JsonlSink { out: BufWriter::new(file) })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: &EpochRecord) {
        let line = serde_json::to_string(record).expect("record serializes");
        // A full disk must not abort training; the final artifacts still
        // carry every record.
        if writeln!(self.out, "{line}").and_then(|_| self.out.flush()).is_err() {
            log::warn!("could not append to a metrics log");
        }
    }
}

/// Worker pool over independent stitching jobs. Each job writes its own
/// metrics log `<log_dir>/<group>-<index>.jsonl`.
pub struct Pool {
    pub workers: usize,
    pub log_dir: PathBuf,
    pub group: String,
    failed_log: Mutex<Option<PathBuf>>,
}

impl Pool {
    pub fn new(workers: usize, log_dir: PathBuf, group: impl Into<String>) -> Self {
        Pool {
            workers: workers.max(1),
            log_dir,
            group: group.into(),
            failed_log: Mutex::new(None),
        }
    }

    pub fn log_path(&self, index: usize) -> PathBuf {
        self.log_dir.join(format!("{}-{index:03}.jsonl", self.group))
    }

    /// Log of the first job that failed, if any.
    pub fn failed_log(&self) -> Option<PathBuf> {
        self.failed_log.lock().expect("lock").clone()
    }

    fn run_one(&self, ctx: &StitchContext, job: &StitchJob, index: usize) -> stitchlab_core::Result<StitchOutcome> {
        let path = self.log_path(index);
        let result = match JsonlSink::create(&path) {
            Ok(mut sink) => run_job_with_sink(ctx, job, &mut sink),
            Err(e) => {
                log::warn!("{e}; job {index} runs without a metrics log");
                run_job_with_sink(ctx, job, &mut stitchlab_core::trainer::NullSink)
            }
        };
        if result.is_err() {
            let mut slot = self.failed_log.lock().expect("lock");
            slot.get_or_insert(path);
        }
        result
    }
}

impl Executor for Pool {
    fn run(&self, ctx: &StitchContext, jobs: &[StitchJob]) -> Vec<stitchlab_core::Result<StitchOutcome>> {
        let workers = self.workers.min(jobs.len()).max(1);
        if workers == 1 {
            return jobs.iter().enumerate().map(|(n, j)| self.run_one(ctx, j, n)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<stitchlab_core::Result<StitchOutcome>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = jobs.get(n) else { break };
                    let r = self.run_one(ctx, job, n);
                    *slots[n].lock().expect("lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("lock").expect("every job ran"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSummary {
    pub role: String,
    pub config: NetConfig,
    pub seed: u64,
    pub task: TaskChoice,
    pub from_checkpoint: bool,
    pub last: Option<EpochRecord>,
    pub baseline: Baseline,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPlot {
    /// Share of adversarial samples; absent without adversarial training.
    pub alpha: Option<f32>,
    pub plot: StitchingPlot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAccuracyRow {
    pub objective: String,
    pub directional: f64,
    pub averaged: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub group: String,
    pub index: usize,
    pub i: usize,
    pub j: usize,
    pub objective: String,
    pub alpha: Option<f32>,
    pub class_count: Option<usize>,
    pub seed: u64,
    pub init_rank: usize,
    pub first: Option<EpochRecord>,
    pub last: EpochRecord,
    pub layer_file: String,
    pub log_file: String,
}

/// Everything `render` needs; contains no timestamps or host details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub normalization: Normalization,
    pub nets: Vec<NetSummary>,
    #[serde(default)]
    pub plots: Vec<AlphaPlot>,
    #[serde(default)]
    pub grids: Vec<CrossLayerGrid>,
    #[serde(default)]
    pub self_accuracy: Vec<SelfAccuracyRow>,
    #[serde(default)]
    pub subset_curves: Vec<SubsetCurve>,
    #[serde(default)]
    pub probe: Option<ProbeCurve>,
    #[serde(default)]
    pub shortcut: Option<ShortcutSpec>,
    #[serde(default)]
    pub jobs: Vec<JobSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Provenance of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub version: String,
    pub git_revision: Option<String>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    /// Every file in the run directory except this record.
    pub manifest: Vec<ManifestEntry>,
    pub summary: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> CliResult<Self> {
        let path = run_dir.join(RECORD_FILE);
        let text = fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact(path.clone()))?;
        serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
    }

    /// Rescans the run directory and rewrites the record.
    pub fn refresh_manifest(&mut self, run_dir: &Path) -> CliResult<()> {
        self.manifest = manifest(run_dir)?;
        write_json(&run_dir.join(RECORD_FILE), self)
    }
}

pub fn load_results(run_dir: &Path) -> CliResult<Results> {
    let path = run_dir.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn manifest(run_dir: &Path) -> CliResult<Vec<ManifestEntry>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<ManifestEntry>) -> CliResult<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                let rel = relative(&p, root);
                if rel == RECORD_FILE {
                    continue;
                }
                let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
                out.push(ManifestEntry {
                    path: rel,
                    bytes: bytes.len() as u64,
                    sha256: hex(&Sha256::digest(&bytes)),
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(run_dir, run_dir, &mut out)?;
    Ok(out)
}

fn relative(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Run directory used when the config names none.
pub fn default_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}", cfg.experiment.as_str(), &cfg.hash()[..12]))
}

struct Layout {
    root: PathBuf,
    logs: PathBuf,
    nets: PathBuf,
    layers: PathBuf,
}

impl Layout {
    fn create(root: PathBuf) -> CliResult<Self> {
        let l = Layout {
            logs: root.join("logs"),
            nets: root.join("nets"),
            layers: root.join("layers"),
            root,
        };
        for d in [&l.root, &l.logs, &l.nets, &l.layers] {
            fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        // A rerun into the same directory must not leave stale files behind
        // in the manifest.
        for d in [&l.logs, &l.nets, &l.layers] {
            for e in fs::read_dir(d).map_err(|e| CliError::io(d, e))?.flatten() {
                if e.path().is_file() {
                    fs::remove_file(e.path()).map_err(|err| CliError::io(e.path(), err))?;
                }
            }
        }
        let render = l.root.join("render");
        if render.is_dir() {
            fs::remove_dir_all(&render).map_err(|e| CliError::io(&render, e))?;
        }
        Ok(l)
    }
}

struct NetBundle {
    net: TappedNetwork,
    summary: NetSummary,
}

fn training_error(e: stitchlab_core::Error, log: PathBuf) -> CliError {
    match e {
        stitchlab_core::Error::Training { .. } | stitchlab_core::Error::Numerics(_) => CliError::Training {
            message: e.to_string(),
            log,
        },
        other => CliError::Core(other),
    }
}

struct Prepared {
    train: Dataset,
    test: Dataset,
    cross: Option<(Dataset, Dataset)>,
    norm: Normalization,
}

fn prepare_data(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let (train, test) = datasets::load(&cfg.data, Role::Primary)?;
    let norm = match cfg.data.normalization {
        NormalizationChoice::Dataset => train.channel_stats(),
        NormalizationChoice::Cifar10 => Normalization::cifar10(),
    };
    let wants_cross = [Some(&cfg.front), cfg.end.as_ref()]
        .into_iter()
        .flatten()
        .any(|s| s.task == TaskChoice::CrossTask && s.checkpoint.is_none());
    let cross = if wants_cross {
        let dc = cfg.cross_task.clone().unwrap_or_else(|| cfg.data.clone());
        let (a, b) = datasets::load(&dc, Role::CrossTask)?;
        if a.resolution() != train.resolution() {
            return Err(CliError::Schema {
                path: "cross_task.resolution".into(),
                message: "both tasks must share one input resolution".into(),
            });
        }
        Some((a, b))
    } else {
        None
    };
    Ok(Prepared { train, test, cross, norm })
}

fn obtain_net(cfg: &ExperimentConfig, role: &str, spec: &NetSpec, data: &Prepared, layout: &Layout) -> CliResult<NetBundle> {
    let (train, test) = match spec.task {
        TaskChoice::Primary => (&data.train, &data.test),
        TaskChoice::CrossTask => match &data.cross {
            Some((a, b)) => (a, b),
            None => (&data.train, &data.test),
        },
    };
    let log_path = layout.logs.join(format!("net-{role}.jsonl"));
    let (mut net, last, from_checkpoint) = match &spec.checkpoint {
        Some(path) => (load_network(path)?, None, true),
        None => {
            let recipe = spec.train.as_ref().expect("validated: train recipe present");
            let net_cfg = spec.net_config(train.num_classes, train.resolution());
            let mut sink = JsonlSink::create(&log_path)?;
            let (net, log) =
                train_base(&net_cfg, train, test, &data.norm, recipe, spec.seed, &mut sink).map_err(|e| training_error(e, log_path.clone()))?;
            (net, log.last().cloned(), false)
        }
    };
    if net.config.resolution != data.train.resolution() {
        return Err(CliError::Schema {
            path: format!("{role}.checkpoint"),
            message: format!("network expects {}px inputs, data has {}px", net.config.resolution, data.train.resolution()),
        });
    }
    let robust = (cfg.eval.robust_samples > 0).then_some((&cfg.eval.attack, cfg.eval.robust_samples));
    let baseline = measure_baseline(&net, test, &data.norm, robust, cfg.eval.batch, derive_seed(cfg.seed, 0xba5e))?;
    let file = format!("nets/{role}.bin");
    save_network(&mut net, &layout.root.join(&file))?;
    Ok(NetBundle {
        summary: NetSummary {
            role: role.to_string(),
            config: net.config.clone(),
            seed: spec.seed,
            task: spec.task,
            from_checkpoint,
            last,
            baseline,
            file,
        },
        net,
    })
}

fn summarize_jobs(
    outcomes: &[StitchOutcome],
    pool: &Pool,
    layout: &Layout,
    alpha: Option<f32>,
    out: &mut Vec<JobSummary>,
) -> CliResult<()> {
    for (n, o) in outcomes.iter().enumerate() {
        let layer_file = format!("layers/{}-{n:03}.bin", pool.group);
        let mut values = o.layer.weight().to_vec();
        values.extend_from_slice(o.layer.bias());
        let path = layout.root.join(&layer_file);
        fs::write(&path, encode_f32(&values)).map_err(|e| CliError::io(&path, e))?;
        out.push(JobSummary {
            group: pool.group.clone(),
            index: n,
            i: o.job.i,
            j: o.job.j,
            objective: o.job.recipe.objective.tag().to_string(),
            alpha,
            class_count: o.job.recipe.class_subset.as_ref().map(Vec::len),
            seed: o.job.seed,
            init_rank: o.init_rank,
            first: o.log.records.first().cloned(),
            last: o.last.clone(),
            layer_file,
            log_file: relative(&pool.log_path(n), &layout.root),
        });
    }
    Ok(())
}

fn run_batch<T>(
    pool: &Pool,
    f: impl FnOnce(&Pool) -> stitchlab_core::Result<(T, Vec<StitchOutcome>)>,
) -> CliResult<(T, Vec<StitchOutcome>)> {
    f(pool).map_err(|e| match pool.failed_log() {
        Some(log) => CliError::Training {
            message: e.to_string(),
            log,
        },
        None => CliError::Core(e),
    })
}

/// Runs the experiment described by `cfg` and writes its run directory.
pub fn run(cfg: &ExperimentConfig) -> CliResult<(PathBuf, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let root = cfg.output_dir.clone().unwrap_or_else(|| default_output_dir(cfg));
    let layout = Layout::create(root)?;
    write_json(&layout.root.join(CONFIG_FILE), cfg)?;
    let config_hash = cfg.hash();

    let data = prepare_data(cfg)?;
    let front = obtain_net(cfg, "front", &cfg.front, &data, &layout)?;
    let end = match &cfg.end {
        Some(spec) => Some(obtain_net(cfg, "end", spec, &data, &layout)?),
        None => None,
    };
    let end_net = end.as_ref().map_or(&front.net, |b| &b.net);
    let front_baseline = front.summary.baseline;
    let end_baseline = end.as_ref().map_or(front_baseline, |b| b.summary.baseline);
    if end_net.num_classes() != data.train.num_classes {
        return Err(CliError::Schema {
            path: "end".into(),
            message: "the end network must solve the primary task".into(),
        });
    }

    let stitch_train = match cfg.stitch.train_samples {
        Some(n) => data.train.take(n),
        None => data.train.clone(),
    };
    let ctx = StitchContext {
        front: &front.net,
        end: end_net,
        train: &stitch_train,
        test: &data.test,
        norm: &data.norm,
    };
    let taps: Vec<usize> = cfg.stitch.taps.clone().unwrap_or_else(|| (1..=end_net.num_taps()).collect());
    let objectives: Vec<_> = cfg.stitch.objectives.iter().map(|o: &ObjectiveName| o.0).collect();
    let pool = |group: String| Pool::new(cfg.workers, layout.logs.clone(), group);

    let mut results = Results {
        schema_version: RESULTS_SCHEMA_VERSION,
        experiment: cfg.experiment,
        config_hash: config_hash.clone(),
        normalization: data.norm.clone(),
        nets: std::iter::once(front.summary.clone()).chain(end.as_ref().map(|b| b.summary.clone())).collect(),
        plots: Vec::new(),
        grids: Vec::new(),
        self_accuracy: Vec::new(),
        subset_curves: Vec::new(),
        probe: None,
        shortcut: None,
        jobs: Vec::new(),
    };
    let base_recipe = |alpha: Option<f32>| cfg.stitch.recipe(objectives.first().copied().unwrap_or(stitchlab_core::objectives::ObjectiveSpec::Hint), alpha, &cfg.eval);

    match cfg.experiment {
        ExperimentKind::TrainBase => {}
        ExperimentKind::StitchPlot | ExperimentKind::Shortcut => {
            let alphas: Vec<Option<f32>> = if cfg.experiment == ExperimentKind::StitchPlot && !cfg.stitch.alphas.is_empty() {
                cfg.stitch.alphas.iter().map(|&a| Some(a)).collect()
            } else {
                vec![None]
            };
            if let Some(sc) = &cfg.stitch.shortcut {
                results.shortcut = Some(sc.build(data.train.num_classes, data.train.resolution())?);
            }
            for (n, alpha) in alphas.into_iter().enumerate() {
                let mut recipe = base_recipe(alpha);
                if cfg.experiment == ExperimentKind::StitchPlot {
                    recipe.shortcut = None;
                }
                let group = match alpha {
                    Some(a) => format!("plot-a{a}"),
                    None => "plot".to_string(),
                };
                let p = pool(group);
                let seed = derive_seed(cfg.seed, 100 + n as u64);
                let (plot, outcomes) = run_batch(&p, |p| {
                    build_stitching_plot(&ctx, &taps, &objectives, &recipe, (front_baseline, end_baseline), seed, p)
                })?;
                summarize_jobs(&outcomes, &p, &layout, alpha, &mut results.jobs)?;
                results.plots.push(AlphaPlot { alpha, plot });
            }
        }
        ExperimentKind::CrossLayer => {
            for (n, obj) in objectives.iter().enumerate() {
                let mut recipe = base_recipe(None);
                recipe.objective = *obj;
                recipe.shortcut = None;
                let p = pool(format!("grid-{}", ObjectiveName(*obj).to_string().replace(':', "_")));
                let seed = derive_seed(cfg.seed, 200 + n as u64);
                let (grid, outcomes) = run_batch(&p, |p| build_cross_layer_grid(&ctx, &taps, &recipe, seed, p))?;
                summarize_jobs(&outcomes, &p, &layout, None, &mut results.jobs)?;
                let averaged = grid.averaged()?;
                results.self_accuracy.push(SelfAccuracyRow {
                    objective: grid.objective.clone(),
                    directional: self_accuracy(&grid)?,
                    averaged: self_accuracy(&averaged)?,
                });
                results.grids.push(grid);
                results.grids.push(averaged);
            }
        }
        ExperimentKind::SubsetClasses => {
            let (i, j) = cfg.stitch.pair.expect("validated");
            let counts = cfg.stitch.class_counts.clone().expect("validated");
            let mut recipe = base_recipe(None);
            recipe.shortcut = None;
            let p = pool("subset".to_string());
            let seed = derive_seed(cfg.seed, 300);
            let (curves, outcomes) =
                run_batch(&p, |p| subset_class_curve(&ctx, i, j, &objectives, &counts, &recipe, seed, p))?;
            summarize_jobs(&outcomes, &p, &layout, None, &mut results.jobs)?;
            results.subset_curves = curves;
        }
        ExperimentKind::Probe => {
            let recipe = base_recipe(cfg.stitch.alphas.first().copied());
            let p = pool("probe".to_string());
            let seed = derive_seed(cfg.seed, 400);
            let (curve, outcomes) = run_batch(&p, |p| {
                penultimate_similarity_probe(&ctx, &taps, &recipe, cfg.stitch.probe_samples, &cfg.eval.attack, seed, p)
            })?;
            summarize_jobs(&outcomes, &p, &layout, recipe.at.map(|a| a.alpha), &mut results.jobs)?;
            results.probe = Some(curve);
        }
    }

    write_json(&layout.root.join(RESULTS_FILE), &results)?;
    let mut record = RunRecord {
        schema_version: RESULTS_SCHEMA_VERSION,
        experiment: cfg.experiment,
        config_hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
        git_revision: option_env!("STITCHLAB_GIT_REV").map(str::to_string),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        manifest: Vec::new(),
        summary: summarize(&results),
    };
    record.refresh_manifest(&layout.root)?;
    Ok((layout.root, record))
}

/// Headline numbers for the run record.
pub fn summarize(r: &Results) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for n in &r.nets {
        m.insert(format!("{}.clean_acc", n.role), n.baseline.clean_acc);
        if let Some(v) = n.baseline.robust_acc {
            m.insert(format!("{}.robust_acc", n.role), v);
        }
    }
    for row in &r.self_accuracy {
        m.insert(format!("self_accuracy.{}.directional", row.objective), row.directional);
        m.insert(format!("self_accuracy.{}.averaged", row.objective), row.averaged);
    }
    if !r.jobs.is_empty() {
        let mean = r.jobs.iter().map(|j| j.last.clean_acc).sum::<f64>() / r.jobs.len() as f64;
        m.insert("jobs.mean_clean_acc".to_string(), mean);
        m.insert("jobs.count".to_string(), r.jobs.len() as f64);
    }
    m
}
