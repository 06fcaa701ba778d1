//! Subcommand implementations. Each writes plain CSV/JSON files into the
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use flatfed_core::autodiff::{finite_diff_grad, grad, max_relative_error};
use flatfed_core::cost::model_cost_report;
use flatfed_core::curvature::{curvature_report, CurvatureError, CurvatureReport};
use flatfed_core::data::{synth_mixture, Batch, Dataset, PartitionPlan};
use flatfed_core::fed::{FedError, Federation, RoundRecord};
use flatfed_core::model::{build, ModelSpec, ParamVector};
use flatfed_core::objective::{ClientObjective, RegConfig};
use flatfed_core::rng::{label, Rng};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::CliError;

pub const METRICS_HEADER: [&str; 7] = ["round", "accuracy", "train_loss", "ce_term", "man_term", "grad_norm", "wall_ms"];

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl Options {
    fn load_config(&self) -> Result<ExperimentConfig, CliError> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| CliError::Config("--config is required".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, CliError> {
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("flatfed-out"));
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    /// `--threads`, then `FLATFED_THREADS`, then all cores.
    pub fn threads(&self) -> usize {
        self.threads
            .or_else(|| std::env::var("FLATFED_THREADS").ok().and_then(|v| v.parse().ok()))
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn fed_error(e: FedError) -> CliError {
    if e.is_non_finite() {
        CliError::NonFinite(e.to_string())
    } else {
        match e {
            FedError::Config(c) => CliError::Config(c.0),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn curvature_error(e: CurvatureError) -> CliError {
    match e {
        CurvatureError::Autodiff(flatfed_core::autodiff::AutodiffError::NonFinite { .. }) => {
            CliError::NonFinite(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Files written by the run, relative to the output directory.
    pub files: Vec<String>,
}

/// Curvature file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureFile {
    pub round: usize,
    pub report: CurvatureReport,
}

/// Samples held by some client, in index order.
pub fn union_batch(train: &Dataset, plan: &PartitionPlan) -> Batch {
    let mut idx = plan.assignments.concat();
    idx.sort_unstable();
    train.batch(&idx)
}

/// Curvature of the training cross-entropy after `round` completed rounds.
pub fn curvature_at(
    cfg: &ExperimentConfig,
    params: &ParamVector,
    batch: &Batch,
    round: usize,
) -> Result<CurvatureReport, CliError> {
    let mut rng = Rng::new(cfg.seed).stream(&[label::CURVATURE, round as u64]);
    curvature_report(&cfg.model, params, batch, &cfg.curvature.options, &mut rng).map_err(curvature_error)
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<RoundRecord>,
    pub manifest: Manifest,
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs the configured federated experiment.
pub fn cmd_run(opts: &Options) -> Result<RunSummary, CliError> {
    let cfg = opts.load_config()?;
    let out = opts.out_dir(Some(&cfg))?;
    let threads = opts.threads();
    with_pool(threads, || run_experiment(&cfg, &out, threads > 1))?
}

fn run_experiment(cfg: &ExperimentConfig, out: &Path, parallel: bool) -> Result<RunSummary, CliError> {
    let mut manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: unix_now(),
        finished_unix: None,
        files: Vec::new(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("config.json"), cfg)?;
    manifest.files.push("config.json".into());

    let data = cfg.materialize()?;
    let init = build(&cfg.model, &mut Rng::new(cfg.seed).child(label::INIT))
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
    let mut fed = Federation::new(
        cfg.model.clone(),
        cfg.algo,
        data.train,
        data.test,
        &data.plan,
        init.values,
        cfg.seed,
    )
    .map_err(fed_error)?;
    fed.set_parallel(parallel);

    let metrics_path = out.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path).map_err(csv_error)?;
    metrics.write_record(METRICS_HEADER).map_err(csv_error)?;
    metrics.flush()?;
    manifest.files.push("metrics.csv".into());

    let diagnostics = |fed: &Federation, manifest: &mut Manifest| -> Result<(), CliError> {
        let round = fed.server.round;
        if !cfg.curvature.rounds.contains(&round) {
            return Ok(());
        }
        let report = curvature_at(cfg, &fed.global_params(), &fed.train_batch(), round)?;
        let name = format!("curvature_round_{round:04}.json");
        write_json(&out.join(&name), &CurvatureFile { round, report })?;
        manifest.files.push(name);
        let ck = format!("checkpoint_round_{round:04}.bin");
        checkpoint::save(&out.join(&ck), round, &cfg.model, fed.global())?;
        manifest.files.push(ck);
        Ok(())
    };

    diagnostics(&fed, &mut manifest)?;
    let mut records = Vec::with_capacity(cfg.algo.rounds);
    for _ in 0..cfg.algo.rounds {
        let rec = fed.run_round().map_err(fed_error)?;
        let wall = if cfg.record_wall_time {
            fmt_float(rec.wall_ms)
        } else {
            String::new()
        };
        metrics
            .write_record([
                (rec.round + 1).to_string(),
                fmt_float(rec.accuracy),
                fmt_float(rec.train_loss),
                fmt_float(rec.ce_term),
                fmt_float(rec.man_term),
                fmt_float(rec.grad_norm),
                wall,
            ])
            .map_err(csv_error)?;
        metrics.flush()?;
        records.push(rec);
        diagnostics(&fed, &mut manifest)?;
    }
    checkpoint::save(&out.join("model_final.bin"), fed.server.round, &cfg.model, fed.global())?;
    manifest.files.push("model_final.bin".into());
    manifest.files.sort();
    manifest.finished_unix = Some(unix_now());
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        records,
        manifest,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionFile {
    pub num_classes: usize,
    pub plan: PartitionPlan,
    pub label_histograms: Vec<Vec<usize>>,
}

/// Writes the client split and per-client label histograms.
pub fn cmd_partition(opts: &Options) -> Result<PathBuf, CliError> {
    let cfg = opts.load_config()?;
    let out = opts.out_dir(Some(&cfg))?;
    let data = cfg.materialize()?;
    let classes = data.train.num_classes();
    let file = PartitionFile {
        num_classes: classes,
        label_histograms: data.plan.label_histograms(data.train.labels(), classes),
        plan: data.plan,
    };
    let path = out.join("partition.json");
    write_json(&path, &file)?;
    Ok(path)
}

/// Curvature report for a saved model, on the configured training shards.
pub fn cmd_hessian(opts: &Options) -> Result<PathBuf, CliError> {
    let cfg = opts.load_config()?;
    let out = opts.out_dir(Some(&cfg))?;
    let path = opts
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
    let ck = checkpoint::load(path)?;
    if ck.spec != cfg.model {
        return Err(CliError::Config("checkpoint model differs from the configured model".into()));
    }
    let data = cfg.materialize()?;
    let batch = union_batch(&data.train, &data.plan);
    let report = curvature_at(&cfg, &ck.params, &batch, ck.round)?;
    let target = out.join(format!("hessian_round_{:04}.json", ck.round));
    write_json(
        &target,
        &CurvatureFile {
            round: ck.round,
            report,
        },
    )?;
    Ok(target)
}

/// Forward multiplication counts for the configured model and batch size.
pub fn cmd_cost(opts: &Options) -> Result<PathBuf, CliError> {
    let cfg = opts.load_config()?;
    let out = opts.out_dir(Some(&cfg))?;
    let report = model_cost_report(&cfg.model, cfg.algo.batch_size as u64)
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
    write_json(&out.join("cost.json"), &report)?;
    let mut w = csv::Writer::from_path(out.join("cost.csv")).map_err(csv_error)?;
    w.write_record(["layer", "kind", "base", "regularizer"]).map_err(csv_error)?;
    for r in &report.rows {
        w.write_record([
            r.layer.to_string(),
            format!("{:?}", r.kind),
            r.base.to_string(),
            r.regularizer.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.write_record(["total", "", &report.total_base.to_string(), &report.total_regularizer.to_string()])
        .map_err(csv_error)?;
    w.flush()?;
    Ok(out.join("cost.json"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckFile {
    pub instances: usize,
    pub step: f64,
    pub max_relative_error: f64,
    pub per_instance: Vec<f64>,
    pub tolerance: f64,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Reverse-mode versus central-difference gradients on a few seeded
/// parameter draws. Without a config, uses a 4-5-3 MLP with the penalty on.
pub fn cmd_gradcheck(opts: &Options) -> Result<GradcheckFile, CliError> {
    let (cfg, spec, reg, batch, seed) = if opts.config.is_some() {
        let cfg = opts.load_config()?;
        let data = cfg.materialize()?;
        let n = data.train.len().min(8);
        let idx: Vec<usize> = (0..n).map(|i| i * data.train.len() / n).collect();
        let batch = data.train.batch(&idx);
        let (spec, reg, seed) = (cfg.model.clone(), cfg.algo.reg, cfg.seed);
        (Some(cfg), spec, reg, batch, seed)
    } else {
        let seed = opts.seed.unwrap_or(0);
        let data = synth_mixture(3, 4, 3, 1.0, &mut Rng::new(seed).child(label::DATA))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        (None, ModelSpec::mlp(&[4, 5, 3]), RegConfig::with_zeta(0.15), data.all(), seed)
    };
    let out = opts.out_dir(cfg.as_ref())?;
    let layout = spec.layout().map_err(|e| CliError::Config(format!("model: {e}")))?;
    let obj = ClientObjective::new(&spec, &layout, reg);
    let step = 1e-6;
    let mut per_instance = Vec::new();
    for k in 0..5u64 {
        let p = build(&spec, &mut Rng::new(seed).stream(&[label::INIT, k]))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let analytic = grad(&obj, &p.values, &batch).map_err(|e| CliError::Runtime(e.to_string()))?;
        let numeric =
            finite_diff_grad(&obj, &p.values, &batch, step).map_err(|e| CliError::Runtime(e.to_string()))?;
        per_instance.push(max_relative_error(&analytic, &numeric));
    }
    let file = GradcheckFile {
        instances: per_instance.len(),
        step,
        max_relative_error: per_instance.iter().copied().fold(0.0, f64::max),
        per_instance,
        tolerance: GRADCHECK_TOLERANCE,
    };
    write_json(&out.join("gradcheck.json"), &file)?;
    if file.max_relative_error >= GRADCHECK_TOLERANCE {
        return Err(CliError::Check(format!(
            "max relative gradient error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            file.max_relative_error
        )));
    }
    Ok(file)
}
