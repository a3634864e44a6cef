//! Config-driven experiment runner for the `sqlossflow` binary.
//!
//! A run reads one JSON config, executes a flow integration, an SGD run, a
//! checkpoint diagnosis or a sweep, and writes every artifact (trace CSVs,
//! checkpoints, JSON reports and `manifest.json`) into the output directory.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use sqlossflow_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sqlossflow_core::data::{generate, load_csv};
use sqlossflow_core::diagnostics::{
    constraint_residuals, nc_report_for, projection_orthogonality_probe, record, sweep_compare, ConstraintResiduals,
    LayerProbe, RunSummary,
};
use sqlossflow_core::flow::{integrate, singularity_probe, FlowConfig, FlowState, SingularityReport};
use sqlossflow_core::net::{decompose, margins};
use sqlossflow_core::sgd::{effective_lambda, init_network, train};
use sqlossflow_core::{Dataset, Error as CoreError, MetricTrace, NcReport, NormMode, NormalizedNet, SweepReport};

use config::{expand_grid, DatasetSource, FlowSection, RunSpec};
pub use config::{Command, ExperimentConfig};

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Worker threads for sweeps; 0 and 1 both mean sequential.
    pub jobs: usize,
    /// Overrides the config's `output_dir`.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub run_id: String,
    pub status: &'static str,
    pub trace: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: &'static str,
    pub config_path: String,
    pub config: serde_json::Value,
    pub jobs: usize,
    pub wall_time_seconds: f64,
    pub runs: Vec<RunEntry>,
    pub reports: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
}

struct Data {
    train: Dataset,
    val: Option<Dataset>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_data(src: &DatasetSource, base: &Path) -> Result<Data> {
    match src {
        DatasetSource::Synthetic(spec) => {
            let g = generate(spec)?;
            let val = (!g.val.is_empty()).then_some(g.val);
            Ok(Data { train: g.train, val })
        }
        DatasetSource::Csv(files) => {
            let train_path = resolve(base, &files.train);
            let train = load_csv(&train_path).with_context(|| format!("loading {}", train_path.display()))?;
            let val = match &files.val {
                Some(p) => {
                    let p = resolve(base, p);
                    Some(load_csv(&p).with_context(|| format!("loading {}", p.display()))?)
                }
                None => None,
            };
            Ok(Data { train, val })
        }
    }
}

/// Stable short id: hex of the SHA-256 of the run's canonical JSON.
fn run_id(kind: &str, payload: &impl Serialize) -> String {
    let json = serde_json::to_vec(payload).expect("config types serialize");
    let digest = Sha256::digest(&json);
    format!("{kind}-{}", &hex::encode(digest)[..16])
}

/// Initial flow state: random unit-norm directions scaled to `ρ(0)`.
pub fn initial_flow_state(spec: &FlowSection, widths: &[usize], data: &Dataset) -> Result<FlowState> {
    let nnet = decompose(&init_network(widths, 1.0, spec.seed)?, NormMode::Matrix)?;
    let nnet = if spec.average_separable {
        let f = nnet.outputs(data)?;
        let fy: f64 = f.iter().zip(data.labels()).map(|(a, b)| a * b).sum();
        if fy < 0.0 {
            let mut layers = nnet.layers().to_vec();
            let last = layers.len() - 1;
            layers[last] = layers[last].scaled(-1.0);
            NormalizedNet::new(nnet.rho(), layers, NormMode::Matrix)?
        } else {
            nnet
        }
    } else {
        nnet
    };
    Ok(FlowState::new(nnet.with_rho(spec.rho0), data)?)
}

#[derive(Serialize)]
struct RunReport<'a> {
    run_id: &'a str,
    spec: &'a RunSpec,
    /// λ of the flow, or the SGD weight decay mapped onto the flow's λ.
    effective_lambda: f64,
    summary: RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho_clamps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    singularity: Option<SingularityReport>,
    nc: Option<NcReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nc_error: Option<String>,
}

struct RunOutput {
    entry: RunEntry,
    summary: Option<RunSummary>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

struct Finished {
    trace: MetricTrace,
    checkpoint: Checkpoint,
    final_net: NormalizedNet,
    lambda: f64,
    init: f64,
    seed: u64,
    converged: Option<bool>,
    rho_clamps: Option<usize>,
    singularity: Option<SingularityReport>,
}

fn execute(spec: &RunSpec, widths: &[usize], data: &Data) -> std::result::Result<Finished, (CoreError, MetricTrace)> {
    let plain = |e: CoreError| (e, MetricTrace::default());
    match spec {
        RunSpec::Flow(f) => {
            let state0 = initial_flow_state(f, widths, &data.train).map_err(|e| match e.downcast::<CoreError>() {
                Ok(c) => plain(c),
                Err(e) => plain(CoreError::Config(format!("{e:#}"))),
            })?;
            let cfg: FlowConfig = f.flow_config();
            let (state, mut trace) = integrate(&state0, &data.train, &cfg).map_err(|e| match e {
                CoreError::FlowAborted { t, reason, trace } => (
                    CoreError::FlowAborted {
                        t,
                        reason,
                        trace: trace.clone(),
                    },
                    *trace,
                ),
                other => plain(other),
            })?;
            if let (Some(val), Some(last)) = (&data.val, trace.rows.last_mut()) {
                let row = record(state.net(), &data.train, Some(val), state.t).map_err(plain)?;
                last.val_loss = row.val_loss;
                last.val_accuracy = row.val_accuracy;
            }
            Ok(Finished {
                checkpoint: Checkpoint::Normalized(state.net().clone()),
                final_net: state.net().clone(),
                singularity: Some(singularity_probe(&state, &data.train, cfg.tol_interpolation)),
                converged: Some(trace.converged),
                rho_clamps: Some(state.rho_clamps),
                lambda: f.lambda,
                init: f.rho0,
                seed: f.seed,
                trace,
            })
        }
        RunSpec::Train(t) => {
            let (state, trace) = train(widths, &data.train, data.val.as_ref(), t).map_err(plain)?;
            let final_net = decompose(&state.net, NormMode::Matrix).map_err(plain)?;
            Ok(Finished {
                checkpoint: Checkpoint::Params(state.net),
                final_net,
                lambda: effective_lambda(t.weight_decay, data.train.len(), t.batch_size),
                init: t.init_frobenius,
                seed: t.seed,
                converged: None,
                rho_clamps: None,
                singularity: None,
                trace,
            })
        }
    }
}

fn run_one(spec: &RunSpec, widths: &[usize], data: &Data, ds: &DatasetSource, out: &Path) -> Result<RunOutput> {
    let kind = match spec {
        RunSpec::Flow(_) => "flow",
        RunSpec::Train(_) => "train",
    };
    let id = run_id(kind, &(ds, widths, spec));
    log::info!("{id}: starting");
    let trace_path = out.join(format!("{id}.trace.csv"));
    let started = Instant::now();
    match execute(spec, widths, data) {
        Ok(done) => {
            done.trace.save_csv(&trace_path)?;
            let ckpt_path = out.join(format!("{id}.checkpoint.json"));
            save_checkpoint(&done.checkpoint, &ckpt_path)?;
            let summary = RunSummary::from_trace(id.clone(), done.lambda, done.init, done.seed, &done.trace)
                .ok_or_else(|| anyhow!("{id}: empty trace"))?;
            let (nc, nc_error) = match nc_report_for(&done.final_net, &data.train) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let report_path = out.join(format!("{id}.report.json"));
            write_json(
                &report_path,
                &RunReport {
                    run_id: &id,
                    spec,
                    effective_lambda: done.lambda,
                    summary: summary.clone(),
                    converged: done.converged,
                    rho_clamps: done.rho_clamps,
                    singularity: done.singularity,
                    nc,
                    nc_error,
                },
            )?;
            log::info!(
                "{id}: done in {:.2?}, final rho {:e}",
                started.elapsed(),
                summary.final_rho
            );
            Ok(RunOutput {
                entry: RunEntry {
                    run_id: id,
                    status: "ok",
                    trace: file_name(&trace_path),
                    checkpoint: Some(file_name(&ckpt_path)),
                    report: Some(file_name(&report_path)),
                    error: None,
                },
                summary: Some(summary),
            })
        }
        Err((err, partial)) => {
            log::error!("{id}: {err}");
            partial.save_csv(&trace_path)?;
            Ok(RunOutput {
                entry: RunEntry {
                    run_id: id,
                    status: "failed",
                    trace: file_name(&trace_path),
                    checkpoint: None,
                    report: None,
                    error: Some(err.to_string()),
                },
                summary: None,
            })
        }
    }
}

#[derive(Serialize)]
struct DiagnoseReport {
    checkpoint: String,
    n_samples: usize,
    rho: f64,
    inverse_rho: f64,
    margins: Vec<f64>,
    min_margin: f64,
    mean_margin: f64,
    max_interp_residual: f64,
    loss: f64,
    train_accuracy: f64,
    constraint_residuals: ConstraintResiduals,
    probes: Vec<LayerProbe>,
    singularity: SingularityReport,
    nc: Option<NcReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nc_error: Option<String>,
}

fn diagnose(ckpt_path: &Path, data: &Data, out: &Path) -> Result<String> {
    let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let nnet = match ckpt {
        Checkpoint::Normalized(n) if n.mode() == NormMode::Matrix => n,
        other => decompose(&other.to_params(), NormMode::Matrix)?,
    };
    let train = &data.train;
    if train.dim() != Some(nnet.input_dim()) {
        bail!(
            "checkpoint expects {}-dimensional inputs but the dataset has {:?}",
            nnet.input_dim(),
            train.dim()
        );
    }
    let row = record(&nnet, train, data.val.as_ref(), 0.0)?;
    let state = FlowState::new(nnet.clone(), train)?;
    let (nc, nc_error) = match nc_report_for(&nnet, train) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = DiagnoseReport {
        checkpoint: ckpt_path.display().to_string(),
        n_samples: train.len(),
        rho: nnet.rho(),
        inverse_rho: 1.0 / nnet.rho(),
        margins: margins(&nnet, train)?,
        min_margin: row.min_margin,
        mean_margin: row.mean_margin,
        max_interp_residual: row.max_interp_residual,
        loss: row.loss,
        train_accuracy: row.train_accuracy,
        constraint_residuals: constraint_residuals(&nnet, train)?,
        probes: projection_orthogonality_probe(&nnet),
        singularity: singularity_probe(&state, train, FlowConfig::default().tol_interpolation),
        nc,
        nc_error,
    };
    let path = out.join("diagnose.json");
    write_json(&path, &report)?;
    Ok(file_name(&path))
}

/// Loads `config_path` and executes `command`, which must match the file's
/// `command` field. A manifest is written even when some runs fail; the
/// returned error then names the failures.
pub fn run(command: Command, config_path: &Path, opts: &Options) -> Result<Outcome> {
    let text = std::fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("in {}", config_path.display()))?;
    if cfg.command != command {
        bail!(
            "config {} is for command `{}`, not `{}`",
            config_path.display(),
            cfg.command.name(),
            command.name()
        );
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let out = match (&opts.output_dir, &cfg.output_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => resolve(base, p),
        (None, None) => bail!("no output directory: set `output_dir` in the config or pass --output-dir"),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    let echo: serde_json::Value = serde_json::from_str(&text)?;
    run_config(&cfg, base, &out, opts.jobs, echo, config_path)
}

fn run_config(
    cfg: &ExperimentConfig,
    base: &Path,
    out: &Path,
    jobs: usize,
    echo: serde_json::Value,
    config_path: &Path,
) -> Result<Outcome> {
    let started = Instant::now();
    let data = load_data(&cfg.dataset, base)?;
    let mut runs = Vec::new();
    let mut reports = Vec::new();

    match cfg.command {
        Command::Diagnose => {
            let section = cfg.diagnose.as_ref().expect("checked by check_sections");
            reports.push(diagnose(&resolve(base, &section.checkpoint), &data, out)?);
        }
        Command::Flow | Command::Train | Command::Sweep => {
            let network = cfg.network.as_ref().expect("checked by check_sections");
            let dim = data.train.dim().ok_or_else(|| anyhow!("training set is empty"))?;
            let widths = network.widths(dim);
            let specs = match cfg.command {
                Command::Flow => vec![RunSpec::Flow(cfg.flow.clone().expect("checked"))],
                Command::Train => vec![RunSpec::Train(cfg.train.clone().expect("checked"))],
                _ => expand_grid(cfg),
            };
            let outputs: Vec<Result<RunOutput>> = if jobs > 1 && specs.len() > 1 {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
                pool.install(|| {
                    specs
                        .par_iter()
                        .map(|s| run_one(s, &widths, &data, &cfg.dataset, out))
                        .collect()
                })
            } else {
                specs
                    .iter()
                    .map(|s| run_one(s, &widths, &data, &cfg.dataset, out))
                    .collect()
            };
            let mut summaries = Vec::new();
            for o in outputs {
                let o = o?;
                summaries.extend(o.summary);
                runs.push(o.entry);
            }
            if cfg.command == Command::Sweep {
                let tol = cfg.sweep.as_ref().map_or(1e-6, |s| s.interp_tolerance);
                let report: SweepReport = sweep_compare(&summaries, tol);
                let path = out.join("sweep_report.json");
                write_json(&path, &report)?;
                reports.push(file_name(&path));
            }
        }
    }

    let manifest = Manifest {
        tool: "sqlossflow",
        version: env!("CARGO_PKG_VERSION"),
        core_version: sqlossflow_core::VERSION,
        command: cfg.command.name(),
        config_path: config_path.display().to_string(),
        config: echo,
        jobs: jobs.max(1),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        runs,
        reports,
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let failed: Vec<&RunEntry> = manifest.runs.iter().filter(|r| r.status != "ok").collect();
    if !failed.is_empty() {
        let first = failed[0].error.as_deref().unwrap_or("unknown error");
        bail!(
            "{} of {} runs failed (first: {}: {first}); see {}",
            failed.len(),
            manifest.runs.len(),
            failed[0].run_id,
            out.join("manifest.json").display()
        );
    }
    Ok(Outcome {
        output_dir: out.to_path_buf(),
        manifest,
    })
}
