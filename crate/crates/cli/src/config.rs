//! The experiment config file: one strict JSON document per invocation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sqlossflow_core::flow::{FlowConfig, Integrator};
use sqlossflow_core::{Normalize, SyntheticSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Flow,
    Train,
    Diagnose,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Flow => "flow",
            Command::Train => "train",
            Command::Diagnose => "diagnose",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvFiles),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvFiles {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
}

/// Hidden widths; the input width comes from the data and the output width is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
}

impl NetworkSpec {
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(input_dim);
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// Flow integration settings plus the initial point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub lambda: f64,
    pub dt: f64,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    pub t_max: f64,
    #[serde(default = "default_tol_equilibrium")]
    pub tol_equilibrium: f64,
    #[serde(default = "default_tol_interpolation")]
    pub tol_interpolation: f64,
    #[serde(default = "default_trace_stride")]
    pub trace_stride: usize,
    /// `ρ(0)`.
    pub rho0: f64,
    /// Seed for the random initial directions `V_k(0)`.
    pub seed: u64,
    /// Flip the sign of `V_L(0)` when needed so that `Σ y_n f_n(0) ≥ 0`.
    #[serde(default = "default_true")]
    pub average_separable: bool,
}

fn default_integrator() -> Integrator {
    FlowConfig::default().integrator
}
fn default_tol_equilibrium() -> f64 {
    FlowConfig::default().tol_equilibrium
}
fn default_tol_interpolation() -> f64 {
    FlowConfig::default().tol_interpolation
}
fn default_trace_stride() -> usize {
    FlowConfig::default().trace_stride
}
fn default_true() -> bool {
    true
}

impl FlowSection {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            lambda: self.lambda,
            dt: self.dt,
            integrator: self.integrator,
            t_max: self.t_max,
            tol_equilibrium: self.tol_equilibrium,
            tol_interpolation: self.tol_interpolation,
            trace_stride: self.trace_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    pub checkpoint: PathBuf,
}

/// Grid axes. Every listed axis replaces the corresponding value of the base
/// `flow` or `train` section; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_frobenius: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<Vec<Normalize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<u64>>,
    /// Runs whose final `max_n |ρ f_n − y_n|` is below this count as
    /// near-interpolating in the sweep report.
    #[serde(default = "default_interp_tolerance")]
    pub interp_tolerance: f64,
}

fn default_interp_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub dataset: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnose: Option<DiagnoseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).context("invalid config")?;
        cfg.check_sections()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Each command takes exactly the sections it uses.
    pub fn check_sections(&self) -> Result<()> {
        let present = [
            ("network", self.network.is_some()),
            ("flow", self.flow.is_some()),
            ("train", self.train.is_some()),
            ("sweep", self.sweep.is_some()),
            ("diagnose", self.diagnose.is_some()),
        ];
        let allowed: &[&str] = match self.command {
            Command::Flow => &["network", "flow"],
            Command::Train => &["network", "train"],
            Command::Diagnose => &["diagnose"],
            Command::Sweep => &["network", "flow", "train", "sweep"],
        };
        let required: &[&str] = match self.command {
            Command::Flow => &["network", "flow"],
            Command::Train => &["network", "train"],
            Command::Diagnose => &["diagnose"],
            Command::Sweep => &["network", "sweep"],
        };
        let cmd = self.command.name();
        for (name, there) in present {
            if there && !allowed.contains(&name) {
                bail!("section `{name}` is not used by command `{cmd}`; remove it");
            }
        }
        for name in required {
            if !present.iter().any(|(n, there)| n == name && *there) {
                bail!("command `{cmd}` needs a `{name}` section");
            }
        }
        if self.command == Command::Sweep {
            match (&self.flow, &self.train) {
                (Some(_), Some(_)) => bail!("a sweep takes either a `flow` or a `train` base section, not both"),
                (None, None) => bail!("a sweep needs a `flow` or a `train` base section"),
                _ => {}
            }
            let sweep = self.sweep.as_ref().expect("checked above");
            let flow_base = self.flow.is_some();
            let misplaced: &[(&str, bool)] = if flow_base {
                &[
                    ("weight_decay", sweep.weight_decay.is_some()),
                    ("init_frobenius", sweep.init_frobenius.is_some()),
                    ("normalize", sweep.normalize.is_some()),
                ]
            } else {
                &[("lambda", sweep.lambda.is_some()), ("rho0", sweep.rho0.is_some())]
            };
            let base = if flow_base { "flow" } else { "train" };
            for (axis, there) in misplaced {
                if *there {
                    bail!("sweep axis `{axis}` does not apply to a `{base}` base section");
                }
            }
            for (axis, len) in sweep.axis_lengths() {
                if len == 0 {
                    bail!("sweep axis `{axis}` is empty");
                }
            }
        }
        Ok(())
    }
}

impl SweepSection {
    fn axis_lengths(&self) -> Vec<(&'static str, usize)> {
        let mut out = Vec::new();
        let mut push = |name, len: Option<usize>| {
            if let Some(l) = len {
                out.push((name, l));
            }
        };
        push("lambda", self.lambda.as_ref().map(Vec::len));
        push("rho0", self.rho0.as_ref().map(Vec::len));
        push("weight_decay", self.weight_decay.as_ref().map(Vec::len));
        push("init_frobenius", self.init_frobenius.as_ref().map(Vec::len));
        push("normalize", self.normalize.as_ref().map(Vec::len));
        push("seed", self.seed.as_ref().map(Vec::len));
        out
    }
}

/// One fully specified run of a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunSpec {
    Flow(FlowSection),
    Train(TrainConfig),
}

/// Expands a sweep into its runs, in row-major order over
/// `lambda | weight_decay`, `rho0 | init_frobenius`, `normalize`, `seed`.
pub fn expand_grid(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    if let Some(base) = &cfg.flow {
        let lambdas = sweep.lambda.unwrap_or_else(|| vec![base.lambda]);
        let rhos = sweep.rho0.unwrap_or_else(|| vec![base.rho0]);
        let seeds = sweep.seed.unwrap_or_else(|| vec![base.seed]);
        let mut runs = Vec::new();
        for &lambda in &lambdas {
            for &rho0 in &rhos {
                for &seed in &seeds {
                    runs.push(RunSpec::Flow(FlowSection {
                        lambda,
                        rho0,
                        seed,
                        ..base.clone()
                    }));
                }
            }
        }
        runs
    } else if let Some(base) = &cfg.train {
        let wds = sweep.weight_decay.unwrap_or_else(|| vec![base.weight_decay]);
        let inits = sweep.init_frobenius.unwrap_or_else(|| vec![base.init_frobenius]);
        let norms = sweep.normalize.unwrap_or_else(|| vec![base.normalize]);
        let seeds = sweep.seed.unwrap_or_else(|| vec![base.seed]);
        let mut runs = Vec::new();
        for &weight_decay in &wds {
            for &init_frobenius in &inits {
                for &normalize in &norms {
                    for &seed in &seeds {
                        runs.push(RunSpec::Train(TrainConfig {
                            weight_decay,
                            init_frobenius,
                            normalize,
                            seed,
                            ..base.clone()
                        }));
                    }
                }
            }
        }
        runs
    } else {
        Vec::new()
    }
}
