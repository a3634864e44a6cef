//! JSON checkpoints: `{mode, rho, layers: [{rows, cols, entries}]}`.
//!
//! Entries are written as decimals with 17 significant digits and parsed with
//! correctly rounded float parsing, so a round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::net::{NetworkParams, NormMode, NormalizedNet};
use crate::numerics::Matrix;

/// What a checkpoint holds: raw weights, or a `(ρ, V)` split.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Params(NetworkParams),
    Normalized(NormalizedNet),
}

impl Checkpoint {
    /// Raw weights, recomposing if needed.
    pub fn to_params(&self) -> NetworkParams {
        match self {
            Checkpoint::Params(p) => p.clone(),
            Checkpoint::Normalized(n) => n.recompose(),
        }
    }
}

impl From<NetworkParams> for Checkpoint {
    fn from(p: NetworkParams) -> Self {
        Checkpoint::Params(p)
    }
}

impl From<NormalizedNet> for Checkpoint {
    fn from(n: NormalizedNet) -> Self {
        Checkpoint::Normalized(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FileMode {
    None,
    Matrix,
    Row,
}

#[derive(Serialize)]
struct LayerOut {
    rows: usize,
    cols: usize,
    entries: Vec<Box<RawValue>>,
}

#[derive(Serialize)]
struct FileOut {
    mode: FileMode,
    rho: Box<RawValue>,
    layers: Vec<LayerOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    row_scales: Option<Vec<Vec<Box<RawValue>>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerIn {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIn {
    mode: FileMode,
    rho: f64,
    layers: Vec<LayerIn>,
    #[serde(default)]
    row_scales: Option<Vec<Vec<f64>>>,
}

fn num(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.16e}")).expect("exponent notation is valid JSON")
}

fn layer_out(m: &Matrix) -> LayerOut {
    LayerOut {
        rows: m.rows(),
        cols: m.cols(),
        entries: m.as_slice().iter().map(|&v| num(v)).collect(),
    }
}

pub fn to_json_string(ckpt: &Checkpoint) -> Result<String> {
    let file = match ckpt {
        Checkpoint::Params(p) => FileOut {
            mode: FileMode::None,
            rho: num(p.rho()),
            layers: p.layers().iter().map(layer_out).collect(),
            row_scales: None,
        },
        Checkpoint::Normalized(n) => FileOut {
            mode: match n.mode() {
                NormMode::Matrix => FileMode::Matrix,
                NormMode::Row => FileMode::Row,
            },
            rho: num(n.rho()),
            layers: n.layers().iter().map(layer_out).collect(),
            row_scales: (n.mode() == NormMode::Row).then(|| {
                n.row_scales()
                    .iter()
                    .map(|s| s.iter().map(|&v| num(v)).collect())
                    .collect()
            }),
        },
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn from_json_str(s: &str) -> Result<Checkpoint> {
    let file: FileIn = serde_json::from_str(s)?;
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(k, l)| {
            if l.entries.len() != l.rows * l.cols {
                return Err(Error::Checkpoint(format!(
                    "layer {}: {} entries for a {}x{} matrix",
                    k + 1,
                    l.entries.len(),
                    l.rows,
                    l.cols
                )));
            }
            Matrix::new(l.rows, l.cols, l.entries)
        })
        .collect::<Result<Vec<_>>>()?;
    let ckpt = match file.mode {
        FileMode::None => Checkpoint::Params(NetworkParams::new(layers)?),
        FileMode::Matrix => Checkpoint::Normalized(NormalizedNet::new(file.rho, layers, NormMode::Matrix)?),
        FileMode::Row => {
            let net = match file.row_scales {
                Some(scales) => NormalizedNet::with_row_scales(file.rho, layers, NormMode::Row, scales)?,
                None => NormalizedNet::new(file.rho, layers, NormMode::Row)?,
            };
            Checkpoint::Normalized(net)
        }
    };
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_json_string(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_json_str(&std::fs::read_to_string(path)?)
}
